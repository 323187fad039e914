//! The four forecasting architectures: context window in, horizon out.

mod dlinear;
mod mlp;
mod nhits;
mod patchtst;

pub use dlinear::dlinear_decompose;
pub use patchtst::patch_context;

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::util::{fnv1a64, stream_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    Mlp,
    DLinear,
    Nhits,
    PatchTst,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Mlp, Arch::DLinear, Arch::Nhits, Arch::PatchTst];

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::DLinear => "dlinear",
            Arch::Nhits => "nhits",
            Arch::PatchTst => "patchtst",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "dlinear" => Ok(Arch::DLinear),
            "nhits" => Ok(Arch::Nhits),
            "patchtst" => Ok(Arch::PatchTst),
            other => Err(Error::invalid(format!("unknown architecture '{other}'"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Architecture configuration. All knobs have experiment defaults; the
/// per-arch fields are ignored by the other architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub input_size: usize,
    pub horizon: usize,
    pub hidden_size: usize,
    pub n_layers: usize,
    pub dropout: f64,
    pub seed: u64,
    /// PatchTST: non-overlapping patch length.
    pub patch_length: usize,
    /// DLinear: odd moving-average kernel.
    pub ma_kernel: usize,
    /// NHITS: per-stack max-pool kernels.
    pub pool_kernels: Vec<usize>,
    /// NHITS: per-stack interpolation factors.
    pub interp_factors: Vec<usize>,
    /// PatchTST: attention heads.
    pub n_heads: usize,
    /// PatchTST: feed-forward width.
    pub ff_dim: usize,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        ModelConfig {
            arch,
            input_size: 200,
            horizon: 200,
            hidden_size: 128,
            n_layers: 3,
            dropout: 0.0,
            seed: 0,
            patch_length: 50,
            ma_kernel: 25,
            pool_kernels: vec![8, 4, 1],
            interp_factors: vec![4, 2, 1],
            n_heads: 4,
            ff_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.horizon == 0 {
            return Err(Error::invalid("input size and horizon must be positive"));
        }
        if self.dropout != 0.0 {
            return Err(Error::invalid("dropout is fixed at 0.0"));
        }
        match self.arch {
            Arch::Mlp => {
                if self.n_layers == 0 {
                    return Err(Error::invalid("mlp needs at least one hidden layer"));
                }
            }
            Arch::DLinear => {
                if self.ma_kernel % 2 == 0 || self.ma_kernel > self.input_size {
                    return Err(Error::invalid(
                        "dlinear moving-average kernel must be odd and <= input size",
                    ));
                }
            }
            Arch::Nhits => {
                if self.pool_kernels.is_empty()
                    || self.pool_kernels.len() != self.interp_factors.len()
                {
                    return Err(Error::invalid(
                        "nhits pool kernels and interpolation factors must be non-empty and equal in length",
                    ));
                }
                if self.pool_kernels.iter().chain(&self.interp_factors).any(|&k| k == 0) {
                    return Err(Error::invalid("nhits kernels/factors must be positive"));
                }
            }
            Arch::PatchTst => {
                if self.patch_length == 0 || self.patch_length > self.input_size {
                    return Err(Error::invalid(
                        "patch length must be in 1..=input_size",
                    ));
                }
                if self.hidden_size % self.n_heads != 0 {
                    return Err(Error::invalid("hidden size must divide evenly into heads"));
                }
            }
        }
        Ok(())
    }
}

/// How a parameter tensor is filled at init time.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    Weight { fan_in: usize },
    Zero,
    One,
}

pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// A configured architecture with its parameter tensors.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub config: ModelConfig,
    pub params: Vec<Param>,
    pub trained: bool,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    match cfg.arch {
        Arch::Mlp => mlp::param_specs(cfg),
        Arch::DLinear => dlinear::param_specs(cfg),
        Arch::Nhits => nhits::param_specs(cfg),
        Arch::PatchTst => patchtst::param_specs(cfg),
    }
}

/// Deterministic initialization: each parameter tensor draws from its own
/// stream seeded by `(config.seed, name)`, so adding or reordering parameters
/// elsewhere never shifts another tensor's values.
pub fn init_params(config: &ModelConfig) -> Result<ModelInstance> {
    config.validate()?;
    let params = param_specs(config)
        .into_iter()
        .map(|spec| {
            let n: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
                Init::Weight { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(stream_seed(config.seed, &spec.name));
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            Param {
                name: spec.name,
                shape: spec.shape,
                values,
            }
        })
        .collect();
    Ok(ModelInstance {
        config: config.clone(),
        params,
        trained: false,
    })
}

impl ModelInstance {
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    /// Stable hash of (config, parameter values).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = serde_json::to_vec(&self.config).unwrap_or_default();
        for p in &self.params {
            bytes.extend_from_slice(p.name.as_bytes());
            for v in &p.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fnv1a64(&bytes)
    }
}

/// Parameters bound onto a graph for one forward/backward pass.
pub struct BoundParams {
    entries: Vec<(String, Tensor)>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Tensor {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| *t)
            .unwrap_or_else(|| panic!("unbound parameter '{name}'"))
    }

    pub fn tensors(&self) -> impl Iterator<Item = Tensor> + '_ {
        self.entries.iter().map(|(_, t)| *t)
    }
}

/// Insert every parameter of `inst` into `g`, as gradient leaves when
/// `requires_grad`, otherwise as constants (frozen evaluation).
pub fn bind_params(inst: &ModelInstance, g: &Graph, requires_grad: bool) -> Result<BoundParams> {
    let mut entries = Vec::with_capacity(inst.params.len());
    for p in &inst.params {
        let t = if requires_grad {
            g.parameter(p.values.clone(), &p.shape)?
        } else {
            g.constant(p.values.clone(), &p.shape)?
        };
        entries.push((p.name.clone(), t));
    }
    Ok(BoundParams { entries })
}

/// Run the architecture's forward pass: `contexts` is `[batch, input_size]`,
/// the result is `[batch, horizon]`.
pub fn forward(
    cfg: &ModelConfig,
    bound: &BoundParams,
    g: &Graph,
    contexts: Tensor,
) -> Result<Tensor> {
    let shape = g.shape(contexts);
    if shape.len() != 2 || shape[1] != cfg.input_size {
        return Err(Error::invalid(format!(
            "forward: expected [batch, {}] contexts, got {:?}",
            cfg.input_size, shape
        )));
    }
    match cfg.arch {
        Arch::Mlp => mlp::forward(cfg, bound, g, contexts),
        Arch::DLinear => dlinear::forward(cfg, bound, g, contexts),
        Arch::Nhits => nhits::forward(cfg, bound, g, contexts),
        Arch::PatchTst => patchtst::forward(cfg, bound, g, contexts),
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    trained: bool,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the binary section.
    offset: usize,
}

/// Checkpoint layout: one JSON header line, then the concatenated parameter
/// buffers as little-endian f64.
pub fn save_checkpoint(inst: &ModelInstance, path: &Path) -> Result<()> {
    let mut offset = 0;
    let header = CheckpointHeader {
        config: inst.config.clone(),
        trained: inst.trained,
        params: inst
            .params
            .iter()
            .map(|p| {
                let cp = CheckpointParam {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                };
                offset += p.values.len() * 8;
                cp
            })
            .collect(),
    };
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut head = serde_json::to_vec(&header)?;
    head.push(b'\n');
    file.write_all(&head).map_err(|e| Error::io(path, e))?;
    for p in &inst.params {
        let mut buf = Vec::with_capacity(p.values.len() * 8);
        for v in &p.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelInstance> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("checkpoint missing header delimiter"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    let body = &bytes[split + 1..];
    let params = header
        .params
        .iter()
        .map(|cp| {
            let n: usize = cp.shape.iter().product();
            let end = cp.offset + n * 8;
            if end > body.len() {
                return Err(Error::invalid("checkpoint body truncated"));
            }
            let values = body[cp.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Param {
                name: cp.name.clone(),
                shape: cp.shape.clone(),
                values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelInstance {
        config: header.config,
        params,
        trained: header.trained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(arch: Arch) -> ModelConfig {
        let mut cfg = ModelConfig::new(arch);
        cfg.input_size = 16;
        cfg.horizon = 16;
        cfg.hidden_size = 8;
        cfg.patch_length = 4;
        cfg.ma_kernel = 5;
        cfg
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        for arch in Arch::ALL {
            let cfg = small_config(arch);
            let a = init_params(&cfg).unwrap();
            let b = init_params(&cfg).unwrap();
            assert_eq!(a.fingerprint(), b.fingerprint(), "{arch}");

            let mut other = cfg.clone();
            other.seed = 1;
            let c = init_params(&other).unwrap();
            assert_ne!(a.fingerprint(), c.fingerprint(), "{arch}");
        }
    }

    #[test]
    fn mlp_parameter_count() {
        let inst = init_params(&ModelConfig::new(Arch::Mlp)).unwrap();
        // 200*128+128 hidden-in, two 128*128+128 hidden, 128*200+200 head
        let expected = 200 * 128 + 128 + 2 * (128 * 128 + 128) + 128 * 200 + 200;
        assert_eq!(inst.param_count(), expected);
        assert_eq!(expected, 84_552);
    }

    #[test]
    fn dlinear_parameter_count() {
        let inst = init_params(&ModelConfig::new(Arch::DLinear)).unwrap();
        assert_eq!(inst.param_count(), 2 * (200 * 200 + 200));
    }

    #[test]
    fn forward_shape_law() {
        let g = Graph::new();
        for arch in Arch::ALL {
            let cfg = small_config(arch);
            let inst = init_params(&cfg).unwrap();
            let bound = bind_params(&inst, &g, false).unwrap();
            let ctx = g
                .constant((0..3 * 16).map(|i| (i as f64 * 0.37).sin()).collect(), &[3, 16])
                .unwrap();
            let out = forward(&cfg, &bound, &g, ctx).unwrap();
            assert_eq!(g.shape(out), vec![3, 16], "{arch}");
            assert!(g.values(out).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn patchtst_all_patch_lengths_produce_horizon() {
        for p in [1usize, 50, 100, 150, 200] {
            let mut cfg = ModelConfig::new(Arch::PatchTst);
            cfg.hidden_size = 16;
            cfg.ff_dim = 32;
            cfg.patch_length = p;
            let inst = init_params(&cfg).unwrap();
            let g = Graph::new();
            let bound = bind_params(&inst, &g, false).unwrap();
            let ctx = g
                .constant((0..200).map(|i| (i as f64 * 0.05).sin()).collect(), &[1, 200])
                .unwrap();
            let out = forward(&cfg, &bound, &g, ctx).unwrap();
            assert_eq!(g.shape(out), vec![1, 200], "patch {p}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut inst = init_params(&small_config(Arch::Nhits)).unwrap();
        inst.trained = true;
        save_checkpoint(&inst, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, inst.config);
        assert!(loaded.trained);
        assert_eq!(loaded.fingerprint(), inst.fingerprint());
    }
}
