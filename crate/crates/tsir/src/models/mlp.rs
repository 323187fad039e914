//! Stacked fully connected forecaster: relu hidden layers, linear head.

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;

use super::{BoundParams, Init, ModelConfig, ParamSpec};

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut fan_in = cfg.input_size;
    for i in 0..cfg.n_layers {
        specs.push(ParamSpec::new(
            format!("mlp.w{i}"),
            &[fan_in, cfg.hidden_size],
            Init::Weight { fan_in },
        ));
        specs.push(ParamSpec::new(
            format!("mlp.b{i}"),
            &[cfg.hidden_size],
            Init::Zero,
        ));
        fan_in = cfg.hidden_size;
    }
    specs.push(ParamSpec::new(
        "mlp.head.w",
        &[cfg.hidden_size, cfg.horizon],
        Init::Weight {
            fan_in: cfg.hidden_size,
        },
    ));
    specs.push(ParamSpec::new("mlp.head.b", &[cfg.horizon], Init::Zero));
    specs
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    p: &BoundParams,
    g: &Graph,
    contexts: Tensor,
) -> Result<Tensor> {
    let mut h = contexts;
    for i in 0..cfg.n_layers {
        let lin = g.add_broadcast(
            g.matmul(h, p.get(&format!("mlp.w{i}")))?,
            p.get(&format!("mlp.b{i}")),
        )?;
        h = g.relu(lin)?;
    }
    g.add_broadcast(g.matmul(h, p.get("mlp.head.w"))?, p.get("mlp.head.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{bind_params, Arch, ModelInstance};

    fn zeroed(cfg: &ModelConfig) -> ModelInstance {
        let mut inst = crate::models::init_params(cfg).unwrap();
        for p in &mut inst.params {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        inst
    }

    #[test]
    fn zero_weights_zero_forecast() {
        let mut cfg = ModelConfig::new(Arch::Mlp);
        cfg.input_size = 8;
        cfg.horizon = 6;
        cfg.hidden_size = 4;
        let inst = zeroed(&cfg);
        let g = Graph::new();
        let bound = bind_params(&inst, &g, false).unwrap();
        let ctx = g.constant(vec![1.0; 16], &[2, 8]).unwrap();
        let out = forward(&cfg, &bound, &g, ctx).unwrap();
        assert_eq!(g.shape(out), vec![2, 6]);
        assert!(g.values(out).iter().all(|&v| v == 0.0));
    }
}
