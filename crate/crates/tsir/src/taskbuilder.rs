//! Assembly of the six reasoning-task datasets.
//!
//! Each builder produces an in-distribution training set and an
//! out-of-distribution evaluation set of [`Series`]. Training always reads
//! the first 1000 samples of its source series; evaluation always scores the
//! last 200 samples of the OOD series. Baseline mode retargets training at
//! the OOD series' own history while leaving evaluation untouched.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seriesgen::{
    export_series, generate_series, linspace_params, FunctionFamily, Series, SeriesSpec,
};

/// Default number of evenly spaced values per parameter grid.
pub const DEFAULT_GRID_N: usize = 30;

/// Inclusive parameter ranges: amplitude, frequency, baseline, and the two
/// slope variants (composition-style tasks vs. function/comparison tasks).
pub const AMPLITUDE_RANGE: (f64, f64) = (1.0, 32.0);
pub const FREQUENCY_RANGE: (f64, f64) = (3.0, 32.0);
pub const BASELINE_RANGE: (f64, f64) = (-32.0, 32.0);
pub const SLOPE_RANGE_COMPOSITION: (f64, f64) = (1.0, 32.0);
pub const SLOPE_RANGE_FULL: (f64, f64) = (-32.0, 32.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    CompAdd,
    CompSub,
    CompMult,
    CompFunction,
    Comparison,
    InverseSearch,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::CompAdd,
        TaskId::CompSub,
        TaskId::CompMult,
        TaskId::CompFunction,
        TaskId::Comparison,
        TaskId::InverseSearch,
    ];

    /// Stable identifier used in directory layouts and CLI flags.
    pub fn name(&self) -> &'static str {
        match self {
            TaskId::CompAdd => "comp-add",
            TaskId::CompSub => "comp-sub",
            TaskId::CompMult => "comp-mult",
            TaskId::CompFunction => "comp-function",
            TaskId::Comparison => "comparison",
            TaskId::InverseSearch => "inverse",
        }
    }

    pub fn parse(s: &str) -> Result<TaskId> {
        match s {
            "comp-add" => Ok(TaskId::CompAdd),
            "comp-sub" => Ok(TaskId::CompSub),
            "comp-mult" => Ok(TaskId::CompMult),
            "comp-function" | "comp-func" => Ok(TaskId::CompFunction),
            "comparison" => Ok(TaskId::Comparison),
            "inverse" | "inverse-search" => Ok(TaskId::InverseSearch),
            other => Err(Error::invalid(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Task,
    Baseline,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Task => "task",
            Mode::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "task" => Ok(Mode::Task),
            "baseline" => Ok(Mode::Baseline),
            other => Err(Error::invalid(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One reasoning task: ID training series, OOD evaluation series, and the
/// index geometry shared by every task.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task: TaskId,
    pub id_series: Vec<Series>,
    pub ood_series: Vec<Series>,
    pub train_region: Range<usize>,
    pub eval_region: Range<usize>,
    pub mode: Mode,
}

impl TaskDataset {
    fn new(task: TaskId, id_series: Vec<Series>, ood_series: Vec<Series>) -> Self {
        TaskDataset {
            task,
            id_series,
            ood_series,
            train_region: 0..1000,
            eval_region: 1000..1200,
            mode: Mode::Task,
        }
    }

    /// Series the trainer draws windows from, per the current mode.
    pub fn training_series(&self) -> &[Series] {
        match self.mode {
            Mode::Task => &self.id_series,
            Mode::Baseline => &self.ood_series,
        }
    }
}

fn gen_all(specs: impl IntoIterator<Item = SeriesSpec>) -> Result<Vec<Series>> {
    specs.into_iter().map(|s| generate_series(&s)).collect()
}

fn component_specs(grid_n: usize) -> Result<(Vec<f64>, Vec<f64>, Vec<SeriesSpec>)> {
    let slopes = linspace_params(SLOPE_RANGE_COMPOSITION.0, SLOPE_RANGE_COMPOSITION.1, grid_n)?;
    let freqs = linspace_params(FREQUENCY_RANGE.0, FREQUENCY_RANGE.1, grid_n)?;
    let mut specs: Vec<SeriesSpec> = slopes.iter().map(|&m| SeriesSpec::trend(m)).collect();
    specs.extend(freqs.iter().map(|&b| SeriesSpec::seasonality(b)));
    Ok((freqs, slopes, specs))
}

fn build_composition(task: TaskId, family: FunctionFamily, grid_n: usize) -> Result<TaskDataset> {
    if grid_n < 1 {
        return Err(Error::invalid("grid_n must be >= 1"));
    }
    let (freqs, slopes, id_specs) = component_specs(grid_n)?;
    let mut ood_specs = Vec::with_capacity(grid_n * grid_n);
    for &b in &freqs {
        for &m in &slopes {
            ood_specs.push(SeriesSpec::composite(family, b, m));
        }
    }
    Ok(TaskDataset::new(
        task,
        gen_all(id_specs)?,
        gen_all(ood_specs)?,
    ))
}

/// Composition/addition: train on components, evaluate on all pairwise sums.
pub fn build_comp_add(grid_n: usize) -> Result<TaskDataset> {
    build_composition(TaskId::CompAdd, FunctionFamily::CompositeAdd, grid_n)
}

pub fn build_comp_sub(grid_n: usize) -> Result<TaskDataset> {
    build_composition(TaskId::CompSub, FunctionFamily::CompositeSub, grid_n)
}

pub fn build_comp_mult(grid_n: usize) -> Result<TaskDataset> {
    build_composition(TaskId::CompMult, FunctionFamily::CompositeMult, grid_n)
}

use crate::util::splitmix64;

/// First `k` entries of a seeded Fisher-Yates shuffle of `0..n`.
fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

struct FullSineGrids {
    amplitudes: Vec<f64>,
    frequencies: Vec<f64>,
    baselines: Vec<f64>,
    slopes: Vec<f64>,
}

impl FullSineGrids {
    fn new(grid_n: usize) -> Result<Self> {
        Ok(FullSineGrids {
            amplitudes: linspace_params(AMPLITUDE_RANGE.0, AMPLITUDE_RANGE.1, grid_n)?,
            frequencies: linspace_params(FREQUENCY_RANGE.0, FREQUENCY_RANGE.1, grid_n)?,
            baselines: linspace_params(BASELINE_RANGE.0, BASELINE_RANGE.1, grid_n)?,
            slopes: linspace_params(SLOPE_RANGE_FULL.0, SLOPE_RANGE_FULL.1, grid_n)?,
        })
    }

    fn len(&self) -> usize {
        self.amplitudes.len()
    }

    /// Decode a flat index over the 4-way Cartesian product.
    fn decode(&self, flat: usize) -> SeriesSpec {
        let g = self.len();
        let im = flat % g;
        let ic = (flat / g) % g;
        let ib = (flat / (g * g)) % g;
        let ia = flat / (g * g * g);
        SeriesSpec::full_sine(
            self.amplitudes[ia],
            self.frequencies[ib],
            self.baselines[ic],
            self.slopes[im],
        )
    }
}

/// Function composition: train on the four single-parameter sine families,
/// evaluate on full sinusoids whose parameter 4-tuples are a seeded
/// without-replacement draw from the product of the ID grids.
pub fn build_comp_function(grid_n: usize, n_ood: usize, pairing_seed: u64) -> Result<TaskDataset> {
    let grids = FullSineGrids::new(grid_n)?;
    let product = grid_n * grid_n * grid_n * grid_n;
    if n_ood > product {
        return Err(Error::invalid(format!(
            "n_ood={n_ood} exceeds the {product}-tuple parameter product"
        )));
    }

    let mut id_specs = Vec::with_capacity(4 * grid_n);
    id_specs.extend(grids.amplitudes.iter().map(|&a| SeriesSpec::amplitude_sine(a)));
    id_specs.extend(grids.frequencies.iter().map(|&b| SeriesSpec::seasonality(b)));
    id_specs.extend(grids.baselines.iter().map(|&c| SeriesSpec::baseline_sine(c)));
    id_specs.extend(grids.slopes.iter().map(|&m| SeriesSpec::trend_sine(m)));

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(pairing_seed));
    let ood_specs: Vec<SeriesSpec> = sample_without_replacement(product, n_ood, &mut rng)
        .into_iter()
        .map(|flat| grids.decode(flat))
        .collect();

    Ok(TaskDataset::new(
        TaskId::CompFunction,
        gen_all(id_specs)?,
        gen_all(ood_specs)?,
    ))
}

/// The eight extrapolation cases cycled through by the comparison OOD set.
fn extrapolated_spec(
    grids: &FullSineGrids,
    case: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> SeriesSpec {
    let g = grids.len();
    let mut ia = rng.gen_range(0..g);
    let mut ib = rng.gen_range(0..g);
    let mut ic = rng.gen_range(0..g);
    let mut im = rng.gen_range(0..g);

    let ranges = [
        AMPLITUDE_RANGE,
        FREQUENCY_RANGE,
        BASELINE_RANGE,
        SLOPE_RANGE_FULL,
    ];
    let param = case / 2;
    let below = case % 2 == 0;
    let (lo, hi) = ranges[param];
    let outside = if below {
        lo - margin * (hi - lo)
    } else {
        hi + margin * (hi - lo)
    };

    // Mark the extrapolated coordinate so the grid lookup below skips it.
    match param {
        0 => ia = usize::MAX,
        1 => ib = usize::MAX,
        2 => ic = usize::MAX,
        _ => im = usize::MAX,
    }
    let pick = |idx: usize, grid: &[f64]| if idx == usize::MAX { outside } else { grid[idx] };
    SeriesSpec::full_sine(
        pick(ia, &grids.amplitudes),
        pick(ib, &grids.frequencies),
        pick(ic, &grids.baselines),
        pick(im, &grids.slopes),
    )
}

/// Comparison: ID sinusoids on interior grids, OOD sinusoids with at least
/// one parameter pushed `margin`-fraction outside its ID range. The
/// extrapolated coordinate cycles deterministically through below/above for
/// each of the four parameters, balancing the two directions.
pub fn build_comparison(
    n_id: usize,
    n_ood: usize,
    margin: f64,
    grid_n: usize,
    seed: u64,
) -> Result<TaskDataset> {
    if margin <= 0.0 {
        return Err(Error::invalid("comparison margin must be positive"));
    }
    let grids = FullSineGrids::new(grid_n)?;
    let product = grid_n * grid_n * grid_n * grid_n;
    if n_id > product {
        return Err(Error::invalid(format!(
            "n_id={n_id} exceeds the {product}-tuple parameter product"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed));
    let id_specs: Vec<SeriesSpec> = sample_without_replacement(product, n_id, &mut rng)
        .into_iter()
        .map(|flat| grids.decode(flat))
        .collect();

    let mut ood_rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x636f6d70_61726973));
    let ood_specs: Vec<SeriesSpec> = (0..n_ood)
        .map(|i| extrapolated_spec(&grids, i % 8, margin, &mut ood_rng))
        .collect();

    Ok(TaskDataset::new(
        TaskId::Comparison,
        gen_all(id_specs)?,
        gen_all(ood_specs)?,
    ))
}

/// Inverse search: the mirror image of composition/addition — train on the
/// composites, evaluate on the components.
pub fn build_inverse_search(grid_n: usize) -> Result<TaskDataset> {
    let add = build_comp_add(grid_n)?;
    Ok(TaskDataset {
        task: TaskId::InverseSearch,
        id_series: add.ood_series,
        ood_series: add.id_series,
        train_region: add.train_region,
        eval_region: add.eval_region,
        mode: Mode::Task,
    })
}

/// Switch a Task-mode dataset to the baseline control: training draws from
/// the OOD series' first 1000 samples, evaluation is unchanged.
pub fn as_baseline(ds: TaskDataset) -> Result<TaskDataset> {
    if ds.mode == Mode::Baseline {
        return Err(Error::invalid("dataset is already in baseline mode"));
    }
    Ok(TaskDataset {
        mode: Mode::Baseline,
        ..ds
    })
}

#[derive(Serialize)]
struct ManifestSpec {
    family: String,
    #[serde(rename = "A")]
    amplitude: f64,
    #[serde(rename = "B")]
    frequency: f64,
    #[serde(rename = "C")]
    baseline: f64,
    #[serde(rename = "M")]
    slope: f64,
    n_samples: usize,
}

impl From<&SeriesSpec> for ManifestSpec {
    fn from(s: &SeriesSpec) -> Self {
        ManifestSpec {
            family: s.family.to_string(),
            amplitude: s.amplitude,
            frequency: s.frequency,
            baseline: s.baseline,
            slope: s.slope,
            n_samples: s.n_samples,
        }
    }
}

#[derive(Serialize)]
struct Manifest {
    task: String,
    mode: String,
    id_specs: Vec<ManifestSpec>,
    ood_specs: Vec<ManifestSpec>,
}

/// Write `manifest.json` plus `id/<index>.csv` and `ood/<index>.csv` payloads
/// under `dir`. Re-running produces byte-identical files.
pub fn export_dataset(ds: &TaskDataset, dir: &Path) -> Result<()> {
    let manifest = Manifest {
        task: ds.task.name().to_string(),
        mode: ds.mode.name().to_string(),
        id_specs: ds.id_series.iter().map(|s| (&s.spec).into()).collect(),
        ood_specs: ds.ood_series.iter().map(|s| (&s.spec).into()).collect(),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(manifest_path, e))?;

    for (sub, series) in [("id", &ds.id_series), ("ood", &ds.ood_series)] {
        let subdir = dir.join(sub);
        std::fs::create_dir_all(&subdir).map_err(|e| Error::io(subdir.clone(), e))?;
        for (i, s) in series.iter().enumerate() {
            export_series(s, &subdir.join(format!("{i}")))?;
        }
    }
    Ok(())
}
