//! Closed-form generation of the synthetic series families.
//!
//! Every series is a deterministic function of its [`SeriesSpec`]; there is
//! no noise and no randomness anywhere in this module. Sampling happens on an
//! evenly spaced grid over the spec's domain, endpoints included.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of samples per series in the headline experiments.
pub const DEFAULT_N_SAMPLES: usize = 1200;

/// One basis- or composite-function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FunctionFamily {
    /// `M·x`
    Trend,
    /// `sin(B·2π·x)`
    Seasonality,
    /// `A·sin(2π·x)`
    AmplitudeSine,
    /// `sin(2π·x) + C`
    BaselineSine,
    /// `sin(2π·x) + M·x`
    TrendSine,
    /// `A·sin(B·2π·x) + C + M·x`
    FullSine,
    /// `sin(B·2π·x) + M·x`
    CompositeAdd,
    /// `sin(B·2π·x) − M·x`
    CompositeSub,
    /// `sin(B·2π·x) · (M·x)`
    CompositeMult,
}

impl fmt::Display for FunctionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FunctionFamily::Trend => "trend",
            FunctionFamily::Seasonality => "seasonality",
            FunctionFamily::AmplitudeSine => "amplitude_sine",
            FunctionFamily::BaselineSine => "baseline_sine",
            FunctionFamily::TrendSine => "trend_sine",
            FunctionFamily::FullSine => "full_sine",
            FunctionFamily::CompositeAdd => "composite_add",
            FunctionFamily::CompositeSub => "composite_sub",
            FunctionFamily::CompositeMult => "composite_mult",
        };
        f.write_str(s)
    }
}

/// Closed-form description of one synthetic series.
///
/// Parameters unused by a family stay at their identity values
/// (`A=1`, `B=1`, `C=0`, `M=0`) so full spec records compare cleanly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpec {
    pub family: FunctionFamily,
    pub amplitude: f64,
    pub frequency: f64,
    pub baseline: f64,
    pub slope: f64,
    pub n_samples: usize,
    pub domain: (f64, f64),
}

impl SeriesSpec {
    pub fn new(family: FunctionFamily) -> Self {
        SeriesSpec {
            family,
            amplitude: 1.0,
            frequency: 1.0,
            baseline: 0.0,
            slope: 0.0,
            n_samples: DEFAULT_N_SAMPLES,
            domain: (0.0, 1.0),
        }
    }

    pub fn trend(slope: f64) -> Self {
        SeriesSpec {
            slope,
            ..Self::new(FunctionFamily::Trend)
        }
    }

    pub fn seasonality(frequency: f64) -> Self {
        SeriesSpec {
            frequency,
            ..Self::new(FunctionFamily::Seasonality)
        }
    }

    pub fn amplitude_sine(amplitude: f64) -> Self {
        SeriesSpec {
            amplitude,
            ..Self::new(FunctionFamily::AmplitudeSine)
        }
    }

    pub fn baseline_sine(baseline: f64) -> Self {
        SeriesSpec {
            baseline,
            ..Self::new(FunctionFamily::BaselineSine)
        }
    }

    pub fn trend_sine(slope: f64) -> Self {
        SeriesSpec {
            slope,
            ..Self::new(FunctionFamily::TrendSine)
        }
    }

    pub fn full_sine(amplitude: f64, frequency: f64, baseline: f64, slope: f64) -> Self {
        SeriesSpec {
            amplitude,
            frequency,
            baseline,
            slope,
            ..Self::new(FunctionFamily::FullSine)
        }
    }

    pub fn composite(family: FunctionFamily, frequency: f64, slope: f64) -> Self {
        SeriesSpec {
            frequency,
            slope,
            ..Self::new(family)
        }
    }
}

/// A sampled series together with the spec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub spec: SeriesSpec,
    pub values: Vec<f64>,
}

/// Evenly spaced grid over `domain`, both endpoints included.
///
/// `x_i = lo + i·(hi−lo)/(n−1)`, computed so that the final point lands on
/// `hi` exactly.
pub fn sample_grid(n_samples: usize, domain: (f64, f64)) -> Result<Vec<f64>> {
    if n_samples < 2 {
        return Err(Error::invalid(format!(
            "sample_grid requires n_samples >= 2, got {n_samples}"
        )));
    }
    let (lo, hi) = domain;
    let span = hi - lo;
    let denom = (n_samples - 1) as f64;
    Ok((0..n_samples)
        .map(|i| lo + (i as f64 * span) / denom)
        .collect())
}

/// Evaluate the closed-form function of `spec` at a single point `x`.
pub fn eval_function(spec: &SeriesSpec, x: f64) -> f64 {
    let a = spec.amplitude;
    let b = spec.frequency;
    let c = spec.baseline;
    let m = spec.slope;
    match spec.family {
        FunctionFamily::Trend => m * x,
        FunctionFamily::Seasonality => (b * 2.0 * PI * x).sin(),
        FunctionFamily::AmplitudeSine => a * (2.0 * PI * x).sin(),
        FunctionFamily::BaselineSine => (2.0 * PI * x).sin() + c,
        FunctionFamily::TrendSine => (2.0 * PI * x).sin() + m * x,
        FunctionFamily::FullSine => a * (b * 2.0 * PI * x).sin() + c + m * x,
        FunctionFamily::CompositeAdd => (b * 2.0 * PI * x).sin() + m * x,
        FunctionFamily::CompositeSub => (b * 2.0 * PI * x).sin() - m * x,
        FunctionFamily::CompositeMult => (b * 2.0 * PI * x).sin() * (m * x),
    }
}

/// Sample `spec` on its grid.
pub fn generate_series(spec: &SeriesSpec) -> Result<Series> {
    let grid = sample_grid(spec.n_samples, spec.domain)?;
    let values = grid.iter().map(|&x| eval_function(spec, x)).collect();
    Ok(Series {
        spec: spec.clone(),
        values,
    })
}

/// `n` evenly spaced parameter values over `[lo, hi]`, endpoints included.
/// `n == 1` returns `[lo]`.
pub fn linspace_params(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::invalid("linspace_params requires n >= 1"));
    }
    if lo > hi {
        return Err(Error::invalid(format!(
            "linspace_params requires lo <= hi, got [{lo}, {hi}]"
        )));
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    let span = hi - lo;
    let denom = (n - 1) as f64;
    Ok((0..n).map(|i| lo + (i as f64 * span) / denom).collect())
}

/// JSON sidecar record written next to each exported series CSV.
#[derive(Serialize)]
struct SpecRecord {
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

/// Write `series` as `<stem>.csv` (header `index,x,value`) plus a
/// `<stem>.json` spec sidecar. Field order and float formatting are fixed so
/// repeated exports are byte-identical.
pub fn export_series(series: &Series, stem: &Path) -> Result<()> {
    let csv_path = stem.with_extension("csv");
    let grid = sample_grid(series.spec.n_samples, series.spec.domain)?;
    let mut buf = String::with_capacity(series.values.len() * 32);
    buf.push_str("index,x,value\n");
    for (i, (x, v)) in grid.iter().zip(&series.values).enumerate() {
        buf.push_str(&format!("{i},{x:.12},{v:.12}\n"));
    }
    let mut f =
        std::fs::File::create(&csv_path).map_err(|e| Error::io(csv_path.clone(), e))?;
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(csv_path.clone(), e))?;

    let json_path = stem.with_extension("json");
    let record = SpecRecord {
        family: series.spec.family.to_string(),
        amplitude: series.spec.amplitude,
        frequency: series.spec.frequency,
        baseline: series.spec.baseline,
        slope: series.spec.slope,
        n_samples: series.spec.n_samples,
    };
    let body = serde_json::to_string_pretty(&record)?;
    std::fs::write(&json_path, body).map_err(|e| Error::io(json_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_endpoints() {
        assert_eq!(sample_grid(2, (0.0, 1.0)).unwrap(), vec![0.0, 1.0]);
        let g = sample_grid(1200, (0.0, 1.0)).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 1.0 / 1199.0);
        assert_eq!(g[1199], 1.0);
        assert_eq!(sample_grid(3, (0.0, 2.0)).unwrap(), vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn grid_rejects_degenerate() {
        assert!(sample_grid(1, (0.0, 1.0)).is_err());
        assert!(sample_grid(0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn eval_known_points() {
        assert_eq!(eval_function(&SeriesSpec::trend(2.0), 0.5), 1.0);
        assert_eq!(eval_function(&SeriesSpec::seasonality(3.0), 0.0), 0.0);
        let v = eval_function(&SeriesSpec::full_sine(1.0, 3.0, 0.0, 0.0), 1.0 / 12.0);
        assert!((v - 1.0).abs() < 1e-12);
        let v = eval_function(
            &SeriesSpec::composite(FunctionFamily::CompositeMult, 4.0, 8.0),
            0.5,
        );
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn generate_basics() {
        let s = generate_series(&SeriesSpec::trend(0.0)).unwrap();
        assert_eq!(s.values.len(), 1200);
        assert!(s.values.iter().all(|&v| v == 0.0));

        let s = generate_series(&SeriesSpec::seasonality(3.0)).unwrap();
        assert!(s.values[1199].abs() < 1e-12);
    }

    #[test]
    fn composite_add_is_elementwise_sum() {
        let add = generate_series(&SeriesSpec::composite(
            FunctionFamily::CompositeAdd,
            3.0,
            1.0,
        ))
        .unwrap();
        let season = generate_series(&SeriesSpec::seasonality(3.0)).unwrap();
        let trend = generate_series(&SeriesSpec::trend(1.0)).unwrap();
        for i in 0..add.values.len() {
            assert_eq!(add.values[i], season.values[i] + trend.values[i]);
        }
    }

    #[test]
    fn linspace_param_grids() {
        let d = linspace_params(1.0, 32.0, 30).unwrap();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[29], 32.0);
        assert!((d[1] - d[0] - 31.0 / 29.0).abs() < 1e-12);
        let b = linspace_params(3.0, 32.0, 30).unwrap();
        assert_eq!(b[0], 3.0);
        assert_eq!(b[29], 32.0);
        assert_eq!(linspace_params(5.0, 5.0, 1).unwrap(), vec![5.0]);
        assert!(linspace_params(2.0, 1.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn generation_is_deterministic(b in 1.0f64..16.0, m in -8.0f64..8.0) {
            let spec = SeriesSpec::composite(FunctionFamily::CompositeAdd, b, m);
            let s1 = generate_series(&spec).unwrap();
            let s2 = generate_series(&spec).unwrap();
            prop_assert_eq!(s1.values, s2.values);
        }

        #[test]
        fn composites_close_under_components(b in 1.0f64..16.0, m in -8.0f64..8.0) {
            let season = generate_series(&SeriesSpec::seasonality(b)).unwrap();
            let trend = generate_series(&SeriesSpec::trend(m)).unwrap();
            let sub = generate_series(&SeriesSpec::composite(FunctionFamily::CompositeSub, b, m)).unwrap();
            let mult = generate_series(&SeriesSpec::composite(FunctionFamily::CompositeMult, b, m)).unwrap();
            for i in 0..sub.values.len() {
                prop_assert_eq!(sub.values[i], season.values[i] - trend.values[i]);
                prop_assert_eq!(mult.values[i], season.values[i] * trend.values[i]);
            }
        }

        #[test]
        fn full_sine_bounded(a in -8.0f64..8.0, b in 0.0f64..16.0, c in -8.0f64..8.0, m in -8.0f64..8.0) {
            let s = generate_series(&SeriesSpec::full_sine(a, b, c, m)).unwrap();
            let bound = a.abs() + c.abs() + m.abs() + 1e-12;
            for v in &s.values {
                prop_assert!(v.abs() <= bound);
            }
        }

        #[test]
        fn grid_monotone_uniform(n in 2usize..2000, lo in -4.0f64..4.0, span in 0.1f64..8.0) {
            let g = sample_grid(n, (lo, lo + span)).unwrap();
            let mut min_gap = f64::INFINITY;
            let mut max_gap = f64::NEG_INFINITY;
            for w in g.windows(2) {
                let gap = w[1] - w[0];
                prop_assert!(gap > 0.0);
                min_gap = min_gap.min(gap);
                max_gap = max_gap.max(gap);
            }
            // gap jitter is bounded by rounding of the points themselves
            let point_scale = lo.abs().max((lo + span).abs()).max(1.0);
            prop_assert!((max_gap - min_gap) <= 8.0 * f64::EPSILON * point_scale);
        }
    }
}
