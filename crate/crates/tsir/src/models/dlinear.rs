//! Decomposition-linear forecaster: centered moving-average trend plus
//! remainder, each mapped to the horizon by its own linear layer.

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

use super::{BoundParams, Init, ModelConfig, ParamSpec};

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let l = cfg.input_size;
    let h = cfg.horizon;
    vec![
        ParamSpec::new("dlinear.trend.w", &[l, h], Init::Weight { fan_in: l }),
        ParamSpec::new("dlinear.trend.b", &[h], Init::Zero),
        ParamSpec::new("dlinear.seasonal.w", &[l, h], Init::Weight { fan_in: l }),
        ParamSpec::new("dlinear.seasonal.b", &[h], Init::Zero),
    ]
}

/// Centered moving average with edge-replication padding, plus the exact
/// remainder: `trend + remainder == context` by construction.
pub fn dlinear_decompose(context: &[f64], kernel: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let l = context.len();
    if kernel % 2 == 0 || kernel == 0 || kernel > l {
        return Err(Error::invalid(format!(
            "moving-average kernel must be odd and <= {l}, got {kernel}"
        )));
    }
    let half = (kernel - 1) / 2;
    let at = |i: isize| -> f64 {
        let j = i.clamp(0, l as isize - 1) as usize;
        context[j]
    };
    let mut trend = Vec::with_capacity(l);
    for i in 0..l as isize {
        let sum: f64 = (i - half as isize..=i + half as isize).map(at).sum();
        trend.push(sum / kernel as f64);
    }
    let remainder = context.iter().zip(&trend).map(|(c, t)| c - t).collect();
    Ok((trend, remainder))
}

/// The moving average is linear in the input, so the batched graph version
/// applies it as one constant `[L, L]` matrix.
fn smoothing_matrix(l: usize, kernel: usize) -> Vec<f64> {
    let half = (kernel - 1) as isize / 2;
    let mut m = vec![0.0; l * l];
    let w = 1.0 / kernel as f64;
    for i in 0..l as isize {
        for o in -half..=half {
            let j = (i + o).clamp(0, l as isize - 1) as usize;
            m[j * l + i as usize] += w; // column i of the output row space
        }
    }
    m
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    p: &BoundParams,
    g: &Graph,
    contexts: Tensor,
) -> Result<Tensor> {
    let l = cfg.input_size;
    let smooth = g.constant(smoothing_matrix(l, cfg.ma_kernel), &[l, l])?;
    let trend = g.matmul(contexts, smooth)?;
    let remainder = g.sub(contexts, trend)?;

    let trend_out = g.add_broadcast(
        g.matmul(trend, p.get("dlinear.trend.w"))?,
        p.get("dlinear.trend.b"),
    )?;
    let seasonal_out = g.add_broadcast(
        g.matmul(remainder, p.get("dlinear.seasonal.w"))?,
        p.get("dlinear.seasonal.b"),
    )?;
    g.add(trend_out, seasonal_out)
}
