//! Hierarchical interpolation forecaster: per-stack multi-rate max pooling,
//! an MLP emitting backcast/forecast knots at reduced resolution, linear
//! interpolation back to full length, and backcast residual chaining.

use crate::autodiff::{Graph, Tensor};
use crate::error::Result;

use super::{BoundParams, Init, ModelConfig, ParamSpec};

fn knot_counts(cfg: &ModelConfig, stack: usize) -> (usize, usize) {
    let r = cfg.interp_factors[stack];
    (cfg.input_size.div_ceil(r), cfg.horizon.div_ceil(r))
}

pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for s in 0..cfg.pool_kernels.len() {
        let pooled = cfg.input_size.div_ceil(cfg.pool_kernels[s]);
        let (nb, nf) = knot_counts(cfg, s);
        let h = cfg.hidden_size;
        let dims = [(pooled, h), (h, h), (h, nb + nf)];
        for (i, (fan_in, out)) in dims.into_iter().enumerate() {
            specs.push(ParamSpec::new(
                format!("nhits.s{s}.w{i}"),
                &[fan_in, out],
                Init::Weight { fan_in },
            ));
            specs.push(ParamSpec::new(format!("nhits.s{s}.b{i}"), &[out], Init::Zero));
        }
    }
    specs
}

/// Weights mapping `n` evenly spaced knots onto `t` output points by linear
/// interpolation; identity when `n == t`.
fn interp_matrix(n: usize, t: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * t];
    for out in 0..t {
        let pos = if t == 1 || n == 1 {
            0.0
        } else {
            out as f64 * (n - 1) as f64 / (t - 1) as f64
        };
        let j = (pos.floor() as usize).min(n - 1);
        let w = pos - j as f64;
        m[j * t + out] += 1.0 - w;
        if w > 0.0 && j + 1 < n {
            m[(j + 1) * t + out] += w;
        }
    }
    if n == 1 {
        // single knot broadcasts to every output point
        for out in 0..t {
            m[out] = 1.0;
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
    let mut residual = contexts;
    let mut forecast: Option<Tensor> = None;
    for s in 0..cfg.pool_kernels.len() {
        let pooled = g.max_pool_last(residual, cfg.pool_kernels[s])?;
        let mut h = pooled;
        for i in 0..2 {
            h = g.relu(g.add_broadcast(
                g.matmul(h, p.get(&format!("nhits.s{s}.w{i}")))?,
                p.get(&format!("nhits.s{s}.b{i}")),
            )?)?;
        }
        let knots = g.add_broadcast(
            g.matmul(h, p.get(&format!("nhits.s{s}.w2")))?,
            p.get(&format!("nhits.s{s}.b2")),
        )?;
        let (nb, nf) = knot_counts(cfg, s);
        let back_knots = g.slice_last(knots, 0, nb)?;
        let fore_knots = g.slice_last(knots, nb, nb + nf)?;

        let back_m = g.constant(interp_matrix(nb, cfg.input_size), &[nb, cfg.input_size])?;
        let fore_m = g.constant(interp_matrix(nf, cfg.horizon), &[nf, cfg.horizon])?;
        let backcast = g.matmul(back_knots, back_m)?;
        let stack_forecast = g.matmul(fore_knots, fore_m)?;

        residual = g.sub(residual, backcast)?;
        forecast = Some(match forecast {
            None => stack_forecast,
            Some(acc) => g.add(acc, stack_forecast)?,
        });
    }
    Ok(forecast.expect("nhits has at least one stack"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{bind_params, init_params, Arch};

    fn cfg() -> ModelConfig {
        let mut cfg = ModelConfig::new(Arch::Nhits);
        cfg.input_size = 16;
        cfg.horizon = 16;
        cfg.hidden_size = 8;
        cfg
    }

    #[test]
    fn zero_parameters_zero_forecast() {
        let cfg = cfg();
        let mut inst = init_params(&cfg).unwrap();
        for p in &mut inst.params {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let bound = bind_params(&inst, &g, false).unwrap();
        let ctx = g
            .constant((0..16).map(|i| (i as f64 * 0.3).sin()).collect(), &[1, 16])
            .unwrap();
        let out = forward(&cfg, &bound, &g, ctx).unwrap();
        assert!(g.values(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interp_identity_when_counts_match() {
        let m = interp_matrix(6, 6);
        for i in 0..6 {
            for j in 0..6 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((m[i * 6 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interp_endpoints_and_midpoint() {
        // 2 knots -> 5 points: a straight line between the knots
        let m = interp_matrix(2, 5);
        let knots = [1.0, 3.0];
        let out: Vec<f64> = (0..5)
            .map(|t| knots[0] * m[t] + knots[1] * m[5 + t])
            .collect();
        let expect = [1.0, 1.5, 2.0, 2.5, 3.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_sum_of_stack_contributions() {
        // With the backcast weights zeroed, every stack sees the raw input
        // and the forecast must equal the sum of per-stack forecasts run in
        // isolation (single-stack configs).
        let base = cfg();
        let mut inst = init_params(&base).unwrap();
        for p in &mut inst.params {
            // zero the backcast half of every stack's output layer
            if p.name.ends_with(".w2") || p.name.ends_with(".b2") {
                let total = *p.shape.last().unwrap();
                let nf = total / 2;
                let nb = total - nf;
                let rows = p.values.len() / total;
                for r in 0..rows {
                    for c in 0..nb {
                        p.values[r * total + c] = 0.0;
                    }
                }
            }
        }

        let ctx_vals: Vec<f64> = (0..16).map(|i| (i as f64 * 0.41).cos()).collect();
        let g = Graph::new();
        let bound = bind_params(&inst, &g, false).unwrap();
        let ctx = g.constant(ctx_vals.clone(), &[1, 16]).unwrap();
        let full = g.values(forward(&base, &bound, &g, ctx).unwrap());

        let mut summed = vec![0.0; 16];
        for s in 0..3 {
            let mut single = base.clone();
            single.pool_kernels = vec![base.pool_kernels[s]];
            single.interp_factors = vec![base.interp_factors[s]];
            let mut sub = init_params(&single).unwrap();
            for p in &mut sub.params {
                let source_name = p.name.replace("s0", &format!("s{s}"));
                let src = inst.params.iter().find(|q| q.name == source_name).unwrap();
                p.values = src.values.clone();
            }
            let g = Graph::new();
            let bound = bind_params(&sub, &g, false).unwrap();
            let ctx = g.constant(ctx_vals.clone(), &[1, 16]).unwrap();
            let out = g.values(forward(&single, &bound, &g, ctx).unwrap());
            for i in 0..16 {
                summed[i] += out[i];
            }
        }
        for i in 0..16 {
            assert!((full[i] - summed[i]).abs() < 1e-10, "index {i}");
        }
    }
}
