//! Windowed training loop: sliding context/target windows over the training
//! region, Adam updates on a mean-error loss, periodic validation with early
//! stopping, and best-checkpoint restore.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::error::{Error, Result};
use crate::models::{bind_params, forward, ModelInstance};
use crate::seriesgen::Series;
use crate::util::stream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mae,
    Mse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Series drawn per step.
    pub batch_series: usize,
    /// Windows drawn per step (across the drawn series).
    pub windows_batch: usize,
    pub max_steps: usize,
    /// Validate every this many steps.
    pub val_check_every: usize,
    /// Consecutive non-improving validation checks before stopping.
    pub patience: usize,
    pub loss: Loss,
    pub seed: u64,
    /// Windows whose last target index falls in the final `val_tail` samples
    /// of the training region are held out for validation.
    pub val_tail: usize,
    /// Upper bound on validation windows actually scored (evenly subsampled).
    pub max_val_windows: usize,
    /// Windows evaluated per graph. Steps over more windows accumulate
    /// size-weighted gradients across micro-batches; the update is the same
    /// as one full-batch step, but peak memory stays bounded.
    pub micro_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_series: 4,
            windows_batch: 256,
            max_steps: 2000,
            val_check_every: 50,
            patience: 5,
            loss: Loss::Mae,
            seed: 0,
            val_tail: 200,
            max_val_windows: 2048,
            micro_batch: 32,
        }
    }
}

/// One context/target window: context is `values[start..start+l]`, target is
/// the following `h` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub series_index: usize,
    pub start: usize,
}

/// All stride-1 window start positions fully contained in `region`.
pub fn make_windows(region: &Range<usize>, l: usize, h: usize) -> Result<Vec<usize>> {
    let len = region.end - region.start;
    if len < l + h {
        return Err(Error::invalid(format!(
            "training region of {len} samples cannot fit context {l} + horizon {h}"
        )));
    }
    Ok((region.start..=region.end - l - h).collect())
}

/// Splits window starts into (train, validation). A window validates when its
/// last target index lands in the final `val_tail` samples of the region.
/// Falls back to the last window if the tail would otherwise claim nothing.
pub fn split_train_val(
    starts: &[usize],
    region: &Range<usize>,
    l: usize,
    h: usize,
    val_tail: usize,
) -> (Vec<usize>, Vec<usize>) {
    let cut = region.end.saturating_sub(val_tail);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &s in starts {
        if s + l + h - 1 >= cut {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    if val.is_empty() {
        if let Some(last) = train.pop() {
            val.push(last);
        }
    }
    if train.is_empty() {
        // degenerate region: train and validate on the same windows
        train = val.clone();
    }
    (train, val)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: usize,
    pub stop_reason: String,
    pub best_val_loss: f64,
    pub best_val_step: usize,
    /// `(step, loss)` for every training step.
    pub train_curve: Vec<(usize, f64)>,
    /// `(step, loss)` at every validation check.
    pub val_curve: Vec<(usize, f64)>,
}

fn batch_loss(
    inst: &ModelInstance,
    series: &[Series],
    windows: &[Window],
    loss: Loss,
    requires_grad: bool,
) -> Result<(Graph, crate::autodiff::Tensor, Vec<crate::autodiff::Tensor>)> {
    let l = inst.config.input_size;
    let h = inst.config.horizon;
    let b = windows.len();
    let mut contexts = Vec::with_capacity(b * l);
    let mut targets = Vec::with_capacity(b * h);
    for w in windows {
        let vals = &series[w.series_index].values;
        contexts.extend_from_slice(&vals[w.start..w.start + l]);
        targets.extend_from_slice(&vals[w.start + l..w.start + l + h]);
    }

    let g = Graph::new();
    let bound = bind_params(inst, &g, requires_grad)?;
    let ctx = g.constant(contexts, &[b, l])?;
    let tgt = g.constant(targets, &[b, h])?;
    let pred = forward(&inst.config, &bound, &g, ctx)?;
    let diff = g.sub(pred, tgt)?;
    let loss_t = match loss {
        Loss::Mae => g.mean_all(g.abs(diff)?)?,
        Loss::Mse => g.mean_all(g.mul(diff, diff)?)?,
    };
    let tensors = bound.tensors().collect();
    Ok((g, loss_t, tensors))
}

fn validation_loss(
    inst: &ModelInstance,
    series: &[Series],
    val_windows: &[Window],
    batch: usize,
    loss: Loss,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in val_windows.chunks(batch.max(1)) {
        let (g, loss_t, _) = batch_loss(inst, series, chunk, loss, false)?;
        total += g.values(loss_t)[0] * chunk.len() as f64;
    }
    Ok(total / val_windows.len() as f64)
}

/// Evenly subsample `windows` down to at most `cap` entries.
fn subsample_windows(windows: Vec<Window>, cap: usize) -> Vec<Window> {
    if cap == 0 || windows.len() <= cap {
        return windows;
    }
    (0..cap)
        .map(|i| windows[i * windows.len() / cap])
        .collect()
}

/// Trains `inst` in place on the training region of `series` and restores the
/// best-validation parameters before returning.
pub fn train(
    inst: &mut ModelInstance,
    series: &[Series],
    region: &Range<usize>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if series.is_empty() {
        return Err(Error::invalid("no training series"));
    }
    let l = inst.config.input_size;
    let h = inst.config.horizon;
    for (i, s) in series.iter().enumerate() {
        if s.values.len() < region.end {
            return Err(Error::invalid(format!(
                "series {i} has {} samples, training region ends at {}",
                s.values.len(),
                region.end
            )));
        }
    }
    let starts = make_windows(region, l, h)?;
    let (train_starts, val_starts) = split_train_val(&starts, region, l, h, cfg.val_tail);

    let per_series_train: Vec<Vec<usize>> = (0..series.len()).map(|_| train_starts.clone()).collect();
    let val_windows: Vec<Window> = (0..series.len())
        .flat_map(|si| {
            val_starts.iter().map(move |&s| Window {
                series_index: si,
                start: s,
            })
        })
        .collect();
    let val_windows = subsample_windows(val_windows, cfg.max_val_windows);

    let param_lens: Vec<usize> = inst.params.iter().map(|p| p.values.len()).collect();
    let mut adam = AdamState::new(&param_lens);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);

    let mut best_params: Vec<Vec<f64>> = inst.params.iter().map(|p| p.values.clone()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut bad_checks = 0;
    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut stop_reason = "max_steps";
    let mut steps_run = 0;

    'steps: for step in 1..=cfg.max_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &format!("train-step-{step}")));

        // draw up to batch_series distinct series, then windows across them
        let mut order: Vec<usize> = (0..series.len()).collect();
        order.shuffle(&mut rng);
        order.truncate(cfg.batch_series.max(1).min(series.len()));

        // pool the drawn series' windows, then sample without replacement
        let mut pool: Vec<Window> = order
            .iter()
            .flat_map(|&si| {
                per_series_train[si].iter().map(move |&start| Window {
                    series_index: si,
                    start,
                })
            })
            .collect();
        let take = cfg.windows_batch.max(1).min(pool.len());
        for i in 0..take {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(take);
        let windows = pool;

        // accumulate size-weighted gradients over micro-batches; equivalent to
        // one full-batch step but with bounded peak memory
        let micro = cfg.micro_batch.max(1);
        let total = windows.len() as f64;
        let mut loss_val = 0.0;
        let mut grad_vecs: Vec<Vec<f64>> = param_lens.iter().map(|&n| vec![0.0; n]).collect();
        for chunk in windows.chunks(micro) {
            let (g, loss_t, param_tensors) =
                batch_loss(inst, series, chunk, cfg.loss, true).map_err(|e| at_step(e, step))?;
            let weight = chunk.len() as f64 / total;
            loss_val += g.values(loss_t)[0] * weight;
            let grads = g.backward(loss_t).map_err(|e| at_step(e, step))?;
            for (acc, t) in grad_vecs.iter_mut().zip(&param_tensors) {
                if let Some(gv) = grads.get(*t) {
                    for (a, &x) in acc.iter_mut().zip(gv.iter()) {
                        *a += weight * x;
                    }
                }
            }
        }
        train_curve.push((step, loss_val));

        let mut param_vecs: Vec<Vec<f64>> =
            inst.params.iter().map(|p| p.values.clone()).collect();
        adam_step(&mut param_vecs, &grad_vecs, &mut adam, &adam_cfg)?;
        for (p, v) in inst.params.iter_mut().zip(param_vecs) {
            p.values = v;
        }
        steps_run = step;

        if step % cfg.val_check_every == 0 {
            let vl = validation_loss(inst, series, &val_windows, cfg.micro_batch, cfg.loss)
                .map_err(|e| at_step(e, step))?;
            val_curve.push((step, vl));
            if vl < best_val {
                best_val = vl;
                best_step = step;
                for (b, p) in best_params.iter_mut().zip(&inst.params) {
                    b.clone_from(&p.values);
                }
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= cfg.patience {
                    stop_reason = "early_stop";
                    break 'steps;
                }
            }
        }
    }

    if best_val.is_finite() {
        for (p, b) in inst.params.iter_mut().zip(best_params) {
            p.values = b;
        }
    } else if cfg.max_steps > 0 {
        // never validated: keep the final parameters, score them once
        best_val = validation_loss(inst, series, &val_windows, cfg.micro_batch, cfg.loss)?;
        best_step = steps_run;
    } else {
        best_val = validation_loss(inst, series, &val_windows, cfg.micro_batch, cfg.loss)?;
    }
    inst.trained = true;

    Ok(TrainReport {
        steps_run,
        stop_reason: stop_reason.to_string(),
        best_val_loss: best_val,
        best_val_step: best_step,
        train_curve,
        val_curve,
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{detail} (training step {step})"),
        },
        other => other,
    }
}
