//! Scoring and reporting: per-series forecast error at the evaluation
//! anchor, grouped aggregates, and CSV/Markdown result tables.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::models::{bind_params, forward, ModelInstance};
use crate::seriesgen::Series;
use crate::taskbuilder::TaskDataset;

/// Mean absolute error over a horizon.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::invalid(format!(
            "mae: length mismatch or empty ({} vs {})",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

/// Forecast a single series at the evaluation anchor: the context is the
/// `input_size` samples before `eval_start`, the target the `horizon` samples
/// from it. Untrained models are refused.
pub fn forecast_at(
    inst: &ModelInstance,
    series: &Series,
    eval_start: usize,
) -> Result<(Vec<f64>, f64)> {
    if !inst.trained {
        return Err(Error::invalid("refusing to evaluate an untrained model"));
    }
    let l = inst.config.input_size;
    let h = inst.config.horizon;
    if eval_start < l || series.values.len() < eval_start + h {
        return Err(Error::invalid(format!(
            "series too short for evaluation at {eval_start} (needs {l} before, {h} after)"
        )));
    }
    let g = Graph::new();
    let bound = bind_params(inst, &g, false)?;
    let ctx = g.constant(series.values[eval_start - l..eval_start].to_vec(), &[1, l])?;
    let pred = g.values(forward(&inst.config, &bound, &g, ctx)?);
    let err = mae(&pred, &series.values[eval_start..eval_start + h])?;
    Ok((pred, err))
}

/// One scored out-of-distribution series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub mode: String,
    pub arch: String,
    pub series_index: usize,
    pub mae: f64,
}

/// Score every OOD series of `ds` with one trained model.
pub fn evaluate_dataset(
    inst: &ModelInstance,
    ds: &TaskDataset,
    arch_label: &str,
) -> Result<Vec<EvalRecord>> {
    let eval_start = ds.eval_region.start;
    ds.ood_series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (_, err) = forecast_at(inst, s, eval_start)?;
            Ok(EvalRecord {
                task: ds.task.name().to_string(),
                mode: ds.mode.name().to_string(),
                arch: arch_label.to_string(),
                series_index: i,
                mae: err,
            })
        })
        .collect()
}

/// Aggregate row: mean and population standard deviation of per-series MAE
/// within one (task, mode, arch) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub mode: String,
    pub arch: String,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub n: usize,
}

pub fn aggregate(records: &[EvalRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    let mut order: Vec<(String, String, String)> = Vec::new();
    for r in records {
        let key = (r.task.clone(), r.mode.clone(), r.arch.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r.mae);
    }
    order
        .into_iter()
        .map(|key| {
            let vals = &groups[&key];
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            AggregateRow {
                task: key.0,
                mode: key.1,
                arch: key.2,
                mean_mae: mean,
                std_mae: var.sqrt(),
                n,
            }
        })
        .collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// `records.csv`: one row per scored series, in record order.
pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<()> {
    let mut out = String::from("task,mode,arch,series_index,mae\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.task, r.mode, r.arch, r.series_index, r.mae
        ));
    }
    write_file(path, &out)
}

/// `results.csv`: aggregate rows in input order.
pub fn write_results_csv(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut out = String::from("task,mode,arch,mean_mae,std_mae,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{}\n",
            r.task, r.mode, r.arch, r.mean_mae, r.std_mae, r.n
        ));
    }
    write_file(path, &out)
}

/// `results.md`: one table per mode, tasks as rows, architectures as columns,
/// best (lowest mean) entry per row in bold.
pub fn write_results_md(rows: &[AggregateRow], path: &Path) -> Result<()> {
    let mut modes: Vec<String> = Vec::new();
    let mut archs: Vec<String> = Vec::new();
    let mut tasks: Vec<String> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode.clone());
        }
        if !archs.contains(&r.arch) {
            archs.push(r.arch.clone());
        }
        if !tasks.contains(&r.task) {
            tasks.push(r.task.clone());
        }
    }

    let mut out = String::from("# Results\n\nMean absolute error on held-out series (lower is better; best per row in bold).\n");
    for mode in &modes {
        out.push_str(&format!("\n## Mode: {mode}\n\n| task |"));
        for a in &archs {
            out.push_str(&format!(" {a} |"));
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(archs.len()));
        out.push('\n');
        for task in &tasks {
            let cells: Vec<Option<&AggregateRow>> = archs
                .iter()
                .map(|a| {
                    rows.iter()
                        .find(|r| &r.task == task && &r.mode == mode && &r.arch == a)
                })
                .collect();
            if cells.iter().all(|c| c.is_none()) {
                continue;
            }
            let best = cells
                .iter()
                .flatten()
                .map(|r| r.mean_mae)
                .fold(f64::INFINITY, f64::min);
            out.push_str(&format!("| {task} |"));
            for c in &cells {
                match c {
                    None => out.push_str(" - |"),
                    Some(r) if r.mean_mae == best => {
                        out.push_str(&format!(" **{:.3} ± {:.3}** |", r.mean_mae, r.std_mae))
                    }
                    Some(r) => out.push_str(&format!(" {:.3} ± {:.3} |", r.mean_mae, r.std_mae)),
                }
            }
            out.push('\n');
        }
    }
    write_file(path, &out)
}
