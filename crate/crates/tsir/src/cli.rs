//! Command-line orchestration: dataset generation, training runs, report
//! assembly, and the end-to-end suite.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{
    aggregate, evaluate_dataset, write_records_csv, write_results_csv, write_results_md,
    AggregateRow, EvalRecord,
};
use crate::models::{init_params, save_checkpoint, Arch, ModelConfig};
use crate::taskbuilder::{
    self, as_baseline, export_dataset, Mode, TaskDataset, TaskId, DEFAULT_GRID_N,
};
use crate::trainer::{train, TrainConfig};
use crate::util::fnv1a64;

/// Extrapolation margin for the comparison task's out-of-range parameters.
const COMPARISON_MARGIN: f64 = 0.25;

/// PatchTST patch lengths covered by `--sweep-patch`.
pub const PATCH_SWEEP: [usize; 5] = [1, 50, 100, 150, 200];

/// Dataset/training sizes for the two supported scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub grid_n: usize,
    pub comp_function_n_ood: usize,
    pub comparison_n_id: usize,
    pub comparison_n_ood: usize,
    pub max_steps: usize,
    pub windows_batch: usize,
}

impl ScaleConfig {
    pub fn paper() -> Self {
        ScaleConfig {
            grid_n: DEFAULT_GRID_N,
            comp_function_n_ood: 120,
            comparison_n_id: 1200,
            comparison_n_ood: 120,
            max_steps: 2000,
            windows_batch: 256,
        }
    }

    /// Reduced sizes for CI and quick local iteration.
    pub fn tiny() -> Self {
        ScaleConfig {
            grid_n: 10,
            comp_function_n_ood: 24,
            comparison_n_id: 120,
            comparison_n_ood: 24,
            max_steps: 500,
            windows_batch: 256,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ScaleConfig::tiny()),
            "paper" => Ok(ScaleConfig::paper()),
            other => Err(Error::invalid(format!(
                "unknown scale '{other}' (expected tiny or paper)"
            ))),
        }
    }
}

/// Builds the dataset for one task at the given scale.
pub fn build_task(task: TaskId, scale: &ScaleConfig, seed: u64) -> Result<TaskDataset> {
    match task {
        TaskId::CompAdd => taskbuilder::build_comp_add(scale.grid_n),
        TaskId::CompSub => taskbuilder::build_comp_sub(scale.grid_n),
        TaskId::CompMult => taskbuilder::build_comp_mult(scale.grid_n),
        TaskId::CompFunction => {
            taskbuilder::build_comp_function(scale.grid_n, scale.comp_function_n_ood, seed)
        }
        TaskId::Comparison => taskbuilder::build_comparison(
            scale.comparison_n_id,
            scale.comparison_n_ood,
            COMPARISON_MARGIN,
            scale.grid_n,
            seed,
        ),
        TaskId::InverseSearch => taskbuilder::build_inverse_search(scale.grid_n),
    }
}

#[derive(Parser)]
#[command(name = "tsir", version, about = "Synthetic time-series reasoning benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write dataset CSVs and manifests for the selected tasks.
    Generate {
        /// Task name, comma list, or "all".
        #[arg(long, default_value = "all")]
        task: String,
        /// Output root (also via TSIR_OUT).
        #[arg(long, env = "TSIR_OUT", default_value = "out")]
        out: PathBuf,
        /// Dataset scale: tiny or paper.
        #[arg(long, default_value = "paper")]
        scale: String,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON file with the same keys; flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate the selected (task, arch, mode) combinations.
    Run {
        #[arg(long, default_value = "all")]
        task: String,
        /// Architecture name, comma list, or "all".
        #[arg(long, default_value = "all")]
        arch: String,
        /// Mode name, comma list, or "all".
        #[arg(long, default_value = "task")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep PatchTST over its patch-length grid.
        #[arg(long)]
        sweep_patch: bool,
        #[arg(long, env = "TSIR_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long, default_value = "tiny")]
        scale: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate every run under the output root into results tables.
    Report {
        #[arg(long, env = "TSIR_OUT", default_value = "out")]
        out: PathBuf,
    },
    /// Full pipeline: all tasks, all architectures, both modes, plus report.
    DeskSuite {
        /// tiny or paper
        scale: String,
        #[arg(long, env = "TSIR_OUT", default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

/// Optional overrides loadable from `--config <file>`; command-line flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    task: Option<String>,
    arch: Option<String>,
    mode: Option<String>,
    seed: Option<u64>,
    sweep_patch: Option<bool>,
    scale: Option<String>,
    jobs: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn parse_tasks(s: &str) -> Result<Vec<TaskId>> {
    if s == "all" {
        return Ok(TaskId::ALL.to_vec());
    }
    s.split(',').map(|t| TaskId::parse(t.trim())).collect()
}

fn parse_archs(s: &str) -> Result<Vec<Arch>> {
    if s == "all" {
        return Ok(Arch::ALL.to_vec());
    }
    s.split(',').map(|a| Arch::parse(a.trim())).collect()
}

fn parse_modes(s: &str) -> Result<Vec<Mode>> {
    if s == "all" {
        return Ok(vec![Mode::Task, Mode::Baseline]);
    }
    s.split(',').map(|m| Mode::parse(m.trim())).collect()
}

pub fn cmd_generate(tasks: &[TaskId], scale: &ScaleConfig, seed: u64, out: &Path) -> Result<()> {
    for &task in tasks {
        let ds = build_task(task, scale, seed)?;
        export_dataset(&ds, &out.join("data").join(task.name()))?;
    }
    Ok(())
}

/// One (task, mode, labelled architecture) training run.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub task: TaskId,
    pub mode: Mode,
    pub label: String,
    pub model: ModelConfig,
}

/// Expands the task/arch/mode selection into concrete runs. With
/// `sweep_patch`, PatchTST fans out over the patch-length grid.
pub fn expand_runs(
    tasks: &[TaskId],
    archs: &[Arch],
    modes: &[Mode],
    seed: u64,
    sweep_patch: bool,
) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for &task in tasks {
        for &mode in modes {
            for &arch in archs {
                let mut base = ModelConfig::new(arch);
                base.seed = seed;
                if arch == Arch::PatchTst && sweep_patch {
                    for p in PATCH_SWEEP {
                        let mut cfg = base.clone();
                        cfg.patch_length = p;
                        specs.push(RunSpec {
                            task,
                            mode,
                            label: format!("patchtst_p{p}"),
                            model: cfg,
                        });
                    }
                } else {
                    specs.push(RunSpec {
                        task,
                        mode,
                        label: arch.name().to_string(),
                        model: base,
                    });
                }
            }
        }
    }
    specs
}

#[derive(Serialize)]
struct RunConfigFile<'a> {
    task: &'a str,
    mode: &'a str,
    arch: &'a str,
    scale: &'a ScaleConfig,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
    config_hash: String,
}

/// Executes one run and writes its artifacts under
/// `out/runs/<task>/<mode>/<label>/`. Artifacts of other runs are never
/// touched, so a failure here cannot corrupt them.
pub fn run_single(spec: &RunSpec, scale: &ScaleConfig, out: &Path) -> Result<Vec<EvalRecord>> {
    let train_cfg = TrainConfig {
        max_steps: scale.max_steps,
        windows_batch: scale.windows_batch,
        seed: spec.model.seed,
        ..TrainConfig::default()
    };

    let ds = build_task(spec.task, scale, spec.model.seed)?;
    let ds = match spec.mode {
        Mode::Task => ds,
        Mode::Baseline => as_baseline(ds)?,
    };

    let dir = out
        .join("runs")
        .join(spec.task.name())
        .join(spec.mode.name())
        .join(&spec.label);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let cfg_json = serde_json::to_string(&(&spec.model, &train_cfg, scale))?;
    let run_cfg = RunConfigFile {
        task: spec.task.name(),
        mode: spec.mode.name(),
        arch: &spec.label,
        scale,
        model: &spec.model,
        train: &train_cfg,
        config_hash: format!("{:016x}", fnv1a64(cfg_json.as_bytes())),
    };
    write_json(&dir.join("config.json"), &run_cfg)?;

    let mut inst = init_params(&spec.model)?;
    let report = train(
        &mut inst,
        ds.training_series(),
        &ds.train_region,
        &train_cfg,
    )?;
    write_json(&dir.join("report.json"), &report)?;
    save_checkpoint(&inst, &dir.join("checkpoint.bin"))?;

    let records = evaluate_dataset(&inst, &ds, &spec.label)?;
    write_records_csv(&records, &dir.join("records.csv"))?;
    Ok(records)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs all specs, up to `jobs` concurrently. Every run is attempted; the
/// first error (in spec order) is returned after the others finish.
pub fn run_all(specs: &[RunSpec], scale: &ScaleConfig, out: &Path, jobs: usize) -> Result<()> {
    let results: Vec<Result<Vec<EvalRecord>>> = if jobs <= 1 {
        specs.iter().map(|s| run_single(s, scale, out)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            specs
                .par_iter()
                .map(|s| run_single(s, scale, out))
                .collect()
        })
    };
    for (spec, res) in specs.iter().zip(&results) {
        if let Err(e) = res {
            eprintln!(
                "run {}/{}/{} failed: {e}",
                spec.task.name(),
                spec.mode.name(),
                spec.label
            );
        }
    }
    results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(())
}

fn task_rank(name: &str) -> usize {
    TaskId::ALL
        .iter()
        .position(|t| t.name() == name)
        .unwrap_or(usize::MAX)
}

fn mode_rank(name: &str) -> usize {
    match name {
        "task" => 0,
        "baseline" => 1,
        _ => 2,
    }
}

/// Fixed registry order for architecture labels, patch sweeps sorted by
/// patch length after the plain label.
fn arch_rank(label: &str) -> (usize, usize) {
    let base = label.split("_p").next().unwrap_or(label);
    let rank = Arch::ALL
        .iter()
        .position(|a| a.name() == base)
        .unwrap_or(usize::MAX);
    let patch = label
        .rsplit("_p")
        .next()
        .and_then(|p| p.parse::<usize>().ok())
        .unwrap_or(0);
    (rank, patch)
}

fn parse_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(Error::invalid(format!(
                "malformed record line in {}: '{line}'",
                path.display()
            )));
        }
        records.push(EvalRecord {
            task: parts[0].to_string(),
            mode: parts[1].to_string(),
            arch: parts[2].to_string(),
            series_index: parts[3]
                .parse()
                .map_err(|_| Error::invalid(format!("bad series index '{}'", parts[3])))?,
            mae: parts[4]
                .parse()
                .map_err(|_| Error::invalid(format!("bad mae '{}'", parts[4])))?,
        });
    }
    Ok(records)
}

fn collect_run_records(out: &Path) -> Result<Vec<EvalRecord>> {
    let runs = out.join("runs");
    let mut files = Vec::new();
    let mut stack = vec![runs.clone()];
    while let Some(dir) = stack.pop() {
        let entries = match std::fs::read_dir(&dir) {
            Ok(e) => e,
            Err(_) => continue,
        };
        for entry in entries.flatten() {
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "records.csv") {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut records = Vec::new();
    for f in &files {
        records.extend(parse_records_csv(f)?);
    }
    records.sort_by(|a, b| {
        (task_rank(&a.task), mode_rank(&a.mode), arch_rank(&a.arch), a.series_index).cmp(&(
            task_rank(&b.task),
            mode_rank(&b.mode),
            arch_rank(&b.arch),
            b.series_index,
        ))
    });
    Ok(records)
}

/// Aggregates every completed run under `out/runs` into
/// `out/reports/{results.csv, results.md}` and returns the rows.
pub fn cmd_report(out: &Path) -> Result<Vec<AggregateRow>> {
    let records = collect_run_records(out)?;
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "no completed runs under {}",
            out.join("runs").display()
        )));
    }
    let rows = aggregate(&records);
    let reports = out.join("reports");
    std::fs::create_dir_all(&reports).map_err(|e| Error::io(&reports, e))?;
    write_results_csv(&rows, &reports.join("results.csv"))?;
    write_results_md(&rows, &reports.join("results.md"))?;
    Ok(rows)
}

/// Full pipeline: every task, every architecture, both modes, then the
/// aggregate report and a per-cell summary on stdout.
pub fn cmd_desk_suite(scale: &ScaleConfig, seed: u64, out: &Path, jobs: usize) -> Result<()> {
    let specs = expand_runs(
        &TaskId::ALL,
        &Arch::ALL,
        &[Mode::Task, Mode::Baseline],
        seed,
        false,
    );
    run_all(&specs, scale, out, jobs)?;
    let rows = cmd_report(out)?;
    println!("suite complete: {} runs, {} result rows", specs.len(), rows.len());
    for r in &rows {
        println!(
            "  {} {} {} mean_mae={:.4} std={:.4} n={}",
            r.task, r.mode, r.arch, r.mean_mae, r.std_mae, r.n
        );
    }
    println!("report: {}", out.join("reports").join("results.csv").display());
    Ok(())
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate {
            task,
            out,
            scale,
            seed,
            config,
        } => {
            let file = load_file_config(config.as_deref())?;
            let task = if task == "all" { file.task.unwrap_or(task) } else { task };
            let scale = ScaleConfig::parse(&file.scale.map_or(scale.clone(), |s| {
                if scale == "paper" { s } else { scale.clone() }
            }))?;
            let seed = seed.or(file.seed).unwrap_or(0);
            cmd_generate(&parse_tasks(&task)?, &scale, seed, &out)
        }
        Cmd::Run {
            task,
            arch,
            mode,
            seed,
            sweep_patch,
            out,
            scale,
            config,
            jobs,
        } => {
            let file = load_file_config(config.as_deref())?;
            let task = if task == "all" { file.task.unwrap_or(task) } else { task };
            let arch = if arch == "all" { file.arch.unwrap_or(arch) } else { arch };
            let mode = if mode == "task" { file.mode.unwrap_or(mode) } else { mode };
            let scale_str = if scale == "tiny" {
                file.scale.unwrap_or(scale)
            } else {
                scale
            };
            let seed = seed.or(file.seed).unwrap_or(0);
            let sweep = sweep_patch || file.sweep_patch.unwrap_or(false);
            let jobs = if jobs == 1 { file.jobs.unwrap_or(jobs) } else { jobs };

            let specs = expand_runs(
                &parse_tasks(&task)?,
                &parse_archs(&arch)?,
                &parse_modes(&mode)?,
                seed,
                sweep,
            );
            let scale = ScaleConfig::parse(&scale_str)?;
            run_all(&specs, &scale, &out, jobs)?;
            cmd_report(&out)?;
            Ok(())
        }
        Cmd::Report { out } => {
            cmd_report(&out)?;
            Ok(())
        }
        Cmd::DeskSuite {
            scale,
            out,
            seed,
            jobs,
        } => cmd_desk_suite(&ScaleConfig::parse(&scale)?, seed.unwrap_or(0), &out, jobs),
    }
}

/// Binary entry point; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with exit code 0
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_parsing() {
        assert_eq!(ScaleConfig::parse("tiny").unwrap(), ScaleConfig::tiny());
        assert_eq!(ScaleConfig::parse("paper").unwrap(), ScaleConfig::paper());
        assert!(ScaleConfig::parse("huge").is_err());
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(parse_tasks("all").unwrap().len(), 6);
        assert_eq!(parse_tasks("comp-add,inverse").unwrap().len(), 2);
        assert!(parse_tasks("nope").is_err());
        assert_eq!(parse_archs("all").unwrap(), Arch::ALL.to_vec());
        assert_eq!(parse_modes("task,baseline").unwrap().len(), 2);
        assert!(parse_modes("both").is_err());
    }

    #[test]
    fn sweep_expansion() {
        let specs = expand_runs(
            &[TaskId::CompAdd],
            &[Arch::PatchTst],
            &[Mode::Task],
            0,
            true,
        );
        assert_eq!(specs.len(), 5);
        let labels: Vec<&str> = specs.iter().map(|s| s.label.as_str()).collect();
        assert_eq!(
            labels,
            vec!["patchtst_p1", "patchtst_p50", "patchtst_p100", "patchtst_p150", "patchtst_p200"]
        );
        for s in &specs {
            let p: usize = s.label.rsplit("_p").next().unwrap().parse().unwrap();
            assert_eq!(s.model.patch_length, p);
        }
    }

    #[test]
    fn run_expansion_counts() {
        // 4 archs x 2 modes on one task
        let specs = expand_runs(
            &[TaskId::InverseSearch],
            &Arch::ALL,
            &[Mode::Task, Mode::Baseline],
            0,
            false,
        );
        assert_eq!(specs.len(), 8);
    }

    #[test]
    fn arch_ordering_is_registry_then_patch() {
        let mut labels = vec![
            "patchtst_p150".to_string(),
            "mlp".to_string(),
            "patchtst_p1".to_string(),
            "nhits".to_string(),
            "dlinear".to_string(),
        ];
        labels.sort_by_key(|l| arch_rank(l));
        assert_eq!(labels, vec!["mlp", "dlinear", "nhits", "patchtst_p1", "patchtst_p150"]);
    }

    #[test]
    fn records_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        let records = vec![EvalRecord {
            task: "comp-add".into(),
            mode: "task".into(),
            arch: "mlp".into(),
            series_index: 7,
            mae: 1.25,
        }];
        write_records_csv(&records, &path).unwrap();
        let back = parse_records_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].task, "comp-add");
        assert_eq!(back[0].series_index, 7);
        assert!((back[0].mae - 1.25).abs() < 1e-12);
    }

    #[test]
    fn report_without_runs_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_report(dir.path()).is_err());
    }
}
