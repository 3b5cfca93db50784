//! Commands behind the `perforated` binary: `train`, `ablate`, `eval`, `inspect`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use perforated::config::RunConfig;
use perforated::data::{self, Dataset};
use perforated::orchestrator::{
    evaluate, run_experiment, AblationMode, CycleKind, ExperimentReport, ScoreMetric, Splits,
};
use perforated::store::{find_checkpoint, read_checkpoint, read_metrics, curves_csv, RunRecorder};
use perforated::{Error, LossKind, ParamCount};

pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERIC: i32 = 3;
    pub const PARTIAL: i32 = 4;
}

/// Maps a library error onto the documented exit codes.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Network(_) | Error::Precondition(_) => exit::CONFIG,
        Error::NonFinite(_) => exit::NUMERIC,
        _ => exit::DATA,
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const TIMING_FILE: &str = "timing.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Files of one finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub run_dir: PathBuf,
    pub report: ExperimentReport,
}

/// Trains one experiment into `<run_root>/<experiment-id>/`.
pub fn train(cfg: &RunConfig, splits: &Splits, run_root: &Path) -> Result<TrainOutput, Error> {
    let dir = run_root.join(cfg.experiment_id());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    let mut rec = RunRecorder::create(&dir, &cfg.experiment_id(), cfg.experiment.seed)?;
    let outcome = run_experiment(&cfg.experiment, splits, &mut rec)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&outcome.report)? + "\n")?;
    fs::write(dir.join(TIMING_FILE), serde_json::to_string_pretty(&outcome.timing)? + "\n")?;
    Ok(TrainOutput {
        run_dir: dir,
        report: outcome.report,
    })
}

pub fn report_summary(r: &ExperimentReport) -> String {
    format!(
        "mode {}  seed {}\n  first-cycle test  {:.4}\n  max-val test      {:.4}\n  error reduction   {:.2}%\n  dendrites added   {}\n  params            {} neuron + {} dendrite",
        r.ablation_mode,
        r.seed,
        r.first_cycle_test,
        r.max_val_test,
        r.error_reduction_pct,
        r.dendrites_added,
        r.final_params.neuron_params,
        r.final_params.dendrite_params
    )
}

pub fn cmd_train(config: &Path, overrides: &[String], run_root: Option<&Path>) -> i32 {
    let run = || -> Result<TrainOutput, Error> {
        let cfg = RunConfig::from_file(config, overrides)?;
        let splits = cfg.data.load(&cfg.split)?;
        let root = run_root.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_root());
        train(&cfg, &splits, &root)
    };
    match run() {
        Ok(out) => {
            println!("{}", report_summary(&out.report));
            println!("  run directory     {}", out.run_dir.display());
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Nearest-rank quantile: the smallest value with at least `p * n` values at
/// or below it.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty list");
    let rank = (p * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candlestick {
    pub mode: AblationMode,
    pub runs: usize,
    pub failed: usize,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

impl Candlestick {
    pub fn from_values(mode: AblationMode, values: &[f64], failed: usize) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| (!v.is_empty()).then(|| nearest_rank(&v, p));
        Candlestick {
            mode,
            runs: v.len(),
            failed,
            min: v.first().copied(),
            q1: q(0.25),
            q3: q(0.75),
            max: v.last().copied(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub mode: AblationMode,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub error_reduction_pct: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub runs: Vec<AblationRun>,
    pub table: Vec<Candlestick>,
}

impl AblationSummary {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn render_table(&self) -> String {
        let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        let mut s = format!(
            "{:<22} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8}\n",
            "mode", "ok", "failed", "min", "q1", "q3", "max"
        );
        for c in &self.table {
            let _ = writeln!(
                s,
                "{:<22} {:>4} {:>6} {:>8} {:>8} {:>8} {:>8}",
                c.mode.name(),
                c.runs,
                c.failed,
                f(c.min),
                f(c.q1),
                f(c.q3),
                f(c.max)
            );
        }
        s
    }
}

/// Runs every (mode, seed) pair on the same data splits, at most `jobs` at
/// a time. Failed runs are recorded and the rest continue.
pub fn ablate(
    base: &RunConfig,
    splits: &Splits,
    modes: &[AblationMode],
    seeds: &[u64],
    jobs: usize,
    run_root: &Path,
) -> Result<AblationSummary, Error> {
    if modes.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one mode and one seed".into()));
    }
    let work: Vec<(AblationMode, u64)> = modes.iter().flat_map(|&m| seeds.iter().map(move |&s| (m, s))).collect();
    let results: Mutex<Vec<Option<AblationRun>>> = Mutex::new(vec![None; work.len()]);
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(mode, seed)) = work.get(i) else { break };
        let mut cfg = base.clone();
        cfg.experiment.ablation_mode = mode;
        cfg.experiment.seed = seed;
        let run_dir = run_root.join(cfg.experiment_id());
        let res = cfg.validate().and_then(|_| train(&cfg, splits, run_root));
        let run = match res {
            Ok(out) => AblationRun {
                mode,
                seed,
                run_dir,
                error_reduction_pct: Some(out.report.error_reduction_pct),
                error: None,
            },
            Err(e) => {
                eprintln!("run {mode} seed {seed} failed: {e}");
                AblationRun {
                    mode,
                    seed,
                    run_dir,
                    error_reduction_pct: None,
                    error: Some(e.to_string()),
                }
            }
        };
        results.lock().unwrap()[i] = Some(run);
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, work.len()) {
            s.spawn(worker);
        }
    });
    let runs: Vec<AblationRun> = results.into_inner().unwrap().into_iter().map(|r| r.expect("run recorded")).collect();
    let table = modes
        .iter()
        .map(|&m| {
            let of_mode: Vec<&AblationRun> = runs.iter().filter(|r| r.mode == m).collect();
            let vals: Vec<f64> = of_mode.iter().filter_map(|r| r.error_reduction_pct).collect();
            Candlestick::from_values(m, &vals, of_mode.len() - vals.len())
        })
        .collect();
    Ok(AblationSummary { runs, table })
}

pub fn cmd_ablate(
    config: &Path,
    overrides: &[String],
    modes: &[AblationMode],
    seeds: &[u64],
    jobs: usize,
    run_root: Option<&Path>,
) -> i32 {
    let run = || -> Result<AblationSummary, Error> {
        let cfg = RunConfig::from_file(config, overrides)?;
        let splits = cfg.data.load(&cfg.split)?;
        let root = run_root.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_root());
        let summary = ablate(&cfg, &splits, modes, seeds, jobs, &root)?;
        fs::create_dir_all(&root)?;
        let stem = format!("{}-ablation", cfg.name);
        fs::write(root.join(format!("{stem}.json")), serde_json::to_string_pretty(&summary)? + "\n")?;
        fs::write(root.join(format!("{stem}.txt")), summary.render_table())?;
        Ok(summary)
    };
    match run() {
        Ok(summary) => {
            println!("error reduction (%) per mode, nearest-rank quartiles");
            print!("{}", summary.render_table());
            if summary.failed() > 0 {
                eprintln!("{} of {} runs failed", summary.failed(), summary.runs.len());
                exit::PARTIAL
            } else {
                exit::OK
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Where `eval` gets its samples from.
#[derive(Clone, Debug)]
pub enum EvalData {
    /// One split of a run config's data.
    Config { path: PathBuf, split: String },
    Idx { images: PathBuf, labels: PathBuf, transpose: bool },
    Csv { path: PathBuf, label_column: String },
}

impl EvalData {
    pub fn load(&self) -> Result<Dataset, Error> {
        match self {
            EvalData::Config { path, split } => {
                let cfg = RunConfig::from_file(path, &[])?;
                let s = cfg.data.load(&cfg.split)?;
                match split.as_str() {
                    "train" => Ok(s.train),
                    "val" => Ok(s.val),
                    "test" => Ok(s.test),
                    other => Err(Error::Config(format!("unknown split `{other}`, expected train, val or test"))),
                }
            }
            EvalData::Idx {
                images,
                labels,
                transpose,
            } => data::load_idx_with(images, labels, *transpose),
            EvalData::Csv { path, label_column } => data::load_csv(path, label_column, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub checkpoint: String,
    pub samples: usize,
    pub score: f64,
    pub loss: f64,
    pub params: ParamCount,
    pub batch_size: usize,
    pub inputs_per_second: f64,
}

/// Accepts a checkpoint file path or an id found under `run_root`.
pub fn resolve_checkpoint(reference: &str, run_root: &Path) -> Result<PathBuf, Error> {
    let p = Path::new(reference);
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    find_checkpoint(run_root, reference)
}

pub fn eval(
    checkpoint: &Path,
    ds: &Dataset,
    loss: LossKind,
    metric: ScoreMetric,
    batch_size: usize,
) -> Result<EvalResult, Error> {
    let ck = read_checkpoint(checkpoint)?;
    let t0 = Instant::now();
    let (score, l) = evaluate(&ck.network, ds, loss, metric, batch_size)?;
    let secs = t0.elapsed().as_secs_f64().max(1e-9);
    Ok(EvalResult {
        checkpoint: checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        samples: ds.len(),
        score,
        loss: l,
        params: ck.network.param_count(),
        batch_size,
        inputs_per_second: ds.len() as f64 / secs,
    })
}

pub fn cmd_eval(
    checkpoint: &str,
    data: &EvalData,
    loss: LossKind,
    metric: ScoreMetric,
    batch_size: usize,
    run_root: &Path,
    json: bool,
) -> i32 {
    let run = || -> Result<EvalResult, Error> {
        let path = resolve_checkpoint(checkpoint, run_root)?;
        let ds = data.load()?;
        eval(&path, &ds, loss, metric, batch_size)
    };
    match run() {
        Ok(r) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&r).expect("serializable"));
            } else {
                println!("checkpoint        {}", r.checkpoint);
                println!("samples           {}", r.samples);
                println!("score             {:.6}", r.score);
                println!("loss              {:.6}", r.loss);
                println!("neuron params     {}", r.params.neuron_params);
                println!("dendrite params   {}", r.params.dendrite_params);
                println!("inputs/second     {:.1} (batch {})", r.inputs_per_second, r.batch_size);
            }
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleSummary {
    pub cycle_index: usize,
    pub kind: CycleKind,
    pub epochs: usize,
    pub best_val_epoch: usize,
    pub best_val: f64,
    pub test_at_best_val: Option<f64>,
    /// True when validation did not move during the cycle.
    pub flat_val: bool,
}

/// Per-cycle summaries rebuilt from a run's metrics file.
pub fn inspect(run_dir: &Path) -> Result<(Vec<CycleSummary>, String), Error> {
    let records = read_metrics(&run_dir.join(METRICS_FILE))?;
    if records.is_empty() {
        return Err(Error::Metrics(format!("{} has no records", run_dir.join(METRICS_FILE).display())));
    }
    let mut out: Vec<CycleSummary> = Vec::new();
    let mut first_val = 0.0;
    for r in &records {
        match out.last_mut() {
            Some(c) if c.cycle_index == r.cycle_index => {
                c.epochs += 1;
                c.flat_val &= r.val_score == first_val;
                if r.val_score > c.best_val {
                    c.best_val = r.val_score;
                    c.best_val_epoch = r.epoch;
                    c.test_at_best_val = r.test_score;
                }
            }
            _ => {
                first_val = r.val_score;
                out.push(CycleSummary {
                    cycle_index: r.cycle_index,
                    kind: r.kind,
                    epochs: 1,
                    best_val_epoch: r.epoch,
                    best_val: r.val_score,
                    test_at_best_val: r.test_score,
                    flat_val: true,
                })
            }
        }
    }
    Ok((out, curves_csv(&records)?))
}

pub fn render_cycles(cycles: &[CycleSummary]) -> String {
    let mut s = format!(
        "{:>5} {:<8} {:>6} {:>9} {:>9} {:>9} {:>5}\n",
        "cycle", "kind", "epochs", "best-ep", "val", "test", "flat"
    );
    for c in cycles {
        let kind = match c.kind {
            CycleKind::Neuron => "neuron",
            CycleKind::Dendrite => "dendrite",
        };
        let _ = writeln!(
            s,
            "{:>5} {:<8} {:>6} {:>9} {:>9.4} {:>9} {:>5}",
            c.cycle_index,
            kind,
            c.epochs,
            c.best_val_epoch,
            c.best_val,
            c.test_at_best_val.map_or_else(|| "-".into(), |t| format!("{t:.4}")),
            if c.flat_val { "yes" } else { "no" }
        );
    }
    s
}

pub fn cmd_inspect(run_dir: &Path, csv_out: Option<&Path>) -> i32 {
    let run = || -> Result<(Vec<CycleSummary>, String), Error> {
        let (cycles, csv) = inspect(run_dir)?;
        if let Some(p) = csv_out {
            fs::write(p, &csv)?;
        }
        Ok((cycles, csv))
    };
    match run() {
        Ok((cycles, _)) => {
            print!("{}", render_cycles(&cycles));
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
