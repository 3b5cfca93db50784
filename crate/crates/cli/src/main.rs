use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use perforated::config::{RunConfig, RUN_ROOT_ENV};
use perforated::orchestrator::{AblationMode, ScoreMetric};
use perforated::LossKind;
use perforated_cli::{cmd_ablate, cmd_eval, cmd_inspect, cmd_train, exit, EvalData};

#[derive(Parser)]
#[command(name = "perforated", version, about = "Grow dendrites on feed-forward networks and measure what they buy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config value, e.g. `--set seed=2` or `--set optimizer.learning_rate=0.01`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory holding run directories [default: config `output_dir`, then $PB_RUN_ROOT, then ./runs]
        #[arg(long)]
        run_root: Option<PathBuf>,
    },
    /// Run every mode x seed combination and summarize error reduction.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Comma-separated ablation modes.
        #[arg(long, value_delimiter = ',', default_value = "full_pb,only_head,only_backbone,cc_no_perforation,gd_dendrites")]
        modes: Vec<AblationMode>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Experiments to run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        run_root: Option<PathBuf>,
    },
    /// Score a checkpoint and measure inference throughput.
    Eval {
        /// Checkpoint id or path to a `.ckpt` file.
        #[arg(long)]
        checkpoint: String,
        /// Take data, loss and metric from this run config.
        #[arg(long, conflicts_with_all = ["idx_images", "csv"])]
        config: Option<PathBuf>,
        /// Split of the config's data to score.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, requires = "idx_labels")]
        idx_images: Option<PathBuf>,
        #[arg(long)]
        idx_labels: Option<PathBuf>,
        #[arg(long)]
        transpose: bool,
        #[arg(long, requires = "label_column")]
        csv: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long, default_value = "accuracy")]
        metric: String,
        #[arg(long, default_value = "cross_entropy_softmax")]
        loss: String,
        #[arg(long, default_value_t = 100)]
        batch_size: usize,
        #[arg(long, env = RUN_ROOT_ENV, default_value = "runs")]
        run_root: PathBuf,
        /// Print the result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Summarize a run directory's cycles from its metrics log.
    Inspect {
        run_dir: PathBuf,
        /// Write per-epoch curves as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> Result<T, i32> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        eprintln!("error: unknown {what} `{s}`");
        exit::CONFIG
    })
}

fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Train {
            config,
            overrides,
            run_root,
        } => cmd_train(&config, &overrides, run_root.as_deref()),
        Command::Ablate {
            config,
            overrides,
            modes,
            seeds,
            jobs,
            run_root,
        } => cmd_ablate(&config, &overrides, &modes, &seeds, jobs, run_root.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            split,
            idx_images,
            idx_labels,
            transpose,
            csv,
            label_column,
            metric,
            loss,
            batch_size,
            run_root,
            json,
        } => {
            let (data, loss, metric) = if let Some(path) = config {
                let cfg = match RunConfig::from_file(&path, &[]) {
                    Ok(c) => c,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return exit::CONFIG;
                    }
                };
                (EvalData::Config { path, split }, cfg.experiment.loss, cfg.experiment.score)
            } else {
                let data = match (idx_images, idx_labels, csv, label_column) {
                    (Some(images), Some(labels), None, _) => EvalData::Idx {
                        images,
                        labels,
                        transpose,
                    },
                    (None, None, Some(path), Some(label_column)) => EvalData::Csv { path, label_column },
                    _ => {
                        eprintln!("error: give --config, --idx-images/--idx-labels or --csv/--label-column");
                        return exit::CONFIG;
                    }
                };
                let loss: LossKind = match parse_enum("loss", &loss) {
                    Ok(l) => l,
                    Err(code) => return code,
                };
                let metric: ScoreMetric = match parse_enum("metric", &metric) {
                    Ok(m) => m,
                    Err(code) => return code,
                };
                (data, loss, metric)
            };
            if batch_size == 0 {
                eprintln!("error: batch size must be >= 1");
                return exit::CONFIG;
            }
            cmd_eval(&checkpoint, &data, loss, metric, batch_size, &run_root, json)
        }
        Command::Inspect { run_dir, csv } => cmd_inspect(&run_dir, csv.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    ExitCode::from(run(cli) as u8)
}
