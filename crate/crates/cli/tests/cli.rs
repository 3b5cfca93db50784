use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use perforated::orchestrator::ExperimentReport;
use perforated::store::read_checkpoint;
use perforated_cli::EvalResult;

const SMALL: &str = r#"
name = "tiny"
patience = 4
max_cycle_epochs = 15
max_dendrite_rounds = 2
batch_size = 16

[data]
source = "two_spirals"
n_per_class = 60
noise = 0.02
seed = 5

[split]
train = 0.6
val = 0.2
test = 0.2

[optimizer]
learning_rate = 0.02

[candidates]
pool_size = 2
max_epochs = 8
learning_rate = 0.05

[network]
input_shape = [2]

[[network.layers]]
type = "dense"
out_width = 6
activation = "tanh"

[[network.layers]]
type = "dense"
out_width = 2
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_perforated"));
    c.env_remove("PB_RUN_ROOT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn report(run_dir: &Path) -> ExperimentReport {
    serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir, SMALL);
    let root = dir.join("runs");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--run-root", root.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    root
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let root = train(dir.path(), &[]);
    let run_dir = root.join("tiny-full_pb-s0");
    for f in ["config.toml", "metrics.jsonl", "report.json", "timing.json"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let r = report(&run_dir);
    let ckpts: Vec<_> = fs::read_dir(run_dir.join("checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), r.cycles.len());
    let last = r.final_checkpoint.as_deref().expect("final checkpoint");
    assert!(run_dir.join("checkpoints").join(format!("{last}.ckpt")).is_file());
}

#[test]
fn misspelled_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("patience = 4", "patiance = 4"));
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--run-root", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("patiance"), "{}", stderr(&o));
}

#[test]
fn bad_usage_and_missing_data_have_distinct_codes() {
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace(
        "source = \"two_spirals\"\nn_per_class = 60\nnoise = 0.02\nseed = 5",
        "source = \"idx\"\nimages = \"nope-images\"\nlabels = \"nope-labels\"",
    );
    let cfg = write_config(dir.path(), &body);
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--run-root", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn overrides_switch_the_ablation_mode() {
    let dir = tempfile::tempdir().unwrap();
    let root = train(dir.path(), &["--set", "ablation_mode=baseline_no_dendrites", "--set", "seed=4"]);
    let r = report(&root.join("tiny-baseline_no_dendrites-s4"));
    assert_eq!(r.dendrites_added, 0);
    assert_eq!(r.final_params.dendrite_params, 0);
    assert_eq!(r.cycles.len(), 1);
}

#[test]
fn ablate_runs_every_mode_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let root = dir.path().join("ab");
    let o = run(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--modes",
        "full_pb,cc_no_perforation",
        "--seeds",
        "1,2",
        "--jobs",
        "2",
        "--run-root",
        root.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for id in ["tiny-full_pb-s1", "tiny-full_pb-s2", "tiny-cc_no_perforation-s1", "tiny-cc_no_perforation-s2"] {
        assert!(root.join(id).join("report.json").is_file(), "missing {id}");
    }
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("tiny-ablation.json")).unwrap()).unwrap();
    assert_eq!(summary["runs"].as_array().unwrap().len(), 4);
    assert_eq!(summary["table"].as_array().unwrap().len(), 2);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("full_pb") && stdout.contains("cc_no_perforation"));
}

#[test]
fn eval_reproduces_checkpoint_scores_at_any_batch_size() {
    let dir = tempfile::tempdir().unwrap();
    let root = train(dir.path(), &[]);
    let run_dir = root.join("tiny-full_pb-s0");
    let r = report(&run_dir);
    let id = r.final_checkpoint.clone().unwrap();
    let ck = read_checkpoint(&run_dir.join("checkpoints").join(format!("{id}.ckpt"))).unwrap();
    let cfg = run_dir.join("config.toml");
    let eval = |split: &str, batch: &str| -> EvalResult {
        let o = run(&[
            "eval",
            "--checkpoint",
            &id,
            "--config",
            cfg.to_str().unwrap(),
            "--split",
            split,
            "--batch-size",
            batch,
            "--run-root",
            root.to_str().unwrap(),
            "--json",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let val1 = eval("val", "1");
    let val100 = eval("val", "100");
    assert_eq!(val1.score, val100.score);
    assert!((val1.loss - val100.loss).abs() < 1e-12);
    assert_eq!(val1.score, ck.scores.val);
    assert_eq!(eval("test", "7").score, ck.scores.test);
    assert_eq!(val1.params, r.final_params);
}

#[test]
fn eval_of_unknown_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&[
        "eval",
        "--checkpoint",
        "0123abcd",
        "--config",
        cfg.to_str().unwrap(),
        "--run-root",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inspect_summarizes_cycles_and_writes_curves() {
    let dir = tempfile::tempdir().unwrap();
    let root = train(dir.path(), &[]);
    let run_dir = root.join("tiny-full_pb-s0");
    let csv = dir.path().join("curves.csv");
    let o = run(&["inspect", run_dir.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (cycles, _) = perforated_cli::inspect(&run_dir).unwrap();
    let r = report(&run_dir);
    assert_eq!(cycles.len(), r.cycles.len());
    for c in &cycles {
        if c.kind == perforated::orchestrator::CycleKind::Dendrite {
            assert!(c.flat_val, "dendrite cycle {} moved validation", c.cycle_index);
        }
    }
    let epochs: usize = r.cycles.iter().map(|c| c.epochs.len()).sum();
    let lines = fs::read_to_string(&csv).unwrap().lines().count();
    assert_eq!(lines, epochs + 1);
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap().lines().count();
    assert_eq!(metrics, epochs);
}

#[test]
fn inspect_rejects_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("metrics.jsonl"), "").unwrap();
    let o = run(&["inspect", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["inspect", dir.path().join("absent").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn echoed_config_reproduces_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let root = train(dir.path(), &["--set", "seed=9"]);
    let run_dir = root.join("tiny-full_pb-s9");
    let again = dir.path().join("again");
    let o = run(&[
        "train",
        "--config",
        run_dir.join("config.toml").to_str().unwrap(),
        "--run-root",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read(run_dir.join("report.json")).unwrap(),
        fs::read(again.join("tiny-full_pb-s9").join("report.json")).unwrap()
    );
}
