//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fail.
//!
//! The MNIST criteria run at a reduced scale by default so the suite fits in
//! a test run on one core. Set `PB_ACCEPTANCE_FULL=1` for the full protocol
//! (patience 25 on the whole 10k subset, or EMNIST Balanced when its files
//! are present under `data/emnist`).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use perforated::config::RunConfig;
use perforated::data::{gen_two_spirals, gen_xor_quadrants, split};
use perforated::dendrites::{dendrite_delta, spawn_candidates_with, train_candidates, CandidateTraining};
use perforated::grad::{finite_diff_check, finite_diff_entries, BackpropMode, FdGraph, ParamSlot};
use perforated::optim::{OptimizerConfig, Optimizer};
use perforated::orchestrator::{
    evaluate, run_experiment, AblationMode, CycleKind, CycleRecord, EpochEvent, ExperimentConfig, ExperimentSink,
    ScoreMetric, Splits,
};
use perforated::seeds::rng_for;
use perforated::store::{load_checkpoint, RunRecorder};
use perforated::synth::{add_random_dendrites, random_batch, random_spec};
use perforated::{
    Activation, CandidateConfig, Dataset, LayerKind, LayerSpec, Labels, LossKind, Network, NetworkSpec, Result, SplitSpec,
    Tensor,
};
use perforated_cli::{ablate, cmd_train, AblationSummary};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn full_scale() -> bool {
    std::env::var("PB_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn targets(net: &Network, batch: usize, seed: u64) -> (LossKind, Labels) {
    let width = net.output_shape()[0];
    if seed % 3 == 0 {
        let v = Tensor::from_fn(&[batch, width], |i| ((i as f64 + seed as f64) * 0.917).cos());
        (LossKind::Mse, Labels::Values(v))
    } else {
        (LossKind::CrossEntropySoftmax, Labels::Classes((0..batch).map(|i| (i * 7 + seed as usize) % width).collect()))
    }
}

fn describe(spec: &NetworkSpec) -> (bool, BTreeSet<String>) {
    let conv = spec.layers.iter().any(|l| matches!(l.kind, LayerKind::Conv2d { .. }));
    let acts = spec
        .layers
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. }))
        .map(|l| format!("{:?}", l.activation).to_lowercase())
        .collect();
    (conv, acts)
}

fn gradient_correctness() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let mut convs = 0;
    let mut acts = BTreeSet::new();
    for i in 0..20u64 {
        let seed = 1000 + i;
        let spec = random_spec(seed, Activation::ALL[i as usize % 4]);
        let (conv, a) = describe(&spec);
        convs += usize::from(conv);
        acts.extend(a);
        let net = Network::new(spec, seed)?;
        let x = random_batch(&net, 3, seed);
        let (loss, y) = targets(&net, 3, seed);
        worst = worst.max(finite_diff_check(&net, loss, &x, &y, false, 1e-5)?);
    }
    let pass = worst < 1e-5 && convs > 0 && convs < 20 && acts.len() == 4;
    Ok(outcome(
        pass,
        format!("20 nets ({convs} with conv, activations {acts:?}), max rel err {worst:.2e} (< 1e-5)"),
    ))
}

fn perforation_correctness() -> Result<Outcome> {
    let mut detached: f64 = 0.0;
    let mut output_full: f64 = 0.0;
    let mut output_checked = 0;
    let mut untouched = true;
    for i in 0..20u64 {
        let seed = 2000 + i;
        let mut net = Network::new(random_spec(seed, Activation::ALL[i as usize % 4]), seed)?;
        add_random_dendrites(&mut net, 1 + i as usize % 3, i % 2 == 0, seed)?;
        let x = random_batch(&net, 3, seed + 1);
        let (loss, y) = targets(&net, 3, seed);
        let d = finite_diff_entries(&net, loss, &x, &y, BackpropMode::Perforated, FdGraph::DendritesDetached, 1e-5)?;
        untouched &= !d.iter().any(|e| e.slot.is_dendrite_input_side());
        detached = d.iter().map(|e| e.rel_error()).fold(detached, f64::max);
        // Output-weight gradients against the full graph: only the last
        // hosting layer has no dendrites downstream whose inputs move with u.
        let last = *net.host_layers().last().unwrap();
        let full = finite_diff_entries(&net, loss, &x, &y, BackpropMode::Perforated, FdGraph::Full, 1e-5)?;
        for e in full.iter().filter(|e| matches!(e.slot, ParamSlot::DendriteOutput { layer, .. } if layer == last)) {
            output_checked += 1;
            output_full = output_full.max(e.rel_error());
        }
        let (out, cache) = net.forward(&x, perforated::Mode::Eval, 0)?;
        let (_, delta) = loss.evaluate(&out, &y)?;
        untouched &= perforated::grad::backprop_perforated(&net, &cache, &delta)?.dendrite_inputs_untouched();
    }
    let pass = detached < 1e-5 && output_full < 1e-5 && untouched && output_checked > 0;
    Ok(outcome(
        pass,
        format!(
            "detached-graph max rel err {detached:.2e}; output weights vs full graph {output_full:.2e} over {output_checked} weights; dendrite input slots empty: {untouched}"
        ),
    ))
}

fn covariance_oracle() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for s in 0..100u64 {
        let mut rng = rng_for(s, &[77]);
        let n = rng.gen_range(2..400);
        let scale = 10f64.powi(rng.gen_range(-2..=2));
        let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        let d: Vec<f64> = (0..n).map(|i| 0.3 * g[i] + rng.gen_range(-1.0..1.0)).collect();
        let nf = n as f64;
        let (gb, db) = (g.iter().sum::<f64>() / nf, d.iter().sum::<f64>() / nf);
        let batch_mean = (0..n).map(|i| dendrite_delta(g[i], gb, d[i], db)).sum::<f64>() / nf;
        // Pairwise form of the (1/n) covariance, free of any mean.
        let mut pair = 0.0;
        for i in 0..n {
            for j in 0..n {
                pair += (g[i] - g[j]) * (d[i] - d[j]);
            }
        }
        let oracle = pair / (2.0 * nf * nf);
        worst = worst.max((batch_mean - oracle).abs());
    }
    Ok(outcome(worst < 1e-10, format!("100 streams, max |mean delta - covariance| {worst:.2e} (< 1e-10)")))
}

fn planted_trial(seed: u64) -> Result<f64> {
    let spec = NetworkSpec {
        input_shape: vec![2],
        layers: vec![LayerSpec::dense(1, Activation::Identity)],
    };
    let mut net = Network::new(spec, seed)?;
    net.host_mut(0).unwrap().weight_mut().fill(0.0);
    net.host_mut(0).unwrap().bias_mut().unwrap().fill(0.0);
    // With a zero network and MSE, the host delta of sample i is a fixed
    // multiple of -t_i, so input 0 is the delta plus noise of 0.1.
    let n = 256;
    let mut rng = rng_for(seed, &[404]);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut x = Vec::with_capacity(2 * n);
    let mut t = Vec::with_capacity(n);
    for _ in 0..n {
        let target: f64 = normal.sample(&mut rng);
        x.push(-target + 0.1 * normal.sample(&mut rng));
        x.push(normal.sample(&mut rng));
        t.push(target);
    }
    let ds = Dataset::new("planted", Tensor::new(vec![n, 2], x)?, Labels::Values(Tensor::new(vec![n, 1], t)?), 0)?;
    let cfg = CandidateConfig {
        pool_size: 4,
        max_epochs: 50,
        patience: 50,
        activation: Some(Activation::Tanh),
        ..CandidateConfig::default()
    };
    let mut pool = spawn_candidates_with(&net, &cfg, &[0], seed)?;
    let hist = train_candidates(
        &mut pool,
        &net,
        &ds,
        &CandidateTraining {
            batch_size: 32,
            loss: LossKind::Mse,
            backprop: BackpropMode::Perforated,
            seed,
            dropout: false,
        },
    )?;
    Ok(hist.best_per_epoch().into_iter().take(50).fold(0.0, f64::max))
}

fn correlation_ascent() -> Result<Outcome> {
    let mut hits = 0;
    let mut lowest = f64::INFINITY;
    for seed in 0..50 {
        let best = planted_trial(seed)?;
        lowest = lowest.min(best);
        hits += usize::from(best > 0.9);
    }
    Ok(outcome(
        hits >= 45,
        format!("{hits}/50 trials above 0.9 within 50 epochs (need 45); lowest best score {lowest:.4}"),
    ))
}

#[derive(Clone, PartialEq, Debug)]
struct State {
    neurons: String,
    inputs: String,
    outputs: String,
}

impl State {
    fn of(net: &Network) -> Self {
        State {
            neurons: net.neuron_digest(),
            inputs: net.dendrite_input_digest(),
            outputs: net.dendrite_output_digest(),
        }
    }
}

struct Auditor {
    rec: RunRecorder,
    start: Vec<(CycleKind, State)>,
    end: Vec<(CycleKind, State, Option<String>)>,
    resumes_from_checkpoint: Vec<bool>,
}

impl ExperimentSink for Auditor {
    fn epoch(&mut self, e: &EpochEvent) -> Result<()> {
        self.rec.epoch(e)
    }

    fn cycle_start(&mut self, net: &Network, i: usize, kind: CycleKind) -> Result<()> {
        let s = State::of(net);
        if kind == CycleKind::Dendrite {
            let prior = self.end.last().and_then(|(_, _, id)| id.clone());
            let ok = match prior {
                Some(id) => State::of(&load_checkpoint(&self.rec.checkpoint_dir(), &id)?.network) == s,
                None => false,
            };
            self.resumes_from_checkpoint.push(ok);
        }
        self.start.push((kind, s));
        self.rec.cycle_start(net, i, kind)
    }

    fn cycle_end(&mut self, net: &Network, o: Option<&Optimizer>, r: &CycleRecord) -> Result<Option<String>> {
        let id = self.rec.cycle_end(net, o, r)?;
        self.end.push((r.kind, State::of(net), id.clone()));
        Ok(id)
    }
}

fn spirals_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        network: NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense(8, Activation::Tanh), LayerSpec::dense(2, Activation::Identity)],
        },
        patience: 5,
        max_cycle_epochs: 40,
        max_dendrite_rounds: 1,
        batch_size: 32,
        seed: 11,
        optimizer: OptimizerConfig {
            learning_rate: 0.02,
            ..OptimizerConfig::default()
        },
        ..ExperimentConfig::default()
    };
    c.candidates.max_epochs = 15;
    c.candidates.learning_rate = 0.05;
    c
}

fn freeze_and_reload() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let ds = gen_two_spirals(150, 0.02, 7)?;
    let (train, val, test) = split(&ds, &SplitSpec::default())?;
    let splits = Splits { train, val, test };
    let mut audit = Auditor {
        rec: RunRecorder::create(dir.path(), "audit", 11)?,
        start: Vec::new(),
        end: Vec::new(),
        resumes_from_checkpoint: Vec::new(),
    };
    run_experiment(&spirals_config(), &splits, &mut audit)?;
    let kinds: Vec<CycleKind> = audit.start.iter().map(|(k, _)| *k).collect();
    let scripted = kinds == [CycleKind::Neuron, CycleKind::Dendrite, CycleKind::Neuron];
    let mut neurons_frozen = true;
    let mut inputs_frozen = true;
    for ((kind, s), (_, e, _)) in audit.start.iter().zip(&audit.end) {
        match kind {
            CycleKind::Dendrite => neurons_frozen &= s.neurons == e.neurons,
            CycleKind::Neuron => inputs_frozen &= s.inputs == e.inputs,
        }
    }
    let resumed = !audit.resumes_from_checkpoint.is_empty() && audit.resumes_from_checkpoint.iter().all(|&b| b);
    let mut reload = true;
    for (_, s, id) in &audit.end {
        let id = id.as_deref().expect("recorder returns ids");
        reload &= State::of(&load_checkpoint(&audit.rec.checkpoint_dir(), id)?.network) == *s;
    }
    Ok(outcome(
        scripted && neurons_frozen && inputs_frozen && resumed && reload,
        format!(
            "cycles {kinds:?}; neurons fixed in dendrite cycles: {neurons_frozen}; dendrite inputs fixed in neuron cycles: {inputs_frozen}; dendrite cycle starts from prior checkpoint: {resumed}; checkpoints reload bit-exact: {reload}"
        ),
    ))
}

/// Best accuracy of any line through two data points (plus small shifts),
/// either orientation: an upper bound search for linear classifiers.
fn best_linear_accuracy(ds: &Dataset) -> f64 {
    let n = ds.len();
    let x = ds.inputs.data();
    let labels = ds.labels.classes().unwrap();
    let mut best = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let (ax, ay) = (x[2 * i], x[2 * i + 1]);
            let (nx, ny) = (-(x[2 * j + 1] - ay), x[2 * j] - ax);
            for shift in [-1e-9, 1e-9] {
                let c = nx * ax + ny * ay + shift;
                let right = (0..n).filter(|&k| (nx * x[2 * k] + ny * x[2 * k + 1] > c) == (labels[k] == 1)).count();
                best = best.max(right.max(n - right));
            }
        }
    }
    best as f64 / n as f64
}

fn xor_config(mode: AblationMode) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        network: NetworkSpec {
            input_shape: vec![2],
            layers: vec![LayerSpec::dense(1, Activation::Sigmoid)],
        },
        loss: LossKind::Mse,
        ablation_mode: mode,
        patience: 50,
        max_cycle_epochs: 500,
        max_dendrite_rounds: 3,
        batch_size: 32,
        seed: 0,
        optimizer: OptimizerConfig {
            learning_rate: 0.1,
            ..OptimizerConfig::default()
        },
        ..ExperimentConfig::default()
    };
    c.candidates = CandidateConfig {
        pool_size: 16,
        learning_rate: 0.05,
        patience: 20,
        max_epochs: 100,
        activation: Some(Activation::Tanh),
        bias: true,
        ..CandidateConfig::default()
    };
    c
}

fn cascade_capability() -> Result<Outcome> {
    let train = gen_xor_quadrants(400, 0.1, 1)?;
    let splits = Splits {
        train: train.clone(),
        val: gen_xor_quadrants(200, 0.1, 2)?,
        test: gen_xor_quadrants(200, 0.1, 3)?,
    };
    let grown = run_experiment(&xor_config(AblationMode::FullPb), &splits, &mut perforated::orchestrator::NullSink)?;
    let (acc, _) = evaluate(&grown.network, &train, LossKind::Mse, ScoreMetric::Accuracy, 400)?;
    let rounds = grown.report.cycles.iter().filter(|c| c.kind == CycleKind::Dendrite).count();
    let base = run_experiment(
        &xor_config(AblationMode::BaselineNoDendrites),
        &splits,
        &mut perforated::orchestrator::NullSink,
    )?;
    let (base_acc, _) = evaluate(&base.network, &train, LossKind::Mse, ScoreMetric::Accuracy, 400)?;
    let linear = best_linear_accuracy(&train);
    Ok(outcome(
        acc >= 0.95 && rounds <= 3 && base_acc <= 0.60,
        format!(
            "with dendrites {acc:.4} train accuracy after {rounds} rounds ({} dendrites kept); baseline {base_acc:.4} (bound 0.60; best linear separator on this set reaches {linear:.4})",
            grown.report.dendrites_added
        ),
    ))
}

struct MnistPlan {
    config: RunConfig,
    label: String,
    emnist: bool,
}

fn mnist_plan() -> Result<MnistPlan> {
    let root = workspace_root();
    let emnist = root.join("configs/emnist.toml");
    if full_scale() {
        let cfg = RunConfig::from_file(&emnist, &[])?;
        if let perforated::config::DataConfig::Idx { images, .. } = &cfg.data {
            if images.is_file() {
                return Ok(MnistPlan {
                    config: cfg,
                    label: "EMNIST Balanced, full protocol".into(),
                    emnist: true,
                });
            }
        }
        let cfg = RunConfig::from_file(&root.join("configs/mnist10k.toml"), &["patience=25".into(), "max_dendrite_rounds=10".into()])?;
        return Ok(MnistPlan {
            config: cfg,
            label: "10k MNIST subset, width-halved net, patience 25".into(),
            emnist: false,
        });
    }
    let reduced: Vec<String> = [
        "data.limit=2000",
        "patience=4",
        "max_cycle_epochs=15",
        "max_dendrite_rounds=3",
        "candidates.pool_size=2",
        "candidates.max_epochs=8",
        "candidates.patience=3",
        "test_each_epoch=false",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut cfg = RunConfig::from_file(&root.join("configs/mnist10k.toml"), &reduced)?;
    // Quarter-width net: 8 and 16 channels, 32 hidden units.
    for (l, w) in [(0usize, 8usize), (1, 16)] {
        if let LayerKind::Conv2d { out_channels, .. } = &mut cfg.experiment.network.layers[l].kind {
            *out_channels = w;
        }
    }
    if let LayerKind::Dense { out_width } = &mut cfg.experiment.network.layers[5].kind {
        *out_width = 32;
    }
    Ok(MnistPlan {
        config: cfg,
        label: "reduced: 2000-sample MNIST subset, quarter-width net, patience 4 (PB_ACCEPTANCE_FULL=1 for full)".into(),
        emnist: false,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn error_reduction(plan: &MnistPlan, summary: &AblationSummary) -> Result<Outcome> {
    let mut firsts = Vec::new();
    let mut finals = Vec::new();
    let mut reductions = Vec::new();
    for run in summary.runs.iter().filter(|r| r.mode == AblationMode::FullPb) {
        let Some(r) = run.error_reduction_pct else {
            return Ok(outcome(false, format!("full_pb seed {} failed: {:?}", run.seed, run.error)));
        };
        let report: perforated::orchestrator::ExperimentReport =
            serde_json::from_str(&fs::read_to_string(run.run_dir.join(perforated_cli::REPORT_FILE))?)?;
        firsts.push(report.first_cycle_test);
        finals.push(report.max_val_test);
        reductions.push(r);
    }
    let listed = reductions.iter().map(|r| format!("{r:.2}%")).collect::<Vec<_>>().join(", ");
    if plan.emnist {
        let first = median(&mut firsts.clone());
        let first_err = 1.0 - first;
        let final_err = 1.0 - median(&mut finals.clone());
        let pass = final_err < first_err && (first - 0.8655).abs() <= 0.02;
        return Ok(outcome(
            pass,
            format!("{}: median first-cycle test {first:.4}, median error {first_err:.4} -> {final_err:.4}; per seed {listed}", plan.label),
        ));
    }
    let positive = reductions.iter().filter(|&&r| r > 0.0).count();
    Ok(outcome(
        positive >= 2,
        format!("{}: error reduction per seed {listed}; {positive}/3 positive (need 2)", plan.label),
    ))
}

fn ablation_completeness(plan: &MnistPlan, summary: &AblationSummary, root: &Path) -> Result<Outcome> {
    let complete = summary.failed() == 0
        && summary.runs.len() == 15
        && summary.table.len() == 5
        && summary.table.iter().all(|c| c.runs == 3 && c.min.is_some() && c.q1.is_some() && c.q3.is_some() && c.max.is_some());
    // Rerun one combination and compare its report byte for byte.
    let mut cfg = plan.config.clone();
    cfg.experiment.ablation_mode = AblationMode::OnlyHead;
    cfg.experiment.seed = 1;
    let again = root.join("rerun");
    let splits = cfg.data.load(&cfg.split)?;
    let out = perforated_cli::train(&cfg, &splits, &again)?;
    let first = fs::read(root.join(cfg.experiment_id()).join(perforated_cli::REPORT_FILE))?;
    let second = fs::read(out.run_dir.join(perforated_cli::REPORT_FILE))?;
    let deterministic = first == second;
    let table = summary.render_table();
    for line in table.lines() {
        println!("        {line}");
    }
    Ok(outcome(
        complete && deterministic,
        format!(
            "{} runs, {} failed, {} table rows; rerun of only_head seed 1 byte-identical: {deterministic}",
            summary.runs.len(),
            summary.failed(),
            summary.table.len()
        ),
    ))
}

fn param_accounting() -> Result<Outcome> {
    let spec = NetworkSpec::mnist_classifier(47, 1.0);
    let mut net = Network::new(spec, 0)?;
    let base = net.param_count();
    // Independent arithmetic for the 32/64-channel conv, 9216-wide flatten,
    // 128-hidden, 47-class network.
    let layers: [(&str, usize, usize, usize); 4] = [
        ("conv 1->32 3x3", 32, 9, 1),
        ("conv 32->64 3x3", 64, 9, 32),
        ("dense 9216->128", 128, 1, 9216),
        ("dense 128->47", 47, 1, 128),
    ];
    let mut weights = 0;
    let mut biases = 0;
    let mut outputs = 0;
    let mut items = Vec::new();
    for (name, n, k, c) in layers {
        weights += n * k * c;
        biases += n;
        outputs += n;
        items.push(format!("{name}: {} weights + {n} biases", n * k * c));
    }
    for l in net.host_layers() {
        let h = net.host(l).unwrap();
        let (n, k) = (h.neurons(), h.fan_in());
        net.push_dendrite_bank(
            l,
            perforated::DendriteBank::new(
                Tensor::zeros(&[n, k]),
                Tensor::zeros(&[n, 0]),
                None,
                Tensor::zeros(&[n]),
                Activation::Relu,
                1,
            )?,
        )?;
    }
    let grown = net.param_count();
    let expected_neurons = weights + biases;
    let expected_dendrites = weights + outputs;
    let gap = (grown.dendrite_params as f64 - grown.neuron_params as f64).abs() / grown.neuron_params as f64;
    let pass = base.neuron_params == expected_neurons
        && grown.neuron_params == expected_neurons
        && grown.dendrite_params == expected_dendrites
        && gap <= 0.01;
    Ok(outcome(
        pass,
        format!(
            "neuron {} (= {weights} weights + {biases} biases), dendrite {} (= {weights} input weights + {outputs} output weights), gap {:.4}%; {}",
            grown.neuron_params,
            grown.dendrite_params,
            100.0 * gap,
            items.join("; ")
        ),
    ))
}

fn strip_clock(line: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
    let o = v.as_object_mut().unwrap();
    o.remove("timestamp_ms");
    o.remove("seconds");
    v
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let cfg = workspace_root().join("configs/spirals.toml");
    let roots = [dir.path().join("a"), dir.path().join("b")];
    for r in &roots {
        let code = cmd_train(&cfg, &["max_dendrite_rounds=2".into()], Some(r));
        if code != 0 {
            return Ok(outcome(false, format!("train exited with {code}")));
        }
    }
    let run = |r: &Path| r.join("spirals-full_pb-s0");
    let (a, b) = (run(&roots[0]), run(&roots[1]));
    let reports = fs::read(a.join("report.json"))? == fs::read(b.join("report.json"))?;
    let ca = files(&a.join("checkpoints"));
    let checkpoints = !ca.is_empty() && ca == files(&b.join("checkpoints"));
    let metrics = |d: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(d.join("metrics.jsonl")).unwrap().lines().map(strip_clock).collect()
    };
    let logs = metrics(&a) == metrics(&b);
    Ok(outcome(
        reports && checkpoints && logs,
        format!(
            "reports identical: {reports}; {} checkpoints identical: {checkpoints}; metrics identical apart from clock fields: {logs}",
            ca.len()
        ),
    ))
}

fn main() {
    println!("acceptance checks");
    let mut failures = 0;
    let mut report = |name: &str, t0: Instant, r: Result<Outcome>| {
        let secs = t0.elapsed().as_secs_f64();
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failures += usize::from(!pass);
        println!("{} {name} [{secs:.1}s]: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let t = Instant::now();
    report("1 gradient correctness", t, gradient_correctness());
    let t = Instant::now();
    report("2 perforation correctness", t, perforation_correctness());
    let t = Instant::now();
    report("3 covariance oracle", t, covariance_oracle());
    let t = Instant::now();
    report("4 correlation ascent", t, correlation_ascent());
    let t = Instant::now();
    report("5 freeze and reload", t, freeze_and_reload());
    let t = Instant::now();
    report("6 cascade capability", t, cascade_capability());

    // The ablation sweep includes the three full_pb runs that the
    // error-reduction criterion scores.
    let t = Instant::now();
    let sweep = (|| -> Result<(MnistPlan, tempfile::TempDir, AblationSummary)> {
        let plan = mnist_plan()?;
        let dir = tempfile::tempdir()?;
        let splits = plan.config.data.load(&plan.config.split)?;
        let modes = [
            AblationMode::FullPb,
            AblationMode::OnlyHead,
            AblationMode::OnlyBackbone,
            AblationMode::CcNoPerforation,
            AblationMode::GdDendrites,
        ];
        let summary = ablate(&plan.config, &splits, &modes, &[1, 2, 3], 1, dir.path())?;
        Ok((plan, dir, summary))
    })();
    let sweep_secs = t.elapsed().as_secs_f64();
    match sweep {
        Ok((plan, dir, summary)) => {
            println!("     (ablation sweep took {sweep_secs:.1}s)");
            report("7 error reduction", Instant::now(), error_reduction(&plan, &summary));
            let t = Instant::now();
            report("8 ablation completeness", t, ablation_completeness(&plan, &summary, dir.path()));
        }
        Err(e) => {
            report("7 error reduction", t, Err(e));
            report("8 ablation completeness", Instant::now(), Err(perforated::Error::Config("sweep failed".into())));
        }
    }
    let t = Instant::now();
    report("9 parameter accounting", t, param_accounting());
    let t = Instant::now();
    report("10 determinism", t, determinism());
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
