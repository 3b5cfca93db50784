//! Alternating neuron and dendrite cycles, early stopping, experiment-level
//! stopping and scoring.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset, Labels};
use crate::dendrites::{
    promote_best, promote_random, spawn_candidates_with, train_candidates, CandidateConfig, CandidateTraining,
    PromotionReport,
};
use crate::error::{Error, Result};
use crate::grad::{backprop, BackpropMode, LossKind};
use crate::network::{Mode, Network, NetworkSpec, ParamCount};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::seeds::{derive_seed, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    FullPb,
    OnlyHead,
    OnlyBackbone,
    CcNoPerforation,
    GdDendrites,
    BaselineNoDendrites,
}

impl AblationMode {
    pub const ALL: [AblationMode; 6] = [
        AblationMode::FullPb,
        AblationMode::OnlyHead,
        AblationMode::OnlyBackbone,
        AblationMode::CcNoPerforation,
        AblationMode::GdDendrites,
        AblationMode::BaselineNoDendrites,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::FullPb => "full_pb",
            AblationMode::OnlyHead => "only_head",
            AblationMode::OnlyBackbone => "only_backbone",
            AblationMode::CcNoPerforation => "cc_no_perforation",
            AblationMode::GdDendrites => "gd_dendrites",
            AblationMode::BaselineNoDendrites => "baseline_no_dendrites",
        }
    }

    pub fn backprop_mode(self) -> BackpropMode {
        match self {
            AblationMode::CcNoPerforation => BackpropMode::Standard,
            AblationMode::GdDendrites => BackpropMode::GdDendrites,
            _ => BackpropMode::Perforated,
        }
    }

    /// Layers that receive dendrites under this mode.
    pub fn host_layers(self, net: &Network) -> Result<Vec<usize>> {
        let all = net.host_layers();
        let (last, rest) = all.split_last().ok_or_else(|| Error::Config("network has no dense/conv layers".into()))?;
        match self {
            AblationMode::BaselineNoDendrites => Ok(Vec::new()),
            AblationMode::OnlyHead => Ok(vec![*last]),
            AblationMode::OnlyBackbone if rest.is_empty() => {
                Err(Error::Config("only_backbone needs at least two dense/conv layers".into()))
            }
            AblationMode::OnlyBackbone => Ok(rest.to_vec()),
            _ => Ok(all),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Accuracy,
    Auc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleKind {
    Neuron,
    Dendrite,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub loss: LossKind,
    pub ablation_mode: AblationMode,
    /// Epochs without a validation improvement that end a neuron cycle.
    pub patience: usize,
    /// Run every neuron cycle for exactly this many epochs instead.
    pub fixed_cycle_epochs: Option<usize>,
    /// Hard cap on the length of a patience-driven neuron cycle.
    pub max_cycle_epochs: usize,
    pub max_dendrite_rounds: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub candidates: CandidateConfig,
    /// Defaults to `batch_size`.
    pub candidate_batch_size: Option<usize>,
    /// Evaluate the frozen network in train mode (dropout on) while candidates learn.
    pub candidate_dropout: bool,
    pub seed: u64,
    pub score: ScoreMetric,
    /// When off, test is scored only at each cycle's best-validation weights.
    pub test_each_epoch: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            network: NetworkSpec {
                input_shape: vec![2],
                layers: vec![crate::network::LayerSpec::dense(2, crate::activation::Activation::Identity)],
            },
            loss: LossKind::CrossEntropySoftmax,
            ablation_mode: AblationMode::FullPb,
            patience: 25,
            fixed_cycle_epochs: None,
            max_cycle_epochs: 1000,
            max_dendrite_rounds: 10,
            batch_size: 64,
            eval_batch_size: 1000,
            optimizer: OptimizerConfig::default(),
            candidates: CandidateConfig::default(),
            candidate_batch_size: None,
            candidate_dropout: true,
            seed: 0,
            score: ScoreMetric::Accuracy,
            test_each_epoch: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.fixed_cycle_epochs == Some(0) || self.max_cycle_epochs == 0 {
            return Err(Error::Config("cycle length must be >= 1 epoch".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 || self.candidate_batch_size == Some(0) {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.candidates.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Training, validation and test data of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    fn check(&self) -> Result<()> {
        for (name, d) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if d.is_empty() {
                return Err(Error::Data(format!("{name} split is empty")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochScores {
    /// 1-based within the cycle.
    pub epoch: usize,
    /// Neuron cycles: running score over the epoch's training batches.
    /// Dendrite cycles: eval-mode score of the unchanged model.
    pub train: f64,
    pub val: f64,
    pub test: Option<f64>,
    /// Mean training loss (neuron cycles) or 0.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: usize,
    pub kind: CycleKind,
    pub epochs: Vec<EpochScores>,
    pub best_val_epoch: usize,
    /// Eval-mode training score of the cycle's final model.
    pub cycle_train_score: f64,
    pub cycle_val_score: f64,
    pub cycle_test_score: f64,
    /// Validation score of the model as the cycle starts, before any update.
    pub start_val_score: f64,
    pub checkpoint_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub promotions: Option<PromotionReport>,
}

/// Per-epoch event handed to an [`ExperimentSink`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvent {
    pub cycle_index: usize,
    pub kind: CycleKind,
    pub scores: EpochScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<f64>>,
    pub seconds: f64,
}

/// Receives progress from a running experiment: metrics, checkpoints and
/// hooks for invariant checks.
pub trait ExperimentSink {
    fn epoch(&mut self, _event: &EpochEvent) -> Result<()> {
        Ok(())
    }

    fn cycle_start(&mut self, _net: &Network, _cycle_index: usize, _kind: CycleKind) -> Result<()> {
        Ok(())
    }

    /// Called with the cycle's final (best-validation) model and, for neuron
    /// cycles, the optimizer state at that epoch. Returns the checkpoint id,
    /// if one was written.
    fn cycle_end(&mut self, _net: &Network, _optimizer: Option<&Optimizer>, _record: &CycleRecord) -> Result<Option<String>> {
        Ok(None)
    }
}

pub struct NullSink;

impl ExperimentSink for NullSink {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub ablation_mode: AblationMode,
    pub seed: u64,
    pub cycles: Vec<CycleRecord>,
    pub first_cycle_test: f64,
    pub max_val_test: f64,
    pub error_reduction_pct: f64,
    /// Dendrite rounds kept in the final model.
    pub dendrites_added: usize,
    /// Dendrite nodes in the final model (rounds times hosting neurons).
    pub dendrite_nodes: usize,
    pub final_params: ParamCount,
    pub final_checkpoint: Option<String>,
}

/// Wall-clock seconds per cycle; kept apart so reports stay reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub cycle_seconds: Vec<f64>,
    pub seconds_per_epoch: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub timing: Timing,
    pub network: Network,
}

/// Score of a batch of outputs against class labels.
pub fn score_outputs(outputs: &Tensor, labels: &Labels, metric: ScoreMetric) -> Result<f64> {
    let classes = labels
        .classes()
        .ok_or_else(|| Error::Config("scores need class labels".into()))?;
    let n = outputs.rows();
    if n != classes.len() || n == 0 {
        return Err(Error::shape("outputs and labels disagree"));
    }
    let w = outputs.row_len();
    match metric {
        ScoreMetric::Accuracy => {
            let correct = (0..n)
                .filter(|&i| {
                    let row = outputs.row(i);
                    let pred = if w == 1 {
                        usize::from(row[0] > 0.5)
                    } else {
                        crate::dendrites::argmax_first(row)
                    };
                    pred == classes[i]
                })
                .count();
            Ok(correct as f64 / n as f64)
        }
        ScoreMetric::Auc => {
            let s: Vec<f64> = (0..n)
                .map(|i| {
                    let r = outputs.row(i);
                    match w {
                        1 => Ok(r[0]),
                        2 => Ok(r[1] - r[0]),
                        _ => Err(Error::Config("auc needs one or two outputs".into())),
                    }
                })
                .collect::<Result<_>>()?;
            Ok(auc(&s, classes))
        }
    }
}

/// Area under the ROC curve (rank statistic, ties share their average rank).
/// 0.5 when one class is absent.
pub fn auc(scores: &[f64], classes: &[usize]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &t in &idx[i..=j] {
            ranks[t] = r;
        }
        i = j + 1;
    }
    let pos = classes.iter().filter(|&&c| c == 1).count() as f64;
    let neg = classes.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return 0.5;
    }
    let rank_sum: f64 = classes.iter().zip(&ranks).filter(|(&c, _)| c == 1).map(|(_, r)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Eval-mode score and mean loss over a whole dataset.
pub fn evaluate(net: &Network, ds: &Dataset, loss: LossKind, metric: ScoreMetric, batch_size: usize) -> Result<(f64, f64)> {
    let mut outs = Vec::with_capacity(ds.len() * net.output_shape().iter().product::<usize>());
    let mut total = 0.0;
    for idx in batches(ds.len(), batch_size, None, 0)? {
        let (x, y) = ds.batch(&idx);
        let out = net.predict(&x)?;
        total += loss.evaluate(&out, &y)?.0 * idx.len() as f64;
        outs.extend_from_slice(out.data());
    }
    let mut shape = vec![ds.len()];
    shape.extend_from_slice(net.output_shape());
    let score = score_outputs(&Tensor::new(shape, outs)?, &ds.labels, metric)?;
    Ok((score, total / ds.len() as f64))
}

fn score_of(net: &Network, ds: &Dataset, cfg: &ExperimentConfig) -> Result<f64> {
    Ok(evaluate(net, ds, cfg.loss, cfg.score, cfg.eval_batch_size)?.0)
}

/// Trains neuron weights, biases and dendrite output weights (plus unfrozen
/// dendrite inputs) until validation stalls, then restores the best epoch.
pub fn run_neuron_cycle(
    net: &mut Network,
    splits: &Splits,
    cfg: &ExperimentConfig,
    cycle_index: usize,
    sink: &mut dyn ExperimentSink,
) -> Result<CycleRecord> {
    splits.check()?;
    sink.cycle_start(net, cycle_index, CycleKind::Neuron)?;
    let mode = cfg.ablation_mode.backprop_mode();
    let mut opt = Optimizer::new(cfg.optimizer.clone())?;
    let start_val_score = score_of(net, &splits.val, cfg)?;
    let mut best: Option<(Network, Optimizer, usize, f64)> = None;
    let mut epochs = Vec::new();
    let mut stale = 0;
    let limit = cfg.fixed_cycle_epochs.unwrap_or(cfg.max_cycle_epochs);
    let shuffle_seed = derive_seed(cfg.seed, &[stream::SHUFFLE, cycle_index as u64]);
    let out_width: usize = net.output_shape().iter().product();
    for epoch in 1..=limit {
        let t0 = Instant::now();
        let order = batches(splits.train.len(), cfg.batch_size, Some(shuffle_seed), epoch as u64)?;
        let mut loss_sum = 0.0;
        let mut outs = Vec::with_capacity(splits.train.len() * out_width);
        let mut seen = Vec::with_capacity(splits.train.len());
        for (bi, idx) in order.iter().enumerate() {
            let (x, y) = splits.train.batch(idx);
            let drop_seed = derive_seed(cfg.seed, &[stream::DROPOUT, cycle_index as u64, epoch as u64, bi as u64]);
            let (out, cache) = net.forward(&x, Mode::Train, drop_seed)?;
            let (l, delta) = cfg.loss.evaluate(&out, &y)?;
            loss_sum += l * idx.len() as f64;
            outs.extend_from_slice(out.data());
            seen.extend_from_slice(idx);
            let grads = backprop(net, &cache, &delta, mode)?;
            opt.step(net, &grads, epoch)?;
        }
        let train = score_outputs(
            &Tensor::new(vec![seen.len(), out_width], outs)?,
            &splits.train.labels.subset(&seen),
            cfg.score,
        )?;
        let val = score_of(net, &splits.val, cfg)?;
        let test = if cfg.test_each_epoch {
            Some(score_of(net, &splits.test, cfg)?)
        } else {
            None
        };
        let scores = EpochScores {
            epoch,
            train,
            val,
            test,
            loss: loss_sum / splits.train.len() as f64,
        };
        if best.as_ref().is_none_or(|(_, _, _, v)| val > *v) {
            best = Some((net.clone(), opt.clone(), epoch, val));
            stale = 0;
        } else {
            stale += 1;
        }
        sink.epoch(&EpochEvent {
            cycle_index,
            kind: CycleKind::Neuron,
            scores: scores.clone(),
            candidate_scores: None,
            seconds: t0.elapsed().as_secs_f64(),
        })?;
        epochs.push(scores);
        if cfg.fixed_cycle_epochs.is_none() && stale >= cfg.patience {
            break;
        }
    }
    let (best_net, best_opt, best_val_epoch, cycle_val_score) = best.expect("at least one epoch");
    *net = best_net;
    let cycle_train_score = score_of(net, &splits.train, cfg)?;
    let cycle_test_score = match epochs[best_val_epoch - 1].test {
        Some(t) => t,
        None => score_of(net, &splits.test, cfg)?,
    };
    let mut rec = CycleRecord {
        cycle_index,
        kind: CycleKind::Neuron,
        epochs,
        best_val_epoch,
        cycle_train_score,
        cycle_val_score,
        cycle_test_score,
        start_val_score,
        checkpoint_id: None,
        promotions: None,
    };
    rec.checkpoint_id = sink.cycle_end(net, Some(&best_opt), &rec)?;
    Ok(rec)
}

/// Grows one generation of dendrites on the layers selected by the
/// ablation mode. Neuron parameters are not touched.
pub fn run_dendrite_cycle(
    net: &mut Network,
    splits: &Splits,
    cfg: &ExperimentConfig,
    cycle_index: usize,
    sink: &mut dyn ExperimentSink,
) -> Result<(CycleRecord, PromotionReport)> {
    splits.check()?;
    if cfg.ablation_mode == AblationMode::BaselineNoDendrites {
        return Err(Error::Config("baseline_no_dendrites runs no dendrite cycles".into()));
    }
    sink.cycle_start(net, cycle_index, CycleKind::Dendrite)?;
    let layers = cfg.ablation_mode.host_layers(net)?;
    let t0 = Instant::now();
    let train = score_of(net, &splits.train, cfg)?;
    let val = score_of(net, &splits.val, cfg)?;
    let test = score_of(net, &splits.test, cfg)?;
    let seed = derive_seed(cfg.seed, &[stream::CANDIDATES, cycle_index as u64]);
    let mut pool = spawn_candidates_with(net, &cfg.candidates, &layers, seed)?;
    let neuron_digest = net.neuron_digest();
    let history = if cfg.ablation_mode == AblationMode::GdDendrites {
        Vec::new()
    } else {
        let opts = CandidateTraining {
            batch_size: cfg.candidate_batch_size.unwrap_or(cfg.batch_size),
            loss: cfg.loss,
            backprop: cfg.ablation_mode.backprop_mode(),
            seed,
            dropout: cfg.candidate_dropout,
        };
        train_candidates(&mut pool, net, &splits.train, &opts)?.epochs
    };
    if net.neuron_digest() != neuron_digest {
        return Err(Error::Precondition("neuron parameters changed during candidate training".into()));
    }
    let report = if cfg.ablation_mode == AblationMode::GdDendrites {
        promote_random(pool, net, cycle_index)?
    } else {
        promote_best(pool, net, cycle_index)?
    };
    let per_epoch = t0.elapsed().as_secs_f64() / history.len().max(1) as f64;
    let mut epochs = Vec::new();
    let rows: Vec<Option<Vec<f64>>> = if history.is_empty() {
        vec![None]
    } else {
        history.into_iter().map(Some).collect()
    };
    for (i, cand) in rows.into_iter().enumerate() {
        let scores = EpochScores {
            epoch: i + 1,
            train,
            val,
            test: Some(test),
            loss: 0.0,
        };
        sink.epoch(&EpochEvent {
            cycle_index,
            kind: CycleKind::Dendrite,
            scores: scores.clone(),
            candidate_scores: cand,
            seconds: per_epoch,
        })?;
        epochs.push(scores);
    }
    let mut rec = CycleRecord {
        cycle_index,
        kind: CycleKind::Dendrite,
        epochs,
        best_val_epoch: 1,
        cycle_train_score: train,
        cycle_val_score: val,
        cycle_test_score: test,
        start_val_score: val,
        checkpoint_id: None,
        promotions: Some(report.clone()),
    };
    rec.checkpoint_id = sink.cycle_end(net, None, &rec)?;
    Ok((rec, report))
}

/// Test score at the global best-validation epoch (earliest on ties) and the
/// error reduction relative to the first cycle's test score.
pub fn experiment_score(records: &[CycleRecord]) -> Result<(f64, f64)> {
    let first = records
        .iter()
        .find(|r| r.kind == CycleKind::Neuron)
        .ok_or_else(|| Error::precondition("no neuron cycle to score"))?;
    let mut best: Option<(f64, f64)> = None;
    for r in records {
        for e in &r.epochs {
            if best.is_none_or(|(v, _)| e.val > v) {
                let t = match e.test {
                    Some(t) => t,
                    None if e.epoch == r.best_val_epoch => r.cycle_test_score,
                    None => continue,
                };
                best = Some((e.val, t));
            }
        }
    }
    let max_val_test = best.map_or(first.cycle_test_score, |(_, t)| t);
    Ok((max_val_test, error_reduction_pct(first.cycle_test_score, max_val_test)))
}

/// `100 * (first_err - final_err) / first_err` with `err = 1 - score`.
pub fn error_reduction_pct(first_score: f64, final_score: f64) -> f64 {
    let first_err = 1.0 - first_score;
    if first_err <= 0.0 {
        return 0.0;
    }
    100.0 * (first_err - (1.0 - final_score)) / first_err
}

/// Runs the full alternating protocol.
pub fn run_experiment(cfg: &ExperimentConfig, splits: &Splits, sink: &mut dyn ExperimentSink) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    splits.check()?;
    let mut net = Network::new(cfg.network.clone(), derive_seed(cfg.seed, &[stream::INIT]))?;
    if net.output_shape().len() != 1 {
        return Err(Error::Config("the network must end in a flat output".into()));
    }
    // Fail fast on a bad mode/architecture pairing.
    cfg.ablation_mode.host_layers(&net)?;
    let mut cycles = Vec::new();
    let mut timing = Timing::default();
    let mut timed = |rec: CycleRecord, t0: Instant, cycles: &mut Vec<CycleRecord>| {
        let s = t0.elapsed().as_secs_f64();
        timing.cycle_seconds.push(s);
        timing.seconds_per_epoch.push(s / rec.epochs.len().max(1) as f64);
        cycles.push(rec);
    };

    let t0 = Instant::now();
    let rec = run_neuron_cycle(&mut net, splits, cfg, 0, sink)?;
    let mut best_val = rec.cycle_val_score;
    let mut final_checkpoint = rec.checkpoint_id.clone();
    timed(rec, t0, &mut cycles);
    let mut kept = net.clone();
    let mut rounds = 0;
    if cfg.ablation_mode != AblationMode::BaselineNoDendrites {
        for _ in 0..cfg.max_dendrite_rounds {
            let dendrite_cycle = cycles.len();
            let t0 = Instant::now();
            let (rec, _) = run_dendrite_cycle(&mut net, splits, cfg, dendrite_cycle, sink)?;
            timed(rec, t0, &mut cycles);
            let t0 = Instant::now();
            let rec = run_neuron_cycle(&mut net, splits, cfg, dendrite_cycle + 1, sink)?;
            let improved = rec.cycle_val_score > best_val;
            let ckpt = rec.checkpoint_id.clone();
            let val = rec.cycle_val_score;
            timed(rec, t0, &mut cycles);
            if !improved {
                net = kept.clone();
                break;
            }
            best_val = val;
            final_checkpoint = ckpt;
            kept = net.clone();
            rounds += 1;
        }
    }
    let (max_val_test, error_reduction_pct) = experiment_score(&cycles)?;
    let report = ExperimentReport {
        ablation_mode: cfg.ablation_mode,
        seed: cfg.seed,
        first_cycle_test: cycles[0].cycle_test_score,
        max_val_test,
        error_reduction_pct,
        dendrites_added: rounds,
        dendrite_nodes: net.total_dendrite_nodes(),
        final_params: net.param_count(),
        final_checkpoint,
        cycles,
    };
    Ok(ExperimentOutcome {
        report,
        timing,
        network: net,
    })
}
