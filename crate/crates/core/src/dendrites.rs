//! Dendrite nodes and their cascade-correlation candidates.
//!
//! A promoted generation of dendrites for one layer is stored as a
//! [`DendriteBank`]: row `j` of each tensor belongs to neuron (or output
//! channel) `j`. Candidates are trained against the host neuron's
//! perforated delta and the best one per neuron becomes the next generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grad::{backprop, column_dot, column_sums, BackpropMode, LossKind};
use crate::network::{dendrite_input, Mode, Network};
use crate::seeds::{derive_seed, rng_for, stream};
use crate::tensor::{matmul_tn, Tensor};

/// One generation of dendrites across every neuron of a host layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DendriteBank {
    input_weights: Tensor,
    sibling_weights: Tensor,
    bias: Option<Tensor>,
    output_weights: Tensor,
    activation: Activation,
    birth_cycle: usize,
    frozen: bool,
}

impl DendriteBank {
    /// A frozen bank. `input` is `[n, k]`, `sibling` is `[n, d]` for `d`
    /// earlier generations, `bias` and `output` are `[n]`.
    pub fn new(
        input: Tensor,
        sibling: Tensor,
        bias: Option<Tensor>,
        output: Tensor,
        activation: Activation,
        birth_cycle: usize,
    ) -> Result<Self> {
        if input.rank() != 2 || sibling.rank() != 2 || output.rank() != 1 {
            return Err(Error::shape("dendrite bank needs [n,k] input, [n,d] sibling and [n] output weights"));
        }
        let n = input.rows();
        if sibling.rows() != n || output.len() != n || bias.as_ref().is_some_and(|b| b.shape() != [n]) {
            return Err(Error::shape(format!("dendrite bank tensors disagree on the neuron count {n}")));
        }
        for t in [&input, &sibling, &output].into_iter().chain(bias.as_ref()) {
            t.check_finite("dendrite weights")?;
        }
        Ok(DendriteBank {
            input_weights: input,
            sibling_weights: sibling,
            bias,
            output_weights: output,
            activation,
            birth_cycle,
            frozen: true,
        })
    }

    /// As [`DendriteBank::new`] but with input-side weights left trainable.
    pub fn new_trainable(
        input: Tensor,
        sibling: Tensor,
        bias: Option<Tensor>,
        output: Tensor,
        activation: Activation,
        birth_cycle: usize,
    ) -> Result<Self> {
        let mut b = Self::new(input, sibling, bias, output, activation, birth_cycle)?;
        b.frozen = false;
        Ok(b)
    }

    pub fn neurons(&self) -> usize {
        self.output_weights.len()
    }

    pub fn input_weights(&self) -> &Tensor {
        &self.input_weights
    }

    pub fn sibling_weights(&self) -> &Tensor {
        &self.sibling_weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn output_weights(&self) -> &Tensor {
        &self.output_weights
    }

    /// The output weights stay trainable for the bank's whole life.
    pub fn output_weights_mut(&mut self) -> &mut Tensor {
        &mut self.output_weights
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn birth_cycle(&self) -> usize {
        self.birth_cycle
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Locks the input-side weights. There is no way back.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replaces the input weights of an unfrozen bank.
    pub fn set_input_weights(&mut self, w: Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::precondition("dendrite input weights are frozen"));
        }
        if w.shape() != self.input_weights.shape() {
            return Err(Error::shape("replacement input weights have the wrong shape"));
        }
        self.input_weights = w;
        Ok(())
    }

    pub(crate) fn input_weights_raw_mut(&mut self) -> &mut Tensor {
        &mut self.input_weights
    }

    pub(crate) fn sibling_weights_raw_mut(&mut self) -> &mut Tensor {
        &mut self.sibling_weights
    }

    pub(crate) fn bias_raw_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub(crate) fn set_frozen_raw(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// The dendrite of this generation that belongs to `neuron`.
    pub fn node(&self, layer: usize, neuron: usize) -> DendriteNode {
        DendriteNode {
            host: (layer, neuron),
            input_weights: self.input_weights.row(neuron).to_vec(),
            sibling_weights: self.sibling_weights.row(neuron).to_vec(),
            bias: self.bias.as_ref().map(|b| b.data()[neuron]),
            output_weight: self.output_weights.data()[neuron],
            activation: self.activation,
            birth_cycle: self.birth_cycle,
            frozen: self.frozen,
        }
    }
}

/// A single dendrite, as seen from its host neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DendriteNode {
    /// `(layer, neuron)`.
    pub host: (usize, usize),
    pub input_weights: Vec<f64>,
    /// One weight per earlier dendrite of the same neuron, oldest first.
    pub sibling_weights: Vec<f64>,
    pub bias: Option<f64>,
    pub output_weight: f64,
    pub activation: Activation,
    pub birth_cycle: usize,
    pub frozen: bool,
}

/// Which stream sets the sign term of the candidate update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// Correlation between candidate activation and host delta.
    #[default]
    Error,
    /// Correlation between candidate activation and host post-activation.
    Output,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    #[default]
    Zero,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CandidateConfig {
    pub pool_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub min_improvement: f64,
    pub max_epochs: usize,
    /// Decay of the running means.
    pub beta: f64,
    /// Defaults to the host layer's activation.
    pub activation: Option<Activation>,
    pub bias: bool,
    pub output_init: OutputInit,
    pub sigma_source: SigmaSource,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        CandidateConfig {
            pool_size: 4,
            learning_rate: 0.01,
            patience: 5,
            min_improvement: 1e-4,
            max_epochs: 100,
            beta: 0.99,
            activation: None,
            bias: false,
            output_init: OutputInit::Zero,
            sigma_source: SigmaSource::Error,
        }
    }
}

impl CandidateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::precondition("candidate pool size must be >= 1"));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::precondition("candidate patience and max epochs must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::precondition(format!("running-average decay {} not in [0, 1)", self.beta)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::precondition("candidate learning rate must be > 0"));
        }
        if !(self.min_improvement >= 0.0) {
            return Err(Error::precondition("candidate improvement threshold must be >= 0"));
        }
        Ok(())
    }
}

/// Streaming means and co-moment of two paired streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Comoment {
    pub n: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub m2_a: f64,
    pub m2_b: f64,
    pub c_ab: f64,
}

impl Comoment {
    pub fn from_slices(a: &[f64], b: &[f64]) -> Self {
        let n = a.len() as f64;
        if a.is_empty() {
            return Comoment::default();
        }
        let mean_a = a.iter().sum::<f64>() / n;
        let mean_b = b.iter().sum::<f64>() / n;
        let mut m = Comoment {
            n,
            mean_a,
            mean_b,
            ..Default::default()
        };
        for (x, y) in a.iter().zip(b) {
            let (da, db) = (x - mean_a, y - mean_b);
            m.m2_a += da * da;
            m.m2_b += db * db;
            m.c_ab += da * db;
        }
        m
    }

    pub fn merge(&mut self, o: &Comoment) {
        if o.n == 0.0 {
            return;
        }
        if self.n == 0.0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let da = o.mean_a - self.mean_a;
        let db = o.mean_b - self.mean_b;
        let w = self.n * o.n / n;
        self.m2_a += o.m2_a + da * da * w;
        self.m2_b += o.m2_b + db * db * w;
        self.c_ab += o.c_ab + da * db * w;
        self.mean_a += da * o.n / n;
        self.mean_b += db * o.n / n;
        self.n = n;
    }

    /// |Pearson r|, or 0 when either stream is (numerically) constant.
    pub fn abs_correlation(&self) -> f64 {
        if self.n < 2.0 || degenerate(self.m2_a, self.n, self.mean_a) || degenerate(self.m2_b, self.n, self.mean_b) {
            return 0.0;
        }
        (self.c_ab / (self.m2_a.sqrt() * self.m2_b.sqrt())).abs().min(1.0)
    }
}

/// Standard deviation below rounding noise of the mean.
fn degenerate(m2: f64, n: f64, mean: f64) -> bool {
    (m2 / n).sqrt() <= 1e-12 * mean.abs().max(1e-300) || m2 <= 0.0
}

/// `(g(in_k) - g_bar) * (delta_i - delta_bar)`.
pub fn dendrite_delta(g_in_k: f64, g_bar: f64, delta_i: f64, delta_bar: f64) -> f64 {
    (g_in_k - g_bar) * (delta_i - delta_bar)
}

/// Ascent direction for one input weight of a candidate, for one sample.
pub fn dendrite_weight_grad(sigma: f64, delta_i: f64, delta_bar: f64, g_prime_in_k: f64, presyn_activation: f64) -> f64 {
    sigma * (delta_i - delta_bar) * g_prime_in_k * presyn_activation
}

/// |Pearson correlation| of activations and deltas, 0 for a constant stream.
pub fn correlation_score(activations: &[f64], deltas: &[f64]) -> Result<f64> {
    if activations.len() != deltas.len() {
        return Err(Error::shape("activation and delta streams differ in length"));
    }
    if activations.len() < 2 {
        return Err(Error::precondition("correlation needs at least 2 samples"));
    }
    Ok(Comoment::from_slices(activations, deltas).abs_correlation())
}

/// Bookkeeping for one candidate of one host neuron. The trial weights live
/// in the pool (see [`CandidatePool::trial_input_weights`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateState {
    pub layer: usize,
    pub neuron: usize,
    pub index: usize,
    /// Running mean of the candidate's activation.
    pub g_bar: f64,
    /// Running mean of the host delta.
    pub delta_bar: f64,
    /// Running mean of the second stream used for the sign (host delta or host output).
    pub sign_bar: f64,
    /// Running centered co-moment behind `sigma`.
    pub cov_bar: f64,
    pub sigma: f64,
    pub initialized: bool,
    /// Score of the most recent epoch.
    pub correlation_score: f64,
    pub best_score: f64,
    /// 1-based epoch of `best_score` (0 before any epoch).
    pub best_score_epoch: usize,
    pub stale_epochs: usize,
    #[serde(skip)]
    epoch: Comoment,
}

impl CandidateState {
    pub fn new(layer: usize, neuron: usize, index: usize) -> Self {
        CandidateState {
            layer,
            neuron,
            index,
            g_bar: 0.0,
            delta_bar: 0.0,
            sign_bar: 0.0,
            cov_bar: 0.0,
            sigma: 1.0,
            initialized: false,
            correlation_score: 0.0,
            best_score: 0.0,
            best_score_epoch: 0,
            stale_epochs: 0,
            epoch: Comoment::default(),
        }
    }

    /// Folds one batch into the running means (decay `beta`) and recomputes
    /// `sigma` from the running correlation between activation and delta.
    pub fn update_running_averages(&mut self, activations: &[f64], deltas: &[f64], beta: f64) -> Result<()> {
        if activations.is_empty() || activations.len() != deltas.len() {
            return Err(Error::precondition("running averages need a non-empty, paired batch"));
        }
        let n = activations.len() as f64;
        let sa: f64 = activations.iter().sum();
        let sd: f64 = deltas.iter().sum();
        let sad: f64 = activations.iter().zip(deltas).map(|(a, d)| a * d).sum();
        self.update_from_sums(n, sa, sd, sd, sad, beta);
        Ok(())
    }

    /// `s` is the sign stream (equal to the deltas unless the sign follows
    /// the host output), `sas` the sum of activation times sign stream.
    fn update_from_sums(&mut self, n: f64, sa: f64, sd: f64, ss: f64, sas: f64, beta: f64) {
        let (ma, md, ms) = (sa / n, sd / n, ss / n);
        if self.initialized {
            self.g_bar = beta * self.g_bar + (1.0 - beta) * ma;
            self.delta_bar = beta * self.delta_bar + (1.0 - beta) * md;
            self.sign_bar = beta * self.sign_bar + (1.0 - beta) * ms;
        } else {
            self.g_bar = ma;
            self.delta_bar = md;
            self.sign_bar = ms;
        }
        let centered = sas / n - self.g_bar * ms - self.sign_bar * ma + self.g_bar * self.sign_bar;
        self.cov_bar = if self.initialized {
            beta * self.cov_bar + (1.0 - beta) * centered
        } else {
            centered
        };
        self.initialized = true;
        self.sigma = if self.cov_bar < 0.0 { -1.0 } else { 1.0 };
    }
}

/// Free-function form of [`CandidateState::update_running_averages`].
pub fn update_running_averages(state: &mut CandidateState, activations: &[f64], deltas: &[f64], beta: f64) -> Result<()> {
    state.update_running_averages(activations, deltas, beta)
}

#[derive(Clone, Debug, PartialEq)]
struct TrialWeights {
    input: Vec<f64>,
    sibling: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl TrialWeights {
    fn copy_row_from(&mut self, other: &TrialWeights, j: usize, k: usize, d: usize) {
        self.input[j * k..(j + 1) * k].copy_from_slice(&other.input[j * k..(j + 1) * k]);
        self.sibling[j * d..(j + 1) * d].copy_from_slice(&other.sibling[j * d..(j + 1) * d]);
        if let (Some(a), Some(b)) = (self.bias.as_mut(), other.bias.as_ref()) {
            a[j] = b[j];
        }
    }
}

/// Candidates for every neuron of one host layer.
#[derive(Clone, Debug, PartialEq)]
struct CandidateLayer {
    layer: usize,
    neurons: usize,
    fan_in: usize,
    siblings: usize,
    activation: Activation,
    /// Per pool member, the `[n, ...]` trial weights of every neuron.
    current: Vec<TrialWeights>,
    best: Vec<TrialWeights>,
    /// Indexed `neuron * pool_size + candidate`.
    states: Vec<CandidateState>,
}

/// Trainable candidates for every hosting neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    config: CandidateConfig,
    seed: u64,
    layers: Vec<CandidateLayer>,
    epochs_run: usize,
}

/// Spawns `pool_size` candidates for every neuron of every dense/conv layer.
pub fn spawn_candidates(net: &Network, pool_size: usize, seed: u64) -> Result<CandidatePool> {
    let config = CandidateConfig {
        pool_size,
        ..Default::default()
    };
    spawn_candidates_with(net, &config, &net.host_layers(), seed)
}

/// Spawns candidates for the given host layers.
pub fn spawn_candidates_with(net: &Network, config: &CandidateConfig, layers: &[usize], seed: u64) -> Result<CandidatePool> {
    config.validate()?;
    if layers.is_empty() {
        return Err(Error::precondition("no dendrite-hosting layers selected"));
    }
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let h = net
            .host(l)
            .ok_or_else(|| Error::precondition(format!("layer {l} cannot host dendrites")))?;
        let (n, k, d) = (h.neurons(), h.fan_in(), h.dendrites().len());
        let bound = 1.0 / (k as f64).sqrt();
        let current: Vec<TrialWeights> = (0..config.pool_size)
            .map(|c| {
                let mut rng = rng_for(seed, &[stream::CANDIDATES, l as u64, c as u64]);
                let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-bound..=bound)).collect() };
                let input = draw(n * k);
                let sibling = draw(n * d);
                let bias = config.bias.then(|| draw(n));
                TrialWeights { input, sibling, bias }
            })
            .collect();
        let states = (0..n)
            .flat_map(|j| (0..config.pool_size).map(move |c| CandidateState::new(l, j, c)))
            .collect();
        out.push(CandidateLayer {
            layer: l,
            neurons: n,
            fan_in: k,
            siblings: d,
            activation: config.activation.unwrap_or(h.activation()),
            best: current.clone(),
            current,
            states,
        });
    }
    Ok(CandidatePool {
        config: config.clone(),
        seed,
        layers: out,
        epochs_run: 0,
    })
}

impl CandidatePool {
    pub fn config(&self) -> &CandidateConfig {
        &self.config
    }

    pub fn layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn epochs_run(&self) -> usize {
        self.epochs_run
    }

    /// Every candidate state, layer by layer, neuron-major.
    pub fn states(&self) -> impl Iterator<Item = &CandidateState> {
        self.layers.iter().flat_map(|l| l.states.iter())
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.states.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn find(&self, layer: usize) -> Option<&CandidateLayer> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn state(&self, layer: usize, neuron: usize, candidate: usize) -> Option<&CandidateState> {
        let cl = self.find(layer)?;
        (neuron < cl.neurons && candidate < self.config.pool_size)
            .then(|| &cl.states[neuron * self.config.pool_size + candidate])
    }

    pub fn trial_input_weights(&self, layer: usize, neuron: usize, candidate: usize) -> Option<&[f64]> {
        let cl = self.find(layer)?;
        let k = cl.fan_in;
        cl.current.get(candidate).filter(|_| neuron < cl.neurons).map(|w| &w.input[neuron * k..(neuron + 1) * k])
    }

    pub fn trial_sibling_weights(&self, layer: usize, neuron: usize, candidate: usize) -> Option<&[f64]> {
        let cl = self.find(layer)?;
        let d = cl.siblings;
        cl.current.get(candidate).filter(|_| neuron < cl.neurons).map(|w| &w.sibling[neuron * d..(neuron + 1) * d])
    }

    /// Scores of every candidate, in [`CandidatePool::states`] order.
    pub fn scores(&self) -> Vec<f64> {
        self.states().map(|s| s.correlation_score).collect()
    }

    /// Overrides the activation used by every candidate (e.g. for tests).
    pub fn set_activation(&mut self, act: Activation) {
        for l in &mut self.layers {
            l.activation = act;
        }
    }

    fn all_stale(&self) -> bool {
        self.states().all(|s| s.stale_epochs >= self.config.patience)
    }
}

/// How the candidate phase walks the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateTraining {
    pub batch_size: usize,
    pub loss: LossKind,
    /// Determines the host deltas: perforated unless dendrites are ordinary edges.
    pub backprop: BackpropMode,
    /// Shuffling and dropout seed.
    pub seed: u64,
    /// Evaluate the frozen network in train mode (dropout on).
    pub dropout: bool,
}

/// Scores after each candidate epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateHistory {
    /// Per epoch, every candidate's score in pool order.
    pub epochs: Vec<Vec<f64>>,
}

impl CandidateHistory {
    pub fn best_per_epoch(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.iter().copied().fold(0.0, f64::max))
            .collect()
    }
}

/// Runs cascade-correlation ascent on every candidate until none has
/// improved for `patience` epochs (or `max_epochs` is reached). The network
/// is only read.
pub fn train_candidates(pool: &mut CandidatePool, net: &Network, data: &Dataset, opts: &CandidateTraining) -> Result<CandidateHistory> {
    if data.is_empty() {
        return Err(Error::Data("candidate training needs a non-empty dataset".into()));
    }
    for cl in &pool.layers {
        let h = net
            .host(cl.layer)
            .ok_or_else(|| Error::precondition(format!("pool layer {} is not a host layer", cl.layer)))?;
        if h.neurons() != cl.neurons || h.fan_in() != cl.fan_in || h.dendrites().len() != cl.siblings {
            return Err(Error::precondition("candidate pool does not match the network"));
        }
    }
    let cfg = pool.config.clone();
    let mut history = CandidateHistory::default();
    let mode = if opts.dropout { Mode::Train } else { Mode::Eval };
    for epoch in (pool.epochs_run + 1)..=(pool.epochs_run + cfg.max_epochs) {
        let order = crate::data::batches(data.len(), opts.batch_size, Some(opts.seed), epoch as u64)?;
        for (bi, idx) in order.iter().enumerate() {
            let (x, y) = data.batch(idx);
            let (out, cache) = net.forward(&x, mode, derive_seed(opts.seed, &[stream::DROPOUT, epoch as u64, bi as u64]))?;
            let (_, delta) = opts.loss.evaluate(&out, &y)?;
            let grads = backprop(net, &cache, &delta, opts.backprop)?;
            let b = idx.len() as f64;
            for cl in &mut pool.layers {
                let hc = cache.host(cl.layer).expect("host cache");
                let host_delta: Vec<f64> = grads
                    .delta(cl.layer)
                    .expect("host delta")
                    .data()
                    .iter()
                    .map(|d| d * b)
                    .collect();
                let sign_stream = match cfg.sigma_source {
                    SigmaSource::Error => None,
                    SigmaSource::Output => Some(hc.post.as_slice()),
                };
                step_layer(cl, &cfg, &hc.patches, &hc.dendrites, hc.positions, &host_delta, sign_stream)?;
            }
        }
        for cl in &mut pool.layers {
            let pool_size = cfg.pool_size;
            let (k, d) = (cl.fan_in, cl.siblings);
            for (si, s) in cl.states.iter_mut().enumerate() {
                s.correlation_score = s.epoch.abs_correlation();
                s.epoch = Comoment::default();
                if s.best_score_epoch == 0 || s.correlation_score > s.best_score + cfg.min_improvement {
                    s.best_score = s.correlation_score;
                    s.best_score_epoch = epoch;
                    s.stale_epochs = 0;
                    let (j, c) = (si / pool_size, si % pool_size);
                    let (cur, best) = (&cl.current[c], &mut cl.best[c]);
                    best.copy_row_from(cur, j, k, d);
                } else {
                    s.stale_epochs += 1;
                }
            }
        }
        pool.epochs_run = epoch;
        history.epochs.push(pool.scores());
        if pool.all_stale() {
            break;
        }
    }
    Ok(history)
}

/// One ascent step for every candidate of a layer on one batch.
fn step_layer(
    cl: &mut CandidateLayer,
    cfg: &CandidateConfig,
    patches: &[f64],
    earlier: &[crate::network::DendriteCache],
    p: usize,
    delta: &[f64],
    sign_stream: Option<&[f64]>,
) -> Result<()> {
    let (n, k, d) = (cl.neurons, cl.fan_in, cl.siblings);
    let pool_size = cfg.pool_size;
    let g = cl.activation;
    let sd = column_sums(delta, n);
    let ss = sign_stream.map_or_else(|| sd.clone(), |s| column_sums(s, n));
    let sign = sign_stream.unwrap_or(delta);
    for c in 0..pool_size {
        let w = &mut cl.current[c];
        let pre = dendrite_input(&w.input, &w.sibling, w.bias.as_deref(), patches, earlier, p, n, k);
        let post: Vec<f64> = pre.iter().map(|&z| g.apply(z)).collect();
        if post.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("candidate activation".into()));
        }
        let sa = column_sums(&post, n);
        let sas = column_dot(&post, sign, n);

        // Epoch co-moments, one column per neuron.
        let mut batch_m = vec![Comoment::default(); n];
        for j in 0..n {
            let m = &mut batch_m[j];
            m.n = p as f64;
            m.mean_a = sa[j] / p as f64;
            m.mean_b = sd[j] / p as f64;
        }
        for (ra, rd) in post.chunks_exact(n).zip(delta.chunks_exact(n)) {
            for j in 0..n {
                let m = &mut batch_m[j];
                let (da, dd) = (ra[j] - m.mean_a, rd[j] - m.mean_b);
                m.m2_a += da * da;
                m.m2_b += dd * dd;
                m.c_ab += da * dd;
            }
        }

        let mut sigma = vec![0.0; n];
        let mut dbar = vec![0.0; n];
        for j in 0..n {
            let s = &mut cl.states[j * pool_size + c];
            s.update_from_sums(p as f64, sa[j], sd[j], ss[j], sas[j], cfg.beta);
            s.epoch.merge(&batch_m[j]);
            sigma[j] = s.sigma;
            dbar[j] = s.delta_bar;
        }

        let mut coef = vec![0.0; p * n];
        for (idx, v) in coef.iter_mut().enumerate() {
            let j = idx % n;
            *v = dendrite_weight_grad(sigma[j], delta[idx], dbar[j], g.derivative_from(pre[idx], post[idx]), 1.0);
        }
        let scale = cfg.learning_rate / p as f64;
        let mut gv = vec![0.0; n * k];
        matmul_tn(&coef, patches, p, n, k, &mut gv, false);
        for (wv, gv) in w.input.iter_mut().zip(&gv) {
            *wv += scale * gv;
        }
        for e in 0..d {
            let gs = column_dot(&coef, &earlier[e].post, n);
            for j in 0..n {
                w.sibling[j * d + e] += scale * gs[j];
            }
        }
        if let Some(b) = w.bias.as_mut() {
            for (bv, gb) in b.iter_mut().zip(column_sums(&coef, n)) {
                *bv += scale * gb;
            }
        }
    }
    Ok(())
}

/// The candidate promoted for one neuron.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub layer: usize,
    pub neuron: usize,
    pub candidate: usize,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromotionReport {
    pub promotions: Vec<Promotion>,
}

impl PromotionReport {
    pub fn mean_score(&self) -> f64 {
        if self.promotions.is_empty() {
            return 0.0;
        }
        self.promotions.iter().map(|p| p.score).sum::<f64>() / self.promotions.len() as f64
    }
}

/// Index of the largest score, ties to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Turns each neuron's best-scoring candidate (using the weights from its
/// best epoch) into a frozen dendrite of generation `birth_cycle`.
pub fn promote_best(pool: CandidatePool, net: &mut Network, birth_cycle: usize) -> Result<PromotionReport> {
    promote(pool, net, birth_cycle, |states, _| {
        let scores: Vec<f64> = states.iter().map(|s| s.best_score).collect();
        argmax_first(&scores)
    }, true)
}

/// Promotes one untrained candidate per neuron, chosen at random, leaving
/// its input-side weights trainable by gradient descent.
pub fn promote_random(pool: CandidatePool, net: &mut Network, birth_cycle: usize) -> Result<PromotionReport> {
    let mut rng = rng_for(pool.seed, &[stream::CANDIDATES, u64::MAX]);
    let size = pool.config.pool_size;
    promote(pool, net, birth_cycle, |_, _| rng.gen_range(0..size), false)
}

fn promote(
    pool: CandidatePool,
    net: &mut Network,
    birth_cycle: usize,
    mut choose: impl FnMut(&[CandidateState], usize) -> usize,
    frozen: bool,
) -> Result<PromotionReport> {
    let mut report = PromotionReport::default();
    let ps = pool.config.pool_size;
    for cl in pool.layers {
        let (n, k, d) = (cl.neurons, cl.fan_in, cl.siblings);
        let mut input = Vec::with_capacity(n * k);
        let mut sibling = Vec::with_capacity(n * d);
        let mut bias = pool.config.bias.then(|| Vec::with_capacity(n));
        for j in 0..n {
            let states = &cl.states[j * ps..(j + 1) * ps];
            let c = choose(states, j);
            // Untrained candidates have no best snapshot beyond their initial weights.
            let w = &cl.best[c];
            input.extend_from_slice(&w.input[j * k..(j + 1) * k]);
            sibling.extend_from_slice(&w.sibling[j * d..(j + 1) * d]);
            if let (Some(b), Some(wb)) = (bias.as_mut(), w.bias.as_ref()) {
                b.push(wb[j]);
            }
            report.promotions.push(Promotion {
                layer: cl.layer,
                neuron: j,
                candidate: c,
                score: states[c].best_score,
            });
        }
        let output = match pool.config.output_init {
            OutputInit::Zero => vec![0.0; n],
            OutputInit::Random => {
                let bound = 1.0 / ((k + d) as f64).sqrt();
                let mut rng = rng_for(pool.seed, &[stream::OUTPUT_INIT, cl.layer as u64]);
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        let mut bank = DendriteBank::new(
            Tensor::new(vec![n, k], input)?,
            Tensor::new(vec![n, d], sibling)?,
            bias.map(|b| Tensor::new(vec![n], b)).transpose()?,
            Tensor::new(vec![n], output)?,
            cl.activation,
            birth_cycle,
        )?;
        bank.set_frozen_raw(frozen);
        net.push_dendrite_bank(cl.layer, bank)?;
    }
    Ok(report)
}
