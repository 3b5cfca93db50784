//! Feed-forward networks of dense and 2-D convolutional layers whose neurons
//! may carry dendrite nodes.
//!
//! Every dendrite-hosting layer is evaluated in "position layout": a patch
//! matrix `X` of shape `[positions, fan_in]` (one row per sample for dense
//! layers, one row per sample and output location for convolutions) is
//! multiplied against the `[neurons, fan_in]` weight matrix. Dendrites of
//! the same generation across all neurons of a layer form a
//! [`DendriteBank`] whose input weights have the same shape as the host
//! weights, so each generation costs one extra matrix product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::conv::{self, ConvGeom, PoolGeom};
use crate::dendrites::{DendriteBank, DendriteNode};
use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Dense {
        out_width: usize,
    },
    Conv2d {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        size: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
}

/// One layer of a [`NetworkSpec`]. In config files a layer is a flat table
/// such as `{ type = "conv2d", out_channels = 32, kernel = 3, activation = "relu" }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
    pub bias: bool,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(rename = "type")]
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    /// Square kernel shorthand for `kernel_h` and `kernel_w`.
    #[serde(skip_serializing)]
    kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_h: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel_w: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<bool>,
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = String;

    fn try_from(r: RawLayer) -> std::result::Result<Self, String> {
        let t = r.kind.as_str();
        let need = |v: Option<usize>, name: &str| v.ok_or_else(|| format!("{t} layer needs `{name}`"));
        let host = matches!(t, "dense" | "conv2d");
        let mut extra = Vec::new();
        let mut allow = |present: bool, name: &'static str, ok: bool| {
            if present && !ok {
                extra.push(name);
            }
        };
        allow(r.out_width.is_some(), "out_width", t == "dense");
        for (present, name) in [
            (r.out_channels.is_some(), "out_channels"),
            (r.kernel.is_some(), "kernel"),
            (r.kernel_h.is_some(), "kernel_h"),
            (r.kernel_w.is_some(), "kernel_w"),
            (r.stride.is_some(), "stride"),
            (r.padding.is_some(), "padding"),
        ] {
            allow(present, name, t == "conv2d");
        }
        allow(r.size.is_some(), "size", t == "maxpool2d");
        allow(r.rate.is_some(), "rate", t == "dropout");
        allow(r.activation.is_some(), "activation", host);
        allow(r.bias.is_some(), "bias", host);
        if !extra.is_empty() {
            return Err(format!("unknown field(s) for a {t} layer: {}", extra.join(", ")));
        }
        let kind = match t {
            "dense" => LayerKind::Dense {
                out_width: need(r.out_width, "out_width")?,
            },
            "conv2d" => LayerKind::Conv2d {
                out_channels: need(r.out_channels, "out_channels")?,
                kernel_h: need(r.kernel_h.or(r.kernel), "kernel")?,
                kernel_w: need(r.kernel_w.or(r.kernel), "kernel")?,
                stride: r.stride.unwrap_or(1),
                padding: r.padding.unwrap_or(0),
            },
            "maxpool2d" => LayerKind::MaxPool2d {
                size: need(r.size, "size")?,
            },
            "dropout" => LayerKind::Dropout {
                rate: r.rate.ok_or("dropout layer needs `rate`")?,
            },
            "flatten" => LayerKind::Flatten,
            other => {
                return Err(format!(
                    "unknown layer type `{other}`, expected dense, conv2d, maxpool2d, dropout or flatten"
                ))
            }
        };
        Ok(LayerSpec {
            kind,
            activation: r.activation.unwrap_or(Activation::Identity),
            bias: r.bias.unwrap_or(host),
        })
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(l: LayerSpec) -> Self {
        let host = l.is_host();
        let mut r = RawLayer {
            activation: host.then_some(l.activation),
            bias: host.then_some(l.bias),
            ..RawLayer::default()
        };
        match l.kind {
            LayerKind::Dense { out_width } => {
                r.kind = "dense".into();
                r.out_width = Some(out_width);
            }
            LayerKind::Conv2d {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                r.kind = "conv2d".into();
                r.out_channels = Some(out_channels);
                r.kernel_h = Some(kernel_h);
                r.kernel_w = Some(kernel_w);
                r.stride = Some(stride);
                r.padding = Some(padding);
            }
            LayerKind::MaxPool2d { size } => {
                r.kind = "maxpool2d".into();
                r.size = Some(size);
            }
            LayerKind::Dropout { rate } => {
                r.kind = "dropout".into();
                r.rate = Some(rate);
            }
            LayerKind::Flatten => r.kind = "flatten".into(),
        }
        r
    }
}

impl LayerSpec {
    pub fn dense(out_width: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense { out_width },
            activation,
            bias: true,
        }
    }

    pub fn conv2d(out_channels: usize, kernel: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d {
                out_channels,
                kernel_h: kernel,
                kernel_w: kernel,
                stride: 1,
                padding: 0,
            },
            activation,
            bias: true,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2d { size },
            activation: Activation::Identity,
            bias: false,
        }
    }

    pub fn dropout(rate: f64) -> Self {
        LayerSpec {
            kind: LayerKind::Dropout { rate },
            activation: Activation::Identity,
            bias: false,
        }
    }

    pub fn flatten() -> Self {
        LayerSpec {
            kind: LayerKind::Flatten,
            activation: Activation::Identity,
            bias: false,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Dense and conv layers host neurons (and therefore dendrites).
    pub fn is_host(&self) -> bool {
        matches!(self.kind, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// The digit/letter classifier: two 3x3 conv layers, 2x2 max pool,
    /// dropout, a hidden dense layer, dropout and the class layer.
    /// `width_scale` = 1.0 gives conv widths 32/64 and a 9216-input hidden
    /// layer of 128 units; 0.5 halves every hidden width.
    pub fn mnist_classifier(classes: usize, width_scale: f64) -> Self {
        let w = |n: usize| ((n as f64 * width_scale).round() as usize).max(1);
        NetworkSpec {
            input_shape: vec![1, 28, 28],
            layers: vec![
                LayerSpec::conv2d(w(32), 3, Activation::Relu),
                LayerSpec::conv2d(w(64), 3, Activation::Relu),
                LayerSpec::maxpool(2),
                LayerSpec::dropout(0.25),
                LayerSpec::flatten(),
                LayerSpec::dense(w(128), Activation::Relu),
                LayerSpec::dropout(0.5),
                LayerSpec::dense(classes, Activation::Identity),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum HostGeom {
    Dense { in_width: usize },
    Conv(ConvGeom),
}

/// A dense or conv layer: its neurons' weights and the dendrites attached to them.
#[derive(Clone, Debug, PartialEq)]
pub struct HostLayer {
    pub(crate) geom: HostGeom,
    pub(crate) activation: Activation,
    pub(crate) weight: Tensor,
    pub(crate) bias: Option<Tensor>,
    pub(crate) dendrites: Vec<DendriteBank>,
}

impl HostLayer {
    pub fn neurons(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Input connections per neuron (excluding bias and dendrites).
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn positions_per_sample(&self) -> usize {
        match self.geom {
            HostGeom::Dense { .. } => 1,
            HostGeom::Conv(g) => g.positions(),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.geom, HostGeom::Conv(_))
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut Tensor {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    pub fn dendrites(&self) -> &[DendriteBank] {
        &self.dendrites
    }

    pub fn dendrites_mut(&mut self) -> &mut [DendriteBank] {
        &mut self.dendrites
    }

    /// Builds the `[positions, fan_in]` patch matrix from a batch in sample layout.
    pub(crate) fn patches(&self, input: &[f64], batch: usize) -> Vec<f64> {
        match self.geom {
            HostGeom::Dense { .. } => input.to_vec(),
            HostGeom::Conv(g) => conv::im2col(&g, input, batch),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum LayerOp {
    Host(HostLayer),
    Pool(PoolGeom),
    Dropout(f64),
    Flatten,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layer {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub op: LayerOp,
}

/// Per-layer parameter totals: neuron weights/biases versus dendrite weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub neuron_params: usize,
    pub dendrite_params: usize,
}

/// Itemized dendrite parameter accounting for one hosting layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerParamCount {
    pub layer: usize,
    pub neuron_weights: usize,
    pub neuron_biases: usize,
    pub dendrite_input_weights: usize,
    pub dendrite_sibling_weights: usize,
    pub dendrite_output_weights: usize,
    pub dendrite_biases: usize,
}

impl LayerParamCount {
    pub fn neuron_params(&self) -> usize {
        self.neuron_weights + self.neuron_biases
    }

    pub fn dendrite_params(&self) -> usize {
        self.dendrite_input_weights + self.dendrite_sibling_weights + self.dendrite_output_weights + self.dendrite_biases
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Layer>,
}

/// Values recorded for one dendrite generation of a host layer, `[positions, neurons]`.
#[derive(Clone, Debug, Default)]
pub struct DendriteCache {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

/// Values recorded for one host layer, all `[positions, ...]` row-major.
#[derive(Clone, Debug, Default)]
pub struct HostCache {
    /// `[positions, fan_in]` presynaptic activations seen by neurons and dendrites.
    pub patches: Vec<f64>,
    /// `[positions, neurons]` total input `in_j`.
    pub pre: Vec<f64>,
    /// `[positions, neurons]` `g(in_j)`.
    pub post: Vec<f64>,
    pub dendrites: Vec<DendriteCache>,
    pub positions: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    Host(HostCache),
    Pool(Vec<u32>),
    Dropout(Option<Vec<f64>>),
    Flatten,
    Skipped,
}

/// Everything a backward pass needs from one forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub(crate) batch: usize,
    pub(crate) mode: Mode,
    pub(crate) layers: Vec<LayerCache>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn host(&self, layer: usize) -> Option<&HostCache> {
        match self.layers.get(layer) {
            Some(LayerCache::Host(h)) => Some(h),
            _ => None,
        }
    }

    /// Dropout multipliers applied at `layer` (train mode only).
    pub fn dropout_mask(&self, layer: usize) -> Option<&[f64]> {
        match self.layers.get(layer) {
            Some(LayerCache::Dropout(Some(m))) => Some(m),
            _ => None,
        }
    }
}

/// Where dendrite post-activations come from during a forward pass.
#[derive(Clone, Copy)]
pub(crate) enum DendriteSource<'a> {
    Compute,
    /// Reuse the recorded activations, treating them as constants.
    Frozen(&'a ForwardCache),
}

impl Network {
    /// Builds a network with neuron weights and biases drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut shape = spec.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Network(format!("invalid input shape {shape:?}")));
        }
        for (i, ls) in spec.layers.iter().enumerate() {
            let in_shape = shape.clone();
            let (op, out_shape) = match ls.kind {
                LayerKind::Dense { out_width } => {
                    if shape.len() != 1 {
                        return Err(Error::Network(format!(
                            "layer {i}: dense layer needs a flat input, got {shape:?} (add a flatten layer)"
                        )));
                    }
                    if out_width == 0 {
                        return Err(Error::Network(format!("layer {i}: zero width")));
                    }
                    let k = shape[0];
                    let host = new_host(HostGeom::Dense { in_width: k }, out_width, k, ls, &mut rng);
                    (LayerOp::Host(host), vec![out_width])
                }
                LayerKind::Conv2d {
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                } => {
                    let [c, h, w]: [usize; 3] = shape.as_slice().try_into().map_err(|_| {
                        Error::Network(format!("layer {i}: conv layer needs [C,H,W] input, got {shape:?}"))
                    })?;
                    if out_channels == 0 {
                        return Err(Error::Network(format!("layer {i}: zero output channels")));
                    }
                    let g = ConvGeom::new(c, h, w, kernel_h, kernel_w, stride, padding)
                        .map_err(|e| Error::Network(format!("layer {i}: {e}")))?;
                    let host = new_host(HostGeom::Conv(g), out_channels, g.patch_len(), ls, &mut rng);
                    (LayerOp::Host(host), vec![out_channels, g.out_h, g.out_w])
                }
                LayerKind::MaxPool2d { size } => {
                    let [c, h, w]: [usize; 3] = shape.as_slice().try_into().map_err(|_| {
                        Error::Network(format!("layer {i}: maxpool needs [C,H,W] input, got {shape:?}"))
                    })?;
                    let g = PoolGeom::new(c, h, w, size).map_err(|e| Error::Network(format!("layer {i}: {e}")))?;
                    (LayerOp::Pool(g), vec![c, g.out_h, g.out_w])
                }
                LayerKind::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(Error::Network(format!("layer {i}: dropout rate {rate} not in [0, 1)")));
                    }
                    (LayerOp::Dropout(rate), shape.clone())
                }
                LayerKind::Flatten => (LayerOp::Flatten, vec![shape.iter().product()]),
            };
            shape = out_shape.clone();
            layers.push(Layer {
                in_shape,
                out_shape,
                op,
            });
        }
        if layers.is_empty() {
            return Err(Error::Network("network has no layers".into()));
        }
        Ok(Network { spec, layers })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("non-empty").out_shape
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_out_shape(&self, layer: usize) -> &[usize] {
        &self.layers[layer].out_shape
    }

    pub fn host(&self, layer: usize) -> Option<&HostLayer> {
        match self.layers.get(layer).map(|l| &l.op) {
            Some(LayerOp::Host(h)) => Some(h),
            _ => None,
        }
    }

    pub fn host_mut(&mut self, layer: usize) -> Option<&mut HostLayer> {
        match self.layers.get_mut(layer).map(|l| &mut l.op) {
            Some(LayerOp::Host(h)) => Some(h),
            _ => None,
        }
    }

    /// Indices of dense/conv layers, in order.
    pub fn host_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.host(i).is_some()).collect()
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of dendrite generations on each neuron of `layer`.
    pub fn dendrite_depth(&self, layer: usize) -> usize {
        self.host(layer).map_or(0, |h| h.dendrites.len())
    }

    pub fn total_dendrite_nodes(&self) -> usize {
        self.host_layers()
            .into_iter()
            .map(|l| {
                let h = self.host(l).unwrap();
                h.dendrites.len() * h.neurons()
            })
            .sum()
    }

    /// The ordered dendrites attached to one neuron.
    pub fn dendrites_of(&self, layer: usize, neuron: usize) -> Vec<DendriteNode> {
        match self.host(layer) {
            Some(h) if neuron < h.neurons() => h
                .dendrites
                .iter()
                .map(|bank| bank.node(layer, neuron))
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Appends a dendrite generation to `layer`. The bank must be shaped for
    /// this layer and wired to every existing generation.
    pub fn push_dendrite_bank(&mut self, layer: usize, bank: DendriteBank) -> Result<()> {
        let host = self
            .host_mut(layer)
            .ok_or_else(|| Error::Network(format!("layer {layer} cannot host dendrites")))?;
        let (n, k, d) = (host.neurons(), host.fan_in(), host.dendrites.len());
        if bank.input_weights().shape() != [n, k] || bank.sibling_weights().shape() != [n, d] || bank.output_weights().shape() != [n] {
            return Err(Error::shape(format!(
                "dendrite bank for layer {layer} must be [{n},{k}] input / [{n},{d}] sibling / [{n}] output"
            )));
        }
        host.dendrites.push(bank);
        Ok(())
    }

    /// Drops every dendrite generation born at or after `cycle`.
    pub fn remove_dendrites_from_cycle(&mut self, cycle: usize) {
        for l in self.host_layers() {
            self.host_mut(l).unwrap().dendrites.retain(|b| b.birth_cycle() < cycle);
        }
    }

    pub fn param_count(&self) -> ParamCount {
        self.param_breakdown().iter().fold(ParamCount::default(), |acc, l| ParamCount {
            neuron_params: acc.neuron_params + l.neuron_params(),
            dendrite_params: acc.dendrite_params + l.dendrite_params(),
        })
    }

    pub fn param_breakdown(&self) -> Vec<LayerParamCount> {
        self.host_layers()
            .into_iter()
            .map(|layer| {
                let h = self.host(layer).unwrap();
                let n = h.neurons();
                let mut c = LayerParamCount {
                    layer,
                    neuron_weights: h.weight.len(),
                    neuron_biases: h.bias.as_ref().map_or(0, |b| b.len()),
                    ..Default::default()
                };
                for bank in &h.dendrites {
                    c.dendrite_input_weights += bank.input_weights().len();
                    c.dendrite_sibling_weights += bank.sibling_weights().len();
                    c.dendrite_output_weights += n;
                    c.dendrite_biases += bank.bias().map_or(0, |b| b.len());
                }
                c
            })
            .collect()
    }

    /// SHA-256 over every neuron weight and bias.
    pub fn neuron_digest(&self) -> String {
        let mut h = Sha256::new();
        for l in self.host_layers() {
            let host = self.host(l).unwrap();
            hash_f64s(&mut h, host.weight.data());
            if let Some(b) = &host.bias {
                hash_f64s(&mut h, b.data());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every dendrite output weight.
    pub fn dendrite_output_digest(&self) -> String {
        let mut h = Sha256::new();
        for l in self.host_layers() {
            for bank in &self.host(l).unwrap().dendrites {
                hash_f64s(&mut h, bank.output_weights().data());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every dendrite input, sibling and bias weight.
    pub fn dendrite_input_digest(&self) -> String {
        let mut h = Sha256::new();
        for l in self.host_layers() {
            for bank in &self.host(l).unwrap().dendrites {
                hash_f64s(&mut h, bank.input_weights().data());
                hash_f64s(&mut h, bank.sibling_weights().data());
                if let Some(b) = bank.bias() {
                    hash_f64s(&mut h, b.data());
                }
            }
        }
        hex::encode(h.finalize())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != self.spec.input_shape.len() + 1 || s[1..] != self.spec.input_shape[..] {
            return Err(Error::shape(format!(
                "batch shape {s:?} does not match [batch, {:?}]",
                self.spec.input_shape
            )));
        }
        Ok(s[0])
    }

    /// Evaluates the network. `mode` = train applies dropout using a stream
    /// seeded by `rng_seed`; eval ignores the seed.
    pub fn forward(&self, batch: &Tensor, mode: Mode, rng_seed: u64) -> Result<(Tensor, ForwardCache)> {
        self.forward_impl(batch, mode, rng_seed, DendriteSource::Compute, true)
    }

    /// Eval-mode outputs without retaining a cache.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_impl(batch, Mode::Eval, 0, DendriteSource::Compute, false)
            .map(|(y, _)| y)
    }

    pub(crate) fn forward_impl(
        &self,
        batch: &Tensor,
        mode: Mode,
        rng_seed: u64,
        source: DendriteSource<'_>,
        keep: bool,
    ) -> Result<(Tensor, ForwardCache)> {
        let b = self.check_batch(batch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut cur = batch.data().to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match &layer.op {
                LayerOp::Host(h) => {
                    let frozen = match source {
                        DendriteSource::Compute => None,
                        DendriteSource::Frozen(c) => Some(c.host(li).ok_or_else(|| {
                            Error::shape(format!("override cache has no entry for layer {li}"))
                        })?),
                    };
                    let hc = host_forward(h, &cur, b, frozen)?;
                    let out = match h.geom {
                        HostGeom::Dense { .. } => hc.post.clone(),
                        HostGeom::Conv(g) => conv::positions_to_nchw(&hc.post, b, g.positions(), h.neurons()),
                    };
                    (out, if keep { LayerCache::Host(hc) } else { LayerCache::Skipped })
                }
                LayerOp::Pool(g) => {
                    let (out, arg) = conv::maxpool(g, &cur, b);
                    (out, if keep { LayerCache::Pool(arg) } else { LayerCache::Skipped })
                }
                LayerOp::Dropout(rate) => match mode {
                    Mode::Eval => (cur, LayerCache::Dropout(None)),
                    Mode::Train => {
                        let keep_scale = 1.0 / (1.0 - rate);
                        let mask: Vec<f64> = (0..cur.len())
                            .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { keep_scale })
                            .collect();
                        let out = cur.iter().zip(&mask).map(|(x, m)| x * m).collect();
                        (out, if keep { LayerCache::Dropout(Some(mask)) } else { LayerCache::Skipped })
                    }
                },
                LayerOp::Flatten => (cur, LayerCache::Flatten),
            };
            cur = next;
            caches.push(cache);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(self.output_shape());
        let out = Tensor::new(shape, cur)?;
        out.check_finite("forward output")?;
        Ok((
            out,
            ForwardCache {
                batch: b,
                mode,
                layers: caches,
            },
        ))
    }
}

fn new_host(geom: HostGeom, neurons: usize, fan_in: usize, spec: &LayerSpec, rng: &mut ChaCha8Rng) -> HostLayer {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = Tensor::from_fn(&[neurons, fan_in], |_| rng.gen_range(-bound..=bound));
    let bias = spec
        .bias
        .then(|| Tensor::from_fn(&[neurons], |_| rng.gen_range(-bound..=bound)));
    HostLayer {
        geom,
        activation: spec.activation,
        weight,
        bias,
        dendrites: Vec::new(),
    }
}

/// Computes one host layer: neurons plus every dendrite generation.
fn host_forward(h: &HostLayer, input: &[f64], batch: usize, frozen: Option<&HostCache>) -> Result<HostCache> {
    let n = h.neurons();
    let k = h.fan_in();
    let p = batch * h.positions_per_sample();
    let patches = h.patches(input, batch);
    let mut pre = vec![0.0; p * n];
    matmul_nt(&patches, h.weight.data(), p, k, n, &mut pre, false);
    if let Some(b) = &h.bias {
        add_row_bias(&mut pre, b.data());
    }
    let mut dendrites: Vec<DendriteCache> = Vec::with_capacity(h.dendrites.len());
    for (d, bank) in h.dendrites.iter().enumerate() {
        let dc = match frozen {
            Some(fc) => fc
                .dendrites
                .get(d)
                .filter(|c| c.post.len() == p * n)
                .cloned()
                .ok_or_else(|| Error::shape(format!("override cache lacks dendrite generation {d}")))?,
            None => bank_forward(bank, &patches, &dendrites, p, n, k),
        };
        let u = bank.output_weights().data();
        for (row_z, row_a) in pre.chunks_exact_mut(n).zip(dc.post.chunks_exact(n)) {
            for j in 0..n {
                row_z[j] += u[j] * row_a[j];
            }
        }
        dendrites.push(dc);
    }
    let g = h.activation;
    let post: Vec<f64> = pre.iter().map(|&z| g.apply(z)).collect();
    Ok(HostCache {
        patches,
        pre,
        post,
        dendrites,
        positions: p,
    })
}

/// Pre/post activations of one dendrite generation given the patch matrix and
/// the already evaluated earlier generations.
pub(crate) fn bank_forward(
    bank: &DendriteBank,
    patches: &[f64],
    earlier: &[DendriteCache],
    p: usize,
    n: usize,
    k: usize,
) -> DendriteCache {
    let pre = dendrite_input(
        bank.input_weights().data(),
        bank.sibling_weights().data(),
        bank.bias().map(|b| b.data()),
        patches,
        earlier,
        p,
        n,
        k,
    );
    let g = bank.activation();
    let post = pre.iter().map(|&z| g.apply(z)).collect();
    DendriteCache { pre, post }
}

/// `X V^T + sum_e S[:, e] * A_e + bias`, all `[p, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dendrite_input(
    input_weights: &[f64],
    sibling_weights: &[f64],
    bias: Option<&[f64]>,
    patches: &[f64],
    earlier: &[DendriteCache],
    p: usize,
    n: usize,
    k: usize,
) -> Vec<f64> {
    let mut pre = vec![0.0; p * n];
    matmul_nt(patches, input_weights, p, k, n, &mut pre, false);
    if let Some(b) = bias {
        add_row_bias(&mut pre, b);
    }
    let d = earlier.len();
    if d > 0 {
        debug_assert_eq!(sibling_weights.len(), n * d);
        for (e, sib) in earlier.iter().enumerate() {
            for (row_z, row_a) in pre.chunks_exact_mut(n).zip(sib.post.chunks_exact(n)) {
                for j in 0..n {
                    row_z[j] += sibling_weights[j * d + e] * row_a[j];
                }
            }
        }
    }
    pre
}

pub(crate) fn add_row_bias(m: &mut [f64], bias: &[f64]) {
    let n = bias.len();
    for row in m.chunks_exact_mut(n) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn hash_f64s(h: &mut Sha256, values: &[f64]) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}
