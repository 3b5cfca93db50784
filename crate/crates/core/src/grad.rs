//! Backward passes: ordinary backpropagation, perforated backpropagation
//! (dendrite paths excluded from presynaptic deltas) and the gradient-descent
//! dendrite variant, plus a central-difference checker.

use serde::{Deserialize, Serialize};

use crate::conv;
use crate::data::Labels;
use crate::error::{Error, Result};
use crate::network::{DendriteSource, ForwardCache, HostCache, HostGeom, HostLayer, LayerCache, LayerOp, Mode, Network};
use crate::tensor::{matmul_nn, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropySoftmax,
    Mse,
}

impl LossKind {
    /// Mean loss over the batch and its gradient with respect to the
    /// network outputs (already divided by the batch size).
    pub fn evaluate(self, outputs: &Tensor, targets: &Labels) -> Result<(f64, Tensor)> {
        let b = outputs.rows();
        let o = outputs.row_len();
        if targets.len() != b {
            return Err(Error::shape(format!("{b} outputs but {} targets", targets.len())));
        }
        if b == 0 {
            return Err(Error::precondition("empty batch"));
        }
        let inv_b = 1.0 / b as f64;
        let mut delta = Tensor::zeros(outputs.shape());
        let mut loss = 0.0;
        match self {
            LossKind::CrossEntropySoftmax => {
                let classes = match targets {
                    Labels::Classes(c) => c,
                    Labels::Values(_) => {
                        return Err(Error::precondition("cross entropy needs class labels"));
                    }
                };
                for i in 0..b {
                    let y = classes[i];
                    if y >= o {
                        return Err(Error::Data(format!("class {y} out of range for {o} outputs")));
                    }
                    let row = outputs.row(i);
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let lse = m + sum.ln();
                    loss += lse - row[y];
                    let d = delta.row_mut(i);
                    for (j, v) in row.iter().enumerate() {
                        d[j] = (v - lse).exp() * inv_b;
                    }
                    d[y] -= inv_b;
                }
            }
            LossKind::Mse => {
                for i in 0..b {
                    let row = outputs.row(i);
                    let d = delta.row_mut(i);
                    for j in 0..o {
                        let t = targets.target_value(i, j, o)?;
                        let e = row[j] - t;
                        loss += e * e;
                        d[j] = 2.0 * e * inv_b;
                    }
                }
            }
        }
        let loss = loss * inv_b;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        Ok((loss, delta))
    }
}

/// How error flows around dendrites during the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackpropMode {
    /// Dendrite connections are ordinary edges: deltas flow through them and
    /// every dendrite weight receives its true gradient.
    Standard,
    /// Deltas flow only along neuron-to-neuron connections; dendrite output
    /// weights get gradients, dendrite input weights get none.
    Perforated,
    /// Perforated deltas for neurons, plus gradients for unfrozen dendrite
    /// input weights through each dendrite's own output connection.
    GdDendrites,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DendriteGrad {
    pub output: Tensor,
    pub input: Option<Tensor>,
    pub sibling: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HostGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub dendrites: Vec<DendriteGrad>,
}

/// Gradients of the mean batch loss for one backward pass.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    /// Per layer, the neuron deltas `[positions, neurons]` for host layers.
    pub deltas: Vec<Option<Tensor>>,
    pub hosts: Vec<Option<HostGrad>>,
}

impl GradBuffer {
    pub fn host(&self, layer: usize) -> Option<&HostGrad> {
        self.hosts.get(layer).and_then(|h| h.as_ref())
    }

    pub fn delta(&self, layer: usize) -> Option<&Tensor> {
        self.deltas.get(layer).and_then(|d| d.as_ref())
    }

    /// True when no dendrite input, sibling or bias slot carries a gradient.
    pub fn dendrite_inputs_untouched(&self) -> bool {
        self.hosts.iter().flatten().all(|h| {
            h.dendrites
                .iter()
                .all(|d| d.input.is_none() && d.sibling.is_none() && d.bias.is_none())
        })
    }
}

pub fn backprop_standard(net: &Network, cache: &ForwardCache, output_delta: &Tensor) -> Result<GradBuffer> {
    backprop(net, cache, output_delta, BackpropMode::Standard)
}

pub fn backprop_perforated(net: &Network, cache: &ForwardCache, output_delta: &Tensor) -> Result<GradBuffer> {
    backprop(net, cache, output_delta, BackpropMode::Perforated)
}

pub fn backprop(net: &Network, cache: &ForwardCache, output_delta: &Tensor, mode: BackpropMode) -> Result<GradBuffer> {
    let layers = net.layers();
    if cache.layers.len() != layers.len() {
        return Err(Error::shape("forward cache does not belong to this network"));
    }
    let b = cache.batch;
    let mut expected = vec![b];
    expected.extend_from_slice(net.output_shape());
    if output_delta.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "output delta {:?} does not match outputs {expected:?}",
            output_delta.shape()
        )));
    }
    let first_host = net.host_layers()[0];
    let mut deltas = vec![None; layers.len()];
    let mut hosts = vec![None; layers.len()];
    let mut grad = output_delta.data().to_vec();
    for li in (0..layers.len()).rev() {
        let need_input_grad = li > first_host;
        match (&layers[li].op, &cache.layers[li]) {
            (LayerOp::Host(h), LayerCache::Host(hc)) => {
                check_host_cache(h, hc, b, li)?;
                let (hg, delta, dx) = host_backward(h, hc, &grad, b, mode, need_input_grad);
                deltas[li] = Some(Tensor::new(vec![hc.positions, h.neurons()], delta)?);
                hosts[li] = Some(hg);
                if let Some(dx) = dx {
                    grad = dx;
                } else {
                    break;
                }
            }
            (LayerOp::Pool(g), LayerCache::Pool(arg)) => {
                grad = conv::maxpool_backward(g, &grad, arg, b);
            }
            (LayerOp::Dropout(_), LayerCache::Dropout(mask)) => {
                if let Some(m) = mask {
                    grad.iter_mut().zip(m).for_each(|(g, m)| *g *= m);
                }
            }
            (LayerOp::Flatten, LayerCache::Flatten) => {}
            _ => return Err(Error::shape(format!("cache entry for layer {li} does not match the layer"))),
        }
    }
    for d in deltas.iter().flatten() {
        d.check_finite("backward deltas")?;
    }
    Ok(GradBuffer { deltas, hosts })
}

fn check_host_cache(h: &HostLayer, hc: &HostCache, batch: usize, layer: usize) -> Result<()> {
    let p = batch * h.positions_per_sample();
    if hc.positions != p || hc.pre.len() != p * h.neurons() || hc.dendrites.len() != h.dendrites.len() {
        return Err(Error::shape(format!("cache for layer {layer} does not match network topology")));
    }
    Ok(())
}

/// Returns the layer's parameter gradients, its deltas `[p, n]`, and the
/// gradient with respect to its input (sample layout) when requested.
fn host_backward(
    h: &HostLayer,
    hc: &HostCache,
    grad_out: &[f64],
    batch: usize,
    mode: BackpropMode,
    need_input_grad: bool,
) -> (HostGrad, Vec<f64>, Option<Vec<f64>>) {
    let n = h.neurons();
    let k = h.fan_in();
    let p = hc.positions;
    let mut dz = match h.geom {
        HostGeom::Dense { .. } => grad_out.to_vec(),
        HostGeom::Conv(g) => conv::nchw_to_positions(grad_out, batch, g.positions(), n),
    };
    let act = h.activation;
    for ((d, &z), &a) in dz.iter_mut().zip(&hc.pre).zip(&hc.post) {
        *d *= act.derivative_from(z, a);
    }

    let mut gw = vec![0.0; n * k];
    matmul_tn(&dz, &hc.patches, p, n, k, &mut gw, false);
    let gb = h.bias.as_ref().map(|_| column_sums(&dz, n));

    let mut dx = need_input_grad.then(|| {
        let mut dx = vec![0.0; p * k];
        matmul_nn(&dz, h.weight.data(), p, n, k, &mut dx, false);
        dx
    });

    let nd = h.dendrites.len();
    let mut dgrads: Vec<DendriteGrad> = h
        .dendrites
        .iter()
        .zip(&hc.dendrites)
        .map(|(_, dc)| DendriteGrad {
            output: Tensor::new(vec![n], column_dot(&dz, &dc.post, n)).expect("shape"),
            input: None,
            sibling: None,
            bias: None,
        })
        .collect();

    match mode {
        BackpropMode::Perforated => {}
        BackpropMode::GdDendrites => {
            for d in 0..nd {
                let bank = &h.dendrites[d];
                if bank.is_frozen() {
                    continue;
                }
                let dc = &hc.dendrites[d];
                let u = bank.output_weights().data();
                let g = bank.activation();
                let mut dzd = vec![0.0; p * n];
                for (idx, v) in dzd.iter_mut().enumerate() {
                    let j = idx % n;
                    *v = dz[idx] * u[j] * g.derivative_from(dc.pre[idx], dc.post[idx]);
                }
                fill_dendrite_input_grads(&mut dgrads[d], bank.bias().is_some(), &dzd, hc, d, p, n, k);
            }
        }
        BackpropMode::Standard => {
            // Later generations read earlier ones, so walk newest first.
            let mut dzds: Vec<Vec<f64>> = vec![Vec::new(); nd];
            for d in (0..nd).rev() {
                let bank = &h.dendrites[d];
                let dc = &hc.dendrites[d];
                let u = bank.output_weights().data();
                let g = bank.activation();
                let mut da: Vec<f64> = (0..p * n).map(|idx| dz[idx] * u[idx % n]).collect();
                for (e, dze) in dzds.iter().enumerate().skip(d + 1) {
                    let sib = h.dendrites[e].sibling_weights().data();
                    for (idx, v) in da.iter_mut().enumerate() {
                        let j = idx % n;
                        *v += dze[idx] * sib[j * e + d];
                    }
                }
                for (idx, v) in da.iter_mut().enumerate() {
                    *v *= g.derivative_from(dc.pre[idx], dc.post[idx]);
                }
                fill_dendrite_input_grads(&mut dgrads[d], bank.bias().is_some(), &da, hc, d, p, n, k);
                if let Some(dx) = dx.as_mut() {
                    matmul_nn(&da, bank.input_weights().data(), p, n, k, dx, true);
                }
                dzds[d] = da;
            }
        }
    }

    let d_input = dx.map(|dx| match h.geom {
        HostGeom::Dense { .. } => dx,
        HostGeom::Conv(g) => conv::col2im(&g, &dx, batch),
    });
    let hg = HostGrad {
        weight: Tensor::new(vec![n, k], gw).expect("shape"),
        bias: gb.map(|v| Tensor::new(vec![n], v).expect("shape")),
        dendrites: dgrads,
    };
    (hg, dz, d_input)
}

#[allow(clippy::too_many_arguments)]
fn fill_dendrite_input_grads(
    out: &mut DendriteGrad,
    has_bias: bool,
    dzd: &[f64],
    hc: &HostCache,
    d: usize,
    p: usize,
    n: usize,
    k: usize,
) {
    let mut gv = vec![0.0; n * k];
    matmul_tn(dzd, &hc.patches, p, n, k, &mut gv, false);
    let mut gs = vec![0.0; n * d];
    for e in 0..d {
        let col = column_dot(dzd, &hc.dendrites[e].post, n);
        for j in 0..n {
            gs[j * d + e] = col[j];
        }
    }
    out.input = Some(Tensor::new(vec![n, k], gv).expect("shape"));
    out.sibling = Some(Tensor::new(vec![n, d], gs).expect("shape"));
    out.bias = has_bias.then(|| Tensor::new(vec![n], column_sums(dzd, n)).expect("shape"));
}

pub(crate) fn column_sums(m: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for row in m.chunks_exact(n) {
        for (a, v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

/// `out[j] = sum_p a[p, j] * b[p, j]`.
pub(crate) fn column_dot(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for (ra, rb) in a.chunks_exact(n).zip(b.chunks_exact(n)) {
        for j in 0..n {
            s[j] += ra[j] * rb[j];
        }
    }
    s
}

/// Identifies one parameter tensor of a network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSlot {
    Weight { layer: usize },
    Bias { layer: usize },
    DendriteOutput { layer: usize, dendrite: usize },
    DendriteInput { layer: usize, dendrite: usize },
    DendriteSibling { layer: usize, dendrite: usize },
    DendriteBias { layer: usize, dendrite: usize },
}

impl ParamSlot {
    pub fn layer(self) -> usize {
        match self {
            ParamSlot::Weight { layer }
            | ParamSlot::Bias { layer }
            | ParamSlot::DendriteOutput { layer, .. }
            | ParamSlot::DendriteInput { layer, .. }
            | ParamSlot::DendriteSibling { layer, .. }
            | ParamSlot::DendriteBias { layer, .. } => layer,
        }
    }

    pub fn is_dendrite_input_side(self) -> bool {
        matches!(
            self,
            ParamSlot::DendriteInput { .. } | ParamSlot::DendriteSibling { .. } | ParamSlot::DendriteBias { .. }
        )
    }
}

/// Every (slot, gradient) pair present in a buffer, in network order.
pub fn grad_slots(grads: &GradBuffer) -> Vec<(ParamSlot, &Tensor)> {
    let mut out = Vec::new();
    for (layer, h) in grads.hosts.iter().enumerate() {
        let Some(h) = h else { continue };
        out.push((ParamSlot::Weight { layer }, &h.weight));
        if let Some(b) = &h.bias {
            out.push((ParamSlot::Bias { layer }, b));
        }
        for (dendrite, d) in h.dendrites.iter().enumerate() {
            out.push((ParamSlot::DendriteOutput { layer, dendrite }, &d.output));
            if let Some(t) = &d.input {
                out.push((ParamSlot::DendriteInput { layer, dendrite }, t));
            }
            if let Some(t) = &d.sibling {
                out.push((ParamSlot::DendriteSibling { layer, dendrite }, t));
            }
            if let Some(t) = &d.bias {
                out.push((ParamSlot::DendriteBias { layer, dendrite }, t));
            }
        }
    }
    out
}

/// Mutable access to one parameter tensor, ignoring freeze flags. Used by
/// the optimizer (which checks freezing itself) and the finite-difference
/// checker.
pub(crate) fn param_mut(net: &mut Network, slot: ParamSlot) -> Option<&mut Tensor> {
    let h = net.host_mut(slot.layer())?;
    match slot {
        ParamSlot::Weight { .. } => Some(&mut h.weight),
        ParamSlot::Bias { .. } => h.bias.as_mut(),
        ParamSlot::DendriteOutput { dendrite, .. } => h.dendrites.get_mut(dendrite).map(|b| b.output_weights_mut()),
        ParamSlot::DendriteInput { dendrite, .. } => h.dendrites.get_mut(dendrite).map(|b| b.input_weights_raw_mut()),
        ParamSlot::DendriteSibling { dendrite, .. } => h.dendrites.get_mut(dendrite).map(|b| b.sibling_weights_raw_mut()),
        ParamSlot::DendriteBias { dendrite, .. } => h.dendrites.get_mut(dendrite).and_then(|b| b.bias_raw_mut()),
    }
}

/// One compared parameter in a finite-difference check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub slot: ParamSlot,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Gradients smaller than this are compared in absolute terms.
pub const FD_SCALE_FLOOR: f64 = 1e-4;

impl FdEntry {
    pub fn rel_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_SCALE_FLOOR)
}

/// Which graph the numeric derivative differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdGraph {
    /// The network exactly as evaluated by `forward`.
    Full,
    /// Dendrite post-activations are replaced by constants equal to their
    /// values at the unperturbed parameters.
    DendritesDetached,
}

/// Compares every gradient present in the `analytic` backward pass with a
/// central difference of the mean loss on `graph`. Dropout is disabled.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_entries(
    net: &Network,
    loss: LossKind,
    batch: &Tensor,
    targets: &Labels,
    analytic: BackpropMode,
    graph: FdGraph,
    eps: f64,
) -> Result<Vec<FdEntry>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::precondition(format!("finite-difference step must be > 0, got {eps}")));
    }
    let (out, base_cache) = net.forward(batch, Mode::Eval, 0)?;
    let (_, delta) = loss.evaluate(&out, targets)?;
    let grads = backprop(net, &base_cache, &delta, analytic)?;
    let mut work = net.clone();
    let eval = |n: &Network| -> Result<f64> {
        let source = match graph {
            FdGraph::Full => DendriteSource::Compute,
            FdGraph::DendritesDetached => DendriteSource::Frozen(&base_cache),
        };
        let (y, _) = n.forward_impl(batch, Mode::Eval, 0, source, false)?;
        let (l, _) = loss.evaluate(&y, targets)?;
        Ok(l)
    };
    let mut entries = Vec::new();
    for (slot, g) in grad_slots(&grads) {
        for i in 0..g.len() {
            let orig = param_mut(&mut work, slot).expect("slot").data()[i];
            param_mut(&mut work, slot).unwrap().data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            param_mut(&mut work, slot).unwrap().data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            param_mut(&mut work, slot).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite("finite difference".into()));
            }
            entries.push(FdEntry {
                slot,
                index: i,
                analytic: g.data()[i],
                numeric,
            });
        }
    }
    Ok(entries)
}

/// Worst relative error between analytic and central-difference gradients.
///
/// With `detach_dendrites` the analytic side is the perforated pass and the
/// numeric side differentiates the dendrite-detached graph; otherwise both
/// use the full graph and ordinary backpropagation.
pub fn finite_diff_check(
    net: &Network,
    loss: LossKind,
    batch: &Tensor,
    targets: &Labels,
    detach_dendrites: bool,
    eps: f64,
) -> Result<f64> {
    let (mode, graph) = if detach_dendrites {
        (BackpropMode::Perforated, FdGraph::DendritesDetached)
    } else {
        (BackpropMode::Standard, FdGraph::Full)
    };
    let entries = finite_diff_entries(net, loss, batch, targets, mode, graph, eps)?;
    Ok(entries.iter().map(FdEntry::rel_error).fold(0.0, f64::max))
}
