//! First-order optimizers over the parameter slots of a [`Network`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{grad_slots, param_mut, GradBuffer, ParamSlot};
use crate::network::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning-rate schedule over the epochs of one cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `gamma` every `every` epochs.
    Step { every: usize, gamma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// SGD momentum.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule: Schedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("momentum and Adam betas must lie in [0, 1)".into()));
        }
        if let Schedule::Step { every, gamma } = self.schedule {
            if every == 0 || !(gamma > 0.0) {
                return Err(Error::Config("step schedule needs every >= 1 and gamma > 0".into()));
            }
        }
        Ok(())
    }

    /// Rate in effect during `epoch` (1-based) of a cycle.
    pub fn rate_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Step { every, gamma } => self.learning_rate * gamma.powi(((epoch.max(1) - 1) / every) as i32),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Optimizer state. A fresh one is created for every neuron cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    state: HashMap<ParamSlot, SlotState>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            steps: 0,
            state: HashMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Slot states in a stable order, for checkpoints.
    pub fn state_sorted(&self) -> Vec<(ParamSlot, &SlotState)> {
        let mut v: Vec<_> = self.state.iter().map(|(k, s)| (*k, s)).collect();
        v.sort_by_key(|(k, _)| slot_key(*k));
        v
    }

    pub fn restore(config: OptimizerConfig, steps: u64, state: Vec<(ParamSlot, SlotState)>) -> Result<Self> {
        let mut o = Optimizer::new(config)?;
        o.steps = steps;
        o.state = state.into_iter().collect();
        Ok(o)
    }

    /// Applies one update with the gradients in `grads`. Input-side slots of
    /// frozen dendrites are skipped even when a gradient is present.
    pub fn step(&mut self, net: &mut Network, grads: &GradBuffer, epoch: usize) -> Result<()> {
        self.steps += 1;
        let lr = self.config.rate_at(epoch);
        let t = self.steps as i32;
        let c = self.config.clone();
        for (slot, g) in grad_slots(grads) {
            if slot.is_dendrite_input_side() && dendrite_frozen(net, slot) {
                continue;
            }
            let p = param_mut(net, slot).ok_or_else(|| Error::shape(format!("no parameter for {slot:?}")))?;
            if p.len() != g.len() {
                return Err(Error::shape(format!("gradient for {slot:?} has the wrong size")));
            }
            let p = p.data_mut();
            let g = g.data();
            match c.kind {
                OptimizerKind::Sgd if c.momentum == 0.0 => {
                    for (w, gi) in p.iter_mut().zip(g) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Sgd => {
                    let s = self.state.entry(slot).or_insert_with(|| SlotState {
                        m: vec![0.0; g.len()],
                        v: Vec::new(),
                    });
                    for ((w, gi), m) in p.iter_mut().zip(g).zip(&mut s.m) {
                        *m = c.momentum * *m + gi;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let s = self.state.entry(slot).or_insert_with(|| SlotState {
                        m: vec![0.0; g.len()],
                        v: vec![0.0; g.len()],
                    });
                    let bc1 = 1.0 - c.beta1.powi(t);
                    let bc2 = 1.0 - c.beta2.powi(t);
                    for (((w, gi), m), v) in p.iter_mut().zip(g).zip(&mut s.m).zip(&mut s.v) {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                        *w -= lr * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
                    }
                }
            }
            if p.iter().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after update of {slot:?}")));
            }
        }
        Ok(())
    }
}

fn dendrite_frozen(net: &Network, slot: ParamSlot) -> bool {
    let d = match slot {
        ParamSlot::DendriteInput { dendrite, .. }
        | ParamSlot::DendriteSibling { dendrite, .. }
        | ParamSlot::DendriteBias { dendrite, .. }
        | ParamSlot::DendriteOutput { dendrite, .. } => dendrite,
        _ => return false,
    };
    net.host(slot.layer())
        .and_then(|h| h.dendrites().get(d))
        .is_none_or(|b| b.is_frozen())
}

pub(crate) fn slot_key(s: ParamSlot) -> (usize, usize, usize) {
    match s {
        ParamSlot::Weight { layer } => (layer, 0, 0),
        ParamSlot::Bias { layer } => (layer, 1, 0),
        ParamSlot::DendriteOutput { layer, dendrite } => (layer, 2 + 4 * dendrite, 0),
        ParamSlot::DendriteInput { layer, dendrite } => (layer, 3 + 4 * dendrite, 0),
        ParamSlot::DendriteSibling { layer, dendrite } => (layer, 4 + 4 * dendrite, 0),
        ParamSlot::DendriteBias { layer, dendrite } => (layer, 5 + 4 * dendrite, 0),
    }
}
