//! First-order optimizers.
//!
//! An [`Optimizer`] owns one slot set per parameter, matched to parameters by
//! position and name on every call to [`Optimizer::step`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Adamax,
    Adadelta,
    Rmsprop,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 5] = [
        OptimizerKind::Sgd,
        OptimizerKind::Adam,
        OptimizerKind::Adamax,
        OptimizerKind::Adadelta,
        OptimizerKind::Rmsprop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Adamax => "adamax",
            OptimizerKind::Adadelta => "adadelta",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }

    pub fn default_learning_rate(self) -> f32 {
        match self {
            OptimizerKind::Sgd => 0.01,
            OptimizerKind::Adam => 1e-3,
            OptimizerKind::Adamax => 2e-3,
            OptimizerKind::Adadelta => 1.0,
            OptimizerKind::Rmsprop => 1e-3,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown optimizer {s:?} (sgd, adam, adamax, adadelta, rmsprop)"
                ))
            })
    }
}

/// Optimizer choice and hyperparameters. Unset fields take the defaults of
/// the chosen kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            learning_rate: None,
            beta1: None,
            beta2: None,
            rho: None,
            epsilon: None,
        }
    }

    pub fn with_learning_rate(mut self, lr: f32) -> Self {
        self.learning_rate = Some(lr);
        self
    }

    pub fn learning_rate(&self) -> f32 {
        self.learning_rate.unwrap_or(self.kind.default_learning_rate())
    }

    fn hyper(&self) -> Result<Hyper> {
        let (rho, eps) = match self.kind {
            OptimizerKind::Adadelta => (0.95, 1e-6),
            OptimizerKind::Rmsprop => (0.9, 1e-7),
            _ => (0.0, 1e-7),
        };
        let h = Hyper {
            lr: self.learning_rate(),
            beta1: self.beta1.unwrap_or(0.9),
            beta2: self.beta2.unwrap_or(0.999),
            rho: self.rho.unwrap_or(rho),
            eps: self.epsilon.unwrap_or(eps),
        };
        let unit = |name: &str, v: f32| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in [0, 1)")))
            }
        };
        if !(h.lr > 0.0 && h.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", h.lr)));
        }
        if !(h.eps >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be ≥ 0", h.eps)));
        }
        unit("beta1", h.beta1)?;
        unit("beta2", h.beta2)?;
        unit("rho", h.rho)?;
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug)]
struct Hyper {
    lr: f32,
    beta1: f32,
    beta2: f32,
    rho: f32,
    eps: f32,
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    /// First moment (adam, adamax) or running mean of g² (adadelta, rmsprop).
    a: Vec<f32>,
    /// Second moment (adam), infinity norm (adamax) or running mean of Δ² (adadelta).
    b: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    hyper: Hyper,
    step: u64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig) -> Result<Self> {
        Ok(Self {
            kind: config.kind,
            hyper: config.hyper()?,
            step: 0,
            slots: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f32 {
        self.hyper.lr
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter from its accumulated gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Nothing is modified if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(name, p)| Slot {
                    name: name.clone(),
                    a: vec![0.0; p.len()],
                    b: vec![0.0; p.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(dim_err(format!(
                "optimizer tracks {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        for (slot, (name, p)) in self.slots.iter().zip(&params) {
            if slot.name != *name || slot.a.len() != p.len() {
                return Err(dim_err(format!(
                    "parameter {name} ({} values) does not match optimizer slot {} ({} values)",
                    p.len(),
                    slot.name,
                    slot.a.len()
                )));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        for (slot, (_, p)) in self.slots.iter_mut().zip(params) {
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.len()],
            };
            let w = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in w.iter_mut().zip(&g) {
                        *w -= h.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let c1 = 1.0 - h.beta1.powi(t);
                    let c2 = 1.0 - h.beta2.powi(t);
                    for (((w, g), m), v) in w.iter_mut().zip(&g).zip(&mut slot.a).zip(&mut slot.b) {
                        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                        *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                        *w -= h.lr * (*m / c1) / ((*v / c2).sqrt() + h.eps);
                    }
                }
                OptimizerKind::Adamax => {
                    let lr = h.lr / (1.0 - h.beta1.powi(t));
                    for (((w, g), m), u) in w.iter_mut().zip(&g).zip(&mut slot.a).zip(&mut slot.b) {
                        *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                        *u = (h.beta2 * *u).max(g.abs());
                        *w -= lr * *m / (*u + h.eps);
                    }
                }
                OptimizerKind::Adadelta => {
                    for (((w, g), eg), ed) in w.iter_mut().zip(&g).zip(&mut slot.a).zip(&mut slot.b) {
                        *eg = h.rho * *eg + (1.0 - h.rho) * g * g;
                        let delta = ((*ed + h.eps).sqrt() / (*eg + h.eps).sqrt()) * g;
                        *ed = h.rho * *ed + (1.0 - h.rho) * delta * delta;
                        *w -= h.lr * delta;
                    }
                }
                OptimizerKind::Rmsprop => {
                    for ((w, g), eg) in w.iter_mut().zip(&g).zip(&mut slot.a) {
                        *eg = h.rho * *eg + (1.0 - h.rho) * g * g;
                        *w -= h.lr * g / (eg.sqrt() + h.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
