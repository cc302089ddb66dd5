//! Sharpening schedules.
//!
//! Two ways of raising sharpness during training:
//!
//! - [`programmed_schedule`]: a fixed bottom-up ramp, one layer after another.
//! - [`SharpenerState`]: a loss-driven controller that alternates between
//!   sharpening and waiting, raising the current layer a little after every
//!   batch while sharpening and pausing whenever the epoch loss jumps.
//!
//! Both track sharpness per spiking layer in bottom-up order; the training
//! loop copies the values into the network.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values this close to 1 are snapped to exactly 1 so that `k` increments of
/// `1/k` finish a layer.
const SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharpenerMode {
    Waiting,
    Sharpening,
    Done,
}

impl fmt::Display for SharpenerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SharpenerMode::Waiting => "waiting",
            SharpenerMode::Sharpening => "sharpening",
            SharpenerMode::Done => "done",
        })
    }
}

fn default_rate() -> f64 {
    0.25
}
fn default_halt() -> f64 {
    0.10
}
fn default_improvement() -> f64 {
    0.01
}
fn default_patience() -> usize {
    2
}

/// Knobs of the adaptive controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Sharpness added to the current layer per sharpening epoch.
    #[serde(default = "default_rate")]
    pub rate: f64,
    /// Fractional epoch-loss increase that pauses sharpening.
    #[serde(default = "default_halt")]
    pub halt_threshold: f64,
    /// Fractional epoch-loss decrease that counts as improvement while waiting.
    #[serde(default = "default_improvement")]
    pub improvement_threshold: f64,
    /// Epochs without improvement after which waiting ends.
    #[serde(default = "default_patience")]
    pub resume_patience: usize,
    /// Epochs to train before sharpening may start; defaults to a fifth of
    /// the epoch budget.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_wait: Option<usize>,
    /// Sharpen all layers together instead of bottom-up.
    #[serde(default)]
    pub uniform: bool,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            rate: default_rate(),
            halt_threshold: default_halt(),
            improvement_threshold: default_improvement(),
            resume_patience: default_patience(),
            initial_wait: None,
            uniform: false,
        }
    }
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("sharpening rate {} outside (0, 1]", self.rate)));
        }
        if !(self.halt_threshold >= 0.0) {
            return Err(Error::Config("halt threshold must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.improvement_threshold) {
            return Err(Error::Config("improvement threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Loss-feedback sharpening controller.
///
/// A pure state machine: replaying the same sequence of
/// [`transition`](Self::transition) and [`apply_batch`](Self::apply_batch)
/// calls reproduces the same trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpenerState {
    pub mode: SharpenerMode,
    /// Index into the spiking layers, bottom-up.
    pub current_layer: usize,
    pub rate: f64,
    pub loss_history: Vec<f64>,
    pub halt_threshold: f64,
    pub resume_patience: usize,
    pub improvement_threshold: f64,
    pub uniform: bool,
    /// Epochs that must pass before the first sharpening.
    pub initial_wait: usize,
    /// Total epoch budget. When set, waiting is cut short once the remaining
    /// epochs are only just enough to finish sharpening.
    pub max_epochs: Option<usize>,
    sharpness: Vec<f64>,
    stale_epochs: usize,
}

impl SharpenerState {
    pub fn new(config: &AdaptiveConfig, spiking_layers: usize, max_epochs: Option<usize>) -> Result<Self> {
        config.validate()?;
        let initial_wait = config
            .initial_wait
            .unwrap_or_else(|| max_epochs.map(|m| m / 5).unwrap_or(0));
        Ok(Self {
            mode: if spiking_layers == 0 {
                SharpenerMode::Done
            } else {
                SharpenerMode::Waiting
            },
            current_layer: 0,
            rate: config.rate,
            loss_history: Vec::new(),
            halt_threshold: config.halt_threshold,
            resume_patience: config.resume_patience,
            improvement_threshold: config.improvement_threshold,
            uniform: config.uniform,
            initial_wait,
            max_epochs,
            sharpness: vec![0.0; spiking_layers],
            stale_epochs: 0,
        })
    }

    /// Current sharpness of every spiking layer, bottom-up.
    pub fn sharpness(&self) -> &[f64] {
        &self.sharpness
    }

    pub fn epochs_seen(&self) -> usize {
        self.loss_history.len()
    }

    /// Sharpness added to the current layer by one batch.
    pub fn batch_increment(&self, batches_per_epoch: usize) -> f64 {
        if self.mode != SharpenerMode::Sharpening || batches_per_epoch == 0 {
            return 0.0;
        }
        self.rate / batches_per_epoch as f64
    }

    /// Applies one batch worth of sharpening and returns the indices of the
    /// layers whose sharpness changed.
    pub fn apply_batch(&mut self, batches_per_epoch: usize) -> Vec<usize> {
        let delta = self.batch_increment(batches_per_epoch);
        if delta == 0.0 {
            return Vec::new();
        }
        let bump = |s: &mut f64| {
            let v = *s + delta;
            *s = if v >= 1.0 - SNAP { 1.0 } else { v };
        };
        let changed = if self.uniform {
            self.sharpness.iter_mut().for_each(bump);
            (0..self.sharpness.len()).collect()
        } else {
            bump(&mut self.sharpness[self.current_layer]);
            vec![self.current_layer]
        };
        self.advance();
        changed
    }

    fn advance(&mut self) {
        while self.current_layer < self.sharpness.len() && self.sharpness[self.current_layer] >= 1.0 {
            self.current_layer += 1;
        }
        if self.current_layer == self.sharpness.len() {
            self.mode = SharpenerMode::Done;
        }
    }

    /// Epochs of sharpening still needed to finish every layer. Bottom-up
    /// sharpening does not carry a batch's overshoot into the next layer, so
    /// each layer is rounded up on its own.
    pub fn epochs_to_finish(&self) -> usize {
        let epochs = |s: f64| ((1.0 - s) / self.rate - SNAP).ceil().max(0.0) as usize;
        if self.uniform {
            self.sharpness.iter().map(|&s| epochs(s)).max().unwrap_or(0)
        } else {
            self.sharpness.iter().map(|&s| epochs(s)).sum()
        }
    }

    /// End-of-epoch update with the epoch's mean training loss.
    pub fn transition(&mut self, epoch_loss: f64) {
        if self.mode == SharpenerMode::Done {
            return;
        }
        let previous = self.loss_history.last().copied();
        self.loss_history.push(epoch_loss);
        let seen = self.loss_history.len();
        match self.mode {
            SharpenerMode::Sharpening => {
                let jumped = match previous {
                    Some(p) => !(epoch_loss <= (1.0 + self.halt_threshold) * p),
                    None => false,
                };
                if jumped {
                    self.mode = SharpenerMode::Waiting;
                    self.stale_epochs = 0;
                }
            }
            SharpenerMode::Waiting => {
                if seen >= self.initial_wait {
                    let improved = match previous {
                        Some(p) => epoch_loss < (1.0 - self.improvement_threshold) * p,
                        None => true,
                    };
                    self.stale_epochs = if improved { 0 } else { self.stale_epochs + 1 };
                    if self.stale_epochs >= self.resume_patience {
                        self.mode = SharpenerMode::Sharpening;
                        self.stale_epochs = 0;
                    }
                }
            }
            SharpenerMode::Done => unreachable!(),
        }
        if let Some(max) = self.max_epochs {
            if self.mode == SharpenerMode::Waiting && max.saturating_sub(seen) <= self.epochs_to_finish() {
                self.mode = SharpenerMode::Sharpening;
                self.stale_epochs = 0;
            }
        }
        self.advance();
    }
}

/// Start and per-layer length of a programmed schedule, in epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgrammedConfig {
    pub start_epoch: f64,
    pub duration_per_layer: f64,
}

/// Target sharpness of `layers` spiking layers at the given batch: layer `k`
/// ramps linearly from 0 to 1 over
/// `[start + k·duration, start + (k+1)·duration)`, with time measured as
/// `epoch + batch / batches_per_epoch`.
pub fn programmed_schedule(
    config: &ProgrammedConfig,
    layers: usize,
    epoch: usize,
    batch: usize,
    batches_per_epoch: usize,
) -> Vec<f64> {
    let t = epoch as f64 + batch as f64 / batches_per_epoch.max(1) as f64;
    let d = config.duration_per_layer.max(f64::MIN_POSITIVE);
    (0..layers)
        .map(|k| ((t - config.start_epoch - k as f64 * d) / d).clamp(0.0, 1.0))
        .collect()
}

/// Which controller drives sharpening during a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SchedulerConfig {
    Adaptive(AdaptiveConfig),
    Programmed(ProgrammedConfig),
    /// No sharpening at all.
    None,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig::Adaptive(AdaptiveConfig::default())
    }
}

/// Runtime form of [`SchedulerConfig`] used by the training loop.
#[derive(Clone, Debug)]
pub enum Scheduler {
    Adaptive(SharpenerState),
    Programmed {
        config: ProgrammedConfig,
        sharpness: Vec<f64>,
    },
    None {
        layers: usize,
    },
}

impl Scheduler {
    pub fn new(config: &SchedulerConfig, spiking_layers: usize, max_epochs: usize) -> Result<Self> {
        Ok(match config {
            SchedulerConfig::Adaptive(c) => {
                Scheduler::Adaptive(SharpenerState::new(c, spiking_layers, Some(max_epochs))?)
            }
            SchedulerConfig::Programmed(c) => {
                if !(c.start_epoch >= 0.0) || !(c.duration_per_layer > 0.0) {
                    return Err(Error::Config(
                        "programmed schedule needs start_epoch ≥ 0 and duration_per_layer > 0".into(),
                    ));
                }
                Scheduler::Programmed {
                    config: c.clone(),
                    sharpness: vec![0.0; spiking_layers],
                }
            }
            SchedulerConfig::None => Scheduler::None { layers: spiking_layers },
        })
    }

    pub fn sharpness(&self) -> Vec<f64> {
        match self {
            Scheduler::Adaptive(s) => s.sharpness().to_vec(),
            Scheduler::Programmed { sharpness, .. } => sharpness.clone(),
            Scheduler::None { layers } => vec![0.0; *layers],
        }
    }

    /// Sharpness to use for the batch after `batch` of `epoch` has trained.
    pub fn after_batch(&mut self, epoch: usize, batch: usize, batches_per_epoch: usize) -> Vec<f64> {
        match self {
            Scheduler::Adaptive(s) => {
                s.apply_batch(batches_per_epoch);
            }
            Scheduler::Programmed { config, sharpness } => {
                *sharpness = programmed_schedule(config, sharpness.len(), epoch, batch + 1, batches_per_epoch);
            }
            Scheduler::None { .. } => {}
        }
        self.sharpness()
    }

    pub fn after_epoch(&mut self, loss: f64) {
        if let Scheduler::Adaptive(s) = self {
            s.transition(loss);
        }
    }

    pub fn mode(&self) -> SharpenerMode {
        let done = |s: &[f64]| s.iter().all(|&v| v >= 1.0);
        match self {
            Scheduler::Adaptive(s) => s.mode,
            Scheduler::Programmed { sharpness, .. } => {
                if done(sharpness) {
                    SharpenerMode::Done
                } else if sharpness.iter().any(|&v| v > 0.0) {
                    SharpenerMode::Sharpening
                } else {
                    SharpenerMode::Waiting
                }
            }
            Scheduler::None { layers } => {
                if *layers == 0 {
                    SharpenerMode::Done
                } else {
                    SharpenerMode::Waiting
                }
            }
        }
    }
}
