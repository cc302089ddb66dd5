//! Single-timestep integrate-and-threshold inference over a [`SpikingModel`].
//!
//! The first neuron layer integrates the analog input; every later stage
//! sees only spikes. Two accumulation strategies are provided and produce
//! bit-identical pre-activations, because both add contributions to each
//! neuron in ascending input order starting from `0.0` and add the bias last:
//!
//! - [`Accumulation::EventDriven`]: only inputs that fired (or analog inputs
//!   that are non-zero) scatter their weights.
//! - [`Accumulation::Dense`]: a full matrix product against the 0/1 vector.

use std::path::Path;

use serde::Serialize;

use crate::deploy::{csv_err, SpikingLayer, SpikingModel};
use crate::error::{dim_err, Error, Result};
use crate::tensor::gemm::gemm;
use crate::tensor::ops::{maxpool_flat, pool_out_dims};
use crate::tensor::Tensor;

/// Fixed-width set of fired neurons.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SpikeVector {
    width: usize,
    bits: Vec<u64>,
}

impl SpikeVector {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            bits: vec![0; width.div_ceil(64)],
        }
    }

    pub fn from_fn(width: usize, mut fired: impl FnMut(usize) -> bool) -> Self {
        let mut v = Self::new(width);
        for i in 0..width {
            if fired(i) {
                v.set(i);
            }
        }
        v
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.width, "spike index {i} out of range {}", self.width);
        self.bits[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.width && self.bits[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Fired indices in ascending order.
    pub fn iter_fired(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().flat_map(|(w, &word)| {
            let mut rest = word;
            std::iter::from_fn(move || {
                if rest == 0 {
                    return None;
                }
                let b = rest.trailing_zeros() as usize;
                rest &= rest - 1;
                Some(w * 64 + b)
            })
        })
    }

    pub fn to_f32(&self) -> Vec<f32> {
        (0..self.width).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

/// Work done by one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    /// Synaptic additions triggered by incoming events.
    pub events: u64,
    /// Incoming events (spikes, or non-zero analog values for the first layer).
    pub input_events: u64,
    pub neurons: u64,
    pub fired: u64,
}

impl LayerStats {
    pub fn fired_fraction(&self) -> f64 {
        if self.neurons == 0 {
            0.0
        } else {
            self.fired as f64 / self.neurons as f64
        }
    }
}

/// Per-stage counts, summed over `samples` inferences.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub samples: u64,
    pub layers: Vec<LayerStats>,
}

impl OpStats {
    pub fn merge(&mut self, other: &OpStats) {
        if self.layers.is_empty() {
            self.layers = vec![LayerStats::default(); other.layers.len()];
        }
        assert_eq!(
            self.layers.len(),
            other.layers.len(),
            "merging stats of different models"
        );
        self.samples += other.samples;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.events += b.events;
            a.input_events += b.input_events;
            a.neurons += b.neurons;
            a.fired += b.fired;
        }
    }

    pub fn total_events(&self) -> u64 {
        self.layers.iter().map(|l| l.events).sum()
    }

    /// Columns: `layer, kind, samples, input_events, events, neurons, fired, fired_fraction`.
    pub fn write_csv(&self, model: &SpikingModel, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            layer: usize,
            kind: &'a str,
            samples: u64,
            input_events: u64,
            events: u64,
            neurons: u64,
            fired: u64,
            fired_fraction: f64,
        }
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for (i, (s, l)) in self.layers.iter().zip(model.layers()).enumerate() {
            w.serialize(Row {
                layer: i,
                kind: l.kind(),
                samples: self.samples,
                input_events: s.input_events,
                events: s.events,
                neurons: s.neurons,
                fired: s.fired,
                fired_fraction: s.fired_fraction(),
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Accumulation {
    EventDriven,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub class: usize,
    pub output: SpikeVector,
    pub stats: OpStats,
}

/// Signal travelling between stages.
enum Signal<'a> {
    Analog(&'a [f32]),
    Spikes(SpikeVector),
}

/// Runs `input` (flattened NHWC, values as in training) through the model.
pub fn infer(model: &SpikingModel, input: &[f32]) -> Result<Inference> {
    let (output, stats, _) = run(model, input, Accumulation::EventDriven, false)?;
    Ok(Inference {
        class: decode(model, &output),
        output,
        stats,
    })
}

/// Pre-activations `W·s + b` of every neuron stage.
pub fn preactivations(model: &SpikingModel, input: &[f32], mode: Accumulation) -> Result<Vec<Vec<f32>>> {
    Ok(run(model, input, mode, true)?.2)
}

fn decode(model: &SpikingModel, output: &SpikeVector) -> usize {
    model.code().decode_row(&output.to_f32())
}

fn run(
    model: &SpikingModel,
    input: &[f32],
    mode: Accumulation,
    keep: bool,
) -> Result<(SpikeVector, OpStats, Vec<Vec<f32>>)> {
    if input.len() != model.input_len() {
        return Err(dim_err(format!(
            "input of {} values for a model expecting {:?}",
            input.len(),
            model.input_shape()
        )));
    }
    let mut stats = OpStats {
        samples: 1,
        layers: Vec::with_capacity(model.layers().len()),
    };
    let mut kept = Vec::new();
    let mut signal = Signal::Analog(input);
    for layer in model.layers() {
        let (spikes, st, pre) = stage(layer, &signal, mode)?;
        stats.layers.push(st);
        if keep {
            if let Some(pre) = pre {
                kept.push(pre);
            }
        }
        signal = Signal::Spikes(spikes);
    }
    match signal {
        Signal::Spikes(s) => Ok((s, stats, kept)),
        Signal::Analog(_) => unreachable!("a model has at least one stage"),
    }
}

fn stage(
    layer: &SpikingLayer,
    signal: &Signal,
    mode: Accumulation,
) -> Result<(SpikeVector, LayerStats, Option<Vec<f32>>)> {
    let fire = |a: &[f32]| SpikeVector::from_fn(a.len(), |i| a[i] >= crate::deploy::THRESHOLD);
    match layer {
        SpikingLayer::Dense { weights, bias } => {
            let (fan_in, units) = (weights.shape()[0], weights.shape()[1]);
            let w = weights.data();
            let mut acc = vec![0f32; units];
            let input_events = match (signal, mode) {
                (Signal::Analog(x), Accumulation::EventDriven) => {
                    let mut n = 0;
                    for (k, &xv) in x.iter().enumerate() {
                        if xv != 0.0 {
                            n += 1;
                            for (a, &wv) in acc.iter_mut().zip(&w[k * units..(k + 1) * units]) {
                                *a += xv * wv;
                            }
                        }
                    }
                    n
                }
                (Signal::Spikes(s), Accumulation::EventDriven) => {
                    for k in s.iter_fired() {
                        for (a, &wv) in acc.iter_mut().zip(&w[k * units..(k + 1) * units]) {
                            *a += wv;
                        }
                    }
                    s.count() as u64
                }
                (Signal::Analog(x), Accumulation::Dense) => {
                    gemm(x, w, &mut acc, 1, fan_in, units);
                    x.iter().filter(|&&v| v != 0.0).count() as u64
                }
                (Signal::Spikes(s), Accumulation::Dense) => {
                    gemm(&s.to_f32(), w, &mut acc, 1, fan_in, units);
                    s.count() as u64
                }
            };
            for (a, &b) in acc.iter_mut().zip(bias.data()) {
                *a += b;
            }
            let spikes = fire(&acc);
            let st = LayerStats {
                events: input_events * units as u64,
                input_events,
                neurons: units as u64,
                fired: spikes.count() as u64,
            };
            Ok((spikes, st, Some(acc)))
        }
        SpikingLayer::Conv2d {
            kernels,
            bias,
            geometry: g,
            ..
        } => {
            let out_len = g.out_h * g.out_w * g.out_c;
            let (mut acc, input_events, events) = match mode {
                Accumulation::Dense => {
                    let x = match signal {
                        Signal::Analog(x) => x.to_vec(),
                        Signal::Spikes(s) => s.to_f32(),
                    };
                    let (out, _) = g.forward(&x, kernels.data(), 1);
                    let n = x.iter().filter(|&&v| v != 0.0).count() as u64;
                    let ev: u64 = x
                        .iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(i, _)| fanout(g, i) as u64)
                        .sum();
                    (out, n, ev)
                }
                Accumulation::EventDriven => {
                    let mut acc = vec![0f32; out_len];
                    let mut n = 0u64;
                    let mut ev = 0u64;
                    let mut scatter = |i: usize, v: Option<f32>| {
                        n += 1;
                        ev += conv_scatter(g, kernels.data(), i, v, &mut acc) as u64;
                    };
                    match signal {
                        Signal::Analog(x) => {
                            for (i, &v) in x.iter().enumerate() {
                                if v != 0.0 {
                                    scatter(i, Some(v));
                                }
                            }
                        }
                        Signal::Spikes(s) => s.iter_fired().for_each(|i| scatter(i, None)),
                    }
                    (acc, n, ev)
                }
            };
            for row in acc.chunks_exact_mut(g.out_c) {
                for (a, &b) in row.iter_mut().zip(bias.data()) {
                    *a += b;
                }
            }
            let spikes = fire(&acc);
            let st = LayerStats {
                events,
                input_events,
                neurons: out_len as u64,
                fired: spikes.count() as u64,
            };
            Ok((spikes, st, Some(acc)))
        }
        SpikingLayer::MaxPool { pool, stride, input } => {
            let Signal::Spikes(s) = signal else {
                return Err(Error::Structure("max pooling needs spike input".into()));
            };
            let [oh, ow, c] = pool_out_dims(*input, *pool, *stride)?;
            let out = match mode {
                Accumulation::Dense => {
                    let (m, _) = maxpool_flat(&s.to_f32(), 1, *input, *pool, *stride)?;
                    SpikeVector::from_fn(m.len(), |i| m[i] > 0.0)
                }
                Accumulation::EventDriven => {
                    let w = input[1];
                    SpikeVector::from_fn(oh * ow * c, |o| {
                        let ch = o % c;
                        let x = (o / c) % ow;
                        let y = o / (c * ow);
                        (0..pool.0).any(|py| {
                            (0..pool.1).any(|px| s.get(((y * stride.0 + py) * w + x * stride.1 + px) * c + ch))
                        })
                    })
                }
            };
            let st = LayerStats {
                events: 0,
                input_events: s.count() as u64,
                neurons: out.width() as u64,
                fired: out.count() as u64,
            };
            Ok((out, st, None))
        }
    }
}

/// Output positions × channels fed by input element `i`.
fn fanout(g: &crate::tensor::Conv2dGeometry, i: usize) -> usize {
    let (ih, iw) = (i / (g.in_w * g.in_c), (i / g.in_c) % g.in_w);
    let mut n = 0;
    for kh in 0..g.k_h {
        for kw in 0..g.k_w {
            if out_coord(ih, kh, g.pad_top, g.stride.0, g.out_h).is_some()
                && out_coord(iw, kw, g.pad_left, g.stride.1, g.out_w).is_some()
            {
                n += g.out_c;
            }
        }
    }
    n
}

/// Output row/column whose tap `k` lands on input coordinate `i`.
#[inline]
fn out_coord(i: usize, k: usize, pad: usize, stride: usize, out: usize) -> Option<usize> {
    let t = (i + pad).checked_sub(k)?;
    (t % stride == 0 && t / stride < out).then_some(t / stride)
}

/// Adds the contribution of input element `i` (a spike when `value` is
/// `None`) to every output it feeds; returns the number of additions.
fn conv_scatter(
    g: &crate::tensor::Conv2dGeometry,
    kernels: &[f32],
    i: usize,
    value: Option<f32>,
    acc: &mut [f32],
) -> usize {
    let ci = i % g.in_c;
    let (ih, iw) = (i / (g.in_w * g.in_c), (i / g.in_c) % g.in_w);
    let co = g.out_c;
    let mut n = 0;
    for kh in 0..g.k_h {
        let Some(oh) = out_coord(ih, kh, g.pad_top, g.stride.0, g.out_h) else {
            continue;
        };
        for kw in 0..g.k_w {
            let Some(ow) = out_coord(iw, kw, g.pad_left, g.stride.1, g.out_w) else {
                continue;
            };
            let k = &kernels[((kh * g.k_w + kw) * g.in_c + ci) * co..][..co];
            let a = &mut acc[(oh * g.out_w + ow) * co..][..co];
            match value {
                Some(v) => a.iter_mut().zip(k).for_each(|(a, &w)| *a += v * w),
                None => a.iter_mut().zip(k).for_each(|(a, &w)| *a += w),
            }
            n += co;
        }
    }
    n
}

/// Accuracy of `model` on `images` (`[n, ...input_shape]`) and the summed
/// operation counts.
pub fn batch_evaluate(model: &SpikingModel, images: &Tensor, labels: &[usize]) -> Result<(f64, OpStats)> {
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::Validation(format!("{n} images but {} labels", labels.len())));
    }
    let (preds, stats) = predict_all(model, images)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok((hits as f64 / n as f64, stats))
}

/// Predicted class of every row of `images` and the summed operation counts.
pub fn predict_all(model: &SpikingModel, images: &Tensor) -> Result<(Vec<usize>, OpStats)> {
    let mut stats = OpStats::default();
    let mut preds = Vec::with_capacity(images.shape()[0]);
    for row in images.rows() {
        let r = infer(model, row)?;
        preds.push(r.class);
        stats.merge(&r.stats);
    }
    Ok((preds, stats))
}
