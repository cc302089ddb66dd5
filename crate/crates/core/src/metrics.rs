//! Concentration of neural activity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::Tensor;

fn check(values: &[f64]) -> Result<f64> {
    if values.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Validation("gini needs finite non-negative values".into()));
    }
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("gini coefficient of an all-zero vector".into()));
    }
    Ok(total)
}

/// Gini coefficient `Σ_i Σ_j |v_i − v_j| / (2·n·Σ v)`, evaluated in
/// `O(n log n)` from the sorted values:
/// `G = Σ_i (2i − n + 1)·v_(i) / (n·Σ v)` with `i` the 0-based rank.
pub fn gini(values: &[f64]) -> Result<f64> {
    let total = check(values)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (2.0 * i as f64 - n + 1.0) * v)
        .sum();
    Ok((weighted / (n * total)).max(0.0))
}

/// Direct `O(n²)` evaluation of the double sum.
pub fn gini_pairwise(values: &[f64]) -> Result<f64> {
    let total = check(values)?;
    let mut s = 0.0;
    for &a in values {
        for &b in values {
            s += (a - b).abs();
        }
    }
    Ok(s / (2.0 * values.len() as f64 * total))
}

/// Mean activation of one layer's neurons over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    /// Network index of the spiking layer.
    pub layer: usize,
    pub means: Vec<f64>,
}

/// Per-neuron mean post-activation values, grouped by spiking layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    pub epoch: Option<usize>,
    pub samples: usize,
    pub layers: Vec<LayerActivity>,
}

impl ActivityProfile {
    /// Means of every neuron of every layer, bottom-up.
    pub fn pooled(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.means.iter().copied()).collect()
    }

    /// Gini over all neurons pooled across layers.
    pub fn gini(&self) -> Result<f64> {
        gini(&self.pooled())
    }

    pub fn layer_gini(&self) -> Vec<Result<f64>> {
        self.layers.iter().map(|l| gini(&l.means)).collect()
    }

    /// Histogram of the means of layer `k` (position in `layers`) over
    /// `bins` equal-width bins on `[0, 1]`.
    pub fn histogram(&self, k: usize, bins: usize) -> Vec<usize> {
        let mut h = vec![0; bins];
        for &m in &self.layers[k].means {
            let b = ((m * bins as f64) as usize).min(bins - 1);
            h[b] += 1;
        }
        h
    }
}

/// Accumulates spiking-layer activations across batches.
#[derive(Clone, Debug)]
pub(crate) struct ActivityAccumulator {
    layers: Vec<usize>,
    sums: Vec<Vec<f64>>,
    samples: usize,
}

impl ActivityAccumulator {
    pub fn new(net: &Network) -> Self {
        let layers = net.spiking_layer_indices();
        let sums = layers
            .iter()
            .map(|&i| vec![0.0; net.output_shapes()[i].iter().product()])
            .collect();
        Self {
            layers,
            sums,
            samples: 0,
        }
    }

    pub fn add(&mut self, acts: &[Tensor]) {
        self.samples += acts[0].shape()[0];
        for (sum, &i) in self.sums.iter_mut().zip(&self.layers) {
            let width = sum.len();
            for row in acts[i].data().chunks_exact(width) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
        }
    }

    pub fn finish(self, epoch: Option<usize>) -> ActivityProfile {
        let n = self.samples.max(1) as f64;
        ActivityProfile {
            epoch,
            samples: self.samples,
            layers: self
                .layers
                .into_iter()
                .zip(self.sums)
                .map(|(layer, s)| LayerActivity {
                    layer,
                    means: s.into_iter().map(|v| v / n).collect(),
                })
                .collect(),
        }
    }
}

/// Mean post-activation of every spiking-layer neuron over `images`.
pub fn activity_profile(net: &Network, images: &Tensor, batch_size: usize) -> Result<ActivityProfile> {
    let mut acc = ActivityAccumulator::new(net);
    net.for_each_batch(images, batch_size, |_, acts| {
        acc.add(acts);
        Ok(())
    })?;
    Ok(acc.finish(None))
}

/// Neurons whose mean activity is exactly zero, per layer.
pub fn dead_node_census(profile: &ActivityProfile) -> Vec<usize> {
    profile
        .layers
        .iter()
        .map(|l| l.means.iter().filter(|&&m| m == 0.0).count())
        .collect()
}

/// Network index and kind of every layer whose output a profile covers.
pub fn profiled_layers(net: &Network) -> Vec<(usize, &'static str)> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, Layer::SpikingBrelu { .. }))
        .map(|(i, l)| (i, l.kind()))
        .collect()
}
