//! N-hot output coding.
//!
//! The last learning layer carries `n` independent neurons per class laid out
//! in contiguous blocks (`class c` owns `c·n .. (c+1)·n`). Training sums each
//! block into a per-class logit and feeds those into a parameter-free softmax;
//! inference just counts spikes per block and takes the argmax, lowest class
//! on ties.

use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NHotCode {
    num_classes: usize,
    n: usize,
}

impl NHotCode {
    pub fn new(num_classes: usize, n: usize) -> Result<Self> {
        if num_classes == 0 || n == 0 {
            return Err(Error::Validation(format!(
                "n-hot code needs at least one class and one neuron per class, got {num_classes}×{n}"
            )));
        }
        Ok(Self { num_classes, n })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Neurons per class.
    pub fn redundancy(&self) -> usize {
        self.n
    }

    pub fn width(&self) -> usize {
        self.num_classes * self.n
    }

    pub fn class_of(&self, neuron: usize) -> usize {
        neuron / self.n
    }

    pub fn block(&self, class: usize) -> Range<usize> {
        class * self.n..(class + 1) * self.n
    }

    fn check_width(&self, t: &Tensor) -> Result<usize> {
        if t.rank() != 2 || t.shape()[1] != self.width() {
            return Err(dim_err(format!(
                "output of shape {:?} does not match {}-hot code over {} classes (width {})",
                t.shape(),
                self.n,
                self.num_classes,
                self.width()
            )));
        }
        Ok(t.shape()[0])
    }

    /// Per-class sums of the output activations (`batch × classes`).
    pub fn population_logits(&self, activations: &Tensor) -> Result<Tensor> {
        let batch = self.check_width(activations)?;
        let mut out = Vec::with_capacity(batch * self.num_classes);
        for row in activations.rows() {
            out.extend(row.chunks_exact(self.n).map(|b| b.iter().sum::<f32>()));
        }
        Tensor::new(vec![batch, self.num_classes], out)
    }

    /// Spreads per-class gradients back onto every neuron of the block.
    pub fn population_backward(&self, grad_logits: &Tensor) -> Result<Tensor> {
        if grad_logits.rank() != 2 || grad_logits.shape()[1] != self.num_classes {
            return Err(dim_err(format!(
                "class gradient of shape {:?} for {} classes",
                grad_logits.shape(),
                self.num_classes
            )));
        }
        let batch = grad_logits.shape()[0];
        let mut out = Vec::with_capacity(batch * self.width());
        for row in grad_logits.rows() {
            for &g in row {
                out.extend(std::iter::repeat_n(g, self.n));
            }
        }
        Tensor::new(vec![batch, self.width()], out)
    }

    pub fn decode(&self, output: &Tensor) -> Result<Vec<usize>> {
        self.check_width(output)?;
        Ok(output.rows().map(|row| self.decode_row(row)).collect())
    }

    pub fn decode_row(&self, row: &[f32]) -> usize {
        let mut best = 0;
        let mut best_sum = f32::NEG_INFINITY;
        for (c, block) in row.chunks_exact(self.n).enumerate() {
            let s: f32 = block.iter().sum();
            if s > best_sum {
                best = c;
                best_sum = s;
            }
        }
        best
    }

    /// Target vectors for the mean-squared-error variant: ones on the label's
    /// block, zeros elsewhere.
    pub fn targets(&self, labels: &[usize]) -> Result<Tensor> {
        let mut out = vec![0f32; labels.len() * self.width()];
        for (r, &l) in labels.iter().enumerate() {
            if l >= self.num_classes {
                return Err(Error::Validation(format!("label {l} ≥ {} classes", self.num_classes)));
            }
            let row = &mut out[r * self.width()..(r + 1) * self.width()];
            row[self.block(l)].fill(1.0);
        }
        Tensor::new(vec![labels.len(), self.width()], out)
    }
}

pub fn population_logits(output_activations: &Tensor, code: &NHotCode) -> Result<Tensor> {
    code.population_logits(output_activations)
}

pub fn decode_prediction(output_spikes: &Tensor, code: &NHotCode) -> Result<Vec<usize>> {
    code.decode(output_spikes)
}

/// Classes whose every output neuron stays silent over the whole dataset.
pub fn dead_output_classes(net: &Network, images: &Tensor, batch_size: usize) -> Result<BTreeSet<usize>> {
    let code = net
        .output_code()
        .ok_or_else(|| Error::Structure("network has no n-hot output layer".into()))?;
    let mut fired = vec![false; code.width()];
    net.for_each_batch(images, batch_size, |_, acts| {
        let out = &acts[acts.len() - 2];
        for row in out.rows() {
            for (f, &v) in fired.iter_mut().zip(row) {
                *f |= v > 0.0;
            }
        }
        Ok(())
    })?;
    Ok((0..code.num_classes())
        .filter(|&c| fired[code.block(c)].iter().all(|&f| !f))
        .collect())
}
