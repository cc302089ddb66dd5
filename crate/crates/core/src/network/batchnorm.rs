//! Batch normalization with the literal `(σ_B + ε)` denominator, where `σ_B`
//! is the (biased) batch standard deviation. The same form reappears when the
//! layer is folded into the preceding weights, so the two stay consistent.
//!
//! Features are the last axis: units for dense activations, channels for
//! NHWC maps (statistics pooled over batch and space).

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-3;
pub const DEFAULT_MOMENTUM: f32 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta_shift: Tensor,
    pub moving_mu: Vec<f32>,
    pub moving_sigma: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn new(features: usize, epsilon: f32) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Validation(format!(
                "batchnorm epsilon must be > 0, got {epsilon}"
            )));
        }
        Ok(Self {
            gamma: Tensor::full(&[features], 1.0),
            beta_shift: Tensor::zeros(&[features]),
            moving_mu: vec![0.0; features],
            moving_sigma: vec![1.0; features],
            epsilon,
        })
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let f = self.features();
        if self.beta_shift.len() != f || self.moving_mu.len() != f || self.moving_sigma.len() != f {
            return Err(dim_err("batchnorm parameter lengths disagree"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Validation("batchnorm epsilon must be > 0".into()));
        }
        if self.moving_sigma.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Validation("batchnorm moving sigma must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

/// Values kept from a train-mode pass for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BatchNormCache {
    xhat: Vec<f32>,
    sigma: Vec<f32>,
}

fn feature_count(x: &Tensor, p: &BatchNormParams) -> Result<usize> {
    let f = *x.shape().last().unwrap_or(&0);
    if f != p.features() {
        return Err(dim_err(format!(
            "batchnorm over {} features applied to input of shape {:?}",
            p.features(),
            x.shape()
        )));
    }
    Ok(f)
}

pub fn batchnorm_inference(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let f = feature_count(x, p)?;
    let scale: Vec<f32> = (0..f)
        .map(|j| p.gamma.data()[j] / (p.moving_sigma[j] + p.epsilon))
        .collect();
    let (mu, shift) = (&p.moving_mu[..], p.beta_shift.data());
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(f) {
        for (((v, &k), &m), &b) in row.iter_mut().zip(&scale).zip(mu).zip(shift) {
            *v = k * (*v - m) + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn batchnorm_train(x: &Tensor, p: &mut BatchNormParams, momentum: f32) -> Result<(Tensor, BatchNormCache)> {
    let f = feature_count(x, p)?;
    let rows = x.len() / f;
    let mut mean = vec![0f64; f];
    for row in x.data().chunks_exact(f) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0f64; f];
    for row in x.data().chunks_exact(f) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let sigma: Vec<f32> = var.iter().map(|v| (v / rows as f64).sqrt() as f32).collect();
    let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
    let denom: Vec<f32> = sigma.iter().map(|s| s + p.epsilon).collect();

    let (gamma, shift) = (p.gamma.data(), p.beta_shift.data());
    let mut xhat = vec![0f32; x.len()];
    let mut out = vec![0f32; x.len()];
    for ((xr, hr), or) in x
        .data()
        .chunks_exact(f)
        .zip(xhat.chunks_exact_mut(f))
        .zip(out.chunks_exact_mut(f))
    {
        for j in 0..f {
            let h = (xr[j] - mean[j]) / denom[j];
            hr[j] = h;
            or[j] = gamma[j] * h + shift[j];
        }
    }
    for j in 0..f {
        p.moving_mu[j] = momentum * p.moving_mu[j] + (1.0 - momentum) * mean[j];
        p.moving_sigma[j] = momentum * p.moving_sigma[j] + (1.0 - momentum) * sigma[j];
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, BatchNormCache { xhat, sigma }))
}

/// Gradients `(dx, dγ, dβ)` of a train-mode pass.
///
/// With `d = σ + ε`, `x̂ = (x − μ)/d` and `ĝ = γ·g`:
/// `dx_j = (ĝ_j − mean(ĝ))/d − x̂_j · Σ(ĝ·x̂) / (n·σ)`.
pub(crate) fn batchnorm_backward(
    cache: &BatchNormCache,
    p: &BatchNormParams,
    upstream: &Tensor,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let f = p.features();
    let rows = upstream.len() / f;
    let n = rows as f64;
    let mut dgamma = vec![0f64; f];
    let mut dbeta = vec![0f64; f];
    for (gr, hr) in upstream.data().chunks_exact(f).zip(cache.xhat.chunks_exact(f)) {
        for (((dg, db), &g), &h) in dgamma.iter_mut().zip(&mut dbeta).zip(gr).zip(hr) {
            *dg += (g * h) as f64;
            *db += g as f64;
        }
    }
    // Σ ĝ = γ Σ g and Σ ĝ·x̂ = γ Σ g·x̂
    let mut dx = vec![0f32; upstream.len()];
    let coef: Vec<(f32, f32, f32)> = (0..f)
        .map(|j| {
            let g = p.gamma.data()[j] as f64;
            let d = cache.sigma[j] as f64 + p.epsilon as f64;
            let mean_gh = g * dbeta[j] / n;
            let proj = if cache.sigma[j] > 0.0 {
                g * dgamma[j] / (n * cache.sigma[j] as f64)
            } else {
                0.0
            };
            ((g / d) as f32, (mean_gh / d) as f32, proj as f32)
        })
        .collect();
    for ((dr, gr), hr) in dx
        .chunks_exact_mut(f)
        .zip(upstream.data().chunks_exact(f))
        .zip(cache.xhat.chunks_exact(f))
    {
        for (((d, &g), &h), &(g_over_d, mean_term, proj)) in dr.iter_mut().zip(gr).zip(hr).zip(&coef) {
            *d = g_over_d * g - mean_term - h * proj;
        }
    }
    (
        dx,
        dgamma.into_iter().map(|v| v as f32).collect(),
        dbeta.into_iter().map(|v| v as f32).collect(),
    )
}
