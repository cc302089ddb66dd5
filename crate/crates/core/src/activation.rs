//! The sharpening bounded ReLU.
//!
//! A single scalar `s ∈ [0, 1]` places the two kinks at `α = s/2` and
//! `β = 1 − s/2`, so they always sit symmetrically around 0.5:
//!
//! ```text
//!            ⎧ 1                    x ≥ β
//! h_s(x) =   ⎨ (x − α) / (β − α)    α < x < β
//!            ⎩ 0                    x ≤ α
//! ```
//!
//! `s = 0` is the ordinary bounded ReLU clipped to `[0, 1]`; `s = 1` is the
//! Heaviside step at 0.5. At `x = α` both lower branches agree on 0. The
//! derivative is `1/(β − α)` strictly inside `(α, β)` and 0 elsewhere, which
//! makes a fully sharpened layer pass no gradient at all.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Sharpness(f64);

impl Sharpness {
    pub const SOFT: Sharpness = Sharpness(0.0);
    pub const SPIKING: Sharpness = Sharpness(1.0);

    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Validation(format!("sharpness {s} outside [0, 1]")));
        }
        Ok(Self(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn alpha(self) -> f32 {
        (self.0 / 2.0) as f32
    }

    pub fn beta(self) -> f32 {
        (1.0 - self.0 / 2.0) as f32
    }

    pub fn is_spiking(self) -> bool {
        self.0 >= 1.0
    }
}

impl TryFrom<f64> for Sharpness {
    type Error = Error;
    fn try_from(s: f64) -> Result<Self> {
        Sharpness::new(s)
    }
}

impl From<Sharpness> for f64 {
    fn from(s: Sharpness) -> f64 {
        s.0
    }
}

impl fmt::Display for Sharpness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Precomputed kinks for a hot loop.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Kinks {
    alpha: f32,
    beta: f32,
    slope: f32,
}

impl Kinks {
    pub(crate) fn new(sh: Sharpness) -> Self {
        let (alpha, beta) = (sh.alpha(), sh.beta());
        let slope = if beta > alpha { 1.0 / (beta - alpha) } else { 0.0 };
        Self { alpha, beta, slope }
    }

    #[inline]
    pub(crate) fn apply(self, x: f32) -> f32 {
        // evaluated unconditionally so that the selects below vectorize
        let ramp = (x - self.alpha) / (self.beta - self.alpha);
        let y = if x <= self.alpha { 0.0 } else { ramp };
        if x >= self.beta {
            1.0
        } else {
            y
        }
    }

    #[inline]
    pub(crate) fn slope(self, x: f32) -> f32 {
        if x > self.alpha && x < self.beta {
            self.slope
        } else {
            0.0
        }
    }
}

pub fn brelu(x: f32, sh: Sharpness) -> f32 {
    Kinks::new(sh).apply(x)
}

pub fn brelu_forward(x: &Tensor, sh: Sharpness) -> Tensor {
    let k = Kinks::new(sh);
    let data = x.data().iter().map(|&v| k.apply(v)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

pub fn brelu_backward(x: &Tensor, sh: Sharpness, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(dim_err(format!(
            "brelu backward: input {:?}, upstream {:?}",
            x.shape(),
            upstream.shape()
        )));
    }
    let k = Kinks::new(sh);
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| k.slope(v) * u)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
