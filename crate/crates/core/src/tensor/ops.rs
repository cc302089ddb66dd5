use serde::{Deserialize, Serialize};

use super::gemm::{gemm, transpose};
use super::Tensor;
use crate::error::{dim_err, Error, Result};

/// `a · b` for rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(dim_err(format!("matmul of {:?} by {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0f32; m * n];
    gemm(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Returns `(upstream · bᵀ, aᵀ · upstream)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if b.shape()[0] != k || upstream.shape() != [m, n] {
        return Err(dim_err(format!(
            "matmul backward with a {:?}, b {:?}, upstream {:?}",
            a.shape(),
            b.shape(),
            upstream.shape()
        )));
    }
    let bt = transpose(b.data(), k, n);
    let mut ga = vec![0f32; m * k];
    gemm(upstream.data(), &bt, &mut ga, m, n, k);
    let at = transpose(a.data(), m, k);
    let mut gb = vec![0f32; k * n];
    gemm(&at, upstream.data(), &mut gb, k, m, n);
    Ok((Tensor::new(vec![m, k], ga)?, Tensor::new(vec![k, n], gb)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Spatial bookkeeping for an NHWC cross-correlation with `kh×kw×cin×cout`
/// kernels. `same` padding follows the usual framework convention: output
/// size `ceil(in/stride)`, with any odd padding going to the bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: (usize, usize),
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: (usize, usize),
        out_c: usize,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        let [in_h, in_w, in_c] = input;
        let (k_h, k_w) = kernel;
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Validation("convolution stride must be ≥ 1".into()));
        }
        if k_h == 0 || k_w == 0 || out_c == 0 {
            return Err(Error::Validation("empty convolution kernel".into()));
        }
        let (out_h, pad_top) = axis(in_h, k_h, stride.0, padding)?;
        let (out_w, pad_left) = axis(in_w, k_w, stride.1, padding)?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            k_h,
            k_w,
            out_c,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> [usize; 3] {
        [self.out_h, self.out_w, self.out_c]
    }

    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn in_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    /// Input pixel feeding kernel tap `(kh, kw)` of output `(oh, ow)`, or
    /// `None` when it falls in the padding.
    #[inline]
    pub fn source(&self, oh: usize, ow: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let ih = (oh * self.stride.0 + kh).checked_sub(self.pad_top)?;
        let iw = (ow * self.stride.1 + kw).checked_sub(self.pad_left)?;
        (ih < self.in_h && iw < self.in_w).then_some((ih, iw))
    }

    /// Unrolls patches into a `(batch·out_h·out_w) × patch_len` matrix whose
    /// columns run over `(kh, kw, cin)`.
    pub(crate) fn im2col(&self, input: &[f32], batch: usize) -> Vec<f32> {
        let patch = self.patch_len();
        let mut cols = vec![0f32; batch * self.out_h * self.out_w * patch];
        let c = self.in_c;
        for n in 0..batch {
            let img = &input[n * self.in_len()..(n + 1) * self.in_len()];
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let row = ((n * self.out_h + oh) * self.out_w + ow) * patch;
                    for kh in 0..self.k_h {
                        let Some((ih, iw, kw, len)) = self.tap_run(oh, ow, kh) else {
                            continue;
                        };
                        let dst = row + (kh * self.k_w + kw) * c;
                        let src = (ih * self.in_w + iw) * c;
                        cols[dst..dst + len * c].copy_from_slice(&img[src..src + len * c]);
                    }
                }
            }
        }
        cols
    }

    /// The in-bounds taps of kernel row `kh` at output `(oh, ow)` as one
    /// contiguous run: `(ih, first iw, first kw, length)`.
    #[inline]
    fn tap_run(&self, oh: usize, ow: usize, kh: usize) -> Option<(usize, usize, usize, usize)> {
        let ih = (oh * self.stride.0 + kh).checked_sub(self.pad_top)?;
        if ih >= self.in_h {
            return None;
        }
        let start = ow * self.stride.1;
        let kw0 = self.pad_left.saturating_sub(start);
        let iw0 = start + kw0 - self.pad_left;
        let len = self.k_w.saturating_sub(kw0).min(self.in_w.saturating_sub(iw0));
        (len > 0).then_some((ih, iw0, kw0, len))
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patch gradients back
    /// onto the input grid.
    pub(crate) fn col2im(&self, cols: &[f32], batch: usize) -> Vec<f32> {
        let patch = self.patch_len();
        let mut out = vec![0f32; batch * self.in_len()];
        let c = self.in_c;
        for n in 0..batch {
            let img = &mut out[n * self.in_len()..(n + 1) * self.in_len()];
            for oh in 0..self.out_h {
                for ow in 0..self.out_w {
                    let row = ((n * self.out_h + oh) * self.out_w + ow) * patch;
                    for kh in 0..self.k_h {
                        let Some((ih, iw, kw, len)) = self.tap_run(oh, ow, kh) else {
                            continue;
                        };
                        let src = row + (kh * self.k_w + kw) * c;
                        let dst = (ih * self.in_w + iw) * c;
                        for (d, s) in img[dst..dst + len * c].iter_mut().zip(&cols[src..src + len * c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        out
    }

    /// Forward pass on a flat NHWC batch; returns the output and the unrolled
    /// patches (kept by callers that will run the backward pass).
    pub(crate) fn forward(&self, input: &[f32], kernels: &[f32], batch: usize) -> (Vec<f32>, Vec<f32>) {
        let cols = self.im2col(input, batch);
        let rows = batch * self.out_h * self.out_w;
        let mut out = vec![0f32; rows * self.out_c];
        gemm(&cols, kernels, &mut out, rows, self.patch_len(), self.out_c);
        (out, cols)
    }

    /// Returns `(grad_input, grad_kernels)` given the cached patches.
    pub(crate) fn backward(
        &self,
        cols: &[f32],
        kernels: &[f32],
        upstream: &[f32],
        batch: usize,
        need_input_grad: bool,
    ) -> (Option<Vec<f32>>, Vec<f32>) {
        let rows = batch * self.out_h * self.out_w;
        let patch = self.patch_len();
        let cols_t = transpose(cols, rows, patch);
        let mut gk = vec![0f32; patch * self.out_c];
        gemm(&cols_t, upstream, &mut gk, patch, rows, self.out_c);
        let gi = need_input_grad.then(|| {
            let kt = transpose(kernels, patch, self.out_c);
            let mut gcols = vec![0f32; rows * patch];
            gemm(upstream, &kt, &mut gcols, rows, self.out_c, patch);
            self.col2im(&gcols, batch)
        });
        (gi, gk)
    }
}

fn axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(dim_err(format!(
                    "kernel extent {kernel} exceeds input extent {input} with valid padding"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, stride: (usize, usize), padding: Padding) -> Result<Conv2dGeometry> {
    input.expect_rank(4, "conv2d input")?;
    kernels.expect_rank(4, "conv2d kernels")?;
    let s = input.shape();
    let k = kernels.shape();
    if s[3] != k[2] {
        return Err(dim_err(format!(
            "conv2d input has {} channels but kernels {:?} expect {}",
            s[3], k, k[2]
        )));
    }
    Conv2dGeometry::new([s[1], s[2], s[3]], (k[0], k[1]), k[3], stride, padding)
}

/// NHWC cross-correlation (no kernel flip).
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: (usize, usize), padding: Padding) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let batch = input.shape()[0];
    let (out, _) = g.forward(input.data(), kernels.data(), batch);
    Tensor::new(vec![batch, g.out_h, g.out_w, g.out_c], out)
}

/// Returns `(grad_input, grad_kernels)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: (usize, usize),
    padding: Padding,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, stride, padding)?;
    let batch = input.shape()[0];
    if upstream.shape() != [batch, g.out_h, g.out_w, g.out_c] {
        return Err(dim_err(format!(
            "conv2d upstream {:?}, expected {:?}",
            upstream.shape(),
            [batch, g.out_h, g.out_w, g.out_c]
        )));
    }
    let cols = g.im2col(input.data(), batch);
    let (gi, gk) = g.backward(&cols, kernels.data(), upstream.data(), batch, true);
    Ok((
        Tensor::new(input.shape().to_vec(), gi.unwrap_or_default())?,
        Tensor::new(kernels.shape().to_vec(), gk)?,
    ))
}

#[derive(Clone, Debug)]
pub struct MaxPoolOutput {
    pub output: Tensor,
    /// Flat input index of the winning element for every output element.
    pub argmax: Vec<usize>,
}

pub(crate) fn pool_out_dims(input: [usize; 3], pool: (usize, usize), stride: (usize, usize)) -> Result<[usize; 3]> {
    let [h, w, c] = input;
    if pool.0 == 0 || pool.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Validation("pool size and stride must be ≥ 1".into()));
    }
    if pool.0 > h || pool.1 > w {
        return Err(dim_err(format!("pool {pool:?} larger than input {h}x{w}")));
    }
    Ok([(h - pool.0) / stride.0 + 1, (w - pool.1) / stride.1 + 1, c])
}

pub(crate) fn maxpool_flat(
    input: &[f32],
    batch: usize,
    dims: [usize; 3],
    pool: (usize, usize),
    stride: (usize, usize),
) -> Result<(Vec<f32>, Vec<usize>)> {
    let [h, w, c] = dims;
    let [oh, ow, _] = pool_out_dims(dims, pool, stride)?;
    let mut out = vec![0f32; batch * oh * ow * c];
    let mut arg = vec![0usize; out.len()];
    for n in 0..batch {
        let base = n * h * w * c;
        for y in 0..oh {
            for x in 0..ow {
                let o = ((n * oh + y) * ow + x) * c;
                let best = &mut out[o..o + c];
                let best_i = &mut arg[o..o + c];
                for py in 0..pool.0 {
                    for px in 0..pool.1 {
                        let i0 = base + ((y * stride.0 + py) * w + x * stride.1 + px) * c;
                        let window = &input[i0..i0 + c];
                        if py == 0 && px == 0 {
                            best.copy_from_slice(window);
                            for (ch, b) in best_i.iter_mut().enumerate() {
                                *b = i0 + ch;
                            }
                            continue;
                        }
                        for (ch, ((b, bi), &v)) in best.iter_mut().zip(best_i.iter_mut()).zip(window).enumerate() {
                            if v > *b {
                                *b = v;
                                *bi = i0 + ch;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

/// Windowed maximum over NHWC input. Ties go to the first element in
/// row-major scan order of the window.
pub fn maxpool2d(input: &Tensor, pool: (usize, usize), stride: (usize, usize)) -> Result<MaxPoolOutput> {
    input.expect_rank(4, "maxpool input")?;
    let s = input.shape();
    let dims = [s[1], s[2], s[3]];
    let [oh, ow, c] = pool_out_dims(dims, pool, stride)?;
    let (out, argmax) = maxpool_flat(input.data(), s[0], dims, pool, stride)?;
    Ok(MaxPoolOutput {
        output: Tensor::new(vec![s[0], oh, ow, c], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if argmax.len() != upstream.len() {
        return Err(dim_err(format!(
            "maxpool backward: {} routes for upstream of {} elements",
            argmax.len(),
            upstream.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&i, &u) in argmax.iter().zip(upstream.data()) {
        g[i] += u;
    }
    Ok(grad)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and its
/// gradient with respect to the logits, `(softmax − labels)/batch`.
pub fn softmax_crossentropy(logits: &Tensor, labels: &Tensor) -> Result<(f32, Tensor)> {
    logits.expect_rank(2, "logits")?;
    if logits.shape() != labels.shape() {
        return Err(dim_err(format!(
            "logits {:?} vs labels {:?}",
            logits.shape(),
            labels.shape()
        )));
    }
    let batch = logits.shape()[0];
    let mut grad = vec![0f32; logits.len()];
    let mut total = 0f64;
    for (r, ((z, y), g)) in logits
        .rows()
        .zip(labels.rows())
        .zip(grad.chunks_exact_mut(logits.shape()[1]))
        .enumerate()
    {
        let mass: f32 = y.iter().sum();
        if (mass - 1.0).abs() > 1e-4 || y.iter().any(|&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "label row {r} is not a distribution (sums to {mass})"
            )));
        }
        let (top, zmax) = z.iter().enumerate().fold(
            (0, f32::NEG_INFINITY),
            |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
        );
        // log-sum-exp as zmax + ln(1 + Σ_{i≠top} e^{z_i − zmax}) keeps tiny losses exact
        let rest: f32 = z
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, &v)| (v - zmax).exp())
            .sum();
        let log_denom = rest.ln_1p();
        let denom = 1.0 + rest;
        for i in 0..z.len() {
            let logp = (z[i] - zmax) - log_denom;
            if y[i] > 0.0 {
                total -= (y[i] * logp) as f64;
            }
            let p = (z[i] - zmax).exp() / denom;
            g[i] = (p - y[i]) / batch as f32;
        }
    }
    Ok((
        (total / batch as f64) as f32,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(matmul(&id, &m).unwrap().data(), m.data());
        let r = matmul(&t(&[1, 2], &[1.0, 2.0]), &t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn conv_ones_times_two() {
        let input = Tensor::full(&[1, 3, 3, 1], 1.0);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        let out = conv2d(&input, &k, (1, 1), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_sum() {
        let input = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = Tensor::full(&[2, 2, 1, 1], 1.0);
        let out = conv2d(&input, &k, (1, 1), Padding::Valid).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d(
            &Tensor::zeros(&[1, 4, 4, 2]),
            &Tensor::zeros(&[3, 3, 3, 1]),
            (1, 1),
            Padding::Same,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn same_padding_dims() {
        let g = Conv2dGeometry::new([28, 28, 1], (3, 3), 8, (1, 1), Padding::Same).unwrap();
        assert_eq!(g.out_shape(), [28, 28, 8]);
        assert_eq!((g.pad_top, g.pad_left), (1, 1));
        let g = Conv2dGeometry::new([7, 7, 1], (2, 2), 1, (2, 2), Padding::Same).unwrap();
        assert_eq!(g.out_shape(), [4, 4, 1]);
        let g = Conv2dGeometry::new([7, 7, 1], (3, 3), 1, (2, 2), Padding::Valid).unwrap();
        assert_eq!(g.out_shape(), [3, 3, 1]);
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let out = maxpool2d(&t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]), (2, 2), (2, 2)).unwrap();
        assert_eq!(out.output.data(), &[4.0]);

        let input = Tensor::full(&[1, 4, 4, 1], 0.5);
        let out = maxpool2d(&input, (2, 2), (2, 2)).unwrap();
        assert!(out.output.data().iter().all(|&v| v == 0.5));
        let g = maxpool2d_backward(input.shape(), &out.argmax, &Tensor::full(&[1, 2, 2, 1], 1.0)).unwrap();
        // first element of each window in scan order: (0,0), (0,2), (2,0), (2,2)
        let hot: Vec<usize> = g
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![0, 2, 8, 10]);
    }

    #[test]
    fn maxpool_larger_than_input() {
        assert!(matches!(
            maxpool2d(&Tensor::zeros(&[1, 2, 2, 1]), (3, 3), (1, 1)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn crossentropy_uniform_and_confident() {
        let logits = Tensor::zeros(&[1, 4]);
        let labels = t(&[1, 4], &[0.0, 1.0, 0.0, 0.0]);
        let (loss, _) = softmax_crossentropy(&logits, &labels).unwrap();
        assert!((loss - 4f32.ln()).abs() < 1e-6);

        let (loss, _) = softmax_crossentropy(&t(&[1, 2], &[10.0, -10.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
        assert!((loss - 2.061e-9).abs() < 1e-11, "{loss}");
    }

    #[test]
    fn crossentropy_rejects_bad_labels() {
        let r = softmax_crossentropy(&Tensor::zeros(&[1, 3]), &t(&[1, 3], &[1.0, 1.0, 0.0]));
        assert!(matches!(r, Err(Error::Validation(_))));
    }
}
