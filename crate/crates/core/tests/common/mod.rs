//! Independent double-precision reference implementations used as oracles.
//! Written from the layer definitions, sharing no code with the library.

#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use whetstone::deploy::fold_batchnorm;
use whetstone::network::LayerSpec;
use whetstone::tensor::Padding;
use whetstone::{Layer, Network, NetworkConfig, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Relative error with a floor so that tiny gradients compare absolutely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / na.max(nb).max(1e-300)
}

/// Central difference of `f` with respect to every element of `x`.
pub fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = v[i];
            v[i] = orig + eps;
            let up = f(&v);
            v[i] = orig - eps;
            let down = f(&v);
            v[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// --- reference ops --------------------------------------------------------

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn brelu(x: f64, s: f64) -> f64 {
    let (a, b) = (s / 2.0, 1.0 - s / 2.0);
    if x >= b {
        1.0
    } else if x <= a {
        0.0
    } else {
        (x - a) / (b - a)
    }
}

/// Output size and leading padding of one spatial axis.
pub fn conv_axis(input: usize, k: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// NHWC cross-correlation with `[kh, kw, cin, cout]` kernels.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    batch: usize,
    (h, w, c): (usize, usize, usize),
    k: &[f64],
    (kh, kw, co): (usize, usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> (Vec<f64>, (usize, usize, usize)) {
    let (oh, pt) = conv_axis(h, kh, stride.0, padding);
    let (ow, pl) = conv_axis(w, kw, stride.1, padding);
    let mut out = vec![0.0; batch * oh * ow * co];
    for n in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                for o in 0..co {
                    let mut s = 0.0;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride.0 + dy) as isize - pt as isize;
                            let ix = (xx * stride.1 + dx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let xv = x[((n * h + iy as usize) * w + ix as usize) * c + ci];
                                s += xv * k[((dy * kw + dx) * c + ci) * co + o];
                            }
                        }
                    }
                    out[((n * oh + y) * ow + xx) * co + o] = s;
                }
            }
        }
    }
    (out, (oh, ow, co))
}

pub fn maxpool(
    x: &[f64],
    batch: usize,
    (h, w, c): (usize, usize, usize),
    pool: (usize, usize),
    stride: (usize, usize),
) -> (Vec<f64>, (usize, usize, usize)) {
    let oh = (h - pool.0) / stride.0 + 1;
    let ow = (w - pool.1) / stride.1 + 1;
    let mut out = vec![0.0; batch * oh * ow * c];
    for n in 0..batch {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..pool.0 {
                        for dx in 0..pool.1 {
                            m = m.max(x[((n * h + y * stride.0 + dy) * w + xx * stride.1 + dx) * c + ch]);
                        }
                    }
                    out[((n * oh + y) * ow + xx) * c + ch] = m;
                }
            }
        }
    }
    (out, (oh, ow, c))
}

/// Train-mode batch normalization over the last axis of width `f`:
/// `γ (x − μ_B)/(σ_B + ε) + β` with the biased batch standard deviation.
pub fn batchnorm_train(x: &[f64], f: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let rows = x.len() / f;
    let mut out = vec![0.0; x.len()];
    for j in 0..f {
        let mean = (0..rows).map(|r| x[r * f + j]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (x[r * f + j] - mean).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        for r in 0..rows {
            out[r * f + j] = gamma[j] * (x[r * f + j] - mean) / (sd + eps) + beta[j];
        }
    }
    out
}

pub fn batchnorm_inference(
    x: &[f64],
    f: usize,
    gamma: &[f64],
    beta: &[f64],
    mu: &[f64],
    sigma: &[f64],
    eps: f64,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let j = i % f;
            gamma[j] * (v - mu[j]) / (sigma[j] + eps) + beta[j]
        })
        .collect()
}

/// Mean softmax cross-entropy of `logits` (`batch × classes`) against integer labels.
pub fn softmax_xent(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

// --- whole-network reference ----------------------------------------------

/// Parameters of every layer in `params_mut` order, as f64.
pub fn params64(net: &Network) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for l in net.layers() {
        match l {
            Layer::Dense { weights, bias, .. } => {
                out.push(to64(weights.data()));
                out.push(to64(bias.data()));
            }
            Layer::Conv2d { kernels, bias, .. } => {
                out.push(to64(kernels.data()));
                out.push(to64(bias.data()));
            }
            Layer::BatchNorm { params, .. } => {
                out.push(to64(params.gamma.data()));
                out.push(to64(params.beta_shift.data()));
            }
            _ => {}
        }
    }
    out
}

/// Per-sample output of the network computed in f64 with `params` in place
/// of the network's own. Batchnorm uses batch statistics when `train`.
pub fn forward64(net: &Network, params: &[Vec<f64>], x: &[f64], batch: usize, train: bool) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut shape: Vec<usize> = net.input_shape().to_vec();
    let mut p = params.iter();
    for layer in net.layers() {
        match layer {
            Layer::Dense { weights, .. } => {
                let (fi, fo) = (weights.shape()[0], weights.shape()[1]);
                let w = p.next().unwrap();
                let b = p.next().unwrap();
                let mut y = matmul(&cur, w, batch, fi, fo);
                for (i, v) in y.iter_mut().enumerate() {
                    *v += b[i % fo];
                }
                cur = y;
                shape = vec![fo];
            }
            Layer::Conv2d {
                kernels,
                geometry,
                padding,
                ..
            } => {
                let ks = kernels.shape();
                let k = p.next().unwrap();
                let b = p.next().unwrap();
                let (y, (oh, ow, co)) = conv2d(
                    &cur,
                    batch,
                    (shape[0], shape[1], shape[2]),
                    k,
                    (ks[0], ks[1], ks[3]),
                    geometry.stride,
                    *padding,
                );
                cur = y.iter().enumerate().map(|(i, v)| v + b[i % co]).collect();
                shape = vec![oh, ow, co];
            }
            Layer::MaxPool { pool, stride, .. } => {
                let (y, (oh, ow, c)) = maxpool(&cur, batch, (shape[0], shape[1], shape[2]), *pool, *stride);
                cur = y;
                shape = vec![oh, ow, c];
            }
            Layer::Flatten => shape = vec![shape.iter().product()],
            Layer::BatchNorm { params: bn, .. } => {
                let g = p.next().unwrap();
                let b = p.next().unwrap();
                let f = *shape.last().unwrap();
                cur = if train {
                    batchnorm_train(&cur, f, g, b, bn.epsilon as f64)
                } else {
                    batchnorm_inference(
                        &cur,
                        f,
                        g,
                        b,
                        &to64(&bn.moving_mu),
                        &to64(&bn.moving_sigma),
                        bn.epsilon as f64,
                    )
                };
            }
            Layer::SpikingBrelu { sharpness } => {
                let s = sharpness.value();
                cur.iter_mut().for_each(|v| *v = brelu(*v, s));
            }
            Layer::SoftmaxDecode { code } => {
                let (c, n) = (code.num_classes(), code.redundancy());
                let mut y = vec![0.0; batch * c];
                for r in 0..batch {
                    for k in 0..c {
                        y[r * c + k] = (0..n).map(|i| cur[r * c * n + k * n + i]).sum();
                    }
                }
                cur = y;
                shape = vec![c];
            }
        }
    }
    cur
}

fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

/// Writes a learnable MNIST-layout dataset to `dir`: 10×10 images of class
/// `c` carry a bright row `c` over low noise.
pub fn write_synthetic_mnist(dir: &std::path::Path, train: usize, test: usize, seed: u64) {
    let mut r = rng(seed);
    std::fs::create_dir_all(dir).unwrap();
    for (n, is_train) in [(train, true), (test, false)] {
        let mut pixels = Vec::with_capacity(n * 100);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = (i % 10) as u8;
            labels.push(c);
            for row in 0..10u8 {
                for _ in 0..10 {
                    let v: u8 = if row == c {
                        r.random_range(180..=255)
                    } else {
                        r.random_range(0..60)
                    };
                    pixels.push(v);
                }
            }
        }
        let (ip, lp) = whetstone::data::mnist_paths(dir, is_train);
        std::fs::write(ip, idx_bytes(0x0803, &[n as u32, 10, 10], &pixels)).unwrap();
        std::fs::write(lp, idx_bytes(0x0801, &[n as u32], &labels)).unwrap();
    }
}

/// Random dense and conv networks with randomized batchnorm statistics.
pub fn random_bn_net(seed: u64, conv: bool) -> Network {
    let mut layers = Vec::new();
    let input_shape = if conv {
        layers.extend([
            LayerSpec::conv2d(4, 3, Padding::Same),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
        ]);
        vec![8, 8, 2]
    } else {
        vec![12]
    };
    layers.extend([
        LayerSpec::dense(16),
        LayerSpec::batchnorm(),
        LayerSpec::SpikingBrelu,
        LayerSpec::dense(6),
        LayerSpec::batchnorm(),
        LayerSpec::SpikingBrelu,
        LayerSpec::SoftmaxDecode { classes: 3 },
    ]);
    let mut net = Network::build(&NetworkConfig { input_shape, layers }, seed).unwrap();
    let mut r = rng(seed);
    for l in net.layers_mut() {
        match l {
            Layer::BatchNorm { params, .. } => {
                for j in 0..params.features() {
                    params.gamma.data_mut()[j] = r.random_range(0.5..2.0);
                    params.beta_shift.data_mut()[j] = r.random_range(-0.5..0.5);
                    params.moving_mu[j] = r.random_range(-1.0..1.0);
                    params.moving_sigma[j] = r.random_range(0.2..2.0);
                }
            }
            Layer::Dense { bias, .. } | Layer::Conv2d { bias, .. } => {
                for v in bias.data_mut() {
                    *v = r.random_range(-0.5..0.5);
                }
            }
            _ => {}
        }
    }
    net
}

/// Max-abs deviation of every non-batchnorm layer output.
pub fn fold_deviation(net: &Network, x: &Tensor) -> f32 {
    let folded = fold_batchnorm(net).unwrap();
    assert!(folded.layers().iter().all(|l| !matches!(l, Layer::BatchNorm { .. })));
    let a = net.forward_inference(x).unwrap();
    let b = folded.forward_inference(x).unwrap();
    let kept: Vec<&Tensor> = net
        .layers()
        .iter()
        .zip(&a)
        .enumerate()
        .filter(|(i, _)| !matches!(net.layers().get(i + 1), Some(Layer::BatchNorm { .. })))
        .map(|(_, (_, t))| t)
        .collect();
    assert_eq!(kept.len(), b.len());
    kept.iter()
        .zip(&b)
        .flat_map(|(p, q)| p.data().iter().zip(q.data()).map(|(u, v)| (u - v).abs()))
        .fold(0f32, f32::max)
}
