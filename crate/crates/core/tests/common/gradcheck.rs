//! Finite-difference checks of every differentiable operation and of a whole
//! network at intermediate sharpness, against the f64 reference implementations.

use super::*;
use rand::Rng;
use whetstone::activation::{brelu_backward, Sharpness};
use whetstone::encoding::NHotCode;
use whetstone::network::LayerSpec;
use whetstone::tensor::{
    conv2d_backward, matmul_backward, maxpool2d, maxpool2d_backward, softmax_crossentropy, Padding,
};
use whetstone::{Network, NetworkConfig, Tensor};

/// Central-difference step for the single ops (all piecewise polynomial of low degree).
const EPS: f64 = 1e-3;
/// Step for the whole network, whose batch statistics are strongly curved.
const NET_EPS: f64 = 1e-6;
const OP_TOL: f64 = 1e-4;
const NET_TOL: f64 = 1e-3;

/// Elementwise relative comparison; entries smaller than `floor` compare absolutely.
fn assert_close(what: &str, analytic: &[f32], numeric: &[f64], tol: f64, floor: f64) {
    assert_eq!(analytic.len(), numeric.len(), "{what}: length");
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a as f64, n, floor);
        assert!(e <= tol, "{what}[{i}]: analytic {a} vs numeric {n} (rel {e:.2e})");
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn matmul_gradients() {
    let mut r = rng(1);
    let (m, k, n) = (3, 3, 3);
    let a = random_tensor(&mut r, &[m, k], -1.0, 1.0);
    let b = random_tensor(&mut r, &[k, n], -1.0, 1.0);
    let up = random_tensor(&mut r, &[m, n], -1.0, 1.0);
    let (ga, gb) = matmul_backward(&a, &b, &up).unwrap();
    let (a64, b64, u64) = (to64(a.data()), to64(b.data()), to64(up.data()));
    let na = numeric_grad(&a64, EPS, |x| dot(&matmul(x, &b64, m, k, n), &u64));
    let nb = numeric_grad(&b64, EPS, |x| dot(&matmul(&a64, x, m, k, n), &u64));
    assert_close("d/dA", ga.data(), &na, OP_TOL, 1e-3);
    assert_close("d/dB", gb.data(), &nb, OP_TOL, 1e-3);
}

fn check_conv(padding: Padding, stride: (usize, usize), seed: u64) {
    let mut r = rng(seed);
    let (batch, h, w, c, kh, kw, co) = (1, 5, 5, 2, 3, 3, 4);
    let x = random_tensor(&mut r, &[batch, h, w, c], -1.0, 1.0);
    let k = random_tensor(&mut r, &[kh, kw, c, co], -1.0, 1.0);
    let (_, (oh, ow, _)) = conv2d(
        &to64(x.data()),
        batch,
        (h, w, c),
        &to64(k.data()),
        (kh, kw, co),
        stride,
        padding,
    );
    let up = random_tensor(&mut r, &[batch, oh, ow, co], -1.0, 1.0);
    let (gx, gk) = conv2d_backward(&x, &k, stride, padding, &up).unwrap();
    let (x64, k64, u64) = (to64(x.data()), to64(k.data()), to64(up.data()));
    let f = |x: &[f64], k: &[f64]| dot(&conv2d(x, batch, (h, w, c), k, (kh, kw, co), stride, padding).0, &u64);
    let nx = numeric_grad(&x64, EPS, |v| f(v, &k64));
    let nk = numeric_grad(&k64, EPS, |v| f(&x64, v));
    assert_close("d/dx", gx.data(), &nx, OP_TOL, 1e-3);
    assert_close("d/dkernels", gk.data(), &nk, OP_TOL, 1e-3);
}

pub fn conv2d_gradients_valid() {
    check_conv(Padding::Valid, (1, 1), 2);
}

pub fn conv2d_gradients_same_strided() {
    check_conv(Padding::Same, (2, 1), 3);
    check_conv(Padding::Same, (1, 1), 4);
}

pub fn maxpool_gradients() {
    let mut r = rng(5);
    let (batch, h, w, c) = (1, 4, 4, 3);
    // distinct values well apart, so no window is within EPS of a tie
    let n = batch * h * w * c;
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.random_range(0..=i));
    }
    let x = Tensor::new(vec![batch, h, w, c], vals).unwrap();
    let pooled = maxpool2d(&x, (2, 2), (2, 2)).unwrap();
    let up = random_tensor(&mut r, pooled.output.shape(), -1.0, 1.0);
    let gx = maxpool2d_backward(x.shape(), &pooled.argmax, &up).unwrap();
    let u64 = to64(up.data());
    let nx = numeric_grad(&to64(x.data()), EPS, |v| {
        dot(&maxpool(v, batch, (h, w, c), (2, 2), (2, 2)).0, &u64)
    });
    assert_close("d/dx", gx.data(), &nx, OP_TOL, 1e-3);
}

pub fn brelu_gradients_across_sharpness() {
    let mut r = rng(6);
    for s in [0.0, 0.3, 0.5, 0.9, 0.99] {
        let sh = Sharpness::new(s).unwrap();
        let (a, b) = (s / 2.0, 1.0 - s / 2.0);
        // keep samples away from the two kinks
        let data: Vec<f32> = (0..64)
            .map(|_| loop {
                let v: f32 = r.random_range(-0.5..1.5);
                if (v as f64 - a).abs() > 2.0 * EPS && (v as f64 - b).abs() > 2.0 * EPS {
                    break v;
                }
            })
            .collect();
        let x = Tensor::new(vec![8, 8], data).unwrap();
        let up = random_tensor(&mut r, &[8, 8], -1.0, 1.0);
        let gx = brelu_backward(&x, sh, &up).unwrap();
        let u64 = to64(up.data());
        let nx = numeric_grad(&to64(x.data()), EPS, |v| {
            v.iter().zip(&u64).map(|(&x, u)| brelu(x, s) * u).sum()
        });
        assert_close(&format!("s={s}"), gx.data(), &nx, OP_TOL, 1e-3);
    }
}

pub fn population_decode_gradients() {
    let mut r = rng(7);
    let code = NHotCode::new(4, 3).unwrap();
    let up = random_tensor(&mut r, &[5, 4], -1.0, 1.0);
    let x = random_tensor(&mut r, &[5, 12], 0.0, 1.0);
    let gx = code.population_backward(&up).unwrap();
    let u64 = to64(up.data());
    let nx = numeric_grad(&to64(x.data()), EPS, |v| {
        let sums: Vec<f64> = v.chunks(3).map(|b| b.iter().sum()).collect();
        dot(&sums, &u64)
    });
    assert_close("d/dx", gx.data(), &nx, OP_TOL, 1e-3);
}

pub fn softmax_crossentropy_gradients() {
    let mut r = rng(8);
    let (batch, classes) = (2, 5);
    let z = random_tensor(&mut r, &[batch, classes], -1.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..classes)).collect();
    let mut onehot = vec![0f32; batch * classes];
    for (i, &y) in labels.iter().enumerate() {
        onehot[i * classes + y] = 1.0;
    }
    let (loss, g) = softmax_crossentropy(&z, &Tensor::new(vec![batch, classes], onehot).unwrap()).unwrap();
    let z64 = to64(z.data());
    assert!(rel_err(loss as f64, softmax_xent(&z64, classes, &labels), 1e-6) < 1e-5);
    let nz = numeric_grad(&z64, EPS, |v| softmax_xent(v, classes, &labels));
    assert_close("d/dlogits", g.data(), &nz, OP_TOL, 1e-3);
}

/// Train-mode batchnorm sits between a dense layer and a linear readout, so
/// the dense weight gradient exercises the gradient with respect to the
/// normalized input as well as γ and β.
pub fn batchnorm_gradients_through_batch_statistics() {
    let mut r = rng(9);
    let config = NetworkConfig {
        input_shape: vec![4],
        layers: vec![LayerSpec::dense(5), LayerSpec::batchnorm()],
    };
    let mut net = Network::build(&config, 9).unwrap();
    for (_, p) in net.params_mut() {
        for v in p.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
    }
    let batch = 7;
    let x = random_tensor(&mut r, &[batch, 4], -1.0, 1.0);
    let up = random_tensor(&mut r, &[batch, 5], -1.0, 1.0);
    let params = params64(&net);
    net.zero_grad();
    net.forward_train(&x).unwrap();
    net.backward(&up).unwrap();
    let (x64, u64) = (to64(x.data()), to64(up.data()));
    let names = ["dense weights", "dense bias", "gamma", "beta"];
    let grads: Vec<Vec<f32>> = net
        .params_mut()
        .into_iter()
        .map(|(_, p)| p.grad().unwrap().to_vec())
        .collect();
    for (i, name) in names.iter().enumerate() {
        let numeric = numeric_grad(&params[i], NET_EPS, |v| {
            let mut p = params.clone();
            p[i] = v.to_vec();
            dot(&forward64(&net, &p, &x64, batch, true), &u64)
        });
        // the dense bias is cancelled exactly by the batch mean
        let floor = if i == 1 { 1e-2 } else { 1e-3 };
        assert_close(name, &grads[i], &numeric, OP_TOL, floor);
    }
}

/// Conv + batchnorm + pool + dense with every activation at an intermediate
/// sharpness, trained against softmax cross-entropy through an N-hot decoder.
pub fn whole_network_mid_sharpness() {
    let config = NetworkConfig {
        input_shape: vec![6, 6, 1],
        layers: vec![
            LayerSpec::conv2d(3, 3, Padding::Same),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::maxpool(2),
            LayerSpec::Flatten,
            LayerSpec::dense(8),
            LayerSpec::batchnorm(),
            LayerSpec::SpikingBrelu,
            LayerSpec::dense(6),
            LayerSpec::SpikingBrelu,
            LayerSpec::SoftmaxDecode { classes: 3 },
        ],
    };
    let mut net = Network::build(&config, 11).unwrap();
    for (i, s) in net.spiking_layer_indices().into_iter().zip([0.5, 0.4, 0.3]) {
        net.set_layer_sharpness(i, s).unwrap();
    }
    let mut r = rng(12);
    let batch = 5;
    let x = random_tensor(&mut r, &[batch, 6, 6, 1], 0.0, 1.0);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    let code = net.output_code().unwrap();
    let targets = Tensor::new(
        vec![batch, 3],
        labels
            .iter()
            .flat_map(|&y| (0..3).map(move |k| (k == y) as u8 as f32))
            .collect(),
    )
    .unwrap();
    assert_eq!(code.num_classes(), 3);

    let params = params64(&net);
    net.zero_grad();
    let out = net.forward_train(&x).unwrap().clone();
    let (_, g) = softmax_crossentropy(&out, &targets).unwrap();
    net.backward(&g).unwrap();
    let grads: Vec<(String, Vec<f32>)> = net
        .params_mut()
        .into_iter()
        .map(|(n, p)| (n, p.grad().unwrap().to_vec()))
        .collect();

    let x64 = to64(x.data());
    let loss = |p: &[Vec<f64>]| softmax_xent(&forward64(&net, p, &x64, batch, true), 3, &labels);
    assert!(rel_err(loss(&params), softmax_xent(&to64(out.data()), 3, &labels), 1e-6) < 1e-4);

    let mut all_a = Vec::new();
    let mut all_n = Vec::new();
    for (i, (name, analytic)) in grads.iter().enumerate() {
        let numeric = numeric_grad(&params[i], NET_EPS, |v| {
            let mut p = params.clone();
            p[i] = v.to_vec();
            loss(&p)
        });
        let a = to64(analytic);
        let scale = l2(&a).max(l2(&numeric));
        if scale < 1e-6 {
            // biases feeding batchnorm: the true gradient is exactly zero
            let d: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
            assert!(l2(&d) < 1e-6, "{name}: expected a vanishing gradient");
        } else {
            let e = norm_rel_err(&a, &numeric);
            assert!(e <= NET_TOL, "{name}: relative error {e:.2e}");
        }
        all_a.extend(a);
        all_n.extend(numeric);
    }
    assert!(all_a.iter().any(|&v| v != 0.0), "gradient vanished entirely");
    assert!(norm_rel_err(&all_a, &all_n) <= NET_TOL);
}

/// Every check with its name, for runners outside the test harness.
pub const ALL: &[(&str, fn())] = &[
    ("matmul_gradients", matmul_gradients),
    ("conv2d_gradients_valid", conv2d_gradients_valid),
    ("conv2d_gradients_same_strided", conv2d_gradients_same_strided),
    ("maxpool_gradients", maxpool_gradients),
    ("brelu_gradients_across_sharpness", brelu_gradients_across_sharpness),
    ("population_decode_gradients", population_decode_gradients),
    ("softmax_crossentropy_gradients", softmax_crossentropy_gradients),
    (
        "batchnorm_gradients_through_batch_statistics",
        batchnorm_gradients_through_batch_statistics,
    ),
    ("whole_network_mid_sharpness", whole_network_mid_sharpness),
];
