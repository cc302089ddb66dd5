//! Sequential network container.
//!
//! A [`Network`] is an ordered list of [`Layer`]s whose shapes are chained and
//! validated once at build time. Activations are batch-major: dense
//! activations are `[batch, features]`, spatial ones NHWC.
//!
//! Training goes through [`Network::forward_train`], which keeps what the
//! backward pass needs, followed by [`Network::backward`]. Inference
//! ([`Network::forward_inference`] and friends) takes `&self` and mutates
//! nothing.

pub mod batchnorm;
mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{Kinks, Sharpness};
use crate::encoding::NHotCode;
use crate::error::{dim_err, Error, Result};
use crate::tensor::gemm::{gemm, transpose};
use crate::tensor::ops::{maxpool_flat, pool_out_dims};
use crate::tensor::{Conv2dGeometry, Padding, Tensor};

use batchnorm::{batchnorm_backward, batchnorm_train, BatchNormCache};
pub use batchnorm::{batchnorm_inference, BatchNormParams, Mode};

fn yes() -> bool {
    true
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

fn valid() -> Padding {
    Padding::Valid
}

fn default_epsilon() -> f32 {
    batchnorm::DEFAULT_EPSILON
}

fn default_momentum() -> f32 {
    batchnorm::DEFAULT_MOMENTUM
}

/// One entry of a network configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
        #[serde(default = "yes")]
        trainable: bool,
    },
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_stride")]
        stride: [usize; 2],
        #[serde(default = "valid")]
        padding: Padding,
        #[serde(default = "yes")]
        trainable: bool,
    },
    Maxpool {
        pool: [usize; 2],
        #[serde(default)]
        stride: Option<[usize; 2]>,
    },
    Flatten,
    Batchnorm {
        #[serde(default = "default_epsilon")]
        epsilon: f32,
        #[serde(default = "default_momentum")]
        momentum: f32,
        #[serde(default = "yes")]
        trainable: bool,
    },
    SpikingBrelu,
    SoftmaxDecode {
        classes: usize,
    },
}

impl LayerSpec {
    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units, trainable: true }
    }

    pub fn conv2d(filters: usize, kernel: usize, padding: Padding) -> Self {
        LayerSpec::Conv2d {
            filters,
            kernel: [kernel, kernel],
            stride: [1, 1],
            padding,
            trainable: true,
        }
    }

    pub fn maxpool(pool: usize) -> Self {
        LayerSpec::Maxpool {
            pool: [pool, pool],
            stride: None,
        }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::Batchnorm {
            epsilon: batchnorm::DEFAULT_EPSILON,
            momentum: batchnorm::DEFAULT_MOMENTUM,
            trainable: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Per-sample input shape: `[features]` or `[height, width, channels]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Dense {
        /// `[inputs, units]`
        weights: Tensor,
        bias: Tensor,
        trainable: bool,
    },
    Conv2d {
        /// `[kh, kw, cin, cout]`
        kernels: Tensor,
        bias: Tensor,
        geometry: Conv2dGeometry,
        padding: Padding,
        trainable: bool,
    },
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
        input: [usize; 3],
    },
    Flatten,
    BatchNorm {
        params: BatchNormParams,
        momentum: f32,
        trainable: bool,
    },
    SpikingBrelu {
        sharpness: Sharpness,
    },
    SoftmaxDecode {
        code: NHotCode,
    },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::SpikingBrelu { .. } => "spiking_brelu",
            Layer::SoftmaxDecode { .. } => "softmax_decode",
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Dense { bias, trainable, .. } => LayerSpec::Dense {
                units: bias.len(),
                trainable: *trainable,
            },
            Layer::Conv2d {
                geometry,
                padding,
                trainable,
                ..
            } => LayerSpec::Conv2d {
                filters: geometry.out_c,
                kernel: [geometry.k_h, geometry.k_w],
                stride: [geometry.stride.0, geometry.stride.1],
                padding: *padding,
                trainable: *trainable,
            },
            Layer::MaxPool { pool, stride, .. } => LayerSpec::Maxpool {
                pool: [pool.0, pool.1],
                stride: Some([stride.0, stride.1]),
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::BatchNorm {
                params,
                momentum,
                trainable,
            } => LayerSpec::Batchnorm {
                epsilon: params.epsilon,
                momentum: *momentum,
                trainable: *trainable,
            },
            Layer::SpikingBrelu { .. } => LayerSpec::SpikingBrelu,
            Layer::SoftmaxDecode { code } => LayerSpec::SoftmaxDecode {
                classes: code.num_classes(),
            },
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn has_trainable_params(&self) -> bool {
        match self {
            Layer::Dense { trainable, .. } | Layer::Conv2d { trainable, .. } | Layer::BatchNorm { trainable, .. } => {
                *trainable
            }
            _ => false,
        }
    }
}

/// What a train-mode step keeps for the backward pass, besides the layer input.
#[derive(Clone, Debug)]
enum StepCache {
    None,
    Cols(Vec<f32>),
    Argmax(Vec<usize>),
    BatchNorm(BatchNormCache),
}

#[derive(Clone, Debug)]
struct TrainCache {
    /// Input of every layer.
    inputs: Vec<Tensor>,
    steps: Vec<StepCache>,
}

#[derive(Clone, Debug)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    out_shapes: Vec<Vec<usize>>,
    cache: Option<TrainCache>,
    last_output: Option<Tensor>,
}

fn he_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let limit = (6.0 / fan_in as f64).sqrt() as f32;
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl Network {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build_with_rng(config, &mut rng)
    }

    pub fn build_with_rng(config: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.input_shape.is_empty() || config.input_shape.contains(&0) {
            return Err(Error::Validation(format!(
                "input shape {:?} must be non-empty with positive dimensions",
                config.input_shape
            )));
        }
        let mut cur = config.input_shape.clone();
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut out_shapes = Vec::with_capacity(config.layers.len());
        for (index, spec) in config.layers.iter().enumerate() {
            let fail = |reason: String| Error::Build { index, reason };
            let layer = match spec {
                LayerSpec::Dense { units, trainable } => {
                    if cur.len() != 1 {
                        return Err(fail(format!(
                            "dense layer needs a flat input but receives shape {cur:?} (insert a flatten layer)"
                        )));
                    }
                    if *units == 0 {
                        return Err(fail("dense layer with zero units".into()));
                    }
                    let fan_in = cur[0];
                    let layer = Layer::Dense {
                        weights: he_uniform(rng, &[fan_in, *units], fan_in),
                        bias: Tensor::zeros(&[*units]),
                        trainable: *trainable,
                    };
                    cur = vec![*units];
                    layer
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    trainable,
                } => {
                    let [h, w, c] = spatial(&cur).map_err(|e| fail(e.to_string()))?;
                    let geometry = Conv2dGeometry::new(
                        [h, w, c],
                        (kernel[0], kernel[1]),
                        *filters,
                        (stride[0], stride[1]),
                        *padding,
                    )
                    .map_err(|e| fail(e.to_string()))?;
                    let fan_in = geometry.patch_len();
                    let layer = Layer::Conv2d {
                        kernels: he_uniform(rng, &[kernel[0], kernel[1], c, *filters], fan_in),
                        bias: Tensor::zeros(&[*filters]),
                        geometry,
                        padding: *padding,
                        trainable: *trainable,
                    };
                    cur = geometry.out_shape().to_vec();
                    layer
                }
                LayerSpec::Maxpool { pool, stride } => {
                    let input = spatial(&cur).map_err(|e| fail(e.to_string()))?;
                    let pool = (pool[0], pool[1]);
                    let stride = stride.map(|s| (s[0], s[1])).unwrap_or(pool);
                    cur = pool_out_dims(input, pool, stride)
                        .map_err(|e| fail(e.to_string()))?
                        .to_vec();
                    Layer::MaxPool { pool, stride, input }
                }
                LayerSpec::Flatten => {
                    cur = vec![cur.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Batchnorm {
                    epsilon,
                    momentum,
                    trainable,
                } => {
                    if !(0.0..1.0).contains(momentum) {
                        return Err(fail(format!("batchnorm momentum {momentum} outside [0, 1)")));
                    }
                    let features = *cur.last().expect("non-empty shape");
                    Layer::BatchNorm {
                        params: BatchNormParams::new(features, *epsilon).map_err(|e| fail(e.to_string()))?,
                        momentum: *momentum,
                        trainable: *trainable,
                    }
                }
                LayerSpec::SpikingBrelu => Layer::SpikingBrelu {
                    sharpness: Sharpness::SOFT,
                },
                LayerSpec::SoftmaxDecode { classes } => {
                    if index + 1 != config.layers.len() {
                        return Err(fail("softmax_decode must be the last layer".into()));
                    }
                    if cur.len() != 1 || *classes == 0 || !cur[0].is_multiple_of(*classes) {
                        return Err(fail(format!(
                            "softmax_decode over {classes} classes needs a flat input whose width is a multiple of it, got {cur:?}"
                        )));
                    }
                    let code = NHotCode::new(*classes, cur[0] / classes)?;
                    cur = vec![*classes];
                    Layer::SoftmaxDecode { code }
                }
            };
            layers.push(layer);
            out_shapes.push(cur.clone());
        }
        Ok(Self {
            input_shape: config.input_shape.clone(),
            layers,
            out_shapes,
            cache: None,
            last_output: None,
        })
    }

    /// Reassembles a network from already-initialized layers, re-validating
    /// the shape chain.
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let config = NetworkConfig {
            input_shape: input_shape.clone(),
            layers: layers.iter().map(Layer::spec).collect(),
        };
        let skeleton = Self::build(&config, 0)?;
        for (i, (a, b)) in skeleton.layers.iter().zip(&layers).enumerate() {
            let ok = match (a, b) {
                (Layer::Dense { weights: w0, .. }, Layer::Dense { weights: w1, bias, .. }) => {
                    w0.shape() == w1.shape() && bias.len() == w1.shape()[1]
                }
                (Layer::Conv2d { kernels: k0, .. }, Layer::Conv2d { kernels: k1, bias, .. }) => {
                    k0.shape() == k1.shape() && bias.len() == k1.shape()[3]
                }
                (Layer::BatchNorm { params: p0, .. }, Layer::BatchNorm { params: p1, .. }) => {
                    p1.validate().is_ok() && p0.features() == p1.features()
                }
                _ => true,
            };
            if !ok {
                return Err(Error::Build {
                    index: i,
                    reason: "parameter shapes do not match the layer chain".into(),
                });
            }
        }
        Ok(Self {
            input_shape,
            layers,
            out_shapes: skeleton.out_shapes,
            cache: None,
            last_output: None,
        })
    }

    pub fn config(&self) -> NetworkConfig {
        NetworkConfig {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::spec).collect(),
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.cache = None;
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    /// Per-sample output shape of every layer.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.out_shapes
    }

    pub fn output_code(&self) -> Option<NHotCode> {
        match self.layers.last() {
            Some(Layer::SoftmaxDecode { code }) => Some(*code),
            _ => None,
        }
    }

    // --- sharpness -------------------------------------------------------

    /// Network indices of the spiking layers, bottom-up.
    pub fn spiking_layer_indices(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::SpikingBrelu { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Sharpness of every spiking layer, bottom-up.
    pub fn sharpness(&self) -> Vec<Sharpness> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::SpikingBrelu { sharpness } => Some(*sharpness),
                _ => None,
            })
            .collect()
    }

    pub fn is_fully_sharpened(&self) -> bool {
        self.sharpness().iter().all(|s| s.is_spiking())
    }

    /// Raises the sharpness of the spiking layer at network index
    /// `layer_index`. Sharpness never decreases.
    pub fn set_layer_sharpness(&mut self, layer_index: usize, s: f64) -> Result<()> {
        let layer = self
            .layers
            .get_mut(layer_index)
            .ok_or_else(|| Error::Validation(format!("no layer {layer_index}")))?;
        let kind = layer.kind();
        match layer {
            Layer::SpikingBrelu { sharpness } => {
                let requested = Sharpness::new(s)?;
                if requested < *sharpness {
                    return Err(Error::Monotonicity {
                        index: layer_index,
                        current: sharpness.value(),
                        requested: s,
                    });
                }
                *sharpness = requested;
                Ok(())
            }
            _ => Err(Error::LayerKind {
                index: layer_index,
                kind,
                expected: "spiking_brelu",
            }),
        }
    }

    /// Copy of the network with every spiking layer at `s = 1`.
    pub fn fully_sharpened(&self) -> Network {
        let mut net = self.clone();
        net.cache = None;
        net.last_output = None;
        for l in &mut net.layers {
            if let Layer::SpikingBrelu { sharpness } = l {
                *sharpness = Sharpness::SPIKING;
            }
        }
        net
    }

    // --- parameters ------------------------------------------------------

    /// Every parameter tensor with a stable name, in layer order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Dense { weights, bias, .. } => {
                    out.push((format!("layer{i}.weights"), weights));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::Conv2d { kernels, bias, .. } => {
                    out.push((format!("layer{i}.kernels"), kernels));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::BatchNorm { params, .. } => {
                    out.push((format!("layer{i}.gamma"), &mut params.gamma));
                    out.push((format!("layer{i}.beta_shift"), &mut params.beta_shift));
                }
                _ => {}
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { weights, bias, .. } => weights.len() + bias.len(),
                Layer::Conv2d { kernels, bias, .. } => kernels.len() + bias.len(),
                Layer::BatchNorm { params, .. } => 4 * params.features(),
                _ => 0,
            })
            .sum()
    }

    // --- forward ---------------------------------------------------------

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.rank() != self.input_shape.len() + 1 || batch.shape()[1..] != self.input_shape[..] {
            return Err(dim_err(format!(
                "batch of shape {:?} does not match network input {:?}",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(batch.shape()[0])
    }

    fn out_tensor(&self, index: usize, batch: usize, data: Vec<f32>) -> Result<Tensor> {
        let mut shape = Vec::with_capacity(self.out_shapes[index].len() + 1);
        shape.push(batch);
        shape.extend_from_slice(&self.out_shapes[index]);
        Tensor::new(shape, data)
    }

    /// Per-layer activations. Train mode uses batch statistics, updates the
    /// batchnorm moving averages and keeps a cache for [`backward`](Self::backward).
    pub fn forward(&mut self, batch: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        match mode {
            Mode::Inference => self.forward_inference(batch),
            Mode::Train => {
                self.forward_train(batch)?;
                let cache = self.cache.as_ref().expect("cache after forward_train");
                let mut acts: Vec<Tensor> = cache.inputs[1..].to_vec();
                acts.push(self.last_output.clone().expect("output"));
                Ok(acts)
            }
        }
    }

    pub fn forward_inference(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let b = self.check_batch(batch)?;
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let x = if i == 0 { batch } else { &acts[i - 1] };
            let y = self.step_inference(i, x, b)?;
            acts.push(y);
        }
        Ok(acts)
    }

    /// Final-layer output only.
    pub fn predict_output(&self, batch: &Tensor) -> Result<Tensor> {
        let b = self.check_batch(batch)?;
        let mut x = self.step_inference(0, batch, b)?;
        for i in 1..self.layers.len() {
            x = self.step_inference(i, &x, b)?;
        }
        Ok(x)
    }

    fn step_inference(&self, i: usize, x: &Tensor, b: usize) -> Result<Tensor> {
        let data = match &self.layers[i] {
            Layer::Dense { weights, bias, .. } => dense_forward(x, weights, bias, b),
            Layer::Conv2d {
                kernels,
                bias,
                geometry,
                ..
            } => {
                let (mut out, _) = geometry.forward(x.data(), kernels.data(), b);
                add_bias(&mut out, bias.data());
                out
            }
            Layer::MaxPool { pool, stride, input } => maxpool_flat(x.data(), b, *input, *pool, *stride)?.0,
            Layer::Flatten => x.data().to_vec(),
            Layer::BatchNorm { params, .. } => batchnorm_inference(x, params)?.into_data(),
            Layer::SpikingBrelu { sharpness } => {
                let k = Kinks::new(*sharpness);
                x.data().iter().map(|&v| k.apply(v)).collect()
            }
            Layer::SoftmaxDecode { code } => code.population_logits(x)?.into_data(),
        };
        self.out_tensor(i, b, data)
    }

    /// Train-mode forward pass; returns the network output and keeps the
    /// cache needed by [`backward`](Self::backward).
    pub fn forward_train(&mut self, batch: &Tensor) -> Result<&Tensor> {
        let b = self.check_batch(batch)?;
        self.cache = None;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut x = batch.clone();
        for i in 0..self.layers.len() {
            let (data, step) = match &mut self.layers[i] {
                Layer::Dense { weights, bias, .. } => (dense_forward(&x, weights, bias, b), StepCache::None),
                Layer::Conv2d {
                    kernels,
                    bias,
                    geometry,
                    ..
                } => {
                    let (mut out, cols) = geometry.forward(x.data(), kernels.data(), b);
                    add_bias(&mut out, bias.data());
                    (out, StepCache::Cols(cols))
                }
                Layer::MaxPool { pool, stride, input } => {
                    let (out, arg) = maxpool_flat(x.data(), b, *input, *pool, *stride)?;
                    (out, StepCache::Argmax(arg))
                }
                Layer::Flatten => (x.data().to_vec(), StepCache::None),
                Layer::BatchNorm { params, momentum, .. } => {
                    let (y, c) = batchnorm_train(&x, params, *momentum)?;
                    (y.into_data(), StepCache::BatchNorm(c))
                }
                Layer::SpikingBrelu { sharpness } => {
                    let k = Kinks::new(*sharpness);
                    (x.data().iter().map(|&v| k.apply(v)).collect(), StepCache::None)
                }
                Layer::SoftmaxDecode { code } => (code.population_logits(&x)?.into_data(), StepCache::None),
            };
            let y = self.out_tensor(i, b, data)?;
            inputs.push(std::mem::replace(&mut x, y));
            steps.push(step);
        }
        self.last_output = Some(x);
        self.cache = Some(TrainCache { inputs, steps });
        Ok(self.last_output.as_ref().expect("just set"))
    }

    /// Output of layer `i` from the last train-mode pass, until `backward`
    /// consumes it.
    pub fn cached_output(&self, i: usize) -> Option<&Tensor> {
        let cache = self.cache.as_ref()?;
        if i + 1 < cache.inputs.len() {
            Some(&cache.inputs[i + 1])
        } else if i + 1 == cache.inputs.len() {
            self.last_output.as_ref()
        } else {
            None
        }
    }
}

impl Network {
    // --- backward --------------------------------------------------------

    /// Backpropagates a gradient with respect to the network output and
    /// accumulates parameter gradients. Consumes the train-mode cache.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<()> {
        let top = self.layers.len() - 1;
        self.backward_from(top, output_grad)
    }

    /// Like [`backward`](Self::backward) but starting from the output of
    /// layer `top`, skipping everything above it.
    pub fn backward_from(&mut self, top: usize, grad: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding train-mode forward".into()))?;
        self.last_output = None;
        if top >= self.layers.len() {
            return Err(Error::Validation(format!("no layer {top}")));
        }
        let b = cache.inputs[0].shape()[0];
        if grad.len() != b * self.out_shapes[top].iter().product::<usize>() {
            return Err(dim_err(format!(
                "gradient of shape {:?} for layer {top} output {:?} (batch {b})",
                grad.shape(),
                self.out_shapes[top]
            )));
        }
        // lowest layer whose input gradient is still needed
        let lowest_trainable = self.layers.iter().position(Layer::has_trainable_params);
        let mut g: Vec<f32> = grad.data().to_vec();
        let mut zero = g.iter().all(|&v| v == 0.0);
        for i in (0..=top).rev() {
            let x = &cache.inputs[i];
            let need_input = matches!(lowest_trainable, Some(l) if l < i);
            match (&mut self.layers[i], &cache.steps[i]) {
                (
                    Layer::Dense {
                        weights,
                        bias,
                        trainable,
                    },
                    _,
                ) => {
                    let (fan_in, units) = (weights.shape()[0], weights.shape()[1]);
                    if *trainable {
                        if zero {
                            weights.accumulate_grad(&vec![0.0; weights.len()])?;
                            bias.accumulate_grad(&vec![0.0; bias.len()])?;
                        } else {
                            let xt = transpose(x.data(), b, fan_in);
                            let mut gw = vec![0f32; fan_in * units];
                            gemm(&xt, &g, &mut gw, fan_in, b, units);
                            weights.accumulate_grad(&gw)?;
                            bias.accumulate_grad(&column_sums(&g, units))?;
                        }
                    }
                    if need_input {
                        g = if zero {
                            vec![0.0; b * fan_in]
                        } else {
                            let wt = transpose(weights.data(), fan_in, units);
                            let mut gx = vec![0f32; b * fan_in];
                            gemm(&g, &wt, &mut gx, b, units, fan_in);
                            gx
                        };
                    }
                }
                (
                    Layer::Conv2d {
                        kernels,
                        bias,
                        geometry,
                        trainable,
                        ..
                    },
                    StepCache::Cols(cols),
                ) => {
                    if zero {
                        if *trainable {
                            kernels.accumulate_grad(&vec![0.0; kernels.len()])?;
                            bias.accumulate_grad(&vec![0.0; bias.len()])?;
                        }
                        if need_input {
                            g = vec![0.0; b * geometry.in_len()];
                        }
                    } else {
                        let (gi, gk) = geometry.backward(cols, kernels.data(), &g, b, need_input);
                        if *trainable {
                            kernels.accumulate_grad(&gk)?;
                            bias.accumulate_grad(&column_sums(&g, geometry.out_c))?;
                        }
                        if let Some(gi) = gi {
                            g = gi;
                        }
                    }
                }
                (Layer::MaxPool { .. }, StepCache::Argmax(arg)) => {
                    if need_input {
                        let mut gi = vec![0f32; x.len()];
                        if !zero {
                            for (&src, &v) in arg.iter().zip(&g) {
                                gi[src] += v;
                            }
                        }
                        g = gi;
                    }
                }
                (Layer::Flatten, _) => {}
                (Layer::BatchNorm { params, trainable, .. }, StepCache::BatchNorm(c)) => {
                    let up = Tensor::new(vec![g.len()], std::mem::take(&mut g))?;
                    let (gx, dgamma, dbeta) = batchnorm_backward(c, params, &up);
                    if *trainable {
                        params.gamma.accumulate_grad(&dgamma)?;
                        params.beta_shift.accumulate_grad(&dbeta)?;
                    }
                    g = gx;
                }
                (Layer::SpikingBrelu { sharpness }, _) => {
                    if !zero {
                        let k = Kinks::new(*sharpness);
                        for (gv, &xv) in g.iter_mut().zip(x.data()) {
                            *gv *= k.slope(xv);
                        }
                    }
                }
                (Layer::SoftmaxDecode { code }, _) => {
                    let gl = Tensor::new(vec![b, code.num_classes()], std::mem::take(&mut g))?;
                    g = code.population_backward(&gl)?.into_data();
                }
                _ => unreachable!("cache entry does not match layer {i}"),
            }
            if !need_input {
                break;
            }
            zero = zero || g.iter().all(|&v| v == 0.0);
        }
        Ok(())
    }

    // --- batched inference helpers ----------------------------------------

    /// Runs inference over `images` in chunks of `batch_size` rows and hands
    /// the start row and all layer activations of each chunk to `f`.
    pub fn for_each_batch<F>(&self, images: &Tensor, batch_size: usize, mut f: F) -> Result<()>
    where
        F: FnMut(usize, &[Tensor]) -> Result<()>,
    {
        for (start, chunk) in batches(images, batch_size)? {
            let acts = self.forward_inference(&chunk)?;
            f(start, &acts)?;
        }
        Ok(())
    }

    /// Predicted class per row by spike-count (or activation-sum) argmax over
    /// the n-hot output blocks.
    pub fn predict(&self, images: &Tensor, batch_size: usize) -> Result<Vec<usize>> {
        let code = self
            .output_code()
            .ok_or_else(|| Error::Structure("network has no n-hot output layer".into()))?;
        let mut preds = Vec::with_capacity(images.shape()[0]);
        for (_, chunk) in batches(images, batch_size)? {
            let b = self.check_batch(&chunk)?;
            let mut x = chunk;
            for i in 0..self.layers.len() - 1 {
                x = self.step_inference(i, &x, b)?;
            }
            preds.extend(code.decode(&x)?);
        }
        Ok(preds)
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[usize], batch_size: usize) -> Result<f64> {
        if images.shape()[0] != labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        let preds = self.predict(images, batch_size)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

fn spatial(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [h, w, c] => Ok([*h, *w, *c]),
        _ => Err(dim_err(format!(
            "expected a height×width×channels input, got {shape:?}"
        ))),
    }
}

fn dense_forward(x: &Tensor, weights: &Tensor, bias: &Tensor, b: usize) -> Vec<f32> {
    let (fan_in, units) = (weights.shape()[0], weights.shape()[1]);
    let mut out = vec![0f32; b * units];
    gemm(x.data(), weights.data(), &mut out, b, fan_in, units);
    add_bias(&mut out, bias.data());
    out
}

fn add_bias(out: &mut [f32], bias: &[f32]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &bv) in row.iter_mut().zip(bias) {
            *o += bv;
        }
    }
}

fn column_sums(g: &[f32], width: usize) -> Vec<f32> {
    let mut s = vec![0f32; width];
    for row in g.chunks_exact(width) {
        for (a, &v) in s.iter_mut().zip(row) {
            *a += v;
        }
    }
    s
}

/// Splits the leading axis of `data` into chunks of at most `batch_size` rows.
pub fn batches(data: &Tensor, batch_size: usize) -> Result<impl Iterator<Item = (usize, Tensor)> + '_> {
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be ≥ 1".into()));
    }
    let n = data.shape()[0];
    let row = data.len() / n;
    let tail = data.shape()[1..].to_vec();
    Ok((0..n).step_by(batch_size).map(move |start| {
        let end = (start + batch_size).min(n);
        let mut shape = vec![end - start];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data.data()[start * row..end * row].to_vec()).expect("row slice");
        (start, t)
    }))
}
