use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, BlobEntry, Payload};
use crate::encoding::NHotCode;
use crate::error::{dim_err, Error, Result};
use crate::network::{Layer, Network};
use crate::tensor::ops::pool_out_dims;
use crate::tensor::{Conv2dGeometry, Padding, Tensor};

pub const SPIKING_MAGIC: &str = "WHETSTONE-SPIKING";
pub const SPIKING_VERSION: u32 = 1;
pub const THRESHOLD: f32 = 0.5;
pub const INPUT_ENCODING: &str = "raw value / 255, NHWC order";

/// One stage of a [`SpikingModel`].
#[derive(Clone, Debug, PartialEq)]
pub enum SpikingLayer {
    /// Neurons with `weights: [inputs, units]`.
    Dense { weights: Tensor, bias: Tensor },
    /// Neurons with `kernels: [kh, kw, cin, cout]` over an NHWC map.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        geometry: Conv2dGeometry,
        padding: Padding,
    },
    /// OR over each window of an NHWC spike map.
    MaxPool {
        pool: (usize, usize),
        stride: (usize, usize),
        input: [usize; 3],
    },
}

impl SpikingLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            SpikingLayer::Dense { .. } => "dense",
            SpikingLayer::Conv2d { .. } => "conv2d",
            SpikingLayer::MaxPool { .. } => "maxpool",
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            SpikingLayer::Dense { weights, .. } => weights.shape()[0],
            SpikingLayer::Conv2d { geometry, .. } => geometry.in_len(),
            SpikingLayer::MaxPool { input, .. } => input.iter().product(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            SpikingLayer::Dense { bias, .. } => bias.len(),
            SpikingLayer::Conv2d { geometry, .. } => geometry.out_shape().iter().product(),
            SpikingLayer::MaxPool { pool, stride, input } => pool_out_dims(*input, *pool, *stride)
                .expect("validated pool")
                .iter()
                .product(),
        }
    }

    pub fn is_neuron_layer(&self) -> bool {
        !matches!(self, SpikingLayer::MaxPool { .. })
    }
}

/// Framework-free single-timestep spiking network. Each neuron fires iff
/// `Σ w·input + b ≥ 0.5`; the first layer integrates the analog input,
/// every later layer binary spikes.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikingModel {
    input_shape: Vec<usize>,
    layers: Vec<SpikingLayer>,
    code: NHotCode,
}

impl SpikingModel {
    pub fn new(input_shape: Vec<usize>, layers: Vec<SpikingLayer>, code: NHotCode) -> Result<Self> {
        let model = Self {
            input_shape,
            layers,
            code,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::Structure("spiking model has no layers".into()))?;
        if !first.is_neuron_layer() {
            return Err(Error::Structure("spiking model must start with a neuron layer".into()));
        }
        let mut width = self.input_len();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                SpikingLayer::Dense { weights, bias } => {
                    if weights.rank() != 2 || bias.len() != weights.shape()[1] {
                        return Err(dim_err(format!("dense stage {i} has inconsistent parameters")));
                    }
                }
                SpikingLayer::Conv2d {
                    kernels,
                    bias,
                    geometry,
                    ..
                } => {
                    if kernels.shape() != [geometry.k_h, geometry.k_w, geometry.in_c, geometry.out_c]
                        || bias.len() != geometry.out_c
                    {
                        return Err(dim_err(format!("conv stage {i} has inconsistent parameters")));
                    }
                }
                SpikingLayer::MaxPool { pool, stride, input } => {
                    pool_out_dims(*input, *pool, *stride)?;
                }
            }
            if l.input_len() != width {
                return Err(dim_err(format!(
                    "stage {i} ({}) expects {} inputs but receives {width}",
                    l.kind(),
                    l.input_len()
                )));
            }
            width = l.output_len();
        }
        if width != self.code.width() {
            return Err(dim_err(format!(
                "last stage emits {width} spikes but the output code expects {}",
                self.code.width()
            )));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[SpikingLayer] {
        &self.layers
    }

    pub fn code(&self) -> NHotCode {
        self.code
    }

    pub fn threshold(&self) -> f32 {
        THRESHOLD
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Payload::default();
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let record = match l {
                SpikingLayer::Dense { weights, bias } => {
                    payload.push(format!("layer{i}.weights"), weights.shape(), weights.data());
                    payload.push(format!("layer{i}.bias"), bias.shape(), bias.data());
                    StageRecord::Dense {
                        inputs: weights.shape()[0],
                        units: weights.shape()[1],
                    }
                }
                SpikingLayer::Conv2d {
                    kernels,
                    bias,
                    geometry: g,
                    padding,
                } => {
                    payload.push(format!("layer{i}.kernels"), kernels.shape(), kernels.data());
                    payload.push(format!("layer{i}.bias"), bias.shape(), bias.data());
                    StageRecord::Conv2d {
                        input: [g.in_h, g.in_w, g.in_c],
                        kernel: [g.k_h, g.k_w],
                        filters: g.out_c,
                        stride: [g.stride.0, g.stride.1],
                        padding: *padding,
                    }
                }
                SpikingLayer::MaxPool { pool, stride, input } => StageRecord::Maxpool {
                    input: *input,
                    pool: [pool.0, pool.1],
                    stride: [stride.0, stride.1],
                },
            };
            records.push(record);
        }
        let header = Header {
            input_shape: self.input_shape.clone(),
            input_encoding: INPUT_ENCODING.into(),
            threshold: THRESHOLD,
            classes: self.code.num_classes(),
            redundancy: self.code.redundancy(),
            layers: records,
            blobs: payload.entries.clone(),
        };
        container::encode(SPIKING_MAGIC, SPIKING_VERSION, &header, &payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let file = container::decode::<Header>(bytes, SPIKING_MAGIC)?;
        if file.version != SPIKING_VERSION {
            return Err(Error::Format(format!(
                "unsupported spiking model version {}",
                file.version
            )));
        }
        let h = &file.header;
        if h.threshold != THRESHOLD {
            return Err(Error::Format(format!("unsupported firing threshold {}", h.threshold)));
        }
        let tensor = |name: String, shape: &[usize]| -> Result<Tensor> {
            let e = container::find(&h.blobs, &name)?;
            if e.shape != shape {
                return Err(Error::Format(format!(
                    "blob {name} has shape {:?}, expected {shape:?}",
                    e.shape
                )));
            }
            Tensor::new(e.shape.clone(), file.blob(e)?)
        };
        let mut layers = Vec::with_capacity(h.layers.len());
        for (i, r) in h.layers.iter().enumerate() {
            layers.push(match r {
                StageRecord::Dense { inputs, units } => SpikingLayer::Dense {
                    weights: tensor(format!("layer{i}.weights"), &[*inputs, *units])?,
                    bias: tensor(format!("layer{i}.bias"), &[*units])?,
                },
                StageRecord::Conv2d {
                    input,
                    kernel,
                    filters,
                    stride,
                    padding,
                } => {
                    let geometry = Conv2dGeometry::new(
                        *input,
                        (kernel[0], kernel[1]),
                        *filters,
                        (stride[0], stride[1]),
                        *padding,
                    )?;
                    SpikingLayer::Conv2d {
                        kernels: tensor(format!("layer{i}.kernels"), &[kernel[0], kernel[1], input[2], *filters])?,
                        bias: tensor(format!("layer{i}.bias"), &[*filters])?,
                        geometry,
                        padding: *padding,
                    }
                }
                StageRecord::Maxpool { input, pool, stride } => SpikingLayer::MaxPool {
                    pool: (pool[0], pool[1]),
                    stride: (stride[0], stride[1]),
                    input: *input,
                },
            });
        }
        SpikingModel::new(h.input_shape.clone(), layers, NHotCode::new(h.classes, h.redundancy)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum StageRecord {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv2d {
        input: [usize; 3],
        kernel: [usize; 2],
        filters: usize,
        stride: [usize; 2],
        padding: Padding,
    },
    Maxpool {
        input: [usize; 3],
        pool: [usize; 2],
        stride: [usize; 2],
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    input_encoding: String,
    threshold: f32,
    classes: usize,
    redundancy: usize,
    layers: Vec<StageRecord>,
    blobs: Vec<BlobEntry>,
}

/// Converts a fully sharpened, batchnorm-free network into a
/// [`SpikingModel`].
///
/// Every dense or convolutional layer must reach a spiking activation,
/// possibly through flatten or max-pool layers. Pooling placed before the
/// activation becomes an OR over spikes after it, which is equivalent
/// because the step function is monotone.
pub fn export_spiking(net: &Network) -> Result<SpikingModel> {
    if let Some(i) = net.layers().iter().position(|l| matches!(l, Layer::BatchNorm { .. })) {
        return Err(Error::Structure(format!(
            "batchnorm layer {i} must be folded before export"
        )));
    }
    let soft: Vec<(usize, f64)> = net
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::SpikingBrelu { sharpness } if !sharpness.is_spiking() => Some((i, sharpness.value())),
            _ => None,
        })
        .collect();
    if !soft.is_empty() {
        return Err(Error::NotFullySharpened(soft));
    }
    let code = net
        .output_code()
        .ok_or_else(|| Error::Structure("network must end in an n-hot decoding layer".into()))?;

    let params_only = |t: &Tensor| {
        let mut t = t.clone();
        t.clear_grad();
        t
    };
    let mut stages = Vec::new();
    let mut pending: Option<(usize, SpikingLayer)> = None;
    let mut pending_pools = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Dense { weights, bias, .. } => {
                if let Some((j, _)) = pending {
                    return Err(Error::Structure(format!(
                        "layer {i} follows layer {j} without a spiking activation in between"
                    )));
                }
                pending = Some((
                    i,
                    SpikingLayer::Dense {
                        weights: params_only(weights),
                        bias: params_only(bias),
                    },
                ));
            }
            Layer::Conv2d {
                kernels,
                bias,
                geometry,
                padding,
                ..
            } => {
                if let Some((j, _)) = pending {
                    return Err(Error::Structure(format!(
                        "layer {i} follows layer {j} without a spiking activation in between"
                    )));
                }
                pending = Some((
                    i,
                    SpikingLayer::Conv2d {
                        kernels: params_only(kernels),
                        bias: params_only(bias),
                        geometry: *geometry,
                        padding: *padding,
                    },
                ));
            }
            Layer::MaxPool { pool, stride, input } => {
                let stage = SpikingLayer::MaxPool {
                    pool: *pool,
                    stride: *stride,
                    input: *input,
                };
                if pending.is_some() {
                    pending_pools.push(stage);
                } else if stages.is_empty() {
                    return Err(Error::Structure(format!(
                        "max pooling layer {i} acts on the analog input; only spike maps can be pooled"
                    )));
                } else {
                    stages.push(stage);
                }
            }
            Layer::Flatten => {}
            Layer::SpikingBrelu { .. } => {
                let (_, stage) = pending.take().ok_or_else(|| {
                    Error::Structure(format!(
                        "spiking activation {i} has no dense or convolutional layer below it"
                    ))
                })?;
                stages.push(stage);
                stages.append(&mut pending_pools);
            }
            Layer::SoftmaxDecode { .. } => {
                if let Some((j, _)) = pending {
                    return Err(Error::Structure(format!(
                        "layer {j} feeds the output decoder without a spiking activation"
                    )));
                }
            }
            Layer::BatchNorm { .. } => unreachable!(),
        }
    }
    SpikingModel::new(net.input_shape().to_vec(), stages, code)
}
