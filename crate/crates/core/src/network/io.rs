use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Layer, LayerSpec, Network, NetworkConfig};
use crate::activation::Sharpness;
use crate::container::{self, BlobEntry, Payload};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "WHETSTONE-NETWORK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sharpness: Option<Sharpness>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
    blobs: Vec<BlobEntry>,
}

impl Network {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Payload::default();
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut sharpness = None;
            match layer {
                Layer::Dense { weights, bias, .. } => {
                    payload.push(format!("layer{i}.weights"), weights.shape(), weights.data());
                    payload.push(format!("layer{i}.bias"), bias.shape(), bias.data());
                }
                Layer::Conv2d { kernels, bias, .. } => {
                    payload.push(format!("layer{i}.kernels"), kernels.shape(), kernels.data());
                    payload.push(format!("layer{i}.bias"), bias.shape(), bias.data());
                }
                Layer::BatchNorm { params, .. } => {
                    let f = [params.features()];
                    payload.push(format!("layer{i}.gamma"), &f, params.gamma.data());
                    payload.push(format!("layer{i}.beta_shift"), &f, params.beta_shift.data());
                    payload.push(format!("layer{i}.moving_mu"), &f, &params.moving_mu);
                    payload.push(format!("layer{i}.moving_sigma"), &f, &params.moving_sigma);
                }
                Layer::SpikingBrelu { sharpness: s } => sharpness = Some(*s),
                _ => {}
            }
            records.push(LayerRecord {
                spec: layer.spec(),
                sharpness,
            });
        }
        let header = Header {
            input_shape: self.input_shape.clone(),
            layers: records,
            blobs: payload.entries.clone(),
        };
        container::encode(MAGIC, VERSION, &header, &payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let file = container::decode::<Header>(bytes, MAGIC)?;
        if file.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported network file version {}",
                file.version
            )));
        }
        let h = &file.header;
        let config = NetworkConfig {
            input_shape: h.input_shape.clone(),
            layers: h.layers.iter().map(|r| r.spec.clone()).collect(),
        };
        let mut net = Network::build(&config, 0)?;
        let tensor = |name: String| -> Result<Tensor> {
            let e = container::find(&h.blobs, &name)?;
            Tensor::new(e.shape.clone(), file.blob(e)?)
        };
        for (i, (layer, record)) in net.layers.iter_mut().zip(&h.layers).enumerate() {
            match layer {
                Layer::Dense { weights, bias, .. } => {
                    *weights = expect_shape(tensor(format!("layer{i}.weights"))?, weights.shape())?;
                    *bias = expect_shape(tensor(format!("layer{i}.bias"))?, bias.shape())?;
                }
                Layer::Conv2d { kernels, bias, .. } => {
                    *kernels = expect_shape(tensor(format!("layer{i}.kernels"))?, kernels.shape())?;
                    *bias = expect_shape(tensor(format!("layer{i}.bias"))?, bias.shape())?;
                }
                Layer::BatchNorm { params, .. } => {
                    let f = [params.features()];
                    params.gamma = expect_shape(tensor(format!("layer{i}.gamma"))?, &f)?;
                    params.beta_shift = expect_shape(tensor(format!("layer{i}.beta_shift"))?, &f)?;
                    params.moving_mu = expect_shape(tensor(format!("layer{i}.moving_mu"))?, &f)?.into_data();
                    params.moving_sigma = expect_shape(tensor(format!("layer{i}.moving_sigma"))?, &f)?.into_data();
                    params.validate()?;
                }
                Layer::SpikingBrelu { sharpness } => {
                    *sharpness = record.sharpness.unwrap_or(Sharpness::SOFT);
                }
                _ => {}
            }
        }
        Ok(net)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }
}

fn expect_shape(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() != shape {
        return Err(Error::Format(format!(
            "stored parameter has shape {:?}, layer expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t)
}
