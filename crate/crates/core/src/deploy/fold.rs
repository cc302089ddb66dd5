use crate::error::{Error, Result};
use crate::network::{Layer, Network};

/// Merges every batchnorm layer into the dense or convolutional layer directly
/// below it. With `k = γ/(σ + ε)` per feature:
///
/// ```text
/// w' = k·w
/// b' = k·(b − μ) + β
/// ```
///
/// The moving statistics are used, so the folded network reproduces
/// inference-mode output.
pub fn fold_batchnorm(net: &Network) -> Result<Network> {
    let mut layers: Vec<Layer> = Vec::with_capacity(net.layers().len());
    for (i, layer) in net.layers().iter().enumerate() {
        let Layer::BatchNorm { params, .. } = layer else {
            layers.push(layer.clone());
            continue;
        };
        let below = layers.last_mut().filter(|l| l.is_parameterized()).ok_or_else(|| {
            Error::Structure(format!(
                "batchnorm layer {i} does not directly follow a dense or convolutional layer"
            ))
        })?;
        let scale: Vec<f32> = (0..params.features())
            .map(|j| params.gamma.data()[j] / (params.moving_sigma[j] + params.epsilon))
            .collect();
        let (w, b) = match below {
            Layer::Dense { weights, bias, .. } => (weights, bias),
            Layer::Conv2d { kernels, bias, .. } => (kernels, bias),
            _ => unreachable!(),
        };
        // units / output channels are the last axis of both weight layouts
        let f = scale.len();
        for (idx, v) in w.data_mut().iter_mut().enumerate() {
            *v *= scale[idx % f];
        }
        for (j, v) in b.data_mut().iter_mut().enumerate() {
            *v = scale[j] * (*v - params.moving_mu[j]) + params.beta_shift.data()[j];
        }
    }
    Network::from_layers(net.input_shape().to_vec(), layers)
}
