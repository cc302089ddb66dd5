use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::run_with_data;
use crate::data::Dataset;
use crate::deploy::{csv_err, fold_batchnorm, quantize_weights, QFormat};
use crate::error::Result;
use crate::network::Network;
use crate::optim::{OptimizerConfig, OptimizerKind};

/// Formats of the reduced-precision study.
pub fn precision_formats() -> Vec<QFormat> {
    [(4, 16), (4, 8), (4, 7), (4, 6), (4, 5)]
        .into_iter()
        .map(|(m, n)| QFormat::new(m, n).expect("valid format"))
        .collect()
}

/// Learning rates of the optimizer study.
pub const LEARNING_RATE_GRID: [f32; 5] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRow {
    pub model: String,
    /// `float32` or a `Qm.n` format.
    pub precision: String,
    pub accuracy: f64,
    pub saturated: usize,
}

/// Folds each network, evaluates it at full precision and under every
/// format, and returns one row per (model, precision).
pub fn sweep_precision(
    models: &[(String, Network)],
    formats: &[QFormat],
    test: &Dataset,
    batch_size: usize,
) -> Result<Vec<PrecisionRow>> {
    let mut rows = Vec::new();
    for (name, net) in models {
        let folded = fold_batchnorm(net)?;
        rows.push(PrecisionRow {
            model: name.clone(),
            precision: "float32".into(),
            accuracy: folded.accuracy(&test.images, &test.labels, batch_size)?,
            saturated: 0,
        });
        for &q in formats {
            let (qnet, report) = quantize_weights(&folded, q)?;
            rows.push(PrecisionRow {
                model: name.clone(),
                precision: q.to_string(),
                accuracy: qnet.accuracy(&test.images, &test.labels, batch_size)?,
                saturated: report.saturated(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRow {
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub seed: u64,
    pub spiking_accuracy: f64,
    pub checkpoint_accuracy: f64,
    pub fully_sharpened: bool,
}

/// Trains `base` once per (optimizer, learning rate, seed) into
/// `base.output_dir/<optimizer>-lr<rate>-seed<seed>`. A `None` learning rate
/// uses the optimizer's default.
pub fn sweep_optimizers(
    base: &ExperimentConfig,
    kinds: &[OptimizerKind],
    learning_rates: &[Option<f32>],
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<OptimizerRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        for &lr in learning_rates {
            let opt = match lr {
                Some(lr) => OptimizerConfig::new(kind).with_learning_rate(lr),
                None => OptimizerConfig::new(kind),
            };
            for &seed in seeds {
                let mut c = base.clone();
                c.seed = seed;
                c.output_dir = base
                    .output_dir
                    .join(format!("{kind}-lr{}-seed{seed}", opt.learning_rate()));
                c.optimizer = opt.clone();
                let run = run_with_data(&c, train, test)?;
                rows.push(OptimizerRow {
                    optimizer: kind,
                    learning_rate: opt.learning_rate(),
                    seed,
                    spiking_accuracy: run.summary.spiking_accuracy,
                    checkpoint_accuracy: run.summary.checkpoint_accuracy,
                    fully_sharpened: run.summary.fully_sharpened,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(rows: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
