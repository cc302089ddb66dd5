//! Experiment configuration, reference presets, and the end-to-end pipeline:
//! train with sharpening, checkpoint, fold, export, evaluate.
//!
//! A run directory contains:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | the resolved configuration |
//! | `metrics.csv` | `epoch, train_loss, test_accuracy, spiking_test_accuracy, sharpness_0.., gini, mode` |
//! | `sharpness.csv` | `epoch, batch, sharpness_0..` after every batch |
//! | `checkpoint.wnet` | the network just before sharpening began |
//! | `final.wnet`, `folded.wnet` | the trained network, and with batchnorm folded |
//! | `model.wspk` | spiking export (only when fully sharpened) |
//! | `opstats.csv` | spiking-runtime operation counts on the test set |
//! | `summary.json` | [`RunSummary`] |

mod config;
mod sweep;
mod train;

pub use config::{
    preset_network, DataConfig, ExperimentConfig, LossKind, NetworkChoice, CONV_PRESET, DENSE_PRESET, PRESETS,
};
pub use sweep::{
    mean_std, precision_formats, sweep_optimizers, sweep_precision, write_rows, OptimizerRow, PrecisionRow,
    LEARNING_RATE_GRID,
};
pub use train::{
    load_data, read_summary, run_experiment, run_with_data, EpochRecord, RunOutcome, RunSummary, CHECKPOINT_FILE,
    CONFIG_FILE, EXPORT_FILE, FINAL_FILE, FOLDED_FILE, METRICS_FILE, OPSTATS_FILE, SHARPNESS_FILE, SUMMARY_FILE,
};
