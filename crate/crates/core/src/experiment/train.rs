use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, LossKind};
use crate::data::{load_mnist, Dataset};
use crate::deploy::{csv_err, export_spiking, fold_batchnorm, SpikingModel};
use crate::encoding::NHotCode;
use crate::error::{Error, Result};
use crate::metrics::{ActivityAccumulator, ActivityProfile};
use crate::network::Network;
use crate::optim::Optimizer;
use crate::runtime::{batch_evaluate, OpStats};
use crate::sharpen::{Scheduler, SharpenerMode};
use crate::tensor::{softmax_crossentropy, Tensor};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SHARPNESS_FILE: &str = "sharpness.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.wnet";
pub const FINAL_FILE: &str = "final.wnet";
pub const FOLDED_FILE: &str = "folded.wnet";
pub const EXPORT_FILE: &str = "model.wspk";
pub const OPSTATS_FILE: &str = "opstats.csv";

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: f64,
    /// Accuracy with every spiking layer temporarily at s = 1.
    pub spiking_test_accuracy: f64,
    pub sharpness: Vec<f64>,
    pub gini: Option<f64>,
    pub mode: SharpenerMode,
}

/// Headline numbers of a finished run, also written to `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs_run: usize,
    pub fully_sharpened: bool,
    /// First epoch with any sharpening, if sharpening started.
    pub sharpening_started: Option<usize>,
    /// Epoch in which the last layer reached s = 1.
    pub sharpening_finished: Option<usize>,
    pub final_train_loss: f64,
    /// Test accuracy of the pre-sharpening checkpoint.
    pub checkpoint_accuracy: f64,
    pub checkpoint_gini: Option<f64>,
    /// Test accuracy of the final network at its final sharpness.
    pub final_accuracy: f64,
    /// Test accuracy with every layer at s = 1: the exported model on the
    /// spiking runtime when the run finished sharpening, otherwise the final
    /// network forced to s = 1.
    pub spiking_accuracy: f64,
    pub final_gini: Option<f64>,
    pub dead_output_classes: Vec<usize>,
    pub dead_hidden_nodes: Vec<usize>,
    pub skipped_updates: usize,
    /// Why the spiking export was not produced, if it was not.
    pub export_error: Option<String>,
}

/// Everything a run produced, in memory.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub epochs: Vec<EpochRecord>,
    pub checkpoint: Network,
    pub final_net: Network,
    pub folded: Network,
    pub spiking: Option<SpikingModel>,
    pub opstats: Option<OpStats>,
    pub checkpoint_profile: ActivityProfile,
    pub final_profile: ActivityProfile,
}

/// Loads the datasets named by the config, honouring the sample limits.
pub fn load_data(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = load_mnist(&config.data.dir)?;
    if let Some(n) = config.data.train_limit {
        train = train.head(n);
    }
    if let Some(n) = config.data.test_limit {
        test = test.head(n);
    }
    Ok((train, test))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome> {
    let (train, test) = load_data(config)?;
    run_with_data(config, &train, &test)
}

struct Evaluation {
    accuracy: f64,
    profile: ActivityProfile,
}

fn evaluate(net: &Network, data: &Dataset, batch: usize, epoch: Option<usize>) -> Result<Evaluation> {
    let code = output_code(net)?;
    let penultimate = net.layers().len() - 2;
    let mut acc = ActivityAccumulator::new(net);
    let mut hits = 0usize;
    net.for_each_batch(&data.images, batch, |start, acts| {
        acc.add(acts);
        let preds = code.decode(&acts[penultimate])?;
        hits += preds.iter().zip(&data.labels[start..]).filter(|(p, l)| p == l).count();
        Ok(())
    })?;
    Ok(Evaluation {
        accuracy: hits as f64 / data.len() as f64,
        profile: acc.finish(epoch),
    })
}

fn output_code(net: &Network) -> Result<NHotCode> {
    net.output_code()
        .ok_or_else(|| Error::Structure("network must end in an n-hot decoding layer".into()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |v| v.to_string())
}

/// Trains, sharpens, folds, and exports one network, writing every
/// artifact to `config.output_dir`.
pub fn run_with_data(config: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    retain_freed_memory();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Validation("training and test sets must be non-empty".into()));
    }
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml()?)?;

    let net_config = config.network.resolve(train.num_classes)?;
    let mut net = Network::build(&net_config, config.seed)?;
    let code = output_code(&net)?;
    if code.num_classes() != train.num_classes {
        return Err(Error::Config(format!(
            "network decodes {} classes but the dataset has {}",
            code.num_classes(),
            train.num_classes
        )));
    }
    let spiking = net.spiking_layer_indices();
    let mut optimizer = Optimizer::new(&config.optimizer)?;
    let mut scheduler = Scheduler::new(&config.sharpener, spiking.len(), config.epochs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let mut metrics = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(csv_err)?;
    let mut sharp_csv = csv::Writer::from_path(out.join(SHARPNESS_FILE)).map_err(csv_err)?;
    let s_cols: Vec<String> = (0..spiking.len()).map(|k| format!("sharpness_{k}")).collect();
    let mut header = vec!["epoch", "train_loss", "test_accuracy", "spiking_test_accuracy"];
    header.extend(s_cols.iter().map(String::as_str));
    header.extend(["gini", "mode"]);
    metrics.write_record(&header).map_err(csv_err)?;
    let mut sheader = vec!["epoch", "batch"];
    sheader.extend(s_cols.iter().map(String::as_str));
    sharp_csv.write_record(&sheader).map_err(csv_err)?;

    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let penultimate = net.layers().len() - 2;
    let mut checkpoint: Option<Network> = None;
    let mut started = None;
    let mut finished = None;
    let mut skipped = 0usize;
    let mut records = Vec::new();
    let mut train_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let order = train.shuffled_indices(&mut rng);
        let mut loss_sum = 0f64;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let x = train.gather(rows);
            let labels: Vec<usize> = rows.iter().map(|&i| train.labels[i]).collect();
            net.forward_train(&x)?;
            let (loss, grad, top) = match config.loss {
                LossKind::Softmax => {
                    let logits = net.cached_output(net.layers().len() - 1).expect("cached");
                    let (l, g) = softmax_crossentropy(logits, &train.one_hot(rows))?;
                    (l as f64, g, net.layers().len() - 1)
                }
                LossKind::Mse => {
                    let a = net.cached_output(penultimate).expect("cached");
                    let (l, g) = mse(a, &code.targets(&labels)?)?;
                    (l, g, penultimate)
                }
            };
            loss_sum += loss;
            net.backward_from(top, &grad)?;
            match optimizer.step(net.params_mut()) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => skipped += 1,
                Err(e) => return Err(e),
            }
            net.zero_grad();

            let before = scheduler.sharpness();
            let after = scheduler.after_batch(epoch, b, batches_per_epoch);
            if after != before {
                if checkpoint.is_none() {
                    checkpoint = Some(net.clone());
                    started = Some(epoch);
                }
                for (k, (&s0, &s1)) in before.iter().zip(&after).enumerate() {
                    if s1 != s0 {
                        net.set_layer_sharpness(spiking[k], s1)?;
                    }
                }
                if finished.is_none() && net.is_fully_sharpened() {
                    finished = Some(epoch);
                }
            }
            let mut row = vec![epoch.to_string(), b.to_string()];
            row.extend(after.iter().map(f64::to_string));
            sharp_csv.write_record(&row).map_err(csv_err)?;
        }
        train_loss = loss_sum / batches_per_epoch as f64;
        scheduler.after_epoch(train_loss);

        let eval = evaluate(&net, test, config.eval_batch_size, Some(epoch))?;
        let spiking_acc = if net.is_fully_sharpened() {
            eval.accuracy
        } else {
            net.fully_sharpened()
                .accuracy(&test.images, &test.labels, config.eval_batch_size)?
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            test_accuracy: eval.accuracy,
            spiking_test_accuracy: spiking_acc,
            sharpness: net.sharpness().iter().map(|s| s.value()).collect(),
            gini: eval.profile.gini().ok(),
            mode: scheduler.mode(),
        };
        let mut row = vec![
            epoch.to_string(),
            record.train_loss.to_string(),
            record.test_accuracy.to_string(),
            record.spiking_test_accuracy.to_string(),
        ];
        row.extend(record.sharpness.iter().map(f64::to_string));
        row.push(fmt_opt(record.gini));
        row.push(record.mode.to_string());
        metrics.write_record(&row).map_err(csv_err)?;
        metrics.flush()?;
        records.push(record);
        if config.stop_when_sharpened && finished.is_some() {
            break;
        }
    }
    sharp_csv.flush()?;
    drop(metrics);

    let checkpoint = checkpoint.unwrap_or_else(|| net.clone());
    checkpoint.save(out.join(CHECKPOINT_FILE))?;
    net.save(out.join(FINAL_FILE))?;
    let folded = fold_batchnorm(&net)?;
    folded.save(out.join(FOLDED_FILE))?;

    let ck = evaluate(&checkpoint, test, config.eval_batch_size, None)?;
    let fin = evaluate(&net, test, config.eval_batch_size, None)?;
    let sharp = net.fully_sharpened();
    let dead_output_classes = crate::encoding::dead_output_classes(&sharp, &test.images, config.eval_batch_size)?
        .into_iter()
        .collect();
    let (spiking_model, opstats, spiking_accuracy, export_error) = match export_spiking(&folded) {
        Ok(model) => {
            model.save(out.join(EXPORT_FILE))?;
            let (acc, stats) = batch_evaluate(&model, &test.images, &test.labels)?;
            stats.write_csv(&model, out.join(OPSTATS_FILE))?;
            (Some(model), Some(stats), acc, None)
        }
        Err(e) => {
            let acc = sharp.accuracy(&test.images, &test.labels, config.eval_batch_size)?;
            (None, None, acc, Some(e.to_string()))
        }
    };
    let summary = RunSummary {
        seed: config.seed,
        epochs_run: records.len(),
        fully_sharpened: net.is_fully_sharpened(),
        sharpening_started: started,
        sharpening_finished: finished,
        final_train_loss: train_loss,
        checkpoint_accuracy: ck.accuracy,
        checkpoint_gini: ck.profile.gini().ok(),
        final_accuracy: fin.accuracy,
        spiking_accuracy,
        final_gini: fin.profile.gini().ok(),
        dead_output_classes,
        dead_hidden_nodes: crate::metrics::dead_node_census(&fin.profile),
        skipped_updates: skipped,
        export_error,
    };
    write_summary(out, &summary)?;
    Ok(RunOutcome {
        summary,
        epochs: records,
        checkpoint,
        final_net: net,
        folded,
        spiking: spiking_model,
        opstats,
        checkpoint_profile: ck.profile,
        final_profile: fin.profile,
    })
}

/// Training allocates and frees the same large activation buffers every
/// batch. By default glibc hands such blocks straight back to the kernel, so
/// every batch pays for fresh page faults; keep them in the heap instead.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    {
        static ONCE: std::sync::Once = std::sync::Once::new();
        ONCE.call_once(|| unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        });
    }
}

fn write_summary(dir: &Path, summary: &RunSummary) -> Result<()> {
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn read_summary(dir: impl AsRef<Path>) -> Result<RunSummary> {
    Ok(serde_json::from_slice(&fs::read(dir.as_ref().join(SUMMARY_FILE))?)?)
}

/// Mean squared error over all elements and its gradient.
fn mse(a: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if a.shape() != target.shape() {
        return Err(Error::Dimension(format!(
            "outputs {:?} vs targets {:?}",
            a.shape(),
            target.shape()
        )));
    }
    let n = a.len() as f32;
    let mut loss = 0f64;
    let grad = a
        .data()
        .iter()
        .zip(target.data())
        .map(|(&x, &t)| {
            let d = x - t;
            loss += (d * d) as f64;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n as f64, Tensor::new(a.shape().to_vec(), grad)?))
}
