use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use whetstone::data::{load_idx, mnist_paths, Dataset};
use whetstone::deploy::{export_spiking, fold_batchnorm, quantize_weights, QFormat, SpikingModel};
use whetstone::encoding::dead_output_classes;
use whetstone::experiment::{
    mean_std, precision_formats, run_with_data, sweep_optimizers, sweep_precision, write_rows, ExperimentConfig,
    NetworkChoice, DENSE_PRESET,
};
use whetstone::metrics::{activity_profile, dead_node_census, gini};
use whetstone::optim::{OptimizerConfig, OptimizerKind};
use whetstone::runtime::batch_evaluate;
use whetstone::sharpen::{AdaptiveConfig, ProgrammedConfig, SchedulerConfig};
use whetstone::Network;

#[derive(Parser)]
#[command(
    name = "whetstone",
    version,
    about = "Train, sharpen and deploy binary-activation spiking networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network with sharpening and write all run artifacts.
    Train(TrainArgs),
    /// Report test accuracy of a saved network or spiking model.
    Evaluate(EvaluateArgs),
    /// Fold batch normalization into the preceding weights.
    Fold {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Round weights and biases to a fixed-point format.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        /// Format such as Q4.8.
        #[arg(long)]
        format: QFormat,
        #[arg(long)]
        out: PathBuf,
        /// Write the saturation / range report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Fold and export a fully sharpened network as a spiking model.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate networks at float32 and a list of fixed-point formats.
    SweepPrecision {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        /// Defaults to Q4.16, Q4.8, Q4.7, Q4.6, Q4.5.
        #[arg(long, value_delimiter = ',')]
        formats: Vec<QFormat>,
        #[command(flatten)]
        data: TestData,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run per optimizer, learning rate and seed.
    SweepOptimizers {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "adam,adamax,adadelta")]
        optimizers: Vec<OptimizerKind>,
        /// Learning rates; each optimizer's default when omitted.
        #[arg(long, value_delimiter = ',')]
        lrs: Vec<f32>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Activity profile, Gini coefficient and dead-node census of a network.
    Stats {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: TestData,
        /// Per-neuron mean activity CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct TestData {
    /// Directory with MNIST-layout IDX files; the test split is used.
    #[arg(long, env = "WHETSTONE_MNIST_DIR", default_value = "data/mnist")]
    data_dir: PathBuf,
    /// Explicit IDX image file (overrides --data-dir).
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    batch_size: usize,
}

impl TestData {
    fn load(&self) -> Result<Dataset> {
        let (i, l) = match (&self.images, &self.labels) {
            (Some(i), Some(l)) => (i.clone(), l.clone()),
            _ => mnist_paths(&self.data_dir, false),
        };
        let mut d = load_idx(&i, &l).with_context(|| format!("loading {}", i.display()))?;
        if let Some(n) = self.limit {
            if n == 0 {
                bail!("--limit must be ≥ 1");
            }
            d = d.head(n);
        }
        Ok(d)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SchedulerKind {
    Adaptive,
    Uniform,
    Programmed,
    None,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML experiment config; flags below override its fields.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named reference topology with its training recipe.
    #[arg(long, default_value = DENSE_PRESET)]
    preset: String,
    /// Directory with MNIST-layout IDX files [default: data/mnist].
    #[arg(long, env = "WHETSTONE_MNIST_DIR")]
    data_dir: Option<PathBuf>,
    /// Run directory [default: runs/<preset>-seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for initialization and shuffling [default: 1].
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch budget.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd, adam, adamax, adadelta or rmsprop.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Learning rate [default: the optimizer's own].
    #[arg(long)]
    lr: Option<f32>,
    /// Output neurons per class (preset networks only).
    #[arg(long)]
    n_hot: Option<usize>,
    /// Sharpening schedule.
    #[arg(long, value_enum)]
    scheduler: Option<SchedulerKind>,
    /// Adaptive sharpening rate per layer per epoch.
    #[arg(long)]
    rate: Option<f64>,
    /// Epochs before adaptive sharpening may start.
    #[arg(long)]
    initial_wait: Option<usize>,
    /// Programmed schedule: first sharpening epoch.
    #[arg(long, default_value_t = 5.0)]
    start_epoch: f64,
    /// Programmed schedule: epochs per layer.
    #[arg(long, default_value_t = 4.0)]
    duration: f64,
    /// Use only the first N training samples.
    #[arg(long)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    test_limit: Option<usize>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::for_preset(
                &self.preset,
                "data/mnist",
                format!("runs/{}-seed{}", self.preset, self.seed.unwrap_or(1)),
                1,
            )?,
        };
        if let Some(d) = &self.data_dir {
            c.data.dir = d.clone();
        }
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(e) = self.epochs {
            c.epochs = e;
        }
        if let Some(b) = self.batch_size {
            c.batch_size = b;
        }
        if let Some(k) = self.optimizer {
            c.optimizer = OptimizerConfig::new(k);
        }
        if let Some(lr) = self.lr {
            c.optimizer.learning_rate = Some(lr);
        }
        if let Some(n) = self.n_hot {
            match &mut c.network {
                NetworkChoice::Preset { n_hot, .. } => *n_hot = Some(n),
                NetworkChoice::Custom(_) => bail!("--n-hot applies to preset networks only"),
            }
        }
        if let Some(kind) = self.scheduler {
            c.sharpener = match kind {
                SchedulerKind::Adaptive => SchedulerConfig::Adaptive(AdaptiveConfig::default()),
                SchedulerKind::Uniform => SchedulerConfig::Adaptive(AdaptiveConfig {
                    uniform: true,
                    ..Default::default()
                }),
                SchedulerKind::Programmed => SchedulerConfig::Programmed(ProgrammedConfig {
                    start_epoch: self.start_epoch,
                    duration_per_layer: self.duration,
                }),
                SchedulerKind::None => SchedulerConfig::None,
            };
        }
        if let SchedulerConfig::Adaptive(a) = &mut c.sharpener {
            if let Some(r) = self.rate {
                a.rate = r;
            }
            if let Some(w) = self.initial_wait {
                a.initial_wait = Some(w);
            }
        }
        if self.train_limit.is_some() {
            c.data.train_limit = self.train_limit;
        }
        if self.test_limit.is_some() {
            c.data.test_limit = self.test_limit;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMode {
    Framework,
    SpikingRuntime,
}

#[derive(Args)]
struct EvaluateArgs {
    /// A saved network (.wnet) or spiking model (.wspk).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "framework")]
    mode: EvalMode,
    #[command(flatten)]
    data: TestData,
    /// Accuracy CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Operation-count CSV (spiking-runtime mode).
    #[arg(long)]
    opstats: Option<PathBuf>,
}

enum Artifact {
    Network(Network),
    Spiking(SpikingModel),
}

fn load_artifact(path: &Path) -> Result<Artifact> {
    let head = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if head.starts_with(whetstone::deploy::SPIKING_MAGIC.as_bytes()) {
        Ok(Artifact::Spiking(SpikingModel::from_bytes(head)?))
    } else {
        Ok(Artifact::Network(Network::from_bytes(head)?))
    }
}

fn load_network(path: &Path) -> Result<Network> {
    match load_artifact(path)? {
        Artifact::Network(n) => Ok(n),
        Artifact::Spiking(_) => bail!("{} is a spiking model; this command needs a network", path.display()),
    }
}

fn train_data(c: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    whetstone::experiment::load_data(c).with_context(|| format!("loading MNIST from {}", c.data.dir.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train(args) => {
            let c = args.resolve()?;
            let (train, test) = train_data(&c)?;
            let run = run_with_data(&c, &train, &test)?;
            let s = &run.summary;
            println!("run directory:        {}", c.output_dir.display());
            println!("epochs run:           {}", s.epochs_run);
            println!("checkpoint accuracy:  {:.4}", s.checkpoint_accuracy);
            println!("final accuracy:       {:.4}", s.final_accuracy);
            println!("spiking accuracy:     {:.4}", s.spiking_accuracy);
            if let Some(e) = &s.export_error {
                println!("export skipped:       {e}");
            }
        }
        Command::Evaluate(args) => {
            let data = args.data.load()?;
            let (mode, accuracy) = match (load_artifact(&args.model)?, args.mode) {
                (Artifact::Network(net), EvalMode::Framework) => (
                    "framework",
                    net.accuracy(&data.images, &data.labels, args.data.batch_size)?,
                ),
                (Artifact::Spiking(_), EvalMode::Framework) => {
                    bail!("spiking models can only be evaluated with --mode spiking-runtime")
                }
                (artifact, EvalMode::SpikingRuntime) => {
                    let model = match artifact {
                        Artifact::Spiking(m) => m,
                        Artifact::Network(net) => export_spiking(&fold_batchnorm(&net)?)?,
                    };
                    let (acc, stats) = batch_evaluate(&model, &data.images, &data.labels)?;
                    if let Some(p) = &args.opstats {
                        stats.write_csv(&model, p)?;
                    }
                    println!(
                        "synaptic events per sample: {:.1}",
                        stats.total_events() as f64 / stats.samples as f64
                    );
                    ("spiking-runtime", acc)
                }
            };
            println!("accuracy ({mode}): {accuracy:.4} on {} samples", data.len());
            if let Some(p) = &args.out {
                std::fs::write(
                    p,
                    format!(
                        "model,mode,samples,accuracy\n{},{mode},{},{accuracy}\n",
                        args.model.display(),
                        data.len()
                    ),
                )?;
            }
        }
        Command::Fold { model, out } => {
            let folded = fold_batchnorm(&load_network(&model)?)?;
            folded.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Quantize {
            model,
            format,
            out,
            report,
        } => {
            let (q, r) = quantize_weights(&load_network(&model)?, format)?;
            q.save(&out)?;
            if let Some(p) = report {
                r.write_csv(p)?;
            }
            println!("wrote {} ({} saturated values)", out.display(), r.saturated());
        }
        Command::Export { model, out } => {
            let m = export_spiking(&fold_batchnorm(&load_network(&model)?)?)?;
            m.save(&out)?;
            println!("wrote {} ({} stages)", out.display(), m.layers().len());
        }
        Command::SweepPrecision {
            models,
            formats,
            data,
            out,
        } => {
            let test = data.load()?;
            let nets = models
                .iter()
                .map(|p| Ok((p.display().to_string(), load_network(p)?)))
                .collect::<Result<Vec<_>>>()?;
            let formats = if formats.is_empty() {
                precision_formats()
            } else {
                formats
            };
            let rows = sweep_precision(&nets, &formats, &test, data.batch_size)?;
            for r in &rows {
                println!("{:40} {:>8} {:.4}", r.model, r.precision, r.accuracy);
            }
            write_rows(&rows, &out)?;
        }
        Command::SweepOptimizers {
            train,
            optimizers,
            lrs,
            seeds,
        } => {
            let base = train.resolve()?;
            let (tr, te) = train_data(&base)?;
            let lrs: Vec<Option<f32>> = if lrs.is_empty() {
                vec![None]
            } else {
                lrs.into_iter().map(Some).collect()
            };
            let rows = sweep_optimizers(&base, &optimizers, &lrs, &seeds, &tr, &te)?;
            write_rows(&rows, base.output_dir.join("optimizers.csv"))?;
            for kind in &optimizers {
                for lr in &lrs {
                    let lr = lr.unwrap_or(kind.default_learning_rate());
                    let acc: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.optimizer == *kind && r.learning_rate == lr)
                        .map(|r| r.spiking_accuracy)
                        .collect();
                    let (m, s) = mean_std(&acc);
                    println!("{kind:>9} lr={lr:<8} spiking accuracy mean {m:.4} std {s:.4}");
                }
            }
        }
        Command::Stats { model, data, out } => {
            let net = load_network(&model)?;
            let test = data.load()?;
            let profile = activity_profile(&net, &test.images, data.batch_size)?;
            match profile.gini() {
                Ok(g) => println!("network gini: {g:.4}"),
                Err(e) => println!("network gini: {e}"),
            }
            let dead = dead_node_census(&profile);
            for (l, d) in profile.layers.iter().zip(&dead) {
                let g = gini(&l.means).map_or("undefined".to_string(), |g| format!("{g:.4}"));
                println!(
                    "layer {:>2}: {:>5} neurons, {:>5} dead, gini {g}",
                    l.layer,
                    l.means.len(),
                    d
                );
            }
            if net.is_fully_sharpened() {
                let classes = dead_output_classes(&net, &test.images, data.batch_size)?;
                println!("dead output classes: {classes:?}");
            }
            if let Some(p) = out {
                let mut s = String::from("layer,neuron,mean_activity\n");
                for l in &profile.layers {
                    for (i, m) in l.means.iter().enumerate() {
                        s.push_str(&format!("{},{i},{m}\n", l.layer));
                    }
                }
                std::fs::write(p, s)?;
            }
        }
    }
    Ok(())
}
