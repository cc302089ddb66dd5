use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use whetstone::data::mnist_paths;
use whetstone::experiment::{DataConfig, ExperimentConfig, LossKind, NetworkChoice};
use whetstone::network::LayerSpec;
use whetstone::optim::{OptimizerConfig, OptimizerKind};
use whetstone::sharpen::{AdaptiveConfig, SchedulerConfig};
use whetstone::NetworkConfig;

fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

/// 10×10 images whose class is the index of the one bright row.
fn write_data(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (n, is_train) in [(train, true), (test, false)] {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 10;
            labels.push(c as u8);
            for row in 0..10 {
                for col in 0..10 {
                    let noise = ((i * 31 + row * 7 + col * 13) % 50) as u8;
                    pixels.push(if row == c { 200 + noise } else { noise });
                }
            }
        }
        let (ip, lp) = mnist_paths(dir, is_train);
        std::fs::write(ip, idx(0x0803, &[n as u32, 10, 10], &pixels)).unwrap();
        std::fs::write(lp, idx(0x0801, &[n as u32], &labels)).unwrap();
    }
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_whetstone"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn accuracy(stdout: &str) -> f64 {
    let line = stdout.lines().find(|l| l.starts_with("accuracy")).unwrap();
    line.split(": ")
        .nth(1)
        .unwrap()
        .split(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    root: PathBuf,
}

impl Fixture {
    fn p(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }
    fn r(&self, name: &str) -> String {
        self.run.join(name).display().to_string()
    }
}

fn trained() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    let run_dir = root.join("run");
    write_data(&data, 300, 100);
    let config = ExperimentConfig {
        seed: 2,
        epochs: 20,
        batch_size: 30,
        output_dir: run_dir.clone(),
        loss: LossKind::Softmax,
        eval_batch_size: 100,
        stop_when_sharpened: true,
        data: DataConfig {
            dir: data.clone(),
            train_limit: None,
            test_limit: None,
        },
        network: NetworkChoice::Custom(NetworkConfig {
            input_shape: vec![10, 10, 1],
            layers: vec![
                LayerSpec::Flatten,
                LayerSpec::dense(24),
                LayerSpec::batchnorm(),
                LayerSpec::SpikingBrelu,
                LayerSpec::dense(20),
                LayerSpec::SpikingBrelu,
                LayerSpec::SoftmaxDecode { classes: 10 },
            ],
        }),
        optimizer: OptimizerConfig::new(OptimizerKind::Adam).with_learning_rate(0.01),
        sharpener: SchedulerConfig::Adaptive(AdaptiveConfig {
            rate: 0.5,
            initial_wait: Some(2),
            ..AdaptiveConfig::default()
        }),
    };
    let cfg = root.join("config.toml");
    std::fs::write(&cfg, config.to_toml().unwrap()).unwrap();
    let out = ok(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(out.contains("spiking accuracy"), "{out}");
    Fixture {
        _dir: dir,
        data,
        run: run_dir,
        root,
    }
}

#[test]
fn end_to_end_commands() {
    let f = trained();
    let data = f.data.to_str().unwrap();
    for file in [
        "final.wnet",
        "checkpoint.wnet",
        "model.wspk",
        "metrics.csv",
        "summary.json",
    ] {
        assert!(f.run.join(file).exists(), "{file}");
    }

    let framework = accuracy(&ok(&["evaluate", "--model", &f.r("final.wnet"), "--data-dir", data]));
    let spiking_net = ok(&[
        "evaluate",
        "--model",
        &f.r("final.wnet"),
        "--mode",
        "spiking-runtime",
        "--data-dir",
        data,
        "--opstats",
        &f.p("ops.csv"),
    ]);
    let spiking_file = ok(&[
        "evaluate",
        "--model",
        &f.r("model.wspk"),
        "--mode",
        "spiking-runtime",
        "--data-dir",
        data,
        "--out",
        &f.p("acc.csv"),
    ]);
    assert_eq!(accuracy(&spiking_net), framework);
    assert_eq!(accuracy(&spiking_file), framework);
    assert!(framework > 0.8, "{framework}");
    assert!(std::fs::read_to_string(f.p("ops.csv"))
        .unwrap()
        .starts_with("layer,kind,"));
    assert!(std::fs::read_to_string(f.p("acc.csv"))
        .unwrap()
        .starts_with("model,mode,samples,accuracy\n"));

    ok(&["fold", "--model", &f.r("final.wnet"), "--out", &f.p("folded.wnet")]);
    let folded = accuracy(&ok(&["evaluate", "--model", &f.p("folded.wnet"), "--data-dir", data]));
    assert!((folded - framework).abs() <= 0.02, "{folded} vs {framework}");

    let q = ok(&[
        "quantize",
        "--model",
        &f.p("folded.wnet"),
        "--format",
        "Q4.16",
        "--out",
        &f.p("q.wnet"),
        "--report",
        &f.p("q.csv"),
    ]);
    assert!(q.contains("saturated"), "{q}");
    assert!(std::fs::read_to_string(f.p("q.csv"))
        .unwrap()
        .starts_with("format,layer,parameter"));

    ok(&["export", "--model", &f.r("final.wnet"), "--out", &f.p("again.wspk")]);
    assert_eq!(
        std::fs::read(f.p("again.wspk")).unwrap(),
        std::fs::read(f.r("model.wspk")).unwrap()
    );

    let stats = ok(&[
        "stats",
        "--model",
        &f.r("final.wnet"),
        "--data-dir",
        data,
        "--out",
        &f.p("act.csv"),
    ]);
    assert!(stats.contains("network gini"), "{stats}");
    assert!(stats.contains("dead output classes"), "{stats}");
    let act = std::fs::read_to_string(f.p("act.csv")).unwrap();
    assert_eq!(act.lines().count(), 1 + 24 + 20);
}

#[test]
fn error_paths_fail_cleanly() {
    let f = trained();
    let data = f.data.to_str().unwrap();

    let out = run(&[
        "evaluate",
        "--model",
        &f.r("checkpoint.wnet"),
        "--mode",
        "spiking-runtime",
        "--data-dir",
        data,
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not fully sharpened"), "{err}");

    let out = run(&["export", "--model", &f.r("checkpoint.wnet"), "--out", &f.p("x.wspk")]);
    assert!(!out.status.success());
    assert!(!f.root.join("x.wspk").exists());

    let empty = f.root.join("empty");
    write_data(&empty, 10, 0);
    let out = run(&[
        "evaluate",
        "--model",
        &f.r("final.wnet"),
        "--data-dir",
        empty.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));

    let out = run(&["evaluate", "--model", &f.r("model.wspk"), "--data-dir", data]);
    assert!(!out.status.success());

    let out = run(&[
        "quantize",
        "--model",
        &f.r("final.wnet"),
        "--format",
        "Q4",
        "--out",
        &f.p("y.wnet"),
    ]);
    assert!(!out.status.success());

    let out = run(&["evaluate", "--model", &f.p("missing.wnet"), "--data-dir", data]);
    assert!(!out.status.success());
}
