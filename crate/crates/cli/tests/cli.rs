//! End-to-end tests of the `cfse` binary: every verb runs as a child
//! process against a small synthetic dataset laid out with the canonical
//! file names, and the tests assert exit codes, stdout contracts, and the
//! artifacts left in the output directory.

use cfse::data::{write_idx_images, write_idx_labels};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfse"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

/// Left-bright images are class 1, right-bright class 2, with a little
/// deterministic jitter — trivially separable, so two epochs learn it.
fn separable_idx(n: usize, salt: u64) -> (Vec<u8>, Vec<u8>) {
    let mut pixels = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        labels.push(label);
        for p in 0..64 {
            let x = p % 8;
            let bright = if label == 0 { x < 4 } else { x >= 4 };
            let jitter = ((i as u64 * 37 + p as u64 * 11 + salt) % 23) as u8;
            pixels.push(if bright { 180 + jitter } else { 20 + jitter });
        }
    }
    (pixels, labels)
}

/// Temp workspace with the dataset under `data/` using MNIST's file names.
struct Fixture {
    root: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        std::fs::create_dir(&data).unwrap();
        let (px, lb) = separable_idx(64, 1);
        write_idx_images(&data.join("train-images-idx3-ubyte"), &px, 64, 8, 8).unwrap();
        write_idx_labels(&data.join("train-labels-idx1-ubyte"), &lb).unwrap();
        let (px, lb) = separable_idx(30, 2);
        write_idx_images(&data.join("t10k-images-idx3-ubyte"), &px, 30, 8, 8).unwrap();
        write_idx_labels(&data.join("t10k-labels-idx1-ubyte"), &lb).unwrap();
        Self { root }
    }

    fn data_dir(&self) -> PathBuf {
        self.root.path().join("data")
    }

    fn out_dir(&self) -> PathBuf {
        self.root.path().join("run")
    }

    fn write_config(&self, epochs: u32, extra_ilt: &str) -> PathBuf {
        let text = format!(
            "[dataset]\nname = mnist\ndir = {}\n\n\
             [network]\ninput = 1x8x8\nclasses = 2\nlr = 0.01\npredictor = softmax\n\n\
             [layer]\nchannels = 4\n\n\
             [layer]\nchannels = 6\ngrouped = true\nmaxpool = true\n\n\
             [ilt]\n{extra_ilt}\n\
             [train]\nseed = 0\nbatch_size = 16\nepochs = {epochs}\n\
             eval_every = 0\nheads = softmax\nout_dir = {}\n",
            self.data_dir().display(),
            self.out_dir().display()
        );
        let path = self.root.path().join("run.cfg");
        std::fs::write(&path, text).unwrap();
        path
    }
}

const CSV_HEADER: &str =
    "epoch, layer_id, train_loss, layer_goodness_acc, sf_test_err, gd_test_err, ga_test_err, seconds";

#[test]
fn train_writes_artifacts_and_a_summary_line() {
    let fx = Fixture::new();
    let cfg = fx.write_config(2, "");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let summary = stdout(&out);
    let line = summary.lines().last().unwrap();
    let fields: Vec<&str> = line.split(", ").collect();
    assert_eq!(fields[0], "mnist");
    assert_eq!(fields[1], "CFSE_CwC+Sf");
    let err: f64 = fields[2].parse().unwrap();
    assert!((0.0..=100.0).contains(&err), "error out of range: {err}");
    assert_eq!(fields[3], "2");
    assert_eq!(fields[4], "0");

    assert!(fx.out_dir().join("model.ckpt").exists());
    assert!(fx.out_dir().join("model.manifest.txt").exists());
    let csv = std::fs::read_to_string(fx.out_dir().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], CSV_HEADER);
    // One row per (epoch, layer).
    assert_eq!(lines.len(), 1 + 2 * 2);
}

#[test]
fn metrics_are_reproducible_except_wall_time() {
    let fx = Fixture::new();
    let strip_seconds = |csv: &str| -> String {
        csv.lines()
            .map(|l| l.rsplit_once(", ").map(|(head, _)| head.to_string()).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    };
    let cfg = fx.write_config(2, "");
    let mut runs = Vec::new();
    for sub in ["a", "b"] {
        let out_dir = fx.root.path().join(sub);
        let out = bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        runs.push((
            stdout(&out),
            std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(runs[0].0, runs[1].0, "summary lines differ between runs");
    assert_eq!(
        strip_seconds(&runs[0].1),
        strip_seconds(&runs[1].1),
        "metrics differ beyond the wall-time column"
    );
}

#[test]
fn zero_epochs_reports_chance_level_and_an_untrained_checkpoint() {
    let fx = Fixture::new();
    let cfg = fx.write_config(9, "");
    let out = bin()
        .args(["train", "--epochs", "0", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    // The zero-initialized head predicts class 1 for everything; the test
    // split is half class 1, so the error is exactly chance level.
    let line = stdout(&out);
    let fields: Vec<&str> = line.trim().split(", ").collect();
    assert_eq!(fields[2], "50.00");
    assert_eq!(fields[3], "0");

    let (net, _) = cfse::checkpoint::load_checkpoint(&fx.out_dir().join("model.ckpt")).unwrap();
    assert!(net.layers.iter().all(|l| l.epochs_trained == 0 && !l.frozen));
}

#[test]
fn missing_dataset_exits_2_and_names_the_path() {
    let fx = Fixture::new();
    let cfg = fx.write_config(1, "");
    std::fs::remove_file(fx.data_dir().join("train-images-idx3-ubyte")).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("train-images-idx3-ubyte"),
        "stderr: {}",
        stderr(&out)
    );
}

#[test]
fn config_problems_exit_1() {
    let fx = Fixture::new();
    // Unknown key in an otherwise valid config.
    let bad = fx.root.path().join("bad.cfg");
    let mut text = std::fs::read_to_string(fx.write_config(1, "")).unwrap();
    text.push_str("speed = 9\n");
    std::fs::write(&bad, text).unwrap();
    let out = bin().args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("speed"), "stderr: {}", stderr(&out));

    // Softmax headline error with no softmax head trained.
    let cfg = fx.write_config(1, "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace("heads = softmax", "heads = none");
    std::fs::write(&cfg, text).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
}

#[test]
fn env_overrides_reach_the_child_process() {
    let fx = Fixture::new();
    let cfg = fx.write_config(2, "");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .env("CFSE_TRAIN_EPOCHS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let line = stdout(&out);
    let fields: Vec<&str> = line.trim().split(", ").collect();
    assert_eq!(fields[3], "1", "epoch override ignored: {line}");
}

#[test]
fn eval_reproduces_the_training_summary_error() {
    let fx = Fixture::new();
    let cfg = fx.write_config(2, "");
    let train_out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(train_out.status.success(), "stderr: {}", stderr(&train_out));
    let summary = stdout(&train_out);
    let sf_err = summary.trim().split(", ").nth(2).unwrap().to_string();

    let out = bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(fx.out_dir().join("model.ckpt"))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let sf_line = text
        .lines()
        .find(|l| l.contains("+Sf"))
        .expect("no softmax line in eval output");
    assert!(
        sf_line.ends_with(&sf_err),
        "eval {sf_line:?} disagrees with train summary {sf_err:?}"
    );
    // The training-free head is always evaluable.
    assert!(text.lines().any(|l| l.contains("+GA")));
}

#[test]
fn count_params_prints_the_reference_totals_and_the_note() {
    // The canonical four-block stack over 3x32x32 inputs.
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from(
        "[dataset]\nname = cifar10\ndir = unused\n\n\
         [network]\ninput = 3x32x32\nclasses = 10\npredictor = softmax\n\n",
    );
    for (c, grouped, pool) in
        [(20, false, false), (80, true, true), (240, false, false), (480, true, true)]
    {
        text.push_str(&format!(
            "[layer]\nchannels = {c}\ngrouped = {grouped}\nmaxpool = {pool}\n\n"
        ));
    }
    text.push_str("[train]\nepochs = 1\n");
    let cfg = dir.path().join("count.cfg");
    std::fs::write(&cfg, text).unwrap();

    let out = bin().args(["count-params", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let human = stdout(&out);
    assert!(human.contains("total: 588,130 parameters"), "got: {human}");
    assert!(human.contains("73,113,600 mult-adds"), "got: {human}");
    assert!(human.contains("588,133"), "missing note line: {human}");

    let out = bin()
        .args(["count-params", "--csv", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = stdout(&out);
    assert!(csv.lines().next().unwrap().starts_with("component,"));
    assert!(csv.contains("total, 588130, 73113600"), "got: {csv}");
}

#[test]
fn export_features_writes_the_grid_and_bounds_checks_the_index() {
    let fx = Fixture::new();
    let cfg = fx.write_config(1, "");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let ckpt = fx.out_dir().join("model.ckpt");

    let out = bin()
        .args(["export-features", "--index", "0", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let feat = fx.out_dir().join("features");
    // layers x classes maps plus the index file.
    for l in 1..=2 {
        for c in 1..=2 {
            assert!(feat.join(format!("layer{l}_class{c}.pgm")).exists());
        }
    }
    let index = std::fs::read_to_string(feat.join("index.txt")).unwrap();
    assert_eq!(index.lines().count(), 1 + 4);

    let out = bin()
        .args(["export-features", "--index", "10000", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("out of range"), "stderr: {}", stderr(&out));
}

#[test]
fn discover_schedule_writes_a_config_train_can_consume() {
    let fx = Fixture::new();
    // A huge min_delta makes every improvement sub-threshold, so the
    // detector fires as soon as its window fills and discovery stays fast.
    let cfg = fx.write_config(3, "plateau_window = 1\nplateau_min_delta = 1000000\n");
    let out = bin()
        .args(["discover-schedule", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("start = "), "got: {text}");
    assert!(text.contains("plateau = "), "got: {text}");

    let discovered = fx.out_dir().join("discovered.cfg");
    assert!(discovered.exists());
    // The emitted file parses and carries an explicit schedule.
    let parsed = cfse_cli::config::parse_file(&discovered).unwrap();
    assert!(parsed.ilt.start.is_some() && parsed.ilt.plateau.is_some());
    parsed.schedule().unwrap();

    // And train consumes it directly.
    let out = bin()
        .args(["train", "--config"])
        .arg(&discovered)
        .arg("--out")
        .arg(fx.root.path().join("from_discovered"))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
}
