//! Command-line frontend: train, eval, count-params, export-features, and
//! discover-schedule over plain-text run configurations.
//!
//! Exit codes: 1 configuration error, 2 data or file error, 3 numerical
//! divergence. Flag overrides beat environment overrides (`CFSE_*`), which
//! beat the config file. No command writes outside its output directory.

use cfse::checkpoint::{load_checkpoint, save_checkpoint, save_manifest};
use cfse::data::{load_cifar10_pair, load_idx_pair, Dataset};
use cfse::error::{Error, Result};
use cfse::ilt::{evaluate, run_interleaved_training, EvalHead, TrainOpts, TrainedHeads};
use cfse::ilt::discover_schedule;
use cfse::network::{build_network, count_mult_adds, count_parameters, Network, PredictorKind};
use cfse_cli::config::{self, RunConfig};
use cfse_cli::features;
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cfse",
    about = "Layer-wise CNN training with channel-wise competitive losses"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by the commands that run or resume a configuration.
#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override the seed from [train].
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from [train].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train per the configuration; writes metrics CSV, checkpoint, and
    /// manifest into the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the epoch budget from [train].
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Evaluate a checkpoint's heads on the configured test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print per-layer and total parameters plus multiply-adds.
    CountParams {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
        /// Machine-readable CSV instead of the table.
        #[arg(long)]
        csv: bool,
    },
    /// Export per-class activation maps for one test sample as portable
    /// graymaps plus an index.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Test-split sample index.
        #[arg(long)]
        index: usize,
    },
    /// Probe each layer's training plateau and write a schedule config
    /// consumable by train.
    DiscoverSchedule {
        #[command(flatten)]
        common: Common,
        /// Derive overlapped starts from the discovered plateaus.
        #[arg(long)]
        fast: bool,
        /// Fast-mode overlap (epochs a layer starts before its
        /// predecessor's plateau).
        #[arg(long)]
        overlap: Option<u32>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) => 2,
            Error::Numerical(_) => 3,
        });
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { common, epochs } => cmd_train(common, epochs),
        Cmd::Eval { common, checkpoint } => cmd_eval(common, &checkpoint),
        Cmd::CountParams { config, csv } => cmd_count_params(&config, csv),
        Cmd::ExportFeatures { common, checkpoint, index } => {
            cmd_export_features(common, &checkpoint, index)
        }
        Cmd::DiscoverSchedule { common, fast, overlap } => {
            cmd_discover_schedule(common, fast, overlap)
        }
    }
}

/// Config file, then environment, then flags.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = config::parse_file(&common.config)?;
    config::apply_env_overrides(&mut cfg)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.train.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Picks the `.gz` or plain variant of a canonical dataset file.
fn find_file(dir: &Path, base: &str) -> Result<PathBuf> {
    for cand in [dir.join(format!("{base}.gz")), dir.join(base)] {
        if cand.exists() {
            return Ok(cand);
        }
    }
    Err(Error::Data(format!(
        "missing dataset file {} (also tried .gz)",
        dir.join(base).display()
    )))
}

/// Loads train and test splits for the configured dataset, standardizing
/// both with the train split's statistics.
fn load_pair(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = &cfg.dataset_dir;
    let name = cfg.dataset_name.as_str();
    let pair = match name {
        "mnist" | "fashion" | "fashion-mnist" => {
            let ti = find_file(dir, "train-images-idx3-ubyte")?;
            let tl = find_file(dir, "train-labels-idx1-ubyte")?;
            let vi = find_file(dir, "t10k-images-idx3-ubyte")?;
            let vl = find_file(dir, "t10k-labels-idx1-ubyte")?;
            load_idx_pair(&ti, &tl, &vi, &vl, name)?
        }
        "cifar10" => {
            let base = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.clone()
            };
            let trains: Vec<PathBuf> = (1..=5)
                .map(|i| base.join(format!("data_batch_{i}.bin")))
                .collect();
            let refs: Vec<&Path> = trains.iter().map(PathBuf::as_path).collect();
            load_cifar10_pair(&refs, &base.join("test_batch.bin"), name)?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown dataset '{other}' (expected mnist, fashion, or cifar10)"
            )))
        }
    };
    let (_, c, h, w) = pair.0.images.shape();
    if (c, h, w) != cfg.network.input_shape {
        return Err(Error::Config(format!(
            "dataset {name} yields {c}x{h}x{w} inputs but the config expects {}x{}x{}",
            cfg.network.input_shape.0, cfg.network.input_shape.1, cfg.network.input_shape.2
        )));
    }
    Ok(pair)
}

/// Test error (%) of one predictor over a split.
fn predictor_error(
    net: &Network,
    heads: &TrainedHeads,
    kind: PredictorKind,
    split: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let head = match kind {
        PredictorKind::Softmax => EvalHead::Softmax(heads.softmax.as_ref().ok_or_else(
            || Error::Config("no softmax head available for evaluation".to_string()),
        )?),
        PredictorKind::Goodness => EvalHead::Goodness(heads.goodness.as_ref().ok_or_else(
            || Error::Config("no goodness head available for evaluation".to_string()),
        )?),
        PredictorKind::GlobalAvg => EvalHead::GlobalAvg,
    };
    evaluate(net, &head, split, batch_size)
}

fn cmd_train(common: Common, epochs: Option<u32>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    // Fail before training if the headline predictor's head won't exist.
    match cfg.predictor {
        PredictorKind::Softmax if !cfg.train.heads.softmax => {
            return Err(Error::Config(
                "predictor softmax requires heads = all or softmax".to_string(),
            ))
        }
        PredictorKind::Goodness if !cfg.train.heads.goodness => {
            return Err(Error::Config(
                "predictor goodness requires heads = all or goodness".to_string(),
            ))
        }
        _ => {}
    }

    let (train, test) = load_pair(&cfg)?;
    let schedule = cfg.schedule()?;
    let mut net = build_network(&cfg.network, cfg.train.seed)?;

    let out_dir = &cfg.train.out_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = std::fs::File::create(&csv_path)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", csv_path.display())))?;

    let opts = TrainOpts {
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        heads: cfg.train.heads,
        eval_every: cfg.train.eval_every,
    };
    let outcome = run_interleaved_training(
        &mut net,
        &schedule,
        &train,
        Some(&test),
        &opts,
        Some(&mut csv),
    )?;

    save_checkpoint(&out_dir.join("model.ckpt"), &net, &outcome.heads)?;
    save_manifest(&out_dir.join("model.manifest.txt"), &net, &outcome.heads)?;

    let err_pct = predictor_error(
        &net,
        &outcome.heads,
        cfg.predictor,
        &test,
        cfg.train.batch_size,
    )?;
    println!(
        "{}, {}, {:.2}, {}, {}",
        cfg.dataset_name,
        cfg.model_name(),
        err_pct,
        cfg.train.epochs,
        cfg.train.seed
    );
    Ok(())
}

fn cmd_eval(common: Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(&common)?;
    let (net, heads) = load_checkpoint(checkpoint)?;
    let (_, test) = load_pair(&cfg)?;
    let mut kinds = vec![];
    if heads.softmax.is_some() {
        kinds.push(PredictorKind::Softmax);
    }
    if heads.goodness.is_some() {
        kinds.push(PredictorKind::Goodness);
    }
    kinds.push(PredictorKind::GlobalAvg);
    for kind in kinds {
        let err_pct = predictor_error(&net, &heads, kind, &test, cfg.train.batch_size)?;
        println!(
            "{}, {}, {:.2}",
            cfg.dataset_name,
            net.config.model_name(kind),
            err_pct
        );
    }
    Ok(())
}

/// 588130 -> "588,130".
fn group_thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn cmd_count_params(config_path: &Path, csv: bool) -> Result<()> {
    let mut cfg = config::parse_file(config_path)?;
    config::apply_env_overrides(&mut cfg)?;
    let params = count_parameters(&cfg.network, cfg.predictor)?;
    let macs = count_mult_adds(&cfg.network, cfg.predictor)?;

    if csv {
        println!("component, parameters, mult_adds");
        for i in 0..cfg.network.layers.len() {
            println!(
                "layer{}, {}, {}",
                i + 1,
                params.conv[i] + params.bn[i],
                macs.per_layer[i]
            );
        }
        println!("head, {}, {}", params.head, macs.head);
        println!("total, {}, {}", params.total, macs.total);
        return Ok(());
    }

    let (c, h, w) = cfg.network.input_shape;
    println!(
        "model {} on {c}x{h}x{w}, {} classes",
        cfg.model_name(),
        cfg.network.classes
    );
    println!("{:<8} {:>12} {:>10} {:>14}", "layer", "conv params", "bn params", "mult-adds");
    for i in 0..cfg.network.layers.len() {
        println!(
            "{:<8} {:>12} {:>10} {:>14}",
            i + 1,
            group_thousands(params.conv[i] as u64),
            group_thousands(params.bn[i] as u64),
            group_thousands(macs.per_layer[i])
        );
    }
    println!(
        "{:<8} {:>12} {:>10} {:>14}",
        "head",
        group_thousands(params.head as u64),
        "-",
        group_thousands(macs.head)
    );
    println!(
        "total: {} parameters, {} mult-adds",
        group_thousands(params.total as u64),
        group_thousands(macs.total)
    );
    if params.total == 588_130 {
        println!(
            "note: a published reference lists 588,133 for this model; \
             the layer-by-layer arithmetic here gives 588,130"
        );
    }
    Ok(())
}

fn cmd_export_features(common: Common, checkpoint: &Path, index: usize) -> Result<()> {
    let cfg = load_config(&common)?;
    let (net, _heads) = load_checkpoint(checkpoint)?;
    let (_, test) = load_pair(&cfg)?;
    if index >= test.len() {
        return Err(Error::Data(format!(
            "sample index {index} out of range for {} test samples",
            test.len()
        )));
    }
    let (sample, labels) = test.gather(&[index])?;
    let grid = features::extract_feature_grid(&net, &sample)?;
    let dir = cfg.train.out_dir.join("features");
    let written = features::export_feature_grid(&grid, &dir)?;
    println!(
        "wrote {} files to {} (sample {index}, label {}, last-layer argmax class {})",
        written.len(),
        dir.display(),
        labels[0],
        grid.argmax_class(grid.layers)
    );
    Ok(())
}

fn cmd_discover_schedule(common: Common, fast: bool, overlap: Option<u32>) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if fast {
        cfg.ilt.fast = true;
    }
    if let Some(n) = overlap {
        cfg.ilt.overlap = n;
    }
    let (train, _test) = load_pair(&cfg)?;
    let opts = TrainOpts {
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed,
        heads: cfse::ilt::HeadSelection::none(),
        eval_every: 0,
    };
    let (schedule, warnings) = discover_schedule(
        &cfg.network,
        &train,
        &opts,
        cfg.plateau_cfg(),
        cfg.train.epochs,
        cfg.ilt.fast,
        cfg.ilt.overlap,
    )?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let mut discovered = cfg.clone();
    discovered.ilt.start = Some(schedule.start_ep.clone());
    discovered.ilt.plateau = Some(schedule.plateau_ep.clone());
    let out_dir = &cfg.train.out_dir;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;
    let out_path = out_dir.join("discovered.cfg");
    std::fs::write(&out_path, config::to_text(&discovered))
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", out_path.display())))?;

    let fmt = |xs: &[u32]| {
        xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
    };
    println!("start = {}", fmt(&schedule.start_ep));
    println!("plateau = {}", fmt(&schedule.plateau_ep));
    println!("schedule written to {}", out_path.display());
    Ok(())
}
