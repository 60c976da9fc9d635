//! Plain-text run configuration: `key = value` lines under `[section]`
//! headers, one `[layer]` section per convolutional block, in the order
//! the blocks stack. The parser is strict — unknown sections, unknown
//! keys, duplicates, and malformed values are all errors that name the
//! offending line — and `to_text` renders a canonical form that parses
//! back to an identical configuration.
//!
//! Every key can also be overridden from the environment: `CFSE_TRAIN_SEED`
//! targets `seed` in `[train]`, `CFSE_LAYER2_CHANNELS` targets `channels`
//! in the second `[layer]` section, and so on. Overrides are looked up by
//! expected name only; the environment is never scanned.

use cfse::error::{Error, Result};
use cfse::ilt::{HeadSelection, ILTSchedule, PlateauCfg};
use cfse::network::{LayerSpec, LossKind, NetworkConfig, PredictorKind};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Interleaved-training schedule knobs: explicit windows for training,
/// plateau detection and overlap for schedule discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct IltSection {
    /// Per-layer first update epoch; absent = no delay (fast mode derives
    /// starts from the preceding plateaus instead).
    pub start: Option<Vec<u32>>,
    /// Per-layer last update epoch; absent = every layer trains to the end.
    pub plateau: Option<Vec<u32>>,
    pub fast: bool,
    /// Fast-mode overlap: epochs a layer starts before its predecessor's
    /// plateau.
    pub overlap: u32,
    pub plateau_window: usize,
    pub plateau_min_delta: f64,
}

impl Default for IltSection {
    fn default() -> Self {
        let p = PlateauCfg::default();
        Self {
            start: None,
            plateau: None,
            fast: false,
            overlap: 3,
            plateau_window: p.window,
            plateau_min_delta: p.min_delta,
        }
    }
}

/// Run-level knobs: reproducibility, budget, and output location.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: u32,
    /// Evaluate on the test split every this many epochs (0 = final only).
    pub eval_every: u32,
    /// Heads trained alongside the backbone.
    pub heads: HeadSelection,
    pub out_dir: PathBuf,
}

/// A fully parsed run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Dataset identifier the loader dispatches on (mnist, fashion, cifar10).
    pub dataset_name: String,
    /// Directory holding the dataset's canonical files.
    pub dataset_dir: PathBuf,
    pub network: NetworkConfig,
    /// Head whose test error the run reports as its headline number.
    pub predictor: PredictorKind,
    pub ilt: IltSection,
    pub train: TrainSection,
}

impl RunConfig {
    /// Model identifier like `CFSE_CwC+Sf`, derived from the architecture
    /// and the selected predictor.
    pub fn model_name(&self) -> String {
        self.network.model_name(self.predictor)
    }

    /// Assembles and validates the training schedule. Plateaus clamp to
    /// the epoch budget; in fast mode with no explicit starts, each layer
    /// starts `overlap` epochs before its predecessor's plateau.
    pub fn schedule(&self) -> Result<ILTSchedule> {
        let n = self.network.layers.len();
        let max = self.train.epochs;
        let plateau_ep: Vec<u32> = match &self.ilt.plateau {
            Some(p) => {
                if p.len() != n {
                    return Err(Error::Config(format!(
                        "plateau lists {} epochs for {n} layers",
                        p.len()
                    )));
                }
                p.iter().map(|&x| x.min(max)).collect()
            }
            None => vec![max; n],
        };
        let start_ep: Vec<u32> = match &self.ilt.start {
            Some(s) => {
                if s.len() != n {
                    return Err(Error::Config(format!(
                        "start lists {} epochs for {n} layers",
                        s.len()
                    )));
                }
                s.clone()
            }
            None if self.ilt.fast => {
                let mut s = vec![0u32; n];
                for i in 1..n {
                    s[i] = plateau_ep[i - 1].saturating_sub(self.ilt.overlap);
                }
                s
            }
            None => vec![0; n],
        };
        let sched = ILTSchedule {
            start_ep,
            plateau_ep,
            max_epoch: max,
            overlap: self.ilt.overlap,
            fast_mode: self.ilt.fast,
        };
        sched.validate(n)?;
        Ok(sched)
    }

    pub fn plateau_cfg(&self) -> PlateauCfg {
        PlateauCfg {
            window: self.ilt.plateau_window,
            min_delta: self.ilt.plateau_min_delta,
        }
    }
}

// ---------------------------------------------------------------------------
// Value-level parsers, shared between file lines and env overrides
// ---------------------------------------------------------------------------

fn want_usize(v: &str) -> std::result::Result<usize, String> {
    v.parse().map_err(|_| format!("expects an integer, got '{v}'"))
}

fn want_u32(v: &str) -> std::result::Result<u32, String> {
    v.parse().map_err(|_| format!("expects an integer, got '{v}'"))
}

fn want_u64(v: &str) -> std::result::Result<u64, String> {
    v.parse().map_err(|_| format!("expects an integer, got '{v}'"))
}

fn want_f32(v: &str) -> std::result::Result<f32, String> {
    v.parse().map_err(|_| format!("expects a number, got '{v}'"))
}

fn want_f64(v: &str) -> std::result::Result<f64, String> {
    v.parse().map_err(|_| format!("expects a number, got '{v}'"))
}

fn want_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expects true or false, got '{v}'")),
    }
}

fn want_u32_list(v: &str) -> std::result::Result<Vec<u32>, String> {
    v.split(',')
        .map(|part| {
            part.trim()
                .parse()
                .map_err(|_| format!("expects a comma-separated integer list, got '{v}'"))
        })
        .collect()
}

/// "CxHxW", e.g. "1x28x28".
fn want_shape(v: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = v.split('x').collect();
    if parts.len() == 3 {
        if let (Ok(c), Ok(h), Ok(w)) =
            (parts[0].parse(), parts[1].parse(), parts[2].parse())
        {
            return Ok((c, h, w));
        }
    }
    Err(format!("expects a CxHxW shape like 1x28x28, got '{v}'"))
}

fn want_loss(v: &str) -> std::result::Result<LossKind, String> {
    match v {
        "cwc" => Ok(LossKind::CwC),
        "pvn" => Ok(LossKind::PvN),
        _ => Err(format!("expects cwc or pvn, got '{v}'")),
    }
}

fn want_predictor(v: &str) -> std::result::Result<PredictorKind, String> {
    match v {
        "softmax" => Ok(PredictorKind::Softmax),
        "goodness" => Ok(PredictorKind::Goodness),
        "ga" => Ok(PredictorKind::GlobalAvg),
        _ => Err(format!("expects softmax, goodness, or ga, got '{v}'")),
    }
}

fn want_heads(v: &str) -> std::result::Result<HeadSelection, String> {
    match v {
        "all" => Ok(HeadSelection::all()),
        "softmax" => Ok(HeadSelection::softmax_only()),
        "goodness" => Ok(HeadSelection { softmax: false, goodness: true }),
        "none" => Ok(HeadSelection::none()),
        _ => Err(format!("expects all, softmax, goodness, or none, got '{v}'")),
    }
}

fn loss_word(l: LossKind) -> &'static str {
    match l {
        LossKind::CwC => "cwc",
        LossKind::PvN => "pvn",
    }
}

fn predictor_word(p: PredictorKind) -> &'static str {
    match p {
        PredictorKind::Softmax => "softmax",
        PredictorKind::Goodness => "goodness",
        PredictorKind::GlobalAvg => "ga",
    }
}

fn heads_word(h: HeadSelection) -> &'static str {
    match (h.softmax, h.goodness) {
        (true, true) => "all",
        (true, false) => "softmax",
        (false, true) => "goodness",
        (false, false) => "none",
    }
}

fn u32_list_word(xs: &[u32]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

// ---------------------------------------------------------------------------
// File parsing
// ---------------------------------------------------------------------------

const SECTIONS: [&str; 5] = ["dataset", "network", "layer", "ilt", "train"];

struct RawSection {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
}

/// Splits the text into sections of `key = value` entries, rejecting
/// structural problems (unknown sections, duplicate keys, stray lines).
fn tokenize(text: &str) -> Result<Vec<RawSection>> {
    let mut sections: Vec<RawSection> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            if !SECTIONS.contains(&name) {
                return Err(Error::Config(format!(
                    "line {line_no}: unknown section [{name}]"
                )));
            }
            if name != "layer" && sections.iter().any(|s| s.name == name) {
                return Err(Error::Config(format!(
                    "line {line_no}: section [{name}] appears twice"
                )));
            }
            sections.push(RawSection {
                name: name.to_string(),
                line: line_no,
                entries: Vec::new(),
            });
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {line_no}: expected 'key = value', got '{line}'"
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if value.is_empty() {
            return Err(Error::Config(format!("line {line_no}: '{key}' has no value")));
        }
        let Some(section) = sections.last_mut() else {
            return Err(Error::Config(format!(
                "line {line_no}: '{key}' appears before any [section]"
            )));
        };
        if section.entries.iter().any(|(k, _, _)| k == &key) {
            return Err(Error::Config(format!(
                "line {line_no}: duplicate key '{key}' in [{}]",
                section.name
            )));
        }
        section.entries.push((key, value, line_no));
    }
    Ok(sections)
}

/// One section's entries with required/optional typed access; tracks which
/// keys were consumed so leftovers can be rejected.
struct SectionReader {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize)>,
    used: Vec<bool>,
}

impl SectionReader {
    fn new(raw: RawSection) -> Self {
        let used = vec![false; raw.entries.len()];
        Self { name: raw.name, line: raw.line, entries: raw.entries, used }
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        for (i, (k, v, line)) in self.entries.iter().enumerate() {
            if k == key && !self.used[i] {
                self.used[i] = true;
                return Some((v.clone(), *line));
            }
        }
        None
    }

    fn optional<T>(
        &mut self,
        key: &str,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<Option<T>> {
        match self.take(key) {
            None => Ok(None),
            Some((value, line)) => parse(&value)
                .map(Some)
                .map_err(|msg| Error::Config(format!("line {line}: '{key}' {msg}"))),
        }
    }

    fn required<T>(
        &mut self,
        key: &str,
        parse: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<T> {
        self.optional(key, parse)?.ok_or_else(|| {
            Error::Config(format!(
                "[{}] at line {} is missing '{key}'",
                self.name, self.line
            ))
        })
    }

    fn finish(self) -> Result<()> {
        for (i, (key, _, line)) in self.entries.iter().enumerate() {
            if !self.used[i] {
                return Err(Error::Config(format!(
                    "line {line}: unknown key '{key}' in [{}]",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Parses a configuration from text. See the module docs for the format.
pub fn parse_text(text: &str) -> Result<RunConfig> {
    let mut dataset: Option<SectionReader> = None;
    let mut network: Option<SectionReader> = None;
    let mut ilt: Option<SectionReader> = None;
    let mut train: Option<SectionReader> = None;
    let mut layers: Vec<SectionReader> = Vec::new();
    for raw in tokenize(text)? {
        let reader = SectionReader::new(raw);
        match reader.name.as_str() {
            "dataset" => dataset = Some(reader),
            "network" => network = Some(reader),
            "ilt" => ilt = Some(reader),
            "train" => train = Some(reader),
            "layer" => layers.push(reader),
            _ => unreachable!("tokenize() rejects unknown sections"),
        }
    }

    let mut dataset = dataset
        .ok_or_else(|| Error::Config("missing [dataset] section".to_string()))?;
    let dataset_name = dataset.required("name", |v| Ok::<_, String>(v.to_string()))?;
    let dataset_dir =
        PathBuf::from(dataset.required("dir", |v| Ok::<_, String>(v.to_string()))?);
    dataset.finish()?;

    let mut network = network
        .ok_or_else(|| Error::Config("missing [network] section".to_string()))?;
    let input_shape = network.required("input", want_shape)?;
    let classes = network.required("classes", want_usize)?;
    let lr = network.optional("lr", want_f32)?.unwrap_or(0.01);
    let predictor = network
        .optional("predictor", want_predictor)?
        .unwrap_or(PredictorKind::Softmax);
    network.finish()?;

    if layers.is_empty() {
        return Err(Error::Config("no [layer] sections".to_string()));
    }
    let mut layer_specs = Vec::with_capacity(layers.len());
    for mut layer in layers {
        layer_specs.push(LayerSpec {
            out_channels: layer.required("channels", want_usize)?,
            grouped: layer.optional("grouped", want_bool)?.unwrap_or(false),
            kernel: layer.optional("kernel", want_usize)?.unwrap_or(3),
            stride: layer.optional("stride", want_usize)?.unwrap_or(1),
            padding: layer.optional("padding", want_usize)?.unwrap_or(1),
            maxpool_after: layer.optional("maxpool", want_bool)?.unwrap_or(false),
            loss: layer.optional("loss", want_loss)?.unwrap_or(LossKind::CwC),
            theta: layer.optional("theta", want_f32)?.unwrap_or(2.0),
        });
        layer.finish()?;
    }

    let ilt_section = match ilt {
        None => IltSection::default(),
        Some(mut s) => {
            let d = IltSection::default();
            let parsed = IltSection {
                start: s.optional("start", want_u32_list)?,
                plateau: s.optional("plateau", want_u32_list)?,
                fast: s.optional("fast", want_bool)?.unwrap_or(d.fast),
                overlap: s.optional("overlap", want_u32)?.unwrap_or(d.overlap),
                plateau_window: s
                    .optional("plateau_window", want_usize)?
                    .unwrap_or(d.plateau_window),
                plateau_min_delta: s
                    .optional("plateau_min_delta", want_f64)?
                    .unwrap_or(d.plateau_min_delta),
            };
            s.finish()?;
            parsed
        }
    };
    if ilt_section.plateau_window == 0 {
        return Err(Error::Config("plateau_window must be >= 1".to_string()));
    }

    let mut train = train
        .ok_or_else(|| Error::Config("missing [train] section".to_string()))?;
    let train_section = TrainSection {
        seed: train.optional("seed", want_u64)?.unwrap_or(0),
        batch_size: train.optional("batch_size", want_usize)?.unwrap_or(128),
        epochs: train.required("epochs", want_u32)?,
        eval_every: train.optional("eval_every", want_u32)?.unwrap_or(1),
        heads: train.optional("heads", want_heads)?.unwrap_or(HeadSelection::all()),
        out_dir: train
            .optional("out_dir", |v| Ok::<_, String>(PathBuf::from(v)))?
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    if train_section.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".to_string()));
    }
    train.finish()?;

    let cfg = RunConfig {
        dataset_name,
        dataset_dir,
        network: NetworkConfig { input_shape, classes, layers: layer_specs, lr },
        predictor,
        ilt: ilt_section,
        train: train_section,
    };
    cfg.network.validate()?;
    Ok(cfg)
}

/// Parses a configuration file.
pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", path.display()))
    })?;
    parse_text(&text)
        .map_err(|e| match e {
            Error::Config(msg) => {
                Error::Config(format!("{}: {msg}", path.display()))
            }
            other => other,
        })
}

/// Renders the canonical text form; `parse_text` returns an identical
/// configuration for it.
pub fn to_text(cfg: &RunConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "[dataset]");
    let _ = writeln!(out, "name = {}", cfg.dataset_name);
    let _ = writeln!(out, "dir = {}", cfg.dataset_dir.display());
    let (c, h, w) = cfg.network.input_shape;
    let _ = writeln!(out, "\n[network]");
    let _ = writeln!(out, "input = {c}x{h}x{w}");
    let _ = writeln!(out, "classes = {}", cfg.network.classes);
    let _ = writeln!(out, "lr = {}", cfg.network.lr);
    let _ = writeln!(out, "predictor = {}", predictor_word(cfg.predictor));
    for spec in &cfg.network.layers {
        let _ = writeln!(out, "\n[layer]");
        let _ = writeln!(out, "channels = {}", spec.out_channels);
        let _ = writeln!(out, "grouped = {}", spec.grouped);
        let _ = writeln!(out, "kernel = {}", spec.kernel);
        let _ = writeln!(out, "stride = {}", spec.stride);
        let _ = writeln!(out, "padding = {}", spec.padding);
        let _ = writeln!(out, "maxpool = {}", spec.maxpool_after);
        let _ = writeln!(out, "loss = {}", loss_word(spec.loss));
        let _ = writeln!(out, "theta = {}", spec.theta);
    }
    let _ = writeln!(out, "\n[ilt]");
    if let Some(start) = &cfg.ilt.start {
        let _ = writeln!(out, "start = {}", u32_list_word(start));
    }
    if let Some(plateau) = &cfg.ilt.plateau {
        let _ = writeln!(out, "plateau = {}", u32_list_word(plateau));
    }
    let _ = writeln!(out, "fast = {}", cfg.ilt.fast);
    let _ = writeln!(out, "overlap = {}", cfg.ilt.overlap);
    let _ = writeln!(out, "plateau_window = {}", cfg.ilt.plateau_window);
    let _ = writeln!(out, "plateau_min_delta = {}", cfg.ilt.plateau_min_delta);
    let _ = writeln!(out, "\n[train]");
    let _ = writeln!(out, "seed = {}", cfg.train.seed);
    let _ = writeln!(out, "batch_size = {}", cfg.train.batch_size);
    let _ = writeln!(out, "epochs = {}", cfg.train.epochs);
    let _ = writeln!(out, "eval_every = {}", cfg.train.eval_every);
    let _ = writeln!(out, "heads = {}", heads_word(cfg.train.heads));
    let _ = writeln!(out, "out_dir = {}", cfg.train.out_dir.display());
    out
}

// ---------------------------------------------------------------------------
// Environment overrides
// ---------------------------------------------------------------------------

fn env_val(section: &str, key: &str) -> Option<(String, String)> {
    let var = format!("CFSE_{section}_{}", key.to_uppercase());
    std::env::var(&var).ok().map(|v| (var, v))
}

fn env_parse<T>(
    found: Option<(String, String)>,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
    slot: &mut T,
) -> Result<()> {
    if let Some((var, value)) = found {
        *slot = parse(value.trim())
            .map_err(|msg| Error::Config(format!("{var} {msg}")))?;
    }
    Ok(())
}

/// Applies `CFSE_{SECTION}_{KEY}` environment overrides onto a parsed
/// configuration. Layer sections are addressed as `LAYER1`, `LAYER2`, ...
/// in stacking order.
pub fn apply_env_overrides(cfg: &mut RunConfig) -> Result<()> {
    let ok = |v: &str| Ok::<_, String>(v.to_string());
    let path = |v: &str| Ok::<_, String>(PathBuf::from(v));

    env_parse(env_val("DATASET", "name"), ok, &mut cfg.dataset_name)?;
    env_parse(env_val("DATASET", "dir"), path, &mut cfg.dataset_dir)?;

    env_parse(env_val("NETWORK", "input"), want_shape, &mut cfg.network.input_shape)?;
    env_parse(env_val("NETWORK", "classes"), want_usize, &mut cfg.network.classes)?;
    env_parse(env_val("NETWORK", "lr"), want_f32, &mut cfg.network.lr)?;
    env_parse(env_val("NETWORK", "predictor"), want_predictor, &mut cfg.predictor)?;

    for (i, spec) in cfg.network.layers.iter_mut().enumerate() {
        let s = format!("LAYER{}", i + 1);
        env_parse(env_val(&s, "channels"), want_usize, &mut spec.out_channels)?;
        env_parse(env_val(&s, "grouped"), want_bool, &mut spec.grouped)?;
        env_parse(env_val(&s, "kernel"), want_usize, &mut spec.kernel)?;
        env_parse(env_val(&s, "stride"), want_usize, &mut spec.stride)?;
        env_parse(env_val(&s, "padding"), want_usize, &mut spec.padding)?;
        env_parse(env_val(&s, "maxpool"), want_bool, &mut spec.maxpool_after)?;
        env_parse(env_val(&s, "loss"), want_loss, &mut spec.loss)?;
        env_parse(env_val(&s, "theta"), want_f32, &mut spec.theta)?;
    }

    if let Some((var, v)) = env_val("ILT", "start") {
        cfg.ilt.start = Some(
            want_u32_list(v.trim())
                .map_err(|msg| Error::Config(format!("{var} {msg}")))?,
        );
    }
    if let Some((var, v)) = env_val("ILT", "plateau") {
        cfg.ilt.plateau = Some(
            want_u32_list(v.trim())
                .map_err(|msg| Error::Config(format!("{var} {msg}")))?,
        );
    }
    env_parse(env_val("ILT", "fast"), want_bool, &mut cfg.ilt.fast)?;
    env_parse(env_val("ILT", "overlap"), want_u32, &mut cfg.ilt.overlap)?;
    env_parse(env_val("ILT", "plateau_window"), want_usize, &mut cfg.ilt.plateau_window)?;
    env_parse(
        env_val("ILT", "plateau_min_delta"),
        want_f64,
        &mut cfg.ilt.plateau_min_delta,
    )?;

    env_parse(env_val("TRAIN", "seed"), want_u64, &mut cfg.train.seed)?;
    env_parse(env_val("TRAIN", "batch_size"), want_usize, &mut cfg.train.batch_size)?;
    env_parse(env_val("TRAIN", "epochs"), want_u32, &mut cfg.train.epochs)?;
    env_parse(env_val("TRAIN", "eval_every"), want_u32, &mut cfg.train.eval_every)?;
    env_parse(env_val("TRAIN", "heads"), want_heads, &mut cfg.train.heads)?;
    env_parse(env_val("TRAIN", "out_dir"), path, &mut cfg.train.out_dir)?;

    cfg.network.validate()?;
    Ok(())
}
