//! Checkpoint persistence: a versioned binary container for a trained
//! network — architecture, per-block kernels and biases, BatchNorm
//! statistics, Adam optimizer state, and any predictor heads — plus a
//! human-readable text manifest listing the layer specs and how many
//! epochs each block trained.
//!
//! Every multi-byte value is little-endian; float arrays are raw 32-bit
//! floats behind a u32 length prefix. Loading validates the magic, the
//! version, and every array length against the architecture it describes,
//! and rejects trailing bytes, so a corrupt or mismatched file fails
//! loudly instead of yielding a silently wrong model.

use crate::adam::AdamState;
use crate::conv::ConvWeights;
use crate::error::{Error, Result};
use crate::ilt::TrainedHeads;
use crate::network::{LayerSpec, LossKind, Network, NetworkConfig, TrainedLayer};
use crate::norm::BatchNormState;
use crate::predictor::{DenseLayer, GoodnessHead, SoftmaxHead};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// First eight bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CFSECKPT";
/// Format revision this build writes and reads.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ceiling on the layer count a file may claim, so a corrupt header cannot
/// drive allocation.
const MAX_LAYERS: usize = 1024;

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    /// u32 length prefix followed by raw little-endian floats.
    fn f32s(&mut self, vs: &[f32]) {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f32(v);
        }
    }
    fn adam(&mut self, a: &AdamState<f32>) {
        self.f32s(&a.m);
        self.f32s(&a.v);
        self.u64(a.t);
        self.f32(a.lr);
        self.f32(a.beta1);
        self.f32(a.beta2);
        self.f32(a.eps);
    }
    fn dense(&mut self, l: &DenseLayer<f32>) {
        self.u32(l.in_dim as u32);
        self.u32(l.out_dim as u32);
        self.f32s(&l.w);
        self.f32s(&l.b);
        self.adam(&l.adam_w);
        self.adam(&l.adam_b);
    }
}

/// Serializes a network and its heads into the version-1 container.
pub fn to_bytes(net: &Network, heads: &TrainedHeads) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);

    let cfg = &net.config;
    let (ic, ih, iw) = cfg.input_shape;
    w.u32(ic as u32);
    w.u32(ih as u32);
    w.u32(iw as u32);
    w.u32(cfg.classes as u32);
    w.f32(cfg.lr);
    w.u32(cfg.layers.len() as u32);
    for spec in &cfg.layers {
        w.u32(spec.out_channels as u32);
        w.u8(spec.grouped as u8);
        w.u32(spec.kernel as u32);
        w.u32(spec.stride as u32);
        w.u32(spec.padding as u32);
        w.u8(spec.maxpool_after as u8);
        w.u8(match spec.loss {
            LossKind::CwC => 0,
            LossKind::PvN => 1,
        });
        w.f32(spec.theta);
    }

    for layer in &net.layers {
        w.u32(layer.epochs_trained);
        w.u8(layer.frozen as u8);
        w.f32s(&layer.weights.kernels);
        w.f32s(&layer.weights.bias);
        w.f32s(&layer.bn.running_mean);
        w.f32s(&layer.bn.running_var);
        w.f32s(&layer.bn.gamma);
        w.f32s(&layer.bn.beta);
        w.f32(layer.bn.momentum);
        w.f32(layer.bn.epsilon);
        w.adam(&layer.adam_k);
        w.adam(&layer.adam_b);
    }

    let flags =
        (heads.softmax.is_some() as u8) | ((heads.goodness.is_some() as u8) << 1);
    w.u8(flags);
    if let Some(sf) = &heads.softmax {
        w.u32(sf.d as u32);
        w.u32(sf.j as u32);
        w.f32s(&sf.w);
        w.f32s(&sf.b);
        w.adam(&sf.adam_w);
        w.adam(&sf.adam_b);
    }
    if let Some(gd) = &heads.goodness {
        w.u32(gd.d as u32);
        w.u32(gd.j as u32);
        w.f32(gd.theta);
        w.dense(&gd.l1);
        w.dense(&gd.l2);
    }
    w.buf
}

// ---------------------------------------------------------------------------
// Deserialization
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Io(format!("checkpoint truncated while reading {what}"))
            })?;
        let slice = &self.buf[self.pos..end];
        self.pos = end;
        Ok(slice)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn usize32(&mut self, what: &str) -> Result<usize> {
        self.u32(what).map(|v| v as usize)
    }
    fn flag(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Io(format!("checkpoint {what} flag byte is {v}"))),
        }
    }
    /// Length-prefixed float array that must hold exactly `n` values.
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = self.usize32(what)?;
        if len != n {
            return Err(Error::Io(format!(
                "checkpoint {what} holds {len} values, expected {n}"
            )));
        }
        let bytes = self.take(4 * n, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn adam(&mut self, n: usize, what: &str) -> Result<AdamState<f32>> {
        Ok(AdamState {
            m: self.f32s(n, what)?,
            v: self.f32s(n, what)?,
            t: self.u64(what)?,
            lr: self.f32(what)?,
            beta1: self.f32(what)?,
            beta2: self.f32(what)?,
            eps: self.f32(what)?,
        })
    }
    fn dense(&mut self, what: &str) -> Result<DenseLayer<f32>> {
        let in_dim = self.usize32(what)?;
        let out_dim = self.usize32(what)?;
        if in_dim == 0 || out_dim == 0 || in_dim.saturating_mul(out_dim) > u32::MAX as usize {
            return Err(Error::Io(format!(
                "checkpoint {what} claims a {in_dim}x{out_dim} weight matrix"
            )));
        }
        Ok(DenseLayer {
            w: self.f32s(in_dim * out_dim, what)?,
            b: self.f32s(out_dim, what)?,
            in_dim,
            out_dim,
            adam_w: self.adam(in_dim * out_dim, what)?,
            adam_b: self.adam(out_dim, what)?,
        })
    }
}

/// Parses a version-1 container back into a network and its heads.
pub fn from_bytes(bytes: &[u8]) -> Result<(Network, TrainedHeads)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Io(format!(
            "not a checkpoint: bad magic {magic:02x?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Io(format!(
            "unsupported checkpoint version {version} (this build reads version {CHECKPOINT_VERSION})"
        )));
    }

    let input_shape = (
        r.usize32("input channels")?,
        r.usize32("input height")?,
        r.usize32("input width")?,
    );
    let classes = r.usize32("class count")?;
    let lr = r.f32("learning rate")?;
    let num_layers = r.usize32("layer count")?;
    if num_layers == 0 || num_layers > MAX_LAYERS {
        return Err(Error::Io(format!(
            "checkpoint claims {num_layers} layers"
        )));
    }
    let mut specs = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        let what = format!("layer {} spec", i + 1);
        let out_channels = r.usize32(&what)?;
        let grouped = r.flag(&what)?;
        let kernel = r.usize32(&what)?;
        let stride = r.usize32(&what)?;
        let padding = r.usize32(&what)?;
        let maxpool_after = r.flag(&what)?;
        let loss = match r.u8(&what)? {
            0 => LossKind::CwC,
            1 => LossKind::PvN,
            v => {
                return Err(Error::Io(format!(
                    "layer {} has unknown loss code {v}",
                    i + 1
                )))
            }
        };
        let theta = r.f32(&what)?;
        specs.push(LayerSpec {
            out_channels,
            grouped,
            kernel,
            stride,
            padding,
            maxpool_after,
            loss,
            theta,
        });
    }
    let config = NetworkConfig {
        input_shape,
        classes,
        layers: specs,
        lr,
    };
    config
        .validate()
        .map_err(|e| Error::Io(format!("checkpoint architecture is invalid: {e}")))?;
    let shapes = config.layer_input_shapes()?;

    let mut layers = Vec::with_capacity(num_layers);
    for (i, (spec, &(c_in, _, _))) in config.layers.iter().zip(shapes.iter()).enumerate() {
        let ctx = format!("layer {}", i + 1);
        let epochs_trained = r.u32(&format!("{ctx} epoch count"))?;
        let frozen = r.flag(&format!("{ctx} frozen"))?;
        let groups = spec.groups(classes);
        let c_in_per_group = c_in / groups;
        let k_len = spec.out_channels * c_in_per_group * spec.kernel * spec.kernel;
        let kernels = r.f32s(k_len, &format!("{ctx} kernels"))?;
        let bias = r.f32s(spec.out_channels, &format!("{ctx} bias"))?;
        let weights = ConvWeights::new(
            kernels,
            bias,
            spec.out_channels,
            c_in_per_group,
            spec.kernel,
            groups,
        )?;
        let c = spec.out_channels;
        let bn = BatchNormState {
            running_mean: r.f32s(c, &format!("{ctx} running mean"))?,
            running_var: r.f32s(c, &format!("{ctx} running variance"))?,
            gamma: r.f32s(c, &format!("{ctx} gamma"))?,
            beta: r.f32s(c, &format!("{ctx} beta"))?,
            momentum: r.f32(&format!("{ctx} momentum"))?,
            epsilon: r.f32(&format!("{ctx} epsilon"))?,
        };
        let adam_k = r.adam(k_len, &format!("{ctx} kernel optimizer"))?;
        let adam_b = r.adam(c, &format!("{ctx} bias optimizer"))?;
        layers.push(TrainedLayer {
            weights,
            bn,
            adam_k,
            adam_b,
            epochs_trained,
            frozen,
        });
    }

    let flags = r.u8("head flags")?;
    if flags & !0b11 != 0 {
        return Err(Error::Io(format!("unknown head flags {flags:#04x}")));
    }
    let feature_len = config.final_feature_len()?;
    let softmax = if flags & 1 != 0 {
        let d = r.usize32("softmax head feature width")?;
        let j = r.usize32("softmax head class count")?;
        if d != feature_len || j != classes {
            return Err(Error::Io(format!(
                "softmax head is {d}x{j} but the network emits {feature_len} features over {classes} classes"
            )));
        }
        Some(SoftmaxHead {
            w: r.f32s(d * j, "softmax head weights")?,
            b: r.f32s(j, "softmax head bias")?,
            d,
            j,
            adam_w: r.adam(d * j, "softmax head weight optimizer")?,
            adam_b: r.adam(j, "softmax head bias optimizer")?,
        })
    } else {
        None
    };
    let goodness = if flags & 2 != 0 {
        let d = r.usize32("goodness head feature width")?;
        let j = r.usize32("goodness head class count")?;
        let theta = r.f32("goodness head threshold")?;
        if d != feature_len || j != classes {
            return Err(Error::Io(format!(
                "goodness head is {d}x{j} but the network emits {feature_len} features over {classes} classes"
            )));
        }
        let l1 = r.dense("goodness head layer 1")?;
        let l2 = r.dense("goodness head layer 2")?;
        if l1.in_dim != d + j || l2.in_dim != l1.out_dim {
            return Err(Error::Io(format!(
                "goodness head layers {}x{} and {}x{} do not chain over {} features + {} label slots",
                l1.in_dim, l1.out_dim, l2.in_dim, l2.out_dim, d, j
            )));
        }
        Some(GoodnessHead { l1, l2, theta, d, j })
    } else {
        None
    };

    if r.pos != r.buf.len() {
        return Err(Error::Io(format!(
            "checkpoint has {} trailing bytes",
            r.buf.len() - r.pos
        )));
    }
    Ok((Network { config, layers }, TrainedHeads { softmax, goodness }))
}

// ---------------------------------------------------------------------------
// File wrappers and manifest
// ---------------------------------------------------------------------------

/// Writes the binary container to `path`.
pub fn save_checkpoint(path: &Path, net: &Network, heads: &TrainedHeads) -> Result<()> {
    fs::write(path, to_bytes(net, heads)).map_err(|e| {
        Error::Io(format!("cannot write checkpoint {}: {e}", path.display()))
    })
}

/// Reads the binary container back from `path`.
pub fn load_checkpoint(path: &Path) -> Result<(Network, TrainedHeads)> {
    let bytes = fs::read(path).map_err(|e| {
        Error::Io(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    from_bytes(&bytes)
}

/// Renders the text manifest: one line per block with its spec and how many
/// epochs it trained, plus the heads stored alongside.
pub fn manifest_text(net: &Network, heads: &TrainedHeads) -> String {
    let cfg = &net.config;
    let (ic, ih, iw) = cfg.input_shape;
    let mut out = String::new();
    let _ = writeln!(out, "checkpoint format v{CHECKPOINT_VERSION}");
    let _ = writeln!(
        out,
        "input {ic}x{ih}x{iw}, {} classes, lr {}",
        cfg.classes, cfg.lr
    );
    for (i, (spec, layer)) in cfg.layers.iter().zip(net.layers.iter()).enumerate() {
        let mut line = format!(
            "layer {}: {} channels, {}x{} stride {} pad {}",
            i + 1,
            spec.out_channels,
            spec.kernel,
            spec.kernel,
            spec.stride,
            spec.padding
        );
        if spec.grouped {
            line.push_str(", grouped");
        }
        if spec.maxpool_after {
            line.push_str(", maxpool");
        }
        match spec.loss {
            LossKind::CwC => line.push_str(", CwC loss"),
            LossKind::PvN => {
                let _ = write!(line, ", PvN loss (theta {})", spec.theta);
            }
        }
        let n = layer.epochs_trained;
        let _ = write!(
            line,
            ", trained {n} {}",
            if n == 1 { "epoch" } else { "epochs" }
        );
        if layer.frozen {
            line.push_str(", frozen");
        }
        let _ = writeln!(out, "{line}");
    }
    let head_names: Vec<&str> = [
        heads.softmax.as_ref().map(|_| "Sf"),
        heads.goodness.as_ref().map(|_| "Gd"),
    ]
    .into_iter()
    .flatten()
    .collect();
    let _ = writeln!(
        out,
        "heads: {}",
        if head_names.is_empty() {
            "none".to_string()
        } else {
            head_names.join(", ")
        }
    );
    out
}

/// Writes the text manifest to `path`.
pub fn save_manifest(path: &Path, net: &Network, heads: &TrainedHeads) -> Result<()> {
    fs::write(path, manifest_text(net, heads)).map_err(|e| {
        Error::Io(format!("cannot write manifest {}: {e}", path.display()))
    })
}
