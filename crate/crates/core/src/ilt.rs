//! Interleaved Layer Training: schedules, plateau detection, the training
//! loop, and evaluation.
//!
//! Every layer owns a start epoch and a plateau (stop) epoch. During an
//! interleaved run, layer i receives parameter updates exactly in epochs
//! `start_ep[i] ..= plateau_ep[i]` (epochs are 1-based); past its plateau a
//! layer is frozen and its outputs become bit-stable. Schedule discovery
//! finds the plateau epochs one layer at a time; fast mode overlaps each
//! layer's start with its predecessor's plateau by `overlap` epochs.

use crate::adam::adam_step;
use crate::conv::{forward_from_cols, im2col_batch, weight_grads_from_cols};
use crate::data::{BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::goodness::{loss_cwc, loss_pvn, LossOutput};
use crate::network::{build_network, LossKind, Network, NetworkConfig};
use crate::norm::{batchnorm_forward, batchnorm_forward_update};
use crate::pool::maxpool2x2;
use crate::predictor::{ga_predict, GoodnessHead, SoftmaxHead};
use crate::tensor::{relu, relu_backward, FeatureTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Per-layer start/plateau epochs governing an interleaved run.
#[derive(Debug, Clone, PartialEq)]
pub struct ILTSchedule {
    /// First epoch (1-based) in which each layer updates. 0 behaves like 1
    /// (the layer starts immediately); discovery emits 0 for "no delay".
    pub start_ep: Vec<u32>,
    /// Last epoch (1-based, inclusive) in which each layer updates.
    pub plateau_ep: Vec<u32>,
    /// Total epochs of the run; plateaus are clamped here.
    pub max_epoch: u32,
    /// Fast-mode overlap N: each layer starts N epochs before its
    /// predecessor's plateau.
    pub overlap: u32,
    pub fast_mode: bool,
}

impl ILTSchedule {
    /// Schedule with every layer training from the first epoch to its
    /// plateau (clamped to `max_epoch`).
    pub fn from_plateaus(plateaus: &[u32], max_epoch: u32) -> Self {
        Self {
            start_ep: vec![0; plateaus.len()],
            plateau_ep: plateaus.iter().map(|&p| p.min(max_epoch)).collect(),
            max_epoch,
            overlap: 0,
            fast_mode: false,
        }
    }

    /// Checks 0 <= start <= plateau <= max_epoch per layer and, in fast
    /// mode, the start rule `start_ep[i+1] = max(0, plateau_ep[i] - N)`.
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.start_ep.len() != num_layers || self.plateau_ep.len() != num_layers {
            return Err(Error::Config(format!(
                "schedule covers {} layers but network has {num_layers}",
                self.start_ep.len()
            )));
        }
        for i in 0..num_layers {
            if self.start_ep[i] > self.plateau_ep[i] || self.plateau_ep[i] > self.max_epoch {
                return Err(Error::Config(format!(
                    "layer {} schedule violates 0 <= start ({}) <= plateau ({}) <= max_epoch ({})",
                    i + 1,
                    self.start_ep[i],
                    self.plateau_ep[i],
                    self.max_epoch
                )));
            }
        }
        if self.fast_mode {
            for i in 1..num_layers {
                let expect = self.plateau_ep[i - 1].saturating_sub(self.overlap);
                if self.start_ep[i] != expect {
                    return Err(Error::Config(format!(
                        "fast mode requires start_ep[{}] = plateau_ep[{}] - {} = {expect}, got {}",
                        i + 1,
                        i,
                        self.overlap,
                        self.start_ep[i]
                    )));
                }
            }
        }
        Ok(())
    }

    /// True when layer `i` receives updates in (1-based) `epoch`.
    pub fn layer_active(&self, i: usize, epoch: u32) -> bool {
        self.start_ep[i].max(1) <= epoch && epoch <= self.plateau_ep[i]
    }
}

/// Plateau criterion: the best loss of the last `window` epochs failed to
/// improve on the best loss before them by at least `min_delta` (relative).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauCfg {
    pub window: usize,
    pub min_delta: f64,
}

impl Default for PlateauCfg {
    fn default() -> Self {
        Self { window: 3, min_delta: 1e-3 }
    }
}

/// True once `history` (one loss per epoch) has stalled: the best value in
/// the last `window` entries improves on the best value before them by less
/// than `min_delta` relative. Needs at least one epoch before the window.
pub fn detect_plateau(history: &[f64], window: usize, min_delta: f64) -> bool {
    assert!(window >= 1, "plateau window must be >= 1");
    if history.len() <= window {
        return false;
    }
    let split = history.len() - window;
    let best_before = history[..split].iter().cloned().fold(f64::INFINITY, f64::min);
    let best_last = history[split..].iter().cloned().fold(f64::INFINITY, f64::min);
    if best_before <= 0.0 {
        // Losses here are nonnegative; a best of zero cannot improve further.
        return true;
    }
    (best_before - best_last) / best_before < min_delta
}

/// Everything recorded about one epoch of an interleaved run.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u32,
    /// Mean local training loss per layer (NaN for layers not yet measured).
    pub layer_loss: Vec<f64>,
    /// Per-layer classifier accuracy (%): argmax of the layer's goodness
    /// against the true class, over the training epoch.
    pub layer_acc: Vec<f64>,
    /// Test errors (%) per predictor head; NaN when not evaluated.
    pub sf_test_err: f64,
    pub gd_test_err: f64,
    pub ga_test_err: f64,
    pub seconds: f64,
}

/// Which predictor heads an interleaved run trains alongside the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSelection {
    pub softmax: bool,
    pub goodness: bool,
}

impl HeadSelection {
    pub fn all() -> Self {
        Self { softmax: true, goodness: true }
    }
    pub fn softmax_only() -> Self {
        Self { softmax: true, goodness: false }
    }
    pub fn none() -> Self {
        Self { softmax: false, goodness: false }
    }
}

/// Options for [`run_interleaved_training`] beyond the schedule itself.
#[derive(Debug, Clone)]
pub struct TrainOpts {
    pub batch_size: usize,
    pub seed: u64,
    /// Heads trained each epoch on the final block's detached outputs.
    pub heads: HeadSelection,
    /// Evaluate on the test split every `eval_every` epochs (0 = only after
    /// the final epoch). Requires a test split to be passed.
    pub eval_every: u32,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self { batch_size: 128, seed: 0, heads: HeadSelection::all(), eval_every: 1 }
    }
}

/// Trained predictor heads produced by an interleaved run.
#[derive(Debug, Clone)]
pub struct TrainedHeads {
    pub softmax: Option<SoftmaxHead<f32>>,
    pub goodness: Option<GoodnessHead<f32>>,
}

/// Result of one interleaved training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetrics>,
    pub heads: TrainedHeads,
}

/// Predictor used by [`evaluate`]. The trained heads read the flattened
/// final block output; [`EvalHead::GlobalAvg`] reads the last layer's ReLU
/// tap, the activation whose goodness that layer's loss trained.
pub enum EvalHead<'a> {
    Softmax(&'a SoftmaxHead<f32>),
    Goodness(&'a GoodnessHead<f32>),
    GlobalAvg,
}

/// Output of one layer's application inside the training loop.
struct LayerPass {
    /// ReLU output feeding the local loss (pre-BatchNorm, pre-pool).
    relu_out: FeatureTensor<f32>,
    /// What the next layer consumes: BatchNorm output, pooled if configured.
    output: FeatureTensor<f32>,
}

/// Applies layer `i`'s pipeline in training mode over pre-built columns,
/// without touching any state.
fn layer_forward_cols(
    net: &Network,
    i: usize,
    cols: &crate::conv::BatchCols<f32>,
    training: bool,
) -> Result<LayerPass> {
    let layer = &net.layers[i];
    let conv_out = forward_from_cols(cols, &layer.weights)?;
    let relu_out = relu(&conv_out);
    let bn_out = batchnorm_forward(&relu_out, &layer.bn, training)?;
    let output = if net.config.layers[i].maxpool_after {
        maxpool2x2(&bn_out)?.0
    } else {
        bn_out
    };
    Ok(LayerPass { relu_out, output })
}

/// Computes the configured local loss for layer `i` on its ReLU output.
fn layer_loss(
    net: &Network,
    i: usize,
    relu_out: &FeatureTensor<f32>,
    targets: &[usize],
) -> Result<LossOutput<f32>> {
    let spec = &net.config.layers[i];
    match spec.loss {
        LossKind::CwC => loss_cwc(relu_out, targets, net.config.classes),
        LossKind::PvN => loss_pvn(relu_out, targets, spec.theta, net.config.classes),
    }
}

/// Per-layer accumulators for one epoch of training metrics.
#[derive(Debug, Clone, Default)]
struct LayerEpochStats {
    loss_sum: f64,
    correct: u64,
    seen: u64,
    batches: u64,
}

/// One batch's pass through the backbone: trains active layers in index
/// order (each consuming its predecessors' post-update outputs), measures
/// loss/accuracy for every layer, and returns the final block output.
///
/// `epoch` is 1-based. Gradient or loss blow-ups surface as numerical
/// errors naming the layer and epoch.
fn backbone_batch_step(
    net: &mut Network,
    schedule: &ILTSchedule,
    epoch: u32,
    images: &FeatureTensor<f32>,
    targets: &[usize],
    stats: &mut [LayerEpochStats],
    up_to: usize,
) -> Result<FeatureTensor<f32>> {
    let mut x = images.clone();
    for i in 0..up_to {
        let spec = &net.config.layers[i];
        let active = schedule.layer_active(i, epoch) && !net.layers[i].frozen;
        let cols = im2col_batch(&x, spec.kernel, spec.stride, spec.padding)?;
        let pass = layer_forward_cols(net, i, &cols, true)?;

        // Measure every layer, update only active ones.
        let loss_out = layer_loss(net, i, &pass.relu_out, targets)
            .map_err(|e| annotate_layer(e, i, epoch))?;
        if !loss_out.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "layer {} diverged at epoch {epoch}: loss {}",
                i + 1,
                loss_out.loss
            )));
        }
        let st = &mut stats[i];
        st.loss_sum += loss_out.loss as f64;
        st.batches += 1;
        for (pred, &z) in loss_out.goodness.argmax_classes().iter().zip(targets.iter()) {
            if *pred == z {
                st.correct += 1;
            }
        }
        st.seen += targets.len() as u64;

        let pass = if active {
            // Route the loss gradient through ReLU and the convolution,
            // update with Adam, then re-run the forward pass so downstream
            // layers see the post-update activations. The unrolled columns
            // depend only on this layer's input, so they are reused across
            // backward and re-forward.
            let grad_conv = relu_backward(&pass.relu_out, &loss_out.grad_activations)?;
            let (gk, gb) = weight_grads_from_cols(&cols, &net.layers[i].weights, &grad_conv)?;
            let layer = &mut net.layers[i];
            adam_step(&mut layer.weights.kernels, &gk, &mut layer.adam_k)
                .map_err(|e| annotate_layer(e, i, epoch))?;
            adam_step(&mut layer.weights.bias, &gb, &mut layer.adam_b)
                .map_err(|e| annotate_layer(e, i, epoch))?;
            let refreshed = layer_forward_cols(net, i, &cols, true)?;
            // Fold batch statistics into the running estimates exactly once
            // per batch while the layer is still learning.
            let bn_out =
                batchnorm_forward_update(&refreshed.relu_out, &mut net.layers[i].bn)?;
            let output = if net.config.layers[i].maxpool_after {
                maxpool2x2(&bn_out)?.0
            } else {
                bn_out
            };
            LayerPass { relu_out: refreshed.relu_out, output }
        } else {
            pass
        };
        x = pass.output;
    }
    Ok(x)
}

fn annotate_layer(e: Error, i: usize, epoch: u32) -> Error {
    match e {
        Error::Numerical(msg) => {
            Error::Numerical(format!("layer {} at epoch {epoch}: {msg}", i + 1))
        }
        other => other,
    }
}

/// Flattens a batch of feature tensors into (n, d) rows for the heads.
fn flatten_features(x: &FeatureTensor<f32>) -> (Vec<f32>, usize) {
    (x.data.clone(), x.c * x.h * x.w)
}

/// Runs Interleaved Layer Training over `train`, optionally evaluating on
/// `test`. Layers update exactly inside their schedule windows; predictor
/// heads train every epoch on the final block's detached outputs and keep
/// training after the backbone freezes. Returns per-epoch metrics and the
/// trained heads.
///
/// When `csv` is given, one row per (epoch, layer) is appended in the
/// schema `epoch, layer_id, train_loss, layer_goodness_acc, sf_test_err,
/// gd_test_err, ga_test_err, seconds`.
pub fn run_interleaved_training(
    net: &mut Network,
    schedule: &ILTSchedule,
    train: &Dataset,
    test: Option<&Dataset>,
    opts: &TrainOpts,
    mut csv: Option<&mut dyn std::io::Write>,
) -> Result<TrainOutcome> {
    schedule.validate(net.layers.len())?;
    let num_layers = net.layers.len();
    let j = net.config.classes;
    let flat_dim = net.config.final_feature_len()?;

    let mut sf_head = opts
        .heads
        .softmax
        .then(|| SoftmaxHead::<f32>::new(flat_dim, j, net.config.lr));
    let mut gd_head = if opts.heads.goodness {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6f0d_9e55);
        Some(GoodnessHead::<f32>::new(flat_dim, j, net.config.lr, &mut rng)?)
    } else {
        None
    };
    // Negative-label sampling stream for the goodness head.
    let mut neg_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x11bd_c35a);

    if let Some(w) = csv.as_deref_mut() {
        writeln!(
            w,
            "epoch, layer_id, train_loss, layer_goodness_acc, sf_test_err, gd_test_err, ga_test_err, seconds"
        )?;
    }

    let mut metrics = Vec::new();
    for epoch in 1..=schedule.max_epoch {
        let t0 = Instant::now();
        let mut stats = vec![LayerEpochStats::default(); num_layers];
        // Fresh seeded permutation per epoch.
        let iter = BatchIterator::new(train, opts.batch_size, opts.seed.wrapping_add(epoch as u64))?;
        for (images, targets) in iter {
            let final_out = backbone_batch_step(
                net,
                schedule,
                epoch,
                &images,
                &targets,
                &mut stats,
                num_layers,
            )?;
            let (features, d) = flatten_features(&final_out);
            if let Some(head) = sf_head.as_mut() {
                head.train_step(&features, d, &targets)
                    .map_err(|e| annotate_head(e, "softmax", epoch))?;
            }
            if let Some(head) = gd_head.as_mut() {
                head.train_step(&features, d, &targets, &mut neg_rng)
                    .map_err(|e| annotate_head(e, "goodness", epoch))?;
            }
        }
        // Mark layers whose window closed this epoch as frozen.
        for i in 0..num_layers {
            if schedule.layer_active(i, epoch) {
                net.layers[i].epochs_trained += 1;
            }
            if epoch >= schedule.plateau_ep[i] {
                net.layers[i].frozen = true;
            }
        }

        let evaluate_now = match (test, opts.eval_every) {
            (None, _) => false,
            (Some(_), 0) => epoch == schedule.max_epoch,
            (Some(_), k) => epoch % k == 0 || epoch == schedule.max_epoch,
        };
        let (sf_err, gd_err, ga_err) = if evaluate_now {
            let test = test.unwrap();
            let sf = match sf_head.as_ref() {
                Some(h) => evaluate(net, &EvalHead::Softmax(h), test, opts.batch_size)?,
                None => f64::NAN,
            };
            let gd = match gd_head.as_ref() {
                Some(h) => evaluate(net, &EvalHead::Goodness(h), test, opts.batch_size)?,
                None => f64::NAN,
            };
            let ga = evaluate(net, &EvalHead::GlobalAvg, test, opts.batch_size)?;
            (sf, gd, ga)
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };

        let seconds = t0.elapsed().as_secs_f64();
        let layer_loss: Vec<f64> = stats
            .iter()
            .map(|s| if s.batches > 0 { s.loss_sum / s.batches as f64 } else { f64::NAN })
            .collect();
        let layer_acc: Vec<f64> = stats
            .iter()
            .map(|s| if s.seen > 0 { 100.0 * s.correct as f64 / s.seen as f64 } else { f64::NAN })
            .collect();
        if let Some(w) = csv.as_deref_mut() {
            for i in 0..num_layers {
                writeln!(
                    w,
                    "{}, {}, {:.6}, {:.3}, {}, {}, {}, {:.3}",
                    epoch,
                    i + 1,
                    layer_loss[i],
                    layer_acc[i],
                    fmt_err(sf_err),
                    fmt_err(gd_err),
                    fmt_err(ga_err),
                    seconds
                )?;
            }
        }
        metrics.push(EpochMetrics {
            epoch,
            layer_loss,
            layer_acc,
            sf_test_err: sf_err,
            gd_test_err: gd_err,
            ga_test_err: ga_err,
            seconds,
        });
    }

    Ok(TrainOutcome {
        metrics,
        heads: TrainedHeads { softmax: sf_head, goodness: gd_head },
    })
}

fn annotate_head(e: Error, head: &str, epoch: u32) -> Error {
    match e {
        Error::Numerical(msg) => {
            Error::Numerical(format!("{head} head at epoch {epoch}: {msg}"))
        }
        other => other,
    }
}

fn fmt_err(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.4}")
    }
}

/// Top-1 test error (%) of `head` over `split`, in inference mode
/// (running BatchNorm statistics, frozen weights). Deterministic given the
/// weights: batches are walked in storage order.
pub fn evaluate(
    net: &Network,
    head: &EvalHead,
    split: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    if split.len() == 0 {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let j = net.config.classes;
    let mut wrong = 0u64;
    let mut seen = 0u64;
    let mut cursor = 0usize;
    while cursor < split.len() {
        let take = batch_size.min(split.len() - cursor);
        let (images, targets) = split.slice_batch(cursor, take)?;
        cursor += take;
        let preds: Vec<usize> = match head {
            EvalHead::Softmax(h) => {
                let final_out = net.forward_to_layer(&images, net.layers.len(), false)?;
                let (features, d) = flatten_features(&final_out);
                h.predict(&features, d)?.into_iter().map(|p| p.class).collect()
            }
            EvalHead::Goodness(h) => {
                let final_out = net.forward_to_layer(&images, net.layers.len(), false)?;
                let (features, d) = flatten_features(&final_out);
                h.predict(&features, d)?.into_iter().map(|p| p.class).collect()
            }
            EvalHead::GlobalAvg => {
                let tap = net.forward_to_final_tap(&images, false)?;
                ga_predict(&tap, j)?.into_iter().map(|p| p.class).collect()
            }
        };
        for (p, &z) in preds.iter().zip(targets.iter()) {
            if *p != z {
                wrong += 1;
            }
            seen += 1;
        }
    }
    Ok(100.0 * wrong as f64 / seen as f64)
}

/// Discovers a schedule per Algorithm 1's outer loop: one layer at a time,
/// starting from a fresh seeded initialization each round, train layers
/// `1..=i` under the already-fixed windows of layers `< i` and record the
/// epoch at which layer i's epoch-mean loss plateaus. Fast mode then sets
/// `start_ep[i+1] = max(0, plateau_ep[i] - overlap)`.
///
/// A layer that never plateaus is assigned `plateau_ep = max_epoch` and a
/// warning is pushed into the returned diagnostics.
pub fn discover_schedule(
    config: &NetworkConfig,
    train: &Dataset,
    opts: &TrainOpts,
    plateau: PlateauCfg,
    max_epoch: u32,
    fast_mode: bool,
    overlap: u32,
) -> Result<(ILTSchedule, Vec<String>)> {
    let num_layers = config.layers.len();
    let mut schedule = ILTSchedule {
        start_ep: vec![0; num_layers],
        plateau_ep: vec![max_epoch; num_layers],
        max_epoch,
        overlap,
        fast_mode,
    };
    let mut warnings = Vec::new();

    for i in 0..num_layers {
        // Fresh re-initialization per discovery round.
        let mut net = build_network(config, opts.seed)?;
        let mut history: Vec<f64> = Vec::new();
        let mut found = None;
        let start_i = schedule.start_ep[i].max(1);
        for epoch in 1..=max_epoch {
            let mut stats = vec![LayerEpochStats::default(); i + 1];
            let iter =
                BatchIterator::new(train, opts.batch_size, opts.seed.wrapping_add(epoch as u64))?;
            // Probe schedule: layers < i follow their fixed windows; layer i
            // trains from its start onward; deeper layers are not touched.
            let probe = ILTSchedule {
                start_ep: schedule.start_ep[..=i].to_vec(),
                plateau_ep: {
                    let mut p = schedule.plateau_ep[..=i].to_vec();
                    p[i] = max_epoch;
                    p
                },
                max_epoch,
                overlap,
                fast_mode: false,
            };
            for (images, targets) in iter {
                backbone_batch_step(&mut net, &probe, epoch, &images, &targets, &mut stats, i + 1)?;
            }
            for l in 0..=i {
                if probe.layer_active(l, epoch) {
                    net.layers[l].epochs_trained += 1;
                }
                if epoch >= probe.plateau_ep[l] {
                    net.layers[l].frozen = true;
                }
            }
            if epoch >= start_i {
                history.push(stats[i].loss_sum / stats[i].batches.max(1) as f64);
                if detect_plateau(&history, plateau.window, plateau.min_delta) {
                    // The plateau point is the last epoch that still improved:
                    // the epoch just before the stalled window.
                    let fired = epoch - plateau.window as u32;
                    found = Some(fired.max(start_i));
                    break;
                }
            }
        }
        schedule.plateau_ep[i] = match found {
            Some(e) => e,
            None => {
                warnings.push(format!(
                    "layer {} did not plateau within {max_epoch} epochs; using max_epoch",
                    i + 1
                ));
                max_epoch
            }
        };
        if schedule.plateau_ep[i] < schedule.start_ep[i] {
            schedule.plateau_ep[i] = schedule.start_ep[i];
        }
        if fast_mode && i + 1 < num_layers {
            schedule.start_ep[i + 1] = schedule.plateau_ep[i].saturating_sub(overlap);
        }
    }
    Ok((schedule, warnings))
}
