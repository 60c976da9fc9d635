//! Network architecture: layer specifications, seeded construction,
//! parameter and multiply-add accounting, and the pure forward pass.
//!
//! A network is a stack of independently trained convolutional blocks.
//! Each block runs Conv -> ReLU -> BatchNorm (-> 2x2 max-pool when
//! configured); the ReLU output is where the block's local classification
//! loss attaches. Blocks marked `grouped` split their channels into one
//! group per class so that each class's channel subset only sees its own
//! group's inputs — the channel-wise competitive arrangement.

use crate::adam::AdamState;
use crate::conv::{conv2d_forward, conv_output_dims, ConvWeights};
use crate::error::{Error, Result};
use crate::norm::{batchnorm_forward, BatchNormState};
use crate::pool::maxpool2x2;
use crate::predictor::HIDDEN_WIDTH;
use crate::tensor::{relu, FeatureTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Local loss attached to a block's ReLU output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Channel-wise competitive cross-entropy over per-class goodness.
    CwC,
    /// Positive-vs-negative threshold loss on target / non-target goodness.
    PvN,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::CwC => "CwC",
            LossKind::PvN => "PvN",
        }
    }
}

/// Classification head on top of the trained stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictorKind {
    /// Linear softmax classifier on the flattened final block output.
    Softmax,
    /// Two-layer network on the same features, scored by goodness under
    /// each overlaid label.
    Goodness,
    /// Training-free argmax of the last layer's per-class goodness.
    GlobalAvg,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Softmax => "Sf",
            PredictorKind::Goodness => "Gd",
            PredictorKind::GlobalAvg => "GA",
        }
    }
}

/// One convolutional block's architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub out_channels: usize,
    /// When set, the convolution uses one channel group per class.
    pub grouped: bool,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Append a 2x2 stride-2 max-pool after BatchNorm.
    pub maxpool_after: bool,
    pub loss: LossKind,
    /// PvN threshold; unused by CwC but kept so loss kind can be switched.
    pub theta: f32,
}

impl LayerSpec {
    /// Convolution group count: one group per class when grouped.
    pub fn groups(&self, classes: usize) -> usize {
        if self.grouped {
            classes
        } else {
            1
        }
    }
}

/// Full architecture description: input geometry, class count, blocks, and
/// the shared learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Input (channels, height, width).
    pub input_shape: (usize, usize, usize),
    /// Number of classes J. Every block's channel count must divide by J.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Adam learning rate shared by all blocks and heads.
    pub lr: f32,
}

/// The default four-block channel progression.
const DEFAULT_CHANNELS: [usize; 4] = [20, 80, 240, 480];

impl NetworkConfig {
    fn default_stack(
        input_shape: (usize, usize, usize),
        classes: usize,
        loss: LossKind,
        grouped_pattern: [bool; 4],
    ) -> Self {
        let layers = DEFAULT_CHANNELS
            .iter()
            .zip(grouped_pattern.iter())
            .enumerate()
            .map(|(i, (&out_channels, &grouped))| LayerSpec {
                out_channels,
                grouped,
                kernel: 3,
                stride: 1,
                padding: 1,
                // Pool after the 2nd and 4th blocks.
                maxpool_after: i % 2 == 1,
                loss,
                theta: 2.0,
            })
            .collect();
        Self { input_shape, classes, layers, lr: 0.01 }
    }

    /// Default stack with grouped (channel-wise) convolutions in blocks 2
    /// and 4: channels [20, 80, 240, 480], 3x3 stride-1 pad-1, pooling
    /// after blocks 2 and 4.
    pub fn cfse_default(
        input_shape: (usize, usize, usize),
        classes: usize,
        loss: LossKind,
    ) -> Self {
        Self::default_stack(input_shape, classes, loss, [false, true, false, true])
    }

    /// Same stack with every convolution dense (no channel grouping).
    pub fn ffcnn_default(
        input_shape: (usize, usize, usize),
        classes: usize,
        loss: LossKind,
    ) -> Self {
        Self::default_stack(input_shape, classes, loss, [false; 4])
    }

    /// "CFSE" when any block is grouped, else "FF-CNN", suffixed with the
    /// first block's loss and the head, e.g. `CFSE_CwC+Sf`.
    pub fn model_name(&self, head: PredictorKind) -> String {
        let family = if self.layers.iter().any(|l| l.grouped) {
            "CFSE"
        } else {
            "FF-CNN"
        };
        let loss = self.layers.first().map(|l| l.loss.name()).unwrap_or("?");
        format!("{family}_{loss}+{}", head.name())
    }

    /// Validates geometry: positive dimensions, channel counts divisible by
    /// the class count, grouped blocks with inputs divisible by J, and a
    /// shape chain that never collapses.
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input shape ({c}, {h}, {w}) has a zero dimension"
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("network has no layers".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {}",
                self.lr
            )));
        }
        for (i, spec) in self.layers.iter().enumerate() {
            if spec.out_channels == 0 || spec.kernel == 0 || spec.stride == 0 {
                return Err(Error::Config(format!(
                    "layer {}: out_channels, kernel, and stride must be positive",
                    i + 1
                )));
            }
            if spec.out_channels % self.classes != 0 {
                return Err(Error::Config(format!(
                    "layer {}: {} channels not divisible by {} classes (per-class \
                     goodness needs equal channel subsets)",
                    i + 1,
                    spec.out_channels,
                    self.classes
                )));
            }
            if !(spec.theta.is_finite() && spec.theta > 0.0) && spec.loss == LossKind::PvN {
                return Err(Error::Config(format!(
                    "layer {}: threshold must be positive and finite, got {}",
                    i + 1,
                    spec.theta
                )));
            }
        }
        // Walking the shape chain surfaces grouped-divisibility and
        // collapsed-spatial errors with the offending layer named.
        self.layer_input_shapes()?;
        Ok(())
    }

    /// Shapes entering each layer plus the final output: `len = layers + 1`.
    pub fn layer_input_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![self.input_shape];
        let (mut c, mut h, mut w) = self.input_shape;
        for (i, spec) in self.layers.iter().enumerate() {
            let groups = spec.groups(self.classes);
            if c % groups != 0 {
                return Err(Error::Config(format!(
                    "layer {}: {c} input channels not divisible into {groups} groups",
                    i + 1
                )));
            }
            let (oh, ow) = conv_output_dims(h, w, spec.kernel, spec.stride, spec.padding)
                .map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
            c = spec.out_channels;
            h = oh;
            w = ow;
            if spec.maxpool_after {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!(
                        "layer {}: cannot 2x2-pool a {h}x{w} map",
                        i + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// Flattened length of the final block's output (per sample).
    pub fn final_feature_len(&self) -> Result<usize> {
        let (c, h, w) = *self.layer_input_shapes()?.last().unwrap();
        Ok(c * h * w)
    }
}

/// One block's trainable state: convolution weights, BatchNorm statistics,
/// and the Adam moments for kernels and bias.
#[derive(Debug, Clone)]
pub struct TrainedLayer {
    pub weights: ConvWeights<f32>,
    pub bn: BatchNormState<f32>,
    pub adam_k: AdamState<f32>,
    pub adam_b: AdamState<f32>,
    /// Epochs in which this layer actually received updates.
    pub epochs_trained: u32,
    /// Set once the layer's schedule window closes; frozen layers never
    /// update again, making their outputs bit-stable.
    pub frozen: bool,
}

/// A constructed network: the architecture plus per-layer state.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<TrainedLayer>,
}

/// Builds a network with He-uniform kernels drawn from a ChaCha8 stream
/// seeded by `seed`. Identical (config, seed) pairs produce bit-identical
/// networks.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let shapes = config.layer_input_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    for (spec, &(c_in, _, _)) in config.layers.iter().zip(shapes.iter()) {
        let weights = ConvWeights::he_uniform(
            spec.out_channels,
            c_in,
            spec.kernel,
            spec.groups(config.classes),
            &mut rng,
        )?;
        let n_kernel = weights.kernels.len();
        let n_bias = weights.bias.len();
        layers.push(TrainedLayer {
            weights,
            bn: BatchNormState::new(spec.out_channels),
            adam_k: AdamState::new(n_kernel, config.lr),
            adam_b: AdamState::new(n_bias, config.lr),
            epochs_trained: 0,
            frozen: false,
        });
    }
    Ok(Network { config: config.clone(), layers })
}

impl Network {
    /// Applies block `i` to `input` without mutating any state, returning
    /// `(relu_out, block_out)` — the loss tap and what feeds the next
    /// block. `training` selects batch vs running BatchNorm statistics.
    pub fn apply_layer(
        &self,
        i: usize,
        input: &FeatureTensor<f32>,
        training: bool,
    ) -> Result<(FeatureTensor<f32>, FeatureTensor<f32>)> {
        let layer = self
            .layers
            .get(i)
            .ok_or_else(|| Error::Config(format!("layer index {i} out of range")))?;
        let spec = &self.config.layers[i];
        let conv_out = conv2d_forward(input, &layer.weights, spec.stride, spec.padding)?;
        let relu_out = relu(&conv_out);
        let bn_out = batchnorm_forward(&relu_out, &layer.bn, training)?;
        let output = if spec.maxpool_after {
            maxpool2x2(&bn_out)?.0
        } else {
            bn_out
        };
        Ok((relu_out, output))
    }

    /// Runs blocks `0..layer_index` and returns the last output;
    /// `layer_index == layers.len()` yields the final feature map and
    /// `layer_index == 0` returns the input unchanged. Never mutates.
    pub fn forward_to_layer(
        &self,
        batch: &FeatureTensor<f32>,
        layer_index: usize,
        training: bool,
    ) -> Result<FeatureTensor<f32>> {
        if layer_index > self.layers.len() {
            return Err(Error::Config(format!(
                "layer index {layer_index} out of range for {} layers",
                self.layers.len()
            )));
        }
        let mut x = batch.clone();
        for i in 0..layer_index {
            x = self.apply_layer(i, &x, training)?.1;
        }
        Ok(x)
    }

    /// Runs the whole stack and returns the last block's ReLU tap — the
    /// activation whose goodness the final layer's loss trained, and the
    /// tensor the global-averaging readout scores. Never mutates.
    pub fn forward_to_final_tap(
        &self,
        batch: &FeatureTensor<f32>,
        training: bool,
    ) -> Result<FeatureTensor<f32>> {
        let last = self
            .layers
            .len()
            .checked_sub(1)
            .ok_or_else(|| Error::Config("network has no layers".into()))?;
        let x = self.forward_to_layer(batch, last, training)?;
        Ok(self.apply_layer(last, &x, training)?.0)
    }
}

/// Learnable-parameter counts per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCounts {
    /// Per layer: kernel weights + biases.
    pub conv: Vec<usize>,
    /// Per layer: BatchNorm scale + shift (counted even though this
    /// implementation keeps them fixed at 1 and 0).
    pub bn: Vec<usize>,
    /// Predictor head parameters (0 for the training-free head).
    pub head: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn backbone(&self) -> usize {
        self.conv.iter().sum::<usize>() + self.bn.iter().sum::<usize>()
    }
}

/// Counts learnable parameters for `config` with the given head.
pub fn count_parameters(config: &NetworkConfig, head: PredictorKind) -> Result<ParamCounts> {
    config.validate()?;
    let shapes = config.layer_input_shapes()?;
    let mut conv = Vec::with_capacity(config.layers.len());
    let mut bn = Vec::with_capacity(config.layers.len());
    for (spec, &(c_in, _, _)) in config.layers.iter().zip(shapes.iter()) {
        let groups = spec.groups(config.classes);
        let kernel_params = (c_in / groups) * spec.kernel * spec.kernel * spec.out_channels;
        conv.push(kernel_params + spec.out_channels);
        bn.push(2 * spec.out_channels);
    }
    let flatten = config.final_feature_len()?;
    let j = config.classes;
    let head_params = match head {
        PredictorKind::GlobalAvg => 0,
        PredictorKind::Softmax => flatten * j + j,
        PredictorKind::Goodness => {
            // Two dense layers of HIDDEN_WIDTH; the input carries the label
            // overlay appended to the flattened features.
            (flatten + j) * HIDDEN_WIDTH
                + HIDDEN_WIDTH
                + HIDDEN_WIDTH * HIDDEN_WIDTH
                + HIDDEN_WIDTH
        }
    };
    let total = conv.iter().sum::<usize>() + bn.iter().sum::<usize>() + head_params;
    Ok(ParamCounts { conv, bn, head: head_params, total })
}

/// Multiply-accumulate counts per component, for one sample's forward
/// pass. Convention: convolution kernel MACs (`out_h * out_w * out_c *
/// (c_in/groups) * k^2`) plus the head's matrix products; biases,
/// BatchNorm, ReLU, and pooling are excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultAddCounts {
    pub per_layer: Vec<u64>,
    pub head: u64,
    pub total: u64,
}

/// Counts forward-pass multiply-adds for `config` with the given head.
pub fn count_mult_adds(config: &NetworkConfig, head: PredictorKind) -> Result<MultAddCounts> {
    config.validate()?;
    let shapes = config.layer_input_shapes()?;
    let mut per_layer = Vec::with_capacity(config.layers.len());
    for (i, (spec, &(c_in, h, w))) in config.layers.iter().zip(shapes.iter()).enumerate() {
        let groups = spec.groups(config.classes);
        let (oh, ow) = conv_output_dims(h, w, spec.kernel, spec.stride, spec.padding)
            .map_err(|e| Error::Config(format!("layer {}: {e}", i + 1)))?;
        let macs = (oh * ow * spec.out_channels * (c_in / groups) * spec.kernel * spec.kernel)
            as u64;
        per_layer.push(macs);
    }
    let flatten = config.final_feature_len()? as u64;
    let j = config.classes as u64;
    let hidden = HIDDEN_WIDTH as u64;
    let head_macs = match head {
        PredictorKind::GlobalAvg => 0,
        PredictorKind::Softmax => flatten * j,
        PredictorKind::Goodness => (flatten + j) * hidden + hidden * hidden,
    };
    let total = per_layer.iter().sum::<u64>() + head_macs;
    Ok(MultAddCounts { per_layer, head: head_macs, total })
}
