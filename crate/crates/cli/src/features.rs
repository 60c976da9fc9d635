//! Per-class feature-map export: for one input sample, the mean activation
//! over each class's channel subset at every layer, written as binary
//! portable graymaps plus a text index. On a trained channel-wise network
//! the true class's column shows the strongest maps in the deeper layers,
//! which makes the export a quick visual check that class subsets
//! specialized.
//!
//! Maps are taken from each block's ReLU output — the activation the
//! block's local loss sees — in inference mode. Pixel values are min-max
//! scaled per map for display; the index records the raw per-map means so
//! numeric comparisons stay on unscaled values.

use cfse::error::{Error, Result};
use cfse::network::Network;
use cfse::tensor::FeatureTensor;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One per-class activation map: the mean over the class's channel subset
/// of a layer's ReLU output, unscaled.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// 1-based layer index.
    pub layer: usize,
    /// 1-based class index.
    pub class: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    /// Mean of `values`: the map's overall intensity.
    pub mean: f32,
}

/// All layers x classes maps for one input sample.
#[derive(Debug, Clone)]
pub struct FeatureGrid {
    pub layers: usize,
    pub classes: usize,
    /// Row-major: `maps[(layer-1) * classes + (class-1)]`.
    pub maps: Vec<FeatureMap>,
}

impl FeatureGrid {
    pub fn map(&self, layer: usize, class: usize) -> &FeatureMap {
        &self.maps[(layer - 1) * self.classes + (class - 1)]
    }

    /// 1-based class whose map has the highest mean at `layer` (lowest
    /// class wins ties).
    pub fn argmax_class(&self, layer: usize) -> usize {
        let mut best = 1;
        for class in 2..=self.classes {
            if self.map(layer, class).mean > self.map(layer, best).mean {
                best = class;
            }
        }
        best
    }
}

/// Computes the grid for a single sample (a batch of one).
pub fn extract_feature_grid(net: &Network, sample: &FeatureTensor<f32>) -> Result<FeatureGrid> {
    let (n, c, h, w) = sample.shape();
    if n != 1 {
        return Err(Error::Config(format!(
            "feature export takes one sample, got a batch of {n}"
        )));
    }
    if (c, h, w) != net.config.input_shape {
        return Err(Error::Config(format!(
            "sample is {c}x{h}x{w} but the network expects {}x{}x{}",
            net.config.input_shape.0, net.config.input_shape.1, net.config.input_shape.2
        )));
    }
    let j = net.config.classes;
    let mut maps = Vec::with_capacity(net.layers.len() * j);
    let mut x = sample.clone();
    for i in 0..net.layers.len() {
        let (tap, next) = net.apply_layer(i, &x, false)?;
        let (_, tc, th, tw) = tap.shape();
        let plane = th * tw;
        let subset = tc / j;
        for class in 1..=j {
            let mut values = vec![0.0f32; plane];
            for ch in (class - 1) * subset..class * subset {
                let base = ch * plane;
                for (p, v) in values.iter_mut().enumerate() {
                    *v += tap.data[base + p];
                }
            }
            let inv = 1.0 / subset as f32;
            for v in &mut values {
                *v *= inv;
            }
            let mean = values.iter().sum::<f32>() / plane as f32;
            maps.push(FeatureMap { layer: i + 1, class, h: th, w: tw, values, mean });
        }
        x = next;
    }
    Ok(FeatureGrid { layers: net.layers.len(), classes: j, maps })
}

/// Min-max scales a map into display bytes; a constant map renders black.
pub fn scale_to_bytes(values: &[f32]) -> Vec<u8> {
    let min = values.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max > min) {
        return vec![0; values.len()];
    }
    let scale = 255.0 / (max - min);
    values
        .iter()
        .map(|&v| ((v - min) * scale).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Renders one map as a binary portable graymap (P5, 8-bit).
pub fn pgm_bytes(w: usize, h: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Writes `layer{l}_class{c}.pgm` for every map plus `index.txt` with the
/// unscaled statistics, and returns the paths written.
pub fn export_feature_grid(
    grid: &FeatureGrid,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| {
        Error::Io(format!("cannot create {}: {e}", out_dir.display()))
    })?;
    let mut written = Vec::with_capacity(grid.maps.len() + 1);
    let mut index = String::from("file, layer, class, mean, min, max\n");
    for map in &grid.maps {
        let name = format!("layer{}_class{}.pgm", map.layer, map.class);
        let path = out_dir.join(&name);
        let bytes = pgm_bytes(map.w, map.h, &scale_to_bytes(&map.values));
        std::fs::write(&path, bytes).map_err(|e| {
            Error::Io(format!("cannot write {}: {e}", path.display()))
        })?;
        let min = map.values.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = map.values.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let _ = writeln!(
            index,
            "{name}, {}, {}, {}, {min}, {max}",
            map.layer, map.class, map.mean
        );
        written.push(path);
    }
    let index_path = out_dir.join("index.txt");
    std::fs::write(&index_path, index).map_err(|e| {
        Error::Io(format!("cannot write {}: {e}", index_path.display()))
    })?;
    written.push(index_path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfse::network::{build_network, LayerSpec, LossKind, NetworkConfig};

    /// One-layer, two-class net with zeroed kernels and per-subset biases,
    /// so every map is constant and the intensities are exact: class 1's
    /// channels emit 2, class 2's emit 1.
    fn bias_only_net() -> Network {
        let cfg = NetworkConfig {
            input_shape: (1, 5, 5),
            classes: 2,
            layers: vec![LayerSpec {
                out_channels: 4,
                grouped: false,
                kernel: 3,
                stride: 1,
                padding: 1,
                maxpool_after: false,
                loss: LossKind::CwC,
                theta: 2.0,
            }],
            lr: 0.01,
        };
        let mut net = build_network(&cfg, 0).unwrap();
        for k in &mut net.layers[0].weights.kernels {
            *k = 0.0;
        }
        net.layers[0].weights.bias = vec![2.0, 2.0, 1.0, 1.0];
        net
    }

    fn any_sample() -> FeatureTensor<f32> {
        let mut x = FeatureTensor::zeros(1, 1, 5, 5);
        x.data[12] = 1.0;
        x
    }

    #[test]
    fn grid_covers_layers_by_classes_with_exact_subset_means() {
        let net = bias_only_net();
        let grid = extract_feature_grid(&net, &any_sample()).unwrap();
        assert_eq!((grid.layers, grid.classes), (1, 2));
        assert_eq!(grid.maps.len(), 2);
        let m1 = grid.map(1, 1);
        let m2 = grid.map(1, 2);
        assert_eq!((m1.h, m1.w), (5, 5));
        assert!(m1.values.iter().all(|&v| v == 2.0));
        assert!(m2.values.iter().all(|&v| v == 1.0));
        assert_eq!(m1.mean, 2.0);
        assert_eq!(m2.mean, 1.0);
        assert_eq!(grid.argmax_class(1), 1);
    }

    #[test]
    fn maps_average_across_each_subset() {
        // Distinct biases inside one subset: the map is their average.
        let mut net = bias_only_net();
        net.layers[0].weights.bias = vec![3.0, 1.0, 0.0, 0.0];
        let grid = extract_feature_grid(&net, &any_sample()).unwrap();
        assert!(grid.map(1, 1).values.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn scaling_spreads_the_range_and_flattens_constants() {
        assert_eq!(scale_to_bytes(&[1.5, 1.5, 1.5]), vec![0, 0, 0]);
        assert_eq!(scale_to_bytes(&[1.0, 3.0, 2.0]), vec![0, 255, 128]);
    }

    #[test]
    fn pgm_header_precedes_raw_pixels() {
        let bytes = pgm_bytes(3, 2, &[0, 10, 20, 30, 40, 250]);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[b"P5\n3 2\n255\n".len()..], &[0, 10, 20, 30, 40, 250]);
    }

    #[test]
    fn export_writes_every_map_and_an_index() {
        let net = bias_only_net();
        let grid = extract_feature_grid(&net, &any_sample()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = export_feature_grid(&grid, dir.path()).unwrap();
        // layers x classes maps plus the index.
        assert_eq!(written.len(), 1 * 2 + 1);
        assert!(dir.path().join("layer1_class1.pgm").exists());
        assert!(dir.path().join("layer1_class2.pgm").exists());

        let index = std::fs::read_to_string(dir.path().join("index.txt")).unwrap();
        let mut lines = index.lines();
        assert_eq!(lines.next(), Some("file, layer, class, mean, min, max"));
        let first: Vec<&str> = lines.next().unwrap().split(", ").collect();
        assert_eq!(first[0], "layer1_class1.pgm");
        assert_eq!(first[1], "1");
        assert_eq!(first[2], "1");
        // Unscaled statistics survive in the index.
        assert_eq!(first[3].parse::<f32>().unwrap(), 2.0);

        // The constant maps render black.
        let pgm = std::fs::read(dir.path().join("layer1_class1.pgm")).unwrap();
        assert!(pgm.ends_with(&[0u8; 25]));
    }

    #[test]
    fn batch_or_shape_mismatch_is_rejected() {
        let net = bias_only_net();
        let two = FeatureTensor::zeros(2, 1, 5, 5);
        assert!(extract_feature_grid(&net, &two).is_err());
        let wrong = FeatureTensor::zeros(1, 1, 4, 4);
        assert!(extract_feature_grid(&net, &wrong).is_err());
    }
}
