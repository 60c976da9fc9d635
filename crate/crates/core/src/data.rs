//! Dataset ingestion (IDX and CIFAR-10 binary formats), per-channel
//! standardization, and seeded batch iteration.
//!
//! Loaders accept plain files or gzip-compressed files (`.gz` suffix).
//! Standardization constants come from the training split and are applied
//! to both splits by the pair loaders; the single-file loaders standardize
//! with their own statistics, which the doc comments call out.

use crate::error::{Error, Result};
use crate::tensor::FeatureTensor;
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

/// Which half of a dataset a [`Dataset`] value holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// A loaded, standardized split: images plus 1-based class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: FeatureTensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
    pub name: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies samples `start..start+take` in storage order.
    pub fn slice_batch(&self, start: usize, take: usize) -> Result<(FeatureTensor<f32>, Vec<usize>)> {
        if start + take > self.len() || take == 0 {
            return Err(Error::Config(format!(
                "batch slice {start}..{} outside dataset of {} samples",
                start + take,
                self.len()
            )));
        }
        let idxs: Vec<usize> = (start..start + take).collect();
        self.gather(&idxs)
    }

    /// Copies the given sample indices into a fresh batch.
    pub fn gather(&self, idxs: &[usize]) -> Result<(FeatureTensor<f32>, Vec<usize>)> {
        if idxs.is_empty() {
            return Err(Error::Config("cannot gather an empty batch".into()));
        }
        let (_, c, h, w) = self.images.shape();
        let mut images = FeatureTensor::zeros(idxs.len(), c, h, w);
        let mut labels = Vec::with_capacity(idxs.len());
        for (row, &src) in idxs.iter().enumerate() {
            if src >= self.len() {
                return Err(Error::Config(format!(
                    "sample index {src} outside dataset of {} samples",
                    self.len()
                )));
            }
            images.sample_mut(row).copy_from_slice(self.images.sample(src));
            labels.push(self.labels[src]);
        }
        Ok((images, labels))
    }

    /// First `k` samples as a smaller dataset (deterministic subset).
    pub fn take(&self, k: usize) -> Result<Dataset> {
        if k == 0 || k > self.len() {
            return Err(Error::Config(format!(
                "cannot take {k} samples from a dataset of {}",
                self.len()
            )));
        }
        let (images, labels) = self.slice_batch(0, k)?;
        Ok(Dataset {
            images,
            labels,
            split: self.split,
            name: format!("{}[..{k}]", self.name),
        })
    }
}

/// Per-channel mean/standard-deviation pairs used for standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Population statistics over every pixel of each channel.
    pub fn measure(images: &FeatureTensor<f32>) -> Self {
        let (n, c, h, w) = images.shape();
        let per_channel = (n * h * w) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = images.idx(ni, ci, 0, 0);
                for &v in &images.data[base..base + h * w] {
                    mean[ci] += v as f64;
                    sq[ci] += (v as f64) * (v as f64);
                }
            }
        }
        let mut std = Vec::with_capacity(c);
        for ci in 0..c {
            mean[ci] /= per_channel;
            let var = (sq[ci] / per_channel - mean[ci] * mean[ci]).max(0.0);
            // Constant channels carry no signal; the floor keeps the
            // division defined.
            std.push((var.sqrt() as f32).max(1e-8));
        }
        Self { mean: mean.into_iter().map(|m| m as f32).collect(), std }
    }

    /// In-place `(x - mean) / std` per channel.
    pub fn apply(&self, images: &mut FeatureTensor<f32>) -> Result<()> {
        let (n, c, h, w) = images.shape();
        if c != self.mean.len() {
            return Err(Error::Config(format!(
                "standardization constants cover {} channels, images have {c}",
                self.mean.len()
            )));
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = images.idx(ni, ci, 0, 0);
                let (m, s) = (self.mean[ci], self.std[ci]);
                for v in &mut images.data[base..base + h * w] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// Reads a whole file, transparently gunzipping when the path ends in
/// `.gz`. Errors name the path.
fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().map_or(false, |ext| ext == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Data(format!("cannot gunzip {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Data(format!(
            "{} truncated: header needs {end} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Raw IDX image payload: pixel bytes plus (n, h, w).
pub fn read_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "{}: expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let expect = 16 + n * h * w;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "{} truncated: {n} images of {h}x{w} need {expect} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((bytes[16..].to_vec(), n, h, w))
}

/// Raw IDX label payload.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "{}: expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}",
            path.display()
        )));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expect = 8 + n;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "{} truncated: {n} labels need {expect} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes[8..].to_vec())
}

/// Writes pixel bytes as an uncompressed IDX image file (fixture and
/// tooling helper; the byte-for-byte inverse of [`read_idx_images`]).
pub fn write_idx_images(path: &Path, pixels: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    if pixels.len() != n * h * w {
        return Err(Error::Config(format!(
            "{} pixels do not fill {n} images of {h}x{w}",
            pixels.len()
        )));
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Writes label bytes as an uncompressed IDX label file.
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    std::fs::write(path, bytes)
        .map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Converts raw pixel bytes to a [0, 1]-scaled tensor and 1-based labels.
fn assemble(
    pixels: Vec<u8>,
    labels: Vec<u8>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    source: &Path,
) -> Result<(FeatureTensor<f32>, Vec<usize>)> {
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{}: {n} images but {} labels",
            source.display(),
            labels.len()
        )));
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let images = FeatureTensor::new(data, n, c, h, w)?;
    let labels = labels.into_iter().map(|b| b as usize + 1).collect();
    Ok((images, labels))
}

fn split_from_path(path: &Path) -> Split {
    let name = path.file_name().and_then(|f| f.to_str()).unwrap_or("");
    if name.starts_with("train") {
        Split::Train
    } else {
        Split::Test
    }
}

/// Loads one IDX image/label pair, scaling pixels to [0, 1] and then
/// standardizing with this split's own statistics. Prefer
/// [`load_idx_pair`] when a training split is available, so both splits
/// share the training constants.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (pixels, n, h, w) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    let (mut images, labels) = assemble(pixels, labels, n, 1, h, w, images_path)?;
    ChannelStats::measure(&images).apply(&mut images)?;
    Ok(Dataset {
        images,
        labels,
        split: split_from_path(images_path),
        name: images_path
            .file_name()
            .and_then(|f| f.to_str())
            .unwrap_or("idx")
            .to_string(),
    })
}

/// Loads train and test IDX splits, standardizing both with the training
/// split's channel statistics.
pub fn load_idx_pair(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    name: &str,
) -> Result<(Dataset, Dataset)> {
    let (px, n, h, w) = read_idx_images(train_images)?;
    let lb = read_idx_labels(train_labels)?;
    let (mut train_x, train_y) = assemble(px, lb, n, 1, h, w, train_images)?;
    let (px, n2, h2, w2) = read_idx_images(test_images)?;
    let lb = read_idx_labels(test_labels)?;
    if (h2, w2) != (h, w) {
        return Err(Error::Data(format!(
            "{}: test images are {h2}x{w2} but train images are {h}x{w}",
            test_images.display()
        )));
    }
    let (mut test_x, test_y) = assemble(px, lb, n2, 1, h2, w2, test_images)?;
    let stats = ChannelStats::measure(&train_x);
    stats.apply(&mut train_x)?;
    stats.apply(&mut test_x)?;
    Ok((
        Dataset { images: train_x, labels: train_y, split: Split::Train, name: name.to_string() },
        Dataset { images: test_x, labels: test_y, split: Split::Test, name: name.to_string() },
    ))
}

/// Reads CIFAR-10 binary batch files (3073-byte records: label byte plus
/// R, G, B planes) into [0, 1]-scaled pixels and 1-based labels.
fn read_cifar_batches(paths: &[&Path]) -> Result<(FeatureTensor<f32>, Vec<usize>)> {
    if paths.is_empty() {
        return Err(Error::Config("no batch files given".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_maybe_gz(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Data(format!(
                "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                path.display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label > 9 {
                return Err(Error::Data(format!(
                    "{}: label byte {label} outside 0..=9",
                    path.display()
                )));
            }
            labels.push(label + 1);
            data.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    Ok((FeatureTensor::new(data, n, 3, 32, 32)?, labels))
}

/// Loads CIFAR-10 batch files as one split, standardized per channel with
/// its own statistics. Prefer [`load_cifar10_pair`] for train/test runs.
pub fn load_cifar10(paths: &[&Path], name: &str) -> Result<Dataset> {
    let (mut images, labels) = read_cifar_batches(paths)?;
    ChannelStats::measure(&images).apply(&mut images)?;
    Ok(Dataset {
        images,
        labels,
        split: paths.first().map(|p| split_from_path(p)).unwrap_or(Split::Train),
        name: name.to_string(),
    })
}

/// Loads CIFAR-10 train batches and the test batch, standardizing both
/// with the training split's channel statistics.
pub fn load_cifar10_pair(
    train_paths: &[&Path],
    test_path: &Path,
    name: &str,
) -> Result<(Dataset, Dataset)> {
    let (mut train_x, train_y) = read_cifar_batches(train_paths)?;
    let (mut test_x, test_y) = read_cifar_batches(&[test_path])?;
    let stats = ChannelStats::measure(&train_x);
    stats.apply(&mut train_x)?;
    stats.apply(&mut test_x)?;
    Ok((
        Dataset { images: train_x, labels: train_y, split: Split::Train, name: name.to_string() },
        Dataset { images: test_x, labels: test_y, split: Split::Test, name: name.to_string() },
    ))
}

/// Seeded-permutation pass over a dataset: every sample exactly once per
/// epoch, final partial batch included.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if dataset.is_empty() {
            return Err(Error::Config("cannot iterate an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { dataset, order, batch_size, cursor: 0 })
    }
}

impl<'a> Iterator for BatchIterator<'a> {
    type Item = (FeatureTensor<f32>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idxs = &self.order[self.cursor..end];
        self.cursor = end;
        // gather only fails on out-of-range indices, which a permutation of
        // 0..n cannot contain.
        Some(self.dataset.gather(idxs).expect("permutation indices are in range"))
    }
}
