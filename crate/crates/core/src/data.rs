//! Datasets: MNIST IDX ingestion, synthetic blob images, batching and
//! Gaussian noise augmentation. Pixels live in `[0, 1]`.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, IdxError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N×C×H×W` images in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dimension(format!(
                "dataset images must be N×C×H×W, got rank {}",
                images.rank()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if images.data().iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::Contract("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `C×H×W` shape of a single example.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `n` distinct examples drawn uniformly with `seed`, in draw order.
    pub fn random_slice(&self, n: usize, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

// ---- IDX ----

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            IdxError::Truncated {
                path: path.to_path_buf(),
                detail: format!("header ends before byte {}", at + 4),
            }
            .into()
        })
}

/// Parses an IDX image file into `(n, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::WrongMagic {
            path: path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        }
        .into());
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let h = be_u32(bytes, 8, path)? as usize;
    let w = be_u32(bytes, 12, path)? as usize;
    let need = n * h * w;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{need} pixel bytes declared, {} present", payload.len()),
        }
        .into());
    }
    Ok((n, h, w, payload[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::WrongMagic {
            path: path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        }
        .into());
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            detail: format!("{n} labels declared, {} present", payload.len()),
        }
        .into());
    }
    Ok(payload[..n].to_vec())
}

/// Loads an IDX image/label pair (optionally gzip-compressed). Pixels are
/// divided by 255 and a single channel axis is inserted.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let (n, h, w, pixels) = parse_idx_images(&read_maybe_gz(ip)?, ip)?;
    let raw_labels = parse_idx_labels(&read_maybe_gz(lp)?, lp)?;
    if raw_labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: raw_labels.len(),
        }
        .into());
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(IdxError::Truncated {
            path: ip.to_path_buf(),
            detail: "empty image set".into(),
        }
        .into());
    }
    let full = T::from_f64_lossy(255.0);
    let data = pixels
        .iter()
        .map(|&b| T::from_u8(b).expect("u8 fits") / full)
        .collect();
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    let classes = (*raw_labels.iter().max().expect("n > 0") as usize + 1).max(10);
    let labels = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::new(images, labels, classes)
}

pub fn encode_idx_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes a single-channel dataset as uncompressed IDX (pixels ×255, rounded).
pub fn write_idx<T: Scalar>(
    dataset: &Dataset<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = dataset.images.shape();
    if shape[1] != 1 || dataset.classes > 256 {
        return Err(Error::Contract(
            "IDX export needs single-channel images and at most 256 classes".into(),
        ));
    }
    let pixels: Vec<u8> = dataset
        .images
        .data()
        .iter()
        .map(|&v| (v.to_f64_lossy() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let labels: Vec<u8> = dataset.labels.iter().map(|&l| l as u8).collect();
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    std::fs::write(ip, encode_idx_images(shape[0], shape[2], shape[3], &pixels))
        .map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, encode_idx_labels(&labels)).map_err(|e| Error::io(lp, e))
}

// ---- synthetic ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub seed: u64,
}

const CENTRE_TRIES: usize = 200;

/// Distance between two classes' centre pairs under the better matching.
fn pair_gap(a: &[(f64, f64); 2], b: &[(f64, f64); 2]) -> f64 {
    let d = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
    (d(a[0], b[0]) + d(a[1], b[1])).min(d(a[0], b[1]) + d(a[1], b[0]))
}

/// Class-conditional blob images: every class owns two bump centres; each
/// sample jitters them, adds pixel noise and clips to `[0, 1]`. Example `i`
/// has class `i % classes`.
pub fn synth_dataset<T: Scalar>(spec: SynthSpec) -> Result<Dataset<T>> {
    if spec.classes < 2 {
        return Err(Error::Contract(format!(
            "synthetic dataset needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.side < 4 {
        return Err(Error::Contract(
            "synthetic dataset needs per_class ≥ 1 and side ≥ 4".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.side as f64;
    let mut centres: Vec<[(f64, f64); 2]> = Vec::with_capacity(spec.classes);
    let min_gap = side / 2.0;
    for _ in 0..spec.classes {
        let mut best = None;
        let mut best_gap = f64::NEG_INFINITY;
        for _ in 0..CENTRE_TRIES {
            let cand = [0, 1].map(|_| {
                (
                    rng.random_range(0.15 * side..0.85 * side),
                    rng.random_range(0.15 * side..0.85 * side),
                )
            });
            let gap = centres
                .iter()
                .map(|c| pair_gap(c, &cand))
                .fold(f64::INFINITY, f64::min);
            if gap > best_gap {
                best_gap = gap;
                best = Some(cand);
            }
            if gap >= min_gap {
                break;
            }
        }
        centres.push(best.expect("at least one try"));
    }
    let width = side / 6.0;
    let pixel_noise = Normal::new(0.0, 0.05).expect("valid std");
    let n = spec.classes * spec.per_class;
    let plane = spec.side * spec.side;
    let mut data = Vec::with_capacity(n * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.classes;
        let jitter: Vec<(f64, f64)> = centres[class]
            .iter()
            .map(|&(cy, cx)| {
                (
                    cy + rng.random_range(-1.0..1.0),
                    cx + rng.random_range(-1.0..1.0),
                )
            })
            .collect();
        for y in 0..spec.side {
            for x in 0..spec.side {
                let mut v = 0.0;
                for &(cy, cx) in &jitter {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += (-d2 / (2.0 * width * width)).exp();
                }
                v += pixel_noise.sample(&mut rng);
                data.push(T::from_f64_lossy(v.clamp(0.0, 1.0)));
            }
        }
        labels.push(class);
    }
    let images = Tensor::new(vec![n, 1, spec.side, spec.side], data)?;
    Dataset::new(images, labels, spec.classes)
}

// ---- augmentation ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub sigma: f64,
    pub seed: u64,
}

/// I.i.d. `N(0, σ²)` samples of the given shape.
pub fn gaussian_noise<T: Scalar>(shape: &[usize], sigma: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(&mut rng)))
}

/// Adds `N(0, σ²)` per pixel, then clips to `[0, 1]`. `σ = 0` returns the
/// batch unchanged.
pub fn gaussian_augment<T: Scalar>(batch: &Tensor<T>, config: AugmentConfig) -> Tensor<T> {
    if config.sigma <= 0.0 {
        return batch.clone();
    }
    let noise = gaussian_noise::<T>(batch.shape(), config.sigma, config.seed);
    batch
        .zip_map(&noise, |x, n| (x + n).max(T::zero()).min(T::one()))
        .expect("same shape")
}

// ---- batching ----

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Seeded permutation of a dataset cut into consecutive batches; the last
/// partial batch is kept.
pub struct Batches<'a, T> {
    dataset: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batches<T: Scalar>(
    dataset: &Dataset<T>,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Batches<'_, T>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(Batches {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

impl<T: Scalar> Batches<'_, T> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let images = self.dataset.images.select_rows(&indices).ok()?;
        let labels = indices.iter().map(|&i| self.dataset.labels[i]).collect();
        Some(Batch {
            indices,
            images,
            labels,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}
