//! MNIST IDX ingestion, deterministic validation splits and stratified
//! subsets.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Fraction of the training data held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.10;

/// Labelled images, `N×H×W×C` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::invalid(
                "dataset",
                format!("images must be N×H×W×C, got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("dataset", format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[H, W, C]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Images and labels at the given indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_leading(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset { images, labels })
    }

    /// The first `n` examples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// Consecutive `(images, labels)` chunks of at most `size` examples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Result<(Tensor, Vec<usize>)>> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let count = size.min(self.len() - start);
            Ok((
                self.images.slice_leading(start, count)?,
                self.labels[start..start + count].to_vec(),
            ))
        })
    }

    /// Number of examples per class label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Train / validation / test partition.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    pub split_seed: u64,
}

impl DatasetSplit {
    /// Carves validation out of `full_train` (see [`split_validation`]).
    pub fn new(full_train: &Dataset, test: Dataset, split_seed: u64) -> Result<Self> {
        let (train, validation) = split_validation(full_train, split_seed)?;
        Ok(DatasetSplit {
            train,
            validation,
            test,
            split_seed,
        })
    }

    /// Caps the training and test sets with stratified subsets; validation
    /// keeps the size it had before subsetting.
    pub fn subset(self, train: Option<usize>, test: Option<usize>) -> Result<Self> {
        let seed = self.split_seed;
        let train = match train {
            Some(n) if n < self.train.len() => stratified_subset(&self.train, n, seed)?,
            _ => self.train,
        };
        let test = match test {
            Some(n) if n < self.test.len() => stratified_subset(&self.test, n, seed.wrapping_add(1))?,
            _ => self.test,
        };
        Ok(DatasetSplit {
            train,
            validation: self.validation,
            test,
            split_seed: seed,
        })
    }
}

/// Seeded shuffle of the indices; the last `round(0.1·N)` become validation.
/// Both parts keep the shuffled order.
pub fn split_validation(dataset: &Dataset, split_seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if n < 10 {
        return Err(Error::invalid(
            "split_validation",
            format!("need at least 10 examples, got {n}"),
        ));
    }
    let val = (VALIDATION_FRACTION * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let (train_idx, val_idx) = idx.split_at(n - val);
    Ok((dataset.select(train_idx)?, dataset.select(val_idx)?))
}

/// `n` examples with per-class counts proportional to the source
/// (largest-remainder rounding), then shuffled.
pub fn stratified_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > dataset.len() {
        return Err(Error::invalid(
            "stratified_subset",
            format!("size {n} outside 1..={}", dataset.len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let total = dataset.len() as f64;
    let quotas: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * n as f64 / total).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let mut missing = n - take.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let mut chosen = Vec::with_capacity(n);
    for (class, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..take[class]]);
    }
    chosen.shuffle(&mut rng);
    dataset.select(&chosen)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
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

fn be_u32(bytes: &[u8], at: usize, path: &Path, header_len: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: header_len,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file body; pixels are scaled by `1/255`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let magic = be_u32(bytes, 0, path, 16)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path, 16)? as usize;
    let rows = be_u32(bytes, 8, path, 16)? as usize;
    let cols = be_u32(bytes, 12, path, 16)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: payload.len(),
        });
    }
    let data = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

/// Parses an IDX1 label file body.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path, 8)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(bytes, 4, path, 8)? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: n,
            found: payload.len(),
        });
    }
    Ok(payload[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair, gzip-compressed or plain.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?, labels_path)?;
    Dataset::new(images, labels)
}

fn find_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (plain or .gz)"),
    ))
}

/// Loads `(train, test)` from a directory holding the four standard MNIST
/// file names, each optionally with a `.gz` suffix.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &find_file(dir, "train-images-idx3-ubyte")?,
        &find_file(dir, "train-labels-idx1-ubyte")?,
    )?;
    let test = load_idx(
        &find_file(dir, "t10k-images-idx3-ubyte")?,
        &find_file(dir, "t10k-labels-idx1-ubyte")?,
    )?;
    Ok((train, test))
}
