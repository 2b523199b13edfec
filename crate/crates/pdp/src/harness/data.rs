//! Dataset ingestion: IDX-format image/label files (the MNIST container
//! format) and a seeded synthetic cluster task for fast deterministic runs.

use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug)]
pub enum DataError {
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

/// A labeled classification dataset; features are flat per sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    /// Splits off the first `n` samples into one dataset, rest in another.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let head = Dataset {
            features: self.features[..n * self.n_features].to_vec(),
            labels: self.labels[..n].to_vec(),
            n_features: self.n_features,
            n_classes: self.n_classes,
        };
        let tail = Dataset {
            features: self.features[n * self.n_features..].to_vec(),
            labels: self.labels[n..].to_vec(),
            n_features: self.n_features,
            n_classes: self.n_classes,
        };
        (head, tail)
    }

    /// Deterministic per-seed shuffling of sample indices.
    pub fn shuffled_indices(&self, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..self.len()).collect();
        // Fisher–Yates
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// Gathers a batch's features and labels by index.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut feats = Vec::with_capacity(indices.len() * self.n_features);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            feats.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        (feats, labels)
    }
}

fn read_u32_be(r: &mut impl Read) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| DataError::Format("truncated header".into()))?;
    Ok(u32::from_be_bytes(buf))
}

/// Loads an IDX image/label file pair: images normalized to [0,1],
/// labels checked against 0..=9. Rejects bad magics and truncation
/// without producing a partial dataset.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut f = File::open(images_path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(&mut f)? as usize;
    let rows = read_u32_be(&mut f)? as usize;
    let cols = read_u32_be(&mut f)? as usize;
    let mut raw = vec![0u8; count * rows * cols];
    f.read_exact(&mut raw)
        .map_err(|_| DataError::Format("truncated image data".into()))?;
    let mut trailing = [0u8; 1];
    if f.read(&mut trailing)? != 0 {
        return Err(DataError::Format("trailing bytes after image data".into()));
    }

    let mut f = File::open(labels_path)?;
    let magic = read_u32_be(&mut f)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format(format!("bad label magic {magic:#010x}")));
    }
    let lcount = read_u32_be(&mut f)? as usize;
    if lcount != count {
        return Err(DataError::Format(format!("{count} images but {lcount} labels")));
    }
    let mut labels_raw = vec![0u8; lcount];
    f.read_exact(&mut labels_raw)
        .map_err(|_| DataError::Format("truncated label data".into()))?;

    let features: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_raw
        .iter()
        .map(|&b| {
            if b > 9 {
                Err(DataError::Format(format!("label {b} out of range")))
            } else {
                Ok(b as usize)
            }
        })
        .collect::<Result<_, _>>()?;
    Ok(Dataset { features, labels, n_features: rows * cols, n_classes: 10 })
}

/// Gaussian class clusters, linearly separable at a margin controlled by
/// `spread` (cluster noise relative to unit-scale centers). Bit-identical
/// for a fixed seed.
pub fn synthetic_task(
    seed: u64,
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    spread: f64,
) -> Dataset {
    assert!(n_samples > 0 && n_features > 0 && n_classes > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> =
        (0..n_classes * n_features).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        let center = &centers[class * n_features..(class + 1) * n_features];
        for &c in center {
            features.push(c + spread * normal(&mut rng));
        }
        labels.push(class);
    }
    Dataset { features, labels, n_features, n_classes }
}

/// Standard normal via Box–Muller; version-stable and dependency-free.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
