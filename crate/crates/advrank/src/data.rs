//! Image datasets: IDX files, synthetic clusters, and attack-target
//! sampling.
//!
//! The IDX reader accepts the classic big-endian layout (magic 0x00000803
//! for images, 0x00000801 for labels) with gzip detected by content, so
//! MNIST-style distributions load unchanged. Pixels map to f32 in [0,1].

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::metrics::{MetricsError, RankingIndex};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { path: PathBuf, expected: u32, got: u32 },
    #[error("{path}: file ends early ({got} payload bytes, header promises {expected})")]
    Truncated { path: PathBuf, expected: usize, got: usize },
    #[error("image/label count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("no {split} split under {dir}: tried {tried:?}")]
    MissingSplit { dir: PathBuf, split: String, tried: Vec<String> },
    #[error(
        "top-1% pool of {pool} items cannot supply {requested} counterparts; corpus too small for this protocol"
    )]
    PoolTooSmall { pool: usize, requested: usize },
    #[error("corpus of {corpus} items cannot supply {requested} distinct counterparts")]
    CorpusTooSmall { corpus: usize, requested: usize },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Flat image dataset; `images` is `n x dim` row-major in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub dim: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.dim..(i + 1) * self.dim]
    }

    /// First `n` items (all items when the dataset is smaller).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.dim].to_vec(),
            labels: self.labels[..n].to_vec(),
            dim: self.dim,
        }
    }

    /// Load paired IDX image/label files, gzip or plain.
    pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
        let (images, dim, n_img) = read_idx_images(images_path)?;
        let labels = read_idx_labels(labels_path)?;
        if labels.len() != n_img {
            return Err(DataError::CountMismatch { images: n_img, labels: labels.len() });
        }
        Ok(Dataset { images, labels, dim })
    }

    /// Load a named split ("train" or "test") from a directory, accepting
    /// both `test-*` and the classic `t10k-*` file names, `.gz` or plain.
    pub fn load_dir(dir: &Path, split: &str) -> Result<Dataset, DataError> {
        let stems: &[&str] = if split == "test" { &["test", "t10k"] } else { &[split] };
        let mut tried = Vec::new();
        for stem in stems {
            for ext in ["", ".gz"] {
                let img = dir.join(format!("{stem}-images-idx3-ubyte{ext}"));
                let lab = dir.join(format!("{stem}-labels-idx1-ubyte{ext}"));
                if img.exists() && lab.exists() {
                    return Dataset::load_idx(&img, &lab);
                }
                tried.push(format!("{stem}-*-ubyte{ext}"));
            }
        }
        Err(DataError::MissingSplit {
            dir: dir.to_path_buf(),
            split: split.to_string(),
            tried,
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let wrap = |source| DataError::Io { path: path.to_path_buf(), source };
    let raw = std::fs::read(path).map_err(wrap)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(wrap)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn read_idx_images(path: &Path) -> Result<(Vec<f32>, usize, usize), DataError> {
    let bytes = read_file(path)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let fail = |_| DataError::Truncated { path: path.to_path_buf(), expected: 16, got: bytes.len() };
    let magic = cur.read_u32::<BigEndian>().map_err(fail)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: IMAGE_MAGIC, got: magic });
    }
    let n = cur.read_u32::<BigEndian>().map_err(fail)? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(fail)? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(fail)? as usize;
    let need = n * rows * cols;
    let payload = &bytes[16.min(bytes.len())..];
    if payload.len() != need {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected: need, got: payload.len() });
    }
    let images = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Ok((images, rows * cols, n))
}

fn read_idx_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    let mut cur = std::io::Cursor::new(&bytes);
    let fail = |_| DataError::Truncated { path: path.to_path_buf(), expected: 8, got: bytes.len() };
    let magic = cur.read_u32::<BigEndian>().map_err(fail)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), expected: LABEL_MAGIC, got: magic });
    }
    let n = cur.read_u32::<BigEndian>().map_err(fail)? as usize;
    let payload = &bytes[8.min(bytes.len())..];
    if payload.len() != n {
        return Err(DataError::Truncated { path: path.to_path_buf(), expected: n, got: payload.len() });
    }
    Ok(payload.to_vec())
}

/// Write images in IDX layout (optionally gzipped; decided by `.gz` suffix).
pub fn write_idx_images(
    path: &Path,
    pixels: &[u8],
    n: usize,
    rows: usize,
    cols: usize,
) -> Result<(), DataError> {
    assert_eq!(pixels.len(), n * rows * cols, "write_idx_images: payload size");
    let mut buf = Vec::with_capacity(16 + pixels.len());
    buf.write_u32::<BigEndian>(IMAGE_MAGIC).unwrap();
    buf.write_u32::<BigEndian>(n as u32).unwrap();
    buf.write_u32::<BigEndian>(rows as u32).unwrap();
    buf.write_u32::<BigEndian>(cols as u32).unwrap();
    buf.extend_from_slice(pixels);
    write_file(path, &buf)
}

/// Write labels in IDX layout (optionally gzipped; decided by `.gz` suffix).
pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.write_u32::<BigEndian>(LABEL_MAGIC).unwrap();
    buf.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    buf.extend_from_slice(labels);
    write_file(path, &buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let wrap = |source| DataError::Io { path: path.to_path_buf(), source };
    if path.extension().is_some_and(|e| e == "gz") {
        let file = std::fs::File::create(path).map_err(wrap)?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        std::io::Write::write_all(&mut enc, bytes).map_err(wrap)?;
        enc.finish().map_err(wrap)?;
        Ok(())
    } else {
        std::fs::write(path, bytes).map_err(wrap)
    }
}

// ── Synthetic data ──────────────────────────────────────────────────────

/// Recipe for a small clustered dataset with a guaranteed margin between
/// class centers.
#[derive(Clone, Copy, Debug)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Gaussian noise scale around each center; centers sit at least
    /// 6x this apart.
    pub std: f32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 4, per_class: 60, dim: 16, std: 0.05, seed: 7 }
    }
}

/// Deterministic clustered dataset in [0,1]^dim. Class k owns a block of
/// coordinates pushed to a high level; all other coordinates sit low, so
/// center separation scales with block size and stays well above `6*std`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Dataset {
    assert!(spec.classes >= 2, "need at least 2 classes");
    assert!(spec.dim >= spec.classes, "dim {} < classes {}", spec.dim, spec.classes);
    let block = spec.dim / spec.classes;
    let (lo, hi) = (0.2f32, 0.8f32);
    let sep = (2.0 * block as f32).sqrt() * (hi - lo);
    assert!(
        sep >= 6.0 * spec.std,
        "class centers separated by {sep}, need >= {}",
        6.0 * spec.std
    );
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut images = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for item in 0..n {
        let class = item % spec.classes;
        labels.push(class as u8);
        for j in 0..spec.dim {
            let center = if j / block == class { hi } else { lo };
            images.push((center + gauss(&mut rng) * spec.std).clamp(0.0, 1.0));
        }
    }
    Dataset { images, labels, dim: spec.dim }
}

/// Standard normal sample via Box-Muller.
fn gauss<R: Rng>(rng: &mut R) -> f32 {
    let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
    let u2: f32 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos()
}

// ── Attack-target sampling ──────────────────────────────────────────────

/// Direction of a rank attack with respect to the attacked item's
/// counterparts: raising pulls ranks toward 0, lowering pushes them away.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Raise,
    Lower,
}

/// Sample the counterpart set for an attack on corpus item `item`.
///
/// Raising attacks draw uniformly from the corpus (excluding the item):
/// the counterparts start unrelated to the item. Lowering attacks draw from
/// the item's top-1% nearest pool (floor(n/100) items, excluding the item):
/// the counterparts start highly related, and the attack tries to break
/// that. A pool smaller than `count` is an error: the corpus cannot support
/// the protocol.
pub fn sample_counterparts<R: Rng>(
    index: &RankingIndex,
    item: usize,
    polarity: Polarity,
    count: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    assert!(count > 0, "sample_counterparts: count must be positive");
    let n = index.len();
    match polarity {
        Polarity::Raise => {
            if n <= count {
                return Err(DataError::CorpusTooSmall { corpus: n, requested: count });
            }
            let mut picks: Vec<usize> =
                rand::seq::index::sample(rng, n - 1, count).into_iter().collect();
            for p in &mut picks {
                // skip over the attacked item
                if *p >= item {
                    *p += 1;
                }
            }
            Ok(picks)
        }
        Polarity::Lower => {
            let pool_size = n / 100;
            if pool_size < count {
                return Err(DataError::PoolTooSmall { pool: pool_size, requested: count });
            }
            let mut pool = index.nearest(index.embedding(item), pool_size, &[item])?;
            pool.shuffle(rng);
            pool.truncate(count);
            Ok(pool)
        }
    }
}
