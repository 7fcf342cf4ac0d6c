//! MNIST IDX ingestion, pixel normalization and seeded batching.
//!
//! IDX layout (all integers big-endian):
//!
//! ```text
//! images: 0x00000803 | count | rows (28) | cols (28) | count·784 unsigned bytes
//! labels: 0x00000801 | count | count unsigned bytes in 0..=9
//! ```
//!
//! Gzip-compressed files are detected by their magic bytes and decompressed
//! transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::sampling::{Purpose, Rng};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;

/// Images exactly as stored: `count` row-major 28×28 byte images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub pixels: Vec<u8>,
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

fn check_header(bytes: &[u8], len: usize, magic: u32) -> Result<()> {
    if bytes.len() < len {
        return Err(Error::Header(format!(
            "need {len} header bytes, file has {}",
            bytes.len()
        )));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::WrongMagic {
            expected: magic,
            found,
        });
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<RawImages> {
    check_header(bytes, 16, IMAGE_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    let (rows, cols) = (be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    if rows != SIDE || cols != SIDE {
        return Err(Error::DimensionMismatch(format!(
            "expected {SIDE}x{SIDE} images, header says {rows}x{cols}"
        )));
    }
    let expected = count * PIXELS;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(Error::ShortRead {
            expected,
            found: payload.len(),
        });
    }
    Ok(RawImages {
        count,
        pixels: payload[..expected].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_header(bytes, 8, LABEL_MAGIC)?;
    let count = be_u32(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(Error::ShortRead {
            expected: count,
            found: payload.len(),
        });
    }
    let labels = payload[..count].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l > 9) {
        return Err(Error::InvalidLabel { index, label });
    }
    Ok(labels)
}

pub fn load_idx_images(path: &Path) -> Result<RawImages> {
    parse_idx_images(&read_maybe_gzip(path)?)
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&read_maybe_gzip(path)?)
}

/// Bytes to `[0, 1]` via `byte / 255`.
pub fn normalize(raw: &[u8]) -> Vec<f64> {
    raw.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Inverse of [`normalize`] for rendering, rounding to the nearest byte.
pub fn to_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Keep only the first `limit` examples.
    pub limit: Option<usize>,
    /// Threshold pixels at 0.5 instead of keeping grey levels.
    pub binarize: bool,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `N × 784`, entries in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn from_raw(raw: &RawImages, labels: Vec<u8>, split: Split, opts: &LoadOptions) -> Result<Self> {
        if raw.count != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} images but {} labels",
                raw.count,
                labels.len()
            )));
        }
        let n = opts.limit.map_or(raw.count, |l| l.min(raw.count));
        let mut pixels = normalize(&raw.pixels[..n * PIXELS]);
        if opts.binarize {
            for p in &mut pixels {
                *p = if *p >= 0.5 { 1.0 } else { 0.0 };
            }
        }
        let mut labels = labels;
        labels.truncate(n);
        Ok(Dataset {
            images: Tensor::from_vec(&[n, PIXELS], pixels)?,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Subset with the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found in {}", dir.display()),
    )))
}

/// Load one split from a directory holding the canonical MNIST file names.
pub fn load_split(dir: &Path, split: Split, opts: &LoadOptions) -> Result<Dataset> {
    let images = load_idx_images(&locate(dir, &format!("{}-images-idx3-ubyte", split.prefix()))?)?;
    let labels = load_idx_labels(&locate(dir, &format!("{}-labels-idx1-ubyte", split.prefix()))?)?;
    Dataset::from_raw(&images, labels, split, opts)
}

/// Per-epoch shuffled order, cut into consecutive batches. The last batch may be short.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u32,
    pub order: Vec<usize>,
}

impl BatchPlan {
    /// Fisher–Yates permutation of `0..n` from stream `(seed, Shuffle, epoch)`.
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u32) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Argument("batch size must be >= 1".into()));
        }
        let mut rng = Rng::substream(seed, Purpose::Shuffle, epoch, 0);
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i as u64 + 1) as usize;
            order.swap(i, j);
        }
        Ok(BatchPlan {
            batch_size,
            seed,
            epoch,
            order,
        })
    }

    pub fn batches(&self) -> impl Iterator<Item = &[usize]> {
        self.order.chunks(self.batch_size)
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn image_file(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(&rows.to_be_bytes());
        v.extend_from_slice(&cols.to_be_bytes());
        v.extend_from_slice(pixels);
        v
    }

    fn label_file(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_two_image_fixture() {
        let pixels: Vec<u8> = (0..2 * PIXELS).map(|i| (i * 7 % 256) as u8).collect();
        let raw = parse_idx_images(&image_file(2, 28, 28, &pixels)).unwrap();
        assert_eq!(raw.count, 2);
        assert_eq!(raw.pixels, pixels);
    }

    #[test]
    fn image_errors_are_distinct() {
        let pixels = vec![0u8; PIXELS];
        let mut wrong = image_file(1, 28, 28, &pixels);
        wrong[..4].copy_from_slice(&LABEL_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_idx_images(&wrong),
            Err(Error::WrongMagic { expected: IMAGE_MAGIC, found: LABEL_MAGIC })
        ));
        assert!(matches!(
            parse_idx_images(&image_file(1, 28, 27, &pixels)),
            Err(Error::DimensionMismatch(_))
        ));
        let truncated = image_file(2, 28, 28, &pixels[..500]);
        assert!(matches!(
            parse_idx_images(&truncated),
            Err(Error::ShortRead { expected: 1568, found: 500 })
        ));
        assert!(matches!(parse_idx_images(&[0, 0, 8]), Err(Error::Header(_))));
    }

    #[test]
    fn parses_labels_and_rejects_bad_ones() {
        assert_eq!(parse_idx_labels(&label_file(&[0, 5, 9])).unwrap(), vec![0, 5, 9]);
        assert!(matches!(
            parse_idx_labels(&label_file(&[1, 10])),
            Err(Error::InvalidLabel { index: 1, label: 10 })
        ));
        assert!(matches!(parse_idx_labels(&[]), Err(Error::Header(_))));
        let mut short = label_file(&[1, 2, 3]);
        short.pop();
        assert!(matches!(parse_idx_labels(&short), Err(Error::ShortRead { .. })));
    }

    #[test]
    fn normalization_is_exact_division() {
        let v = normalize(&[0, 255, 128]);
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert_eq!(v[2], 128.0 / 255.0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(f64::from(b) / 255.0), b);
        }
    }

    #[test]
    fn loads_gzip_and_plain_from_directory() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;

        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * PIXELS).map(|i| (i % 251) as u8).collect();
        let mut gz = GzEncoder::new(Vec::new(), Compression::default());
        gz.write_all(&image_file(3, 28, 28, &pixels)).unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte.gz"), gz.finish().unwrap()).unwrap();
        fs::write(dir.path().join("train-labels-idx1-ubyte"), label_file(&[3, 1, 4])).unwrap();

        let ds = load_split(dir.path(), Split::Train, &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.images.shape(), &[3, PIXELS]);
        assert_eq!(ds.labels, vec![3, 1, 4]);
        assert!(ds.images.data().iter().all(|p| (0.0..=1.0).contains(p)));

        let limited = load_split(dir.path(), Split::Train, &LoadOptions { limit: Some(2), binarize: true }).unwrap();
        assert_eq!(limited.len(), 2);
        assert!(limited.images.data().iter().all(|p| *p == 0.0 || *p == 1.0));

        assert!(load_split(dir.path(), Split::Test, &LoadOptions::default()).is_err());
    }

    #[test]
    fn image_label_count_mismatch() {
        let raw = RawImages { count: 2, pixels: vec![0; 2 * PIXELS] };
        assert!(Dataset::from_raw(&raw, vec![1], Split::Test, &LoadOptions::default()).is_err());
    }

    #[test]
    fn batch_plan_covers_indices() {
        let plan = BatchPlan::new(6, 2, 42, 0).unwrap();
        let batches: Vec<&[usize]> = plan.batches().collect();
        assert_eq!(batches.len(), 3);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() == 2));
    }

    #[test]
    fn batch_plan_deterministic_per_epoch() {
        let a = BatchPlan::new(100, 7, 0, 0).unwrap();
        let b = BatchPlan::new(100, 7, 0, 0).unwrap();
        let c = BatchPlan::new(100, 7, 0, 1).unwrap();
        assert_eq!(a.order, b.order);
        assert_ne!(a.order, c.order);
        assert_eq!(a.num_batches(), 15);
        assert_eq!(a.batches().last().unwrap().len(), 2);
        assert!(BatchPlan::new(10, 0, 0, 0).is_err());
    }
}
