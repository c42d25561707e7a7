//! IDX image/label files, augmentation and seeded batching.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use gracaps_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::{contract, io_err, Result};
use crate::rng::{self, tag};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Decompressed IDX payloads above this size are rejected.
const MAX_DECODED: u64 = 1 << 30;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{}: bad magic 0x{found:08x}, expected 0x{expected:08x}", path.display())]
    BadMagic { path: PathBuf, expected: u32, found: u32 },

    #[error("{}: truncated, need {expected} bytes but found {found}", path.display())]
    Truncated { path: PathBuf, expected: usize, found: usize },

    #[error("{}: {found} trailing bytes after the payload", path.display())]
    Trailing { path: PathBuf, found: usize },

    #[error("{}: header extents {dims:?} overflow", path.display())]
    Overflow { path: PathBuf, dims: Vec<u32> },

    #[error("{}: gzip stream is corrupt or larger than {MAX_DECODED} bytes", path.display())]
    Gzip { path: PathBuf },

    #[error(
        "count mismatch: {} holds {images} images but {} holds {labels} labels",
        images_path.display(),
        labels_path.display()
    )]
    CountMismatch {
        images_path: PathBuf,
        images: usize,
        labels_path: PathBuf,
        labels: usize,
    },
}

fn maybe_gunzip(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    if !bytes.starts_with(&[0x1f, 0x8b]) {
        return Ok(bytes.to_vec());
    }
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .take(MAX_DECODED + 1)
        .read_to_end(&mut out)
        .map_err(|_| IdxError::Gzip { path: path.into() })?;
    if out.len() as u64 > MAX_DECODED {
        return Err(IdxError::Gzip { path: path.into() });
    }
    Ok(out)
}

/// Splits an IDX buffer into extents and raw payload, checking the magic
/// and the exact payload length.
fn parse_idx(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, Vec<u8>), IdxError> {
    let bytes = maybe_gunzip(bytes, path)?;
    let truncated = |expected: usize| IdxError::Truncated {
        path: path.into(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.into(),
            expected: magic,
            found,
        });
    }
    let nd = (magic & 0xff) as usize;
    let header = 4 + 4 * nd;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let raw: Vec<u32> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let payload = raw
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| IdxError::Overflow {
            path: path.into(),
            dims: raw.clone(),
        })?;
    if bytes.len() < payload {
        return Err(truncated(payload));
    }
    if bytes.len() > payload {
        return Err(IdxError::Trailing {
            path: path.into(),
            found: bytes.len() - payload,
        });
    }
    Ok((raw.iter().map(|&d| d as usize).collect(), bytes[header..].to_vec()))
}

/// Decoded image file: `count` images of `rows`×`cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

/// Parses an image file (optionally gzip-compressed). `path` only labels
/// errors.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages, IdxError> {
    let (dims, pixels) = parse_idx(bytes, IMAGES_MAGIC, path)?;
    Ok(IdxImages {
        count: dims[0],
        rows: dims[1],
        cols: dims[2],
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>, IdxError> {
    Ok(parse_idx(bytes, LABELS_MAGIC, path)?.1)
}

fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Grayscale images in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    name: String,
    /// `[count, 1, H, W]`.
    images: Tensor<f32>,
    labels: Vec<usize>,
}

impl LabeledImageSet {
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(contract(format!(
                "images {shape:?} do not match {} labels",
                labels.len()
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("pixels must lie in [0, 1]"));
        }
        Ok(LabeledImageSet {
            name: name.into(),
            images,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of the per-image extent.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// One image as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        Ok(self.images.select(i)?)
    }

    /// Examples at `indices`, in that order, as `[B, C, H, W]`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let width: usize = self.image_shape().iter().product();
        let mut data = Vec::with_capacity(indices.len() * width);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(contract(format!("index {i} out of range for {} examples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * width..(i + 1) * width]);
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Ok(LabeledImageSet {
            name: self.name.clone(),
            images,
            labels,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Builds a set from decoded IDX files.
    pub fn from_idx(name: impl Into<String>, images: &IdxImages, labels: &[u8]) -> Result<Self> {
        let data = images.pixels.iter().map(|&b| f32::from(b) / 255.0).collect();
        let tensor = Tensor::new([images.count, 1, images.rows, images.cols], data)?;
        Self::new(name, tensor, labels.iter().map(|&l| l as usize).collect())
    }

    /// IDX encodings of the images and labels (uncompressed).
    pub fn to_idx(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let [c, h, w] = self.image_shape();
        if c != 1 {
            return Err(contract("IDX export supports single-channel images"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l > 255) {
            return Err(contract(format!("label {l} does not fit a byte")));
        }
        let pixels: Vec<u8> = self
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round() as u8)
            .collect();
        let labels: Vec<u8> = self.labels.iter().map(|&l| l as u8).collect();
        Ok((
            encode_idx(IMAGES_MAGIC, &[self.len(), h, w], &pixels),
            encode_idx(LABELS_MAGIC, &[self.len()], &labels),
        ))
    }
}

/// Loads an image file and its label file, cross-checking the counts.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let img_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let lbl_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;
    let images = parse_idx_images(&img_bytes, images_path)?;
    let labels = parse_idx_labels(&lbl_bytes, labels_path)?;
    if images.count != labels.len() {
        return Err(IdxError::CountMismatch {
            images_path: images_path.into(),
            images: images.count,
            labels_path: labels_path.into(),
            labels: labels.len(),
        }
        .into());
    }
    let name = images_path
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    LabeledImageSet::from_idx(name, &images, &labels)
}

pub fn write_idx(set: &LabeledImageSet, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = set.to_idx()?;
    fs::write(images_path, images).map_err(io_err(images_path))?;
    fs::write(labels_path, labels).map_err(io_err(labels_path))?;
    Ok(())
}

/// Standard file names under `dir/<dataset>/`, with or without `.gz`.
pub fn split_paths(dir: &Path, dataset: &str, train: bool) -> (PathBuf, PathBuf) {
    let prefix = if train { "train" } else { "t10k" };
    let pick = |stem: String| {
        let plain = dir.join(dataset).join(&stem);
        let gz = dir.join(dataset).join(format!("{stem}.gz"));
        if !plain.exists() && gz.exists() {
            gz
        } else {
            plain
        }
    };
    (
        pick(format!("{prefix}-images-idx3-ubyte")),
        pick(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_split(dir: &Path, dataset: &str, train: bool) -> Result<LabeledImageSet> {
    let (images, labels) = split_paths(dir, dataset, train);
    let mut set = load_idx(&images, &labels)?;
    set.name = format!("{dataset}/{}", if train { "train" } else { "test" });
    Ok(set)
}

/// Translates `[C, H, W]` by `(dy, dx)` pixels with zero fill.
pub fn shift_image(image: &Tensor<f32>, dy: isize, dx: isize) -> Tensor<f32> {
    let s = image.shape();
    let (c, h, w) = (s[0], s[1] as isize, s[2] as isize);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * (h * w) as usize;
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    out[base + (y * w + x) as usize] = src[base + (sy * w + sx) as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Random integer translation in `[-max_shift, max_shift]²`.
pub fn augment_shift(image: &Tensor<f32>, max_shift: usize, rng: &mut impl Rng) -> Tensor<f32> {
    if max_shift == 0 {
        return image.clone();
    }
    let m = max_shift as isize;
    let dy = rng.gen_range(-m..=m);
    let dx = rng.gen_range(-m..=m);
    shift_image(image, dy, dx)
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, C, H, W]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Seeded shuffled pass over a set; the last batch may be short.
pub struct Batches<'a> {
    set: &'a LabeledImageSet,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    max_shift: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batches<'a> {
    /// Epoch `epoch` of the stream keyed by `seed`.
    pub fn new(set: &'a LabeledImageSet, batch_size: usize, seed: u64, epoch: usize, max_shift: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(crate::error::config_err("batch_size", "must be positive"));
        }
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[tag::SHUFFLE, epoch as u64]));
        Ok(Batches {
            set,
            order,
            pos: 0,
            batch_size,
            max_shift,
            rng: rng::stream(seed, &[tag::AUGMENT, epoch as u64]),
        })
    }

    /// Example order for this epoch.
    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (mut images, labels) = self.set.gather(&indices).expect("indices come from the set");
        if self.max_shift > 0 {
            let shifted: Vec<Tensor<f32>> = (0..indices.len())
                .map(|i| augment_shift(&images.select(i).expect("in range"), self.max_shift, &mut self.rng))
                .collect();
            images = Tensor::stack(&shifted).expect("equal shapes");
        }
        Some(Batch {
            indices,
            images,
            labels,
        })
    }
}
