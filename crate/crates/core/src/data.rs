//! Input ingestion: channel-wise patching, the CIFAR-10 binary format,
//! byte-level text windows and a synthetic multi-patch parity task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
pub const BYTE_VOCAB: usize = 256;

/// Images as `[N × C × H × W]` with pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Images {
    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.channels + c) * self.height + y) * self.width + x
    }
}

/// One flattened tensor per patch (rows are samples) plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedImageBatch {
    pub patches: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl PatchedImageBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.first().map_or(0, Tensor::cols)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            patches: self.patches.iter().map(|p| p.gather_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Token windows `[batch × context]` and their one-step-shifted targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub context: usize,
}

impl TokenBatch {
    pub fn len(&self) -> usize {
        self.batch
    }

    pub fn is_empty(&self) -> bool {
        self.batch == 0
    }

    pub fn window(&self, row: usize) -> &[usize] {
        &self.tokens[row * self.context..(row + 1) * self.context]
    }

    pub fn target_window(&self, row: usize) -> &[usize] {
        &self.targets[row * self.context..(row + 1) * self.context]
    }

    /// Token at position `pos` for every row.
    pub fn column(&self, pos: usize) -> Vec<usize> {
        (0..self.batch).map(|r| self.tokens[r * self.context + pos]).collect()
    }

    pub fn target_column(&self, pos: usize) -> Vec<usize> {
        (0..self.batch).map(|r| self.targets[r * self.context + pos]).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut tokens = Vec::with_capacity(indices.len() * self.context);
        let mut targets = Vec::with_capacity(indices.len() * self.context);
        for &i in indices {
            tokens.extend_from_slice(self.window(i));
            targets.extend_from_slice(self.target_window(i));
        }
        Self {
            tokens,
            targets,
            batch: indices.len(),
            context: self.context,
        }
    }

    /// A single window, e.g. for generation.
    pub fn single(window: &[usize]) -> Self {
        Self {
            tokens: window.to_vec(),
            targets: vec![0; window.len()],
            batch: 1,
            context: window.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Image(PatchedImageBatch),
    Text(TokenBatch),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Image(b) => b.len(),
            Batch::Text(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        match self {
            Batch::Image(b) => Batch::Image(b.select(indices)),
            Batch::Text(b) => Batch::Text(b.select(indices)),
        }
    }
}

/// Cuts every channel into `P × P` patches: channel-major, then row-major
/// patch order. Each patch becomes one tensor whose rows are samples.
pub fn extract_patches(images: &Images, labels: &[usize], patch: usize) -> Result<PatchedImageBatch> {
    if patch == 0 || images.height % patch != 0 || images.width % patch != 0 {
        return Err(Error::Dimension(format!(
            "patch size {patch} does not divide {}x{}",
            images.height, images.width
        )));
    }
    if labels.len() != images.count {
        return Err(Error::Dimension(format!(
            "{} labels for {} images",
            labels.len(),
            images.count
        )));
    }
    let (py, px) = (images.height / patch, images.width / patch);
    let area = patch * patch;
    let mut patches = Vec::with_capacity(images.channels * py * px);
    for c in 0..images.channels {
        for gy in 0..py {
            for gx in 0..px {
                let mut data = Vec::with_capacity(images.count * area);
                for n in 0..images.count {
                    for y in 0..patch {
                        let start = images.offset(n, c, gy * patch + y, gx * patch);
                        data.extend_from_slice(&images.pixels[start..start + patch]);
                    }
                }
                patches.push(Tensor::from_vec(images.count, area, data)?);
            }
        }
    }
    Ok(PatchedImageBatch {
        patches,
        labels: labels.to_vec(),
    })
}

/// Inverse of [`extract_patches`].
pub fn assemble_patches(
    batch: &PatchedImageBatch,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Images> {
    let (py, px) = (height / patch, width / patch);
    if batch.patches.len() != channels * py * px {
        return Err(Error::Dimension(format!(
            "{} patches for a {channels}x{height}x{width} image",
            batch.patches.len()
        )));
    }
    let count = batch.len();
    let mut images = Images {
        count,
        channels,
        height,
        width,
        pixels: vec![0.0; count * channels * height * width],
    };
    let mut k = 0;
    for c in 0..channels {
        for gy in 0..py {
            for gx in 0..px {
                let t = &batch.patches[k];
                for n in 0..count {
                    for y in 0..patch {
                        let dst = images.offset(n, c, gy * patch + y, gx * patch);
                        images.pixels[dst..dst + patch]
                            .copy_from_slice(&t.row(n)[y * patch..(y + 1) * patch]);
                    }
                }
                k += 1;
            }
        }
    }
    Ok(images)
}

/// Parses CIFAR-10 binary records: one label byte followed by 1024 red,
/// 1024 green and 1024 blue bytes, each plane row-major.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<(Images, Vec<usize>)> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES;
        return Err(Error::format(
            whole as u64,
            format!(
                "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        ));
    }
    let count = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD_BYTES - 1));
    for (n, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0];
        if label > 9 {
            return Err(Error::format(
                (n * CIFAR_RECORD_BYTES) as u64,
                format!("label {label} outside 0..=9"),
            ));
        }
        labels.push(label as usize);
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Images {
        count,
        channels: CIFAR_CHANNELS,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        pixels,
    };
    Ok((images, labels))
}

pub fn load_cifar_binary(path: &Path) -> Result<(Images, Vec<usize>)> {
    parse_cifar_binary(&fs::read(path)?)
}

/// Serializes images back into CIFAR-10 records; pixels are rounded to the
/// nearest byte.
pub fn encode_cifar_binary(images: &Images, labels: &[usize]) -> Result<Vec<u8>> {
    if images.channels != CIFAR_CHANNELS || images.height != CIFAR_SIDE || images.width != CIFAR_SIDE {
        return Err(Error::Dimension("CIFAR records are 3x32x32".into()));
    }
    if labels.len() != images.count {
        return Err(Error::Dimension("one label per image".into()));
    }
    let per = CIFAR_RECORD_BYTES - 1;
    let mut out = Vec::with_capacity(images.count * CIFAR_RECORD_BYTES);
    for (n, &label) in labels.iter().enumerate() {
        if label > 9 {
            return Err(Error::Index(format!("label {label} outside 0..=9")));
        }
        out.push(label as u8);
        out.extend(
            images.pixels[n * per..(n + 1) * per]
                .iter()
                .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    Ok(out)
}

pub fn write_cifar_binary(path: &Path, images: &Images, labels: &[usize]) -> Result<()> {
    fs::write(path, encode_cifar_binary(images, labels)?)?;
    Ok(())
}

/// Slices raw bytes into windows of `context` tokens with stride
/// `context - 1`; each window's targets are the bytes one step ahead.
pub fn byte_tokenize(bytes: &[u8], context: usize) -> Result<TokenBatch> {
    if context < 2 {
        return Err(Error::Config(format!("context length {context} < 2")));
    }
    if bytes.len() < context + 1 {
        return Err(Error::InsufficientData(format!(
            "{} bytes cannot fill one window of {context} plus a target",
            bytes.len()
        )));
    }
    let stride = context - 1;
    let mut tokens = Vec::new();
    let mut targets = Vec::new();
    let mut start = 0;
    let mut batch = 0;
    while start + context < bytes.len() {
        tokens.extend(bytes[start..start + context].iter().map(|&b| b as usize));
        targets.extend(bytes[start + 1..start + context + 1].iter().map(|&b| b as usize));
        batch += 1;
        start += stride;
    }
    Ok(TokenBatch {
        tokens,
        targets,
        batch,
        context,
    })
}

pub fn load_text(path: &Path, context: usize) -> Result<TokenBatch> {
    byte_tokenize(&fs::read(path)?, context)
}

/// Each patch carries one hidden bit, written as `±1` in every coordinate
/// plus Gaussian noise; the label is the XOR of all bits.
pub fn synthetic_patch_xor(
    num_samples: usize,
    num_patches: usize,
    patch_dim: usize,
    noise: f64,
    seed: u64,
) -> Result<PatchedImageBatch> {
    if num_patches == 0 || patch_dim == 0 {
        return Err(Error::Config("need at least one patch of positive size".into()));
    }
    let normal = Normal::new(0.0, noise.max(0.0))
        .map_err(|e| Error::Config(format!("noise level: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![Vec::with_capacity(num_samples * patch_dim); num_patches];
    let mut labels = Vec::with_capacity(num_samples);
    for _ in 0..num_samples {
        let mut parity = 0;
        for patch in data.iter_mut() {
            let bit = rng.random_range(0..2usize);
            parity ^= bit;
            let sign = if bit == 1 { 1.0 } else { -1.0 };
            patch.extend((0..patch_dim).map(|_| sign + normal.sample(&mut rng)));
        }
        labels.push(parity);
    }
    let patches = data
        .into_iter()
        .map(|d| Tensor::from_vec(num_samples, patch_dim, d))
        .collect::<Result<_>>()?;
    Ok(PatchedImageBatch { patches, labels })
}

/// Seeded partition of `0..n` into (train, eval) index sets.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((n as f64) * eval_fraction.clamp(0.0, 1.0)).round() as usize;
    let eval = idx.split_off(n - n_eval);
    (idx, eval)
}
