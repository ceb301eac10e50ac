//! In-memory datasets: CIFAR-10 binary batches, seeded synthetic blobs and
//! folders of raw float tensors, plus shuffling, augmentation and batching.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;

/// Images stored as one contiguous `(N, C, H, W)` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
}

/// Per-sample random transforms applied when a batch is drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    /// Zero-pad by this many pixels and crop back at a random offset.
    #[serde(default)]
    pub crop_padding: usize,
    #[serde(default)]
    pub horizontal_flip: bool,
}

impl Augment {
    pub const CIFAR: Augment = Augment {
        crop_padding: 4,
        horizontal_flip: true,
    };

    pub fn is_identity(&self) -> bool {
        self.crop_padding == 0 && !self.horizontal_flip
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// First `n` samples (or all of them).
    pub fn truncated(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.sample_len());
        self.labels.truncate(n);
        self
    }

    /// Gathers `indices` into a batch, augmenting each sample when `rng` is given.
    pub fn batch(&self, indices: &[usize], augment: Augment, rng: Option<&mut ChaCha8Rng>) -> (Tensor4, Vec<usize>) {
        let shape = Shape4::new(indices.len(), self.channels, self.height, self.width);
        let mut out = Vec::with_capacity(shape.numel());
        let mut rng = rng;
        for &i in indices {
            let src = self.sample(i);
            match rng.as_deref_mut() {
                Some(r) if !augment.is_identity() => out.extend(self.augmented(src, augment, r)),
                _ => out.extend_from_slice(src),
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor4::from_vec(shape, out).expect("batch length matches shape"), labels)
    }

    fn augmented(&self, src: &[f32], aug: Augment, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let (h, w, p) = (self.height, self.width, aug.crop_padding as i64);
        let dy = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
        let dx = if p > 0 { rng.random_range(-p..=p) as isize } else { 0 };
        let flip = aug.horizontal_flip && rng.random_bool(0.5);
        let mut out = vec![0.0; src.len()];
        for c in 0..self.channels {
            let plane = &src[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[c * h * w + y * w + x] = plane[sy as usize * w + sx as usize];
                }
            }
        }
        out
    }
}

/// Maps a byte to `(p - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f32,
    pub std: f32,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: 127.5,
            std: 127.5,
        }
    }
}

/// Decodes concatenated CIFAR-10 records (label byte, then R, G and B planes).
pub fn parse_cifar(bytes: &[u8], norm: Normalization) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(Error::Format(format!("CIFAR label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&p| (p as f32 - norm.mean) / norm.std));
    }
    Ok(Dataset {
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        num_classes: 10,
        images,
        labels,
    })
}

/// Reads and concatenates CIFAR-10 binary files in the given order.
pub fn load_cifar(paths: &[PathBuf], norm: Normalization) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = fs::read(p).map_err(|e| Error::Format(format!("cannot read `{}`: {e}", p.display())))?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "`{}` has {} bytes, not a multiple of {CIFAR_RECORD}",
                p.display(),
                b.len()
            )));
        }
        bytes.extend(b);
    }
    parse_cifar(&bytes, norm)
}

/// Gaussian clusters: each class has a random mean image with entries of
/// magnitude `separation`, samples add unit noise. Classes are balanced and
/// interleaved.
pub fn synthetic_blobs(samples: usize, classes: usize, side: usize, separation: f32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 3 * side * side;
    let centres: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random_bool(0.5) { separation } else { -separation })
                .collect()
        })
        .collect();
    let mut images = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes.max(1);
        labels.push(c);
        for &m in &centres[c] {
            let z: f32 = StandardNormal.sample(&mut rng);
            images.push(m + z);
        }
    }
    Dataset {
        channels: 3,
        height: side,
        width: side,
        num_classes: classes,
        images,
        labels,
    }
}

/// Layout of a raw-tensor folder, read from its `meta.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct FolderMeta {
    channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
}

/// Folder with a `meta.json` (`channels`, `height`, `width`, `num_classes`)
/// and one `<label>_<id>.f32` file per sample holding little-endian `C*H*W`
/// floats. Samples are read in file-name order.
pub fn load_tensor_folder(dir: &Path) -> Result<Dataset> {
    let meta_text = fs::read_to_string(dir.join("meta.json"))
        .map_err(|e| Error::Format(format!("cannot read `{}/meta.json`: {e}", dir.display())))?;
    let meta: FolderMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "f32"))
        .collect();
    files.sort();
    let dim = meta.channels * meta.height * meta.width;
    let mut images = Vec::with_capacity(files.len() * dim);
    let mut labels = Vec::with_capacity(files.len());
    for f in &files {
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let label: usize = stem
            .split('_')
            .next()
            .and_then(|s| s.parse().ok())
            .filter(|&l| l < meta.num_classes)
            .ok_or_else(|| Error::Format(format!("`{}`: name must start with a valid label", f.display())))?;
        let bytes = fs::read(f)?;
        if bytes.len() != dim * 4 {
            return Err(Error::Format(format!(
                "`{}` holds {} bytes, expected {}",
                f.display(),
                bytes.len(),
                dim * 4
            )));
        }
        images.extend(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        labels.push(label);
    }
    Ok(Dataset {
        channels: meta.channels,
        height: meta.height,
        width: meta.width,
        num_classes: meta.num_classes,
        images,
        labels,
    })
}

/// Where training data comes from, as written in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10Binary {
        files: Vec<PathBuf>,
        #[serde(default)]
        normalization: Normalization,
        #[serde(default = "cifar_augment")]
        augment: Augment,
        /// Keep only the first `limit` records.
        #[serde(default)]
        limit: Option<usize>,
    },
    SyntheticBlobs {
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_separation")]
        separation: f32,
        #[serde(default)]
        seed: u64,
    },
    FolderOfRawTensors {
        path: PathBuf,
        #[serde(default)]
        augment: Augment,
    },
}

fn cifar_augment() -> Augment {
    Augment::CIFAR
}
fn default_samples() -> usize {
    200
}
fn default_classes() -> usize {
    2
}
fn default_side() -> usize {
    8
}
fn default_separation() -> f32 {
    0.25
}

impl DatasetSource {
    pub fn synthetic_default() -> Self {
        DatasetSource::SyntheticBlobs {
            samples: default_samples(),
            classes: default_classes(),
            side: default_side(),
            separation: default_separation(),
            seed: 0,
        }
    }

    pub fn augment(&self) -> Augment {
        match self {
            DatasetSource::Cifar10Binary { augment, .. } | DatasetSource::FolderOfRawTensors { augment, .. } => *augment,
            DatasetSource::SyntheticBlobs { .. } => Augment::default(),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Cifar10Binary {
                files,
                normalization,
                limit,
                ..
            } => {
                let d = load_cifar(files, *normalization)?;
                Ok(match limit {
                    Some(n) => d.truncated(*n),
                    None => d,
                })
            }
            DatasetSource::SyntheticBlobs {
                samples,
                classes,
                side,
                separation,
                seed,
            } => Ok(synthetic_blobs(*samples, *classes, *side, *separation, *seed)),
            DatasetSource::FolderOfRawTensors { path, .. } => load_tensor_folder(path),
        }
    }
}

/// Seeded per-epoch shuffles split into batches (the last may be short).
pub fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}
