//! Dataset loading: a deterministic synthetic shape-classification generator
//! for desk-scale experiments, plus a simple file-backed format.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where the samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// Procedurally generated shape images (disk / cross / ring / bars).
    Synthetic,
    /// A `.hefdata` file; see [`save_split`] for the format.
    File,
}

fn default_source() -> SourceKind {
    SourceKind::Synthetic
}

fn default_noise() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

/// Declarative dataset description: sizes, shape, and augmentation flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    #[serde(default = "default_source")]
    pub source: SourceKind,
    /// Path of the data file when `source = "file"`.
    #[serde(default)]
    pub path: Option<String>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub classes: usize,
    /// `[channels, height, width]`.
    pub image: Vec<usize>,
    /// Additive Gaussian noise level of the synthetic generator.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fixed generation seed. When set, every run sees the same dataset and
    /// the run seed only drives initialization, shuffling, and dropout;
    /// when unset, generation derives from the run seed.
    #[serde(default)]
    pub data_seed: Option<u64>,
    /// Scale factor applied to pixel values after standardization.
    #[serde(default)]
    pub input_scale: Option<f64>,
    /// Nearest-neighbour resize of file-backed images to the spec's shape.
    #[serde(default)]
    pub resize: bool,
    /// Train-split augmentation: random horizontal flips.
    #[serde(default)]
    pub hflip: bool,
    /// Train-split augmentation: random quarter-turn rotations.
    #[serde(default)]
    pub rotate: bool,
    /// Standardize pixels with train-split mean/std.
    #[serde(default = "default_true")]
    pub normalize: bool,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("dataset needs at least 2 classes".into()));
        }
        if self.classes > SHAPE_TEMPLATES && self.source == SourceKind::Synthetic {
            return Err(Error::Config(format!(
                "synthetic generator supports at most {SHAPE_TEMPLATES} classes"
            )));
        }
        if self.image.len() != 3 {
            return Err(Error::Config(format!(
                "image must be [channels, height, width], got {:?}",
                self.image
            )));
        }
        if self.train == 0 || self.test == 0 {
            return Err(Error::Config(
                "train and test split sizes must be positive".into(),
            ));
        }
        if self.source == SourceKind::File && self.path.is_none() {
            return Err(Error::Config("file-backed dataset needs 'path'".into()));
        }
        Ok(())
    }

    pub fn pixels_per_image(&self) -> usize {
        self.image.iter().product()
    }
}

/// One split of labeled images, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub image_shape: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Gathers the images at `indices` into a `[batch, c, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let px = self.pixels();
        let mut data = Vec::with_capacity(indices.len() * px);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.images[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn per_class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }
}

/// Materialized dataset with disjoint splits.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub spec: DatasetSpec,
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    /// Standardization constants computed on the train split (mean, std).
    pub norm: Option<(f64, f64)>,
}

const SHAPE_TEMPLATES: usize = 5;

/// Deterministically builds the dataset for `seed`. Splits are generated
/// disjointly and balanced across classes; augmentations are applied later,
/// at batch-assembly time, and only to the train split.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<LoadedDataset> {
    spec.validate()?;
    match spec.source {
        SourceKind::Synthetic => load_synthetic(spec, seed),
        SourceKind::File => load_file(spec),
    }
}

fn load_synthetic(spec: &DatasetSpec, seed: u64) -> Result<LoadedDataset> {
    let gen_seed = spec.data_seed.unwrap_or(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(gen_seed ^ 0xDA7A_5EED);
    let mut make_split = |n: usize| -> Split {
        let px = spec.pixels_per_image();
        let mut images = Vec::with_capacity(n * px);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            draw_shape(&mut images, spec, class, &mut rng);
            labels.push(class);
        }
        Split {
            images,
            labels,
            image_shape: spec.image.clone(),
        }
    };
    let mut train = make_split(spec.train);
    let mut validation = make_split(spec.validation);
    let mut test = make_split(spec.test);

    let norm = if spec.normalize {
        let n = train.images.len() as f64;
        let mean = train.images.iter().sum::<f64>() / n;
        let var = train
            .images
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n;
        let std = var.sqrt().max(1e-12);
        Some((mean, std))
    } else {
        None
    };
    let scale = spec.input_scale.unwrap_or(1.0);
    for split in [&mut train, &mut validation, &mut test] {
        if let Some((mean, std)) = norm {
            for v in &mut split.images {
                *v = (*v - mean) / std * scale;
            }
        } else if scale != 1.0 {
            for v in &mut split.images {
                *v *= scale;
            }
        }
    }
    Ok(LoadedDataset {
        spec: spec.clone(),
        train,
        validation,
        test,
        norm,
    })
}

/// One grayscale shape per class, broadcast across channels. Classes carry a
/// polarity: a bright disk vs a dark disk (negated amplitude) vs a bright
/// cross, then dark cross and bright ring. Telling the disk classes apart
/// requires the sign of the response, which sign-destroying activations
/// (pure squares) struggle with, while position, size, and intensity jitter
/// plus Gaussian noise keep the task non-trivial for everything else.
fn draw_shape<R: Rng>(out: &mut Vec<f64>, spec: &DatasetSpec, class: usize, rng: &mut R) {
    let (c, h, w) = (spec.image[0], spec.image[1], spec.image[2]);
    let min_dim = h.min(w) as f64;
    let cy = h as f64 / 2.0 + rng.random_range(-0.14..0.14) * min_dim;
    let cx = w as f64 / 2.0 + rng.random_range(-0.14..0.14) * min_dim;
    let amplitude = rng.random_range(0.7..1.3);
    let size = rng.random_range(0.30..0.42) * min_dim / 2.0 * 1.6;
    // (template, polarity) per class.
    let (template, sign): (u8, f64) = match class {
        0 => (0, 1.0),  // bright disk
        1 => (0, -1.0), // dark disk
        2 => (2, 1.0),  // bright ring
        3 => (1, 1.0),  // bright cross
        _ => (1, -1.0), // dark cross
    };

    let mut plane = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let r = (dy * dy + dx * dx).sqrt();
            let lit = match template {
                0 => r <= size,
                1 => dy.abs() <= min_dim * 0.11 || dx.abs() <= min_dim * 0.11,
                _ => r <= size && r >= size - min_dim * 0.22,
            };
            if lit {
                plane[y * w + x] = sign * amplitude;
            }
        }
    }
    for _ in 0..c {
        for &p in &plane {
            out.push(p + gaussian(rng) * spec.noise);
        }
    }
}

/// Box-Muller standard normal from two uniform draws.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Applies the spec's train-time augmentations in place to a `[b, c, h, w]`
/// batch. With all flags off the batch is returned bit-identical.
pub fn augment_batch<R: Rng>(batch: &mut Tensor, spec: &DatasetSpec, rng: &mut R) -> Result<()> {
    if !spec.hflip && !spec.rotate {
        return Ok(());
    }
    let s = batch.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Dim(format!(
            "augmentation expects [b,c,h,w], got {s:?}"
        )));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = batch.data_mut();
    for i in 0..b {
        let flip = spec.hflip && rng.random::<f64>() < 0.5;
        let quarter_turns = if spec.rotate {
            rng.random_range(0..4u32)
        } else {
            0
        };
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            if flip {
                for y in 0..h {
                    data[base + y * w..base + (y + 1) * w].reverse();
                }
            }
            if quarter_turns > 0 && h == w {
                let mut plane = data[base..base + h * w].to_vec();
                for _ in 0..quarter_turns {
                    let mut rot = vec![0.0; h * w];
                    for y in 0..h {
                        for x in 0..w {
                            rot[x * w + (h - 1 - y)] = plane[y * w + x];
                        }
                    }
                    plane = rot;
                }
                data[base..base + h * w].copy_from_slice(&plane);
            }
        }
    }
    Ok(())
}

// ── File-backed datasets ────────────────────────────────────────────

const DATA_MAGIC: &[u8; 8] = b"HEFDATA1";

#[derive(Serialize, Deserialize)]
struct DataHeader {
    classes: usize,
    image: Vec<usize>,
    labels: Vec<usize>,
}

/// Writes a split as `HEFDATA1 | u64 header_len | header JSON | f64 LE pixels`.
pub fn save_split(split: &Split, classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = DataHeader {
        classes,
        image: split.image_shape.clone(),
        labels: split.labels.clone(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::Format(format!("data header: {e}")))?;
    let mut bytes = Vec::with_capacity(16 + header_json.len() + split.images.len() * 8);
    bytes.extend_from_slice(DATA_MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for v in &split.images {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn read_data_file(path: &str) -> Result<(usize, Split)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != DATA_MAGIC {
        return Err(Error::Format(format!(
            "'{path}' is not a hefnet dataset file"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("'{path}': truncated header")))?;
    let header: DataHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| Error::Format(format!("'{path}': {e}")))?;
    let px: usize = header.image.iter().product();
    let expected = header.labels.len() * px * 8;
    if bytes.len() - header_end != expected {
        return Err(Error::Format(format!(
            "'{path}': expected {expected} pixel bytes, found {}",
            bytes.len() - header_end
        )));
    }
    let images: Vec<f64> = bytes[header_end..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((
        header.classes,
        Split {
            images,
            labels: header.labels,
            image_shape: header.image,
        },
    ))
}

/// Nearest-neighbour resample of every image in a split.
fn resize_nearest(split: &Split, target: &[usize]) -> Result<Split> {
    let (c, h, w) = (
        split.image_shape[0],
        split.image_shape[1],
        split.image_shape[2],
    );
    if target.len() != 3 || target[0] != c {
        return Err(Error::Data(format!(
            "resize cannot change channel count: {:?} -> {target:?}",
            split.image_shape
        )));
    }
    let (th, tw) = (target[1], target[2]);
    let mut images = Vec::with_capacity(split.len() * c * th * tw);
    for i in 0..split.len() {
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..th {
                let sy = y * h / th;
                for x in 0..tw {
                    let sx = x * w / tw;
                    images.push(split.images[base + sy * w + sx]);
                }
            }
        }
    }
    Ok(Split {
        images,
        labels: split.labels.clone(),
        image_shape: target.to_vec(),
    })
}

fn load_file(spec: &DatasetSpec) -> Result<LoadedDataset> {
    let path = spec.path.as_deref().expect("validated");
    let (classes, mut pool) = read_data_file(path)?;
    if classes != spec.classes {
        return Err(Error::Data(format!(
            "dataset file has {classes} classes, spec says {}",
            spec.classes
        )));
    }
    if pool.image_shape != spec.image {
        if spec.resize {
            pool = resize_nearest(&pool, &spec.image)?;
        } else {
            return Err(Error::Data(format!(
                "dataset file images are {:?}, spec says {:?} (set resize = true to resample)",
                pool.image_shape, spec.image
            )));
        }
    }
    let needed = spec.train + spec.validation + spec.test;
    if pool.len() < needed {
        return Err(Error::Data(format!(
            "dataset file has {} samples, spec needs {needed}",
            pool.len()
        )));
    }
    let px = pool.pixels();
    let take = |start: usize, n: usize| Split {
        images: pool.images[start * px..(start + n) * px].to_vec(),
        labels: pool.labels[start..start + n].to_vec(),
        image_shape: pool.image_shape.clone(),
    };
    let train = take(0, spec.train);
    let validation = take(spec.train, spec.validation);
    let test = take(spec.train + spec.validation, spec.test);
    Ok(LoadedDataset {
        spec: spec.clone(),
        train,
        validation,
        test,
        norm: None,
    })
}
