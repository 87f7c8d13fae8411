//! Datasets: IDX ingestion, a seeded synthetic task, subsampling and augmentation.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::zoo::seeded;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_IMAGES4_MAGIC: u32 = 0x0000_0804;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    Empty,
    #[error("{what}: bad IDX magic {found:#010x}")]
    BadMagic { what: &'static str, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0} file truncated")]
    Truncated(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("pixel values must lie in [0, 1]")]
    PixelRange,
    #[error("requested {requested} samples from a dataset of {available}")]
    TooMany { requested: usize, available: usize },
    #[error("crop {crop} exceeds image extent {extent}")]
    CropTooLarge { crop: usize, extent: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("expected images [N, C, H, W], got {0:?}")]
    Shape(Vec<usize>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled images `[N, C, H, W]` with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        let [n, ..] = images
            .dims4("dataset")
            .map_err(|_| DataError::Shape(images.shape().to_vec()))?;
        if n == 0 {
            return Err(DataError::Empty);
        }
        if n != labels.len() {
            return Err(DataError::CountMismatch {
                images: n,
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::PixelRange);
        }
        Ok(Self {
            images,
            labels,
            class_count,
            split,
        })
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

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_outer(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            class_count: self.class_count,
            split: self.split,
        }
    }
}

fn read_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated(what))
}

/// Decode in-memory IDX image and label files. `class_count` defaults to `max label + 1`.
pub fn parse_idx(
    image_bytes: &[u8],
    label_bytes: &[u8],
    class_count: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let magic = read_u32(image_bytes, 0, "images")?;
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_IMAGES4_MAGIC => 4,
        found => return Err(DataError::BadMagic { what: "images", found }),
    };
    let mut extents = Vec::with_capacity(dims);
    for d in 0..dims {
        extents.push(read_u32(image_bytes, 4 + 4 * d, "images")? as usize);
    }
    let (n, c, h, w) = if dims == 3 {
        (extents[0], 1, extents[1], extents[2])
    } else {
        (extents[0], extents[1], extents[2], extents[3])
    };
    let header = 4 + 4 * dims;
    let pixels = n * c * h * w;
    let raw = image_bytes
        .get(header..header + pixels)
        .ok_or(DataError::Truncated("images"))?;

    let found = read_u32(label_bytes, 0, "labels")?;
    if found != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { what: "labels", found });
    }
    let ln = read_u32(label_bytes, 4, "labels")? as usize;
    if ln != n {
        return Err(DataError::CountMismatch { images: n, labels: ln });
    }
    let labels: Vec<usize> = label_bytes
        .get(8..8 + ln)
        .ok_or(DataError::Truncated("labels"))?
        .iter()
        .map(|&b| b as usize)
        .collect();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    let images = Tensor::new(
        vec![n, c, h, w],
        raw.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("extent product matches");
    Dataset::new(images, labels, classes, split)
}

pub fn load_idx(
    images: &Path,
    labels: &Path,
    class_count: Option<usize>,
    split: Split,
) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| DataError::Io {
            path: p.display().to_string(),
            source,
        })
    };
    parse_idx(&read(images)?, &read(labels)?, class_count, split)
}

/// Encode as IDX (8-bit pixels, `round(v * 255)`). Single-channel data uses the 3-D layout.
pub fn encode_idx(dataset: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let [n, c, h, w] = dataset.images.dims4("idx").expect("validated");
    let mut img = Vec::with_capacity(20 + dataset.images.len());
    if c == 1 {
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [n, h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&IDX_IMAGES4_MAGIC.to_be_bytes());
        for d in [n, c, h, w] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
    }
    img.extend(
        dataset
            .images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    (img, lab)
}

pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode_idx(dataset);
    for (path, bytes) in [(images, img), (labels, lab)] {
        crate::graph::write_atomic(path, &bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Parameters of the synthetic oriented-grating classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub class_count: usize,
    pub size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub noise: f32,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(DataError::InvalidSpec("size must be at least 8".into()));
        }
        if self.class_count < 2 || self.class_count > 255 {
            return Err(DataError::InvalidSpec("class_count must be in 2..=255".into()));
        }
        if self.channels == 0 {
            return Err(DataError::InvalidSpec("channels must be positive".into()));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::InvalidSpec("every split needs samples".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(DataError::InvalidSpec("noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Noise-free template of every class, `[classes, C, size, size]`.
    pub fn templates(&self) -> Tensor {
        let mut rng = seeded(derive_seed(self.seed, 0));
        let (s, c, k) = (self.size, self.channels, self.class_count);
        let mut data = Vec::with_capacity(k * c * s * s);
        for class in 0..k {
            let jitter: f32 = rng.random_range(-0.05..0.05);
            let theta = std::f32::consts::PI * (class as f32 + jitter) / k as f32;
            let cycles = if class % 2 == 0 { 2.0 } else { 3.5 };
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let (ct, st) = (theta.cos(), theta.sin());
            for ch in 0..c {
                let ph = phase + ch as f32 * std::f32::consts::FRAC_PI_3;
                for y in 0..s {
                    for x in 0..s {
                        let u = (x as f32 * ct + y as f32 * st) / s as f32;
                        data.push(0.5 + 0.35 * (std::f32::consts::TAU * cycles * u + ph).cos());
                    }
                }
            }
        }
        Tensor::new(vec![k, c, s, s], data).expect("sized")
    }
}

/// Generate train/val/test splits from independent sub-seeds.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthSplits> {
    spec.validate()?;
    let templates = spec.templates();
    let plane = spec.channels * spec.size * spec.size;
    let make = |per_class: usize, stream: u64, split: Split| -> Result<Dataset> {
        let mut rng = seeded(derive_seed(spec.seed, stream));
        let normal = Normal::new(0.0f32, spec.noise.max(f32::MIN_POSITIVE)).expect("finite sigma");
        let n = per_class * spec.class_count;
        let mut data = Vec::with_capacity(n * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.class_count;
            let t = &templates.data()[class * plane..(class + 1) * plane];
            for &v in t {
                let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                data.push((v + noise).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
        let images = Tensor::new(vec![n, spec.channels, spec.size, spec.size], data)
            .expect("sized");
        Dataset::new(images, labels, spec.class_count, split)
    };
    Ok(SynthSplits {
        train: make(spec.train_per_class, 1, Split::Train)?,
        val: make(spec.val_per_class, 2, Split::Val)?,
        test: make(spec.test_per_class, 3, Split::Test)?,
    })
}

/// Seeded uniform sample of `n` distinct samples, in draw order.
pub fn sample_subset(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(DataError::TooMany {
            requested: n,
            available: dataset.len(),
        });
    }
    let mut rng = seeded(seed);
    let picks = index::sample(&mut rng, dataset.len(), n).into_vec();
    Ok(dataset.subset(&picks))
}

/// Reverse the width axis of every image.
pub fn flip_horizontal(batch: &Tensor) -> Tensor {
    let w = *batch.shape().last().expect("non-empty shape");
    let mut out = batch.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn crop_at(batch: &Tensor, n: usize, dy: usize, dx: usize, crop: usize, out: &mut Vec<f32>) {
    let [_, c, h, w] = batch.dims4("crop").expect("checked");
    for ch in 0..c {
        let plane = &batch.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
        for y in dy..dy + crop {
            out.extend_from_slice(&plane[y * w + dx..y * w + dx + crop]);
        }
    }
}

fn check_crop(batch: &Tensor, crop: usize) -> Result<[usize; 4]> {
    let dims = batch
        .dims4("crop")
        .map_err(|_| DataError::Shape(batch.shape().to_vec()))?;
    let extent = dims[2].min(dims[3]);
    if crop == 0 || crop > extent {
        return Err(DataError::CropTooLarge { crop, extent });
    }
    Ok(dims)
}

/// Seeded random crop to `crop x crop`, plus a horizontal mirror with probability 1/2.
pub fn augment(batch: &Tensor, crop: usize, mirror: bool, seed: u64) -> Result<Tensor> {
    let [n, c, h, w] = check_crop(batch, crop)?;
    let mut rng = seeded(seed);
    let mut out = Vec::with_capacity(n * c * crop * crop);
    for i in 0..n {
        let dy = rng.random_range(0..=h - crop);
        let dx = rng.random_range(0..=w - crop);
        let start = out.len();
        crop_at(batch, i, dy, dx, crop, &mut out);
        if mirror && rng.random_bool(0.5) {
            for row in out[start..].chunks_mut(crop) {
                row.reverse();
            }
        }
    }
    Ok(Tensor::new(vec![n, c, crop, crop], out).expect("sized"))
}

/// Evaluation-path counterpart of [`augment`]: centered crop, no mirror.
pub fn center_crop(batch: &Tensor, crop: usize) -> Result<Tensor> {
    let [n, c, h, w] = check_crop(batch, crop)?;
    let (dy, dx) = ((h - crop) / 2, (w - crop) / 2);
    let mut out = Vec::with_capacity(n * c * crop * crop);
    for i in 0..n {
        crop_at(batch, i, dy, dx, crop, &mut out);
    }
    Ok(Tensor::new(vec![n, c, crop, crop], out).expect("sized"))
}
