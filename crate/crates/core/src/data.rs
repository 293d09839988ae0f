//! Datasets: IDX and CIFAR binary loaders, synthetic class-template data,
//! tenfold augmentation, and disjoint subset partitioning.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use thiserror::Error;

use crate::tensor::{SeededRng, Tensor, TensorError};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;
/// Class count assumed for IDX label files (handwritten digits).
pub const IDX_CLASSES: usize = 10;

/// Subset divisors accepted by [`partition_subsets`]; 1 is the baseline.
pub const ALLOWED_DIVISORS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

const AUG_MAGIC: &[u8; 8] = b"SPAUGDS1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated ({len} bytes, need {needed})")]
    Truncated {
        path: String,
        len: usize,
        needed: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: size {len} is not a multiple of record size {record}")]
    SizeMismatch {
        path: String,
        len: usize,
        record: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("divisor {0} not in {{1, 2, 4, 8, 16, 32, 64, 128}}")]
    InvalidDivisor(usize),
    #[error("cannot split {count} samples into {b} subsets")]
    TooFewSamples { count: usize, b: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    fs::write(path, bytes).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(K, H, W, C)`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
        name: impl Into<String>,
    ) -> Result<Self, DataError> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(DataError::Invalid(format!(
                "images must be rank 4, got {shape:?}"
            )));
        }
        if shape[0] != labels.len() {
            return Err(DataError::CountMismatch {
                images: shape[0],
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        if images.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("image values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            class_count,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.class_count];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let images = self.images.gather_leading(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Self {
            images,
            labels,
            class_count: self.class_count,
            name: self.name.clone(),
        })
    }

    pub fn concat(&self, other: &Self) -> Result<Self, DataError> {
        if self.image_shape() != other.image_shape() || self.class_count != other.class_count {
            return Err(DataError::Invalid(
                "cannot concatenate mismatched datasets".into(),
            ));
        }
        let (h, w, c) = self.image_shape();
        let mut values = self.images.values().to_vec();
        values.extend_from_slice(other.images.values());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let images = Tensor::from_vec(&[labels.len(), h, w, c], values)?;
        Self::new(images, labels, self.class_count, self.name.clone())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_len(path: &Path, bytes: &[u8], needed: usize) -> Result<(), DataError> {
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            len: bytes.len(),
            needed,
        });
    }
    Ok(())
}

/// Loads an IDX image/label file pair. Pixel bytes are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img = read_file(images_path)?;
    let lab = read_file(labels_path)?;
    check_len(images_path, &img, 16)?;
    check_len(labels_path, &lab, 8)?;
    let magic = be_u32(&img, 0);
    if magic != IDX_IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            found: magic,
            expected: IDX_IMAGE_MAGIC,
        });
    }
    let magic = be_u32(&lab, 0);
    if magic != IDX_LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            found: magic,
            expected: IDX_LABEL_MAGIC,
        });
    }
    let (n, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    let n_labels = be_u32(&lab, 4) as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    check_len(images_path, &img, 16 + n * rows * cols)?;
    check_len(labels_path, &lab, 8 + n)?;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(
            "IDX file declares an empty extent".into(),
        ));
    }
    let values = img[16..16 + n * rows * cols]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels = lab[8..8 + n].iter().map(|&b| b as usize).collect();
    let images = Tensor::from_vec(&[n, rows, cols, 1], values)?;
    Dataset::new(images, labels, IDX_CLASSES, "idx")
}

/// Writes a single-channel dataset as an IDX pair, quantizing to bytes.
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let (h, w, c) = ds.image_shape();
    if c != 1 {
        return Err(DataError::Invalid(
            "IDX images must have one channel".into(),
        ));
    }
    if ds.class_count > 256 {
        return Err(DataError::Invalid("IDX labels are single bytes".into()));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * h * w);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for d in [ds.len(), h, w] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend(ds.images.values().iter().map(|&v| quantize(v)));
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    write_file(images_path, &img)?;
    write_file(labels_path, &lab)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rearranges one channel-planar CIFAR record body into HWC order.
fn cifar_pixels(record: &[u8], out: &mut Vec<f64>) {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for p in 0..plane {
        for ch in 0..3 {
            out.push(record[ch * plane + p] as f64 / 255.0);
        }
    }
}

fn load_cifar_records(
    paths: &[&Path],
    record: usize,
    label_offset: usize,
    classes: usize,
    name: &str,
) -> Result<Dataset, DataError> {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(DataError::SizeMismatch {
                path: path.display().to_string(),
                len: bytes.len(),
                record,
            });
        }
        for rec in bytes.chunks_exact(record) {
            let label = rec[label_offset] as usize;
            if label >= classes {
                return Err(DataError::LabelOutOfRange { label, classes });
            }
            labels.push(label);
            cifar_pixels(&rec[record - CIFAR_PIXELS..], &mut values);
        }
    }
    if labels.is_empty() {
        return Err(DataError::Invalid("no CIFAR files given".into()));
    }
    let images = Tensor::from_vec(&[labels.len(), CIFAR_SIDE, CIFAR_SIDE, 3], values)?;
    Dataset::new(images, labels, classes, name)
}

/// Loads CIFAR-10 binary batches (1 label byte + 3072 channel-planar bytes).
pub fn load_cifar10(batch_paths: &[&Path]) -> Result<Dataset, DataError> {
    load_cifar_records(batch_paths, CIFAR10_RECORD, 0, 10, "cifar10")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cifar100Labels {
    Coarse,
    Fine,
}

/// Loads a CIFAR-100 binary file (coarse byte, fine byte, 3072 pixel bytes).
pub fn load_cifar100(path: &Path, mode: Cifar100Labels) -> Result<Dataset, DataError> {
    match mode {
        Cifar100Labels::Fine => load_cifar_records(&[path], CIFAR100_RECORD, 1, 100, "cifar100"),
        Cifar100Labels::Coarse => load_cifar_records(&[path], CIFAR100_RECORD, 0, 20, "cifar100"),
    }
}

/// Parameters of the synthetic class-template generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub count: usize,
    pub class_count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub difficulty: f64,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.class_count < 2 || self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(DataError::Invalid(format!("bad synthetic spec {self:?}")));
        }
        if self.count < self.class_count {
            return Err(DataError::TooFewSamples {
                count: self.count,
                b: self.class_count,
            });
        }
        if !(self.difficulty >= 0.0 && self.difficulty.is_finite()) {
            return Err(DataError::Invalid(
                "difficulty must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-class templates with values in `[0.2, 0.8]`, one flat image per class.
pub fn class_templates(spec: &SynthSpec, seed: u64) -> Vec<Vec<f64>> {
    let len = spec.height * spec.width * spec.channels;
    let mut rng = SeededRng::new(SeededRng::derive_child(seed, 0));
    (0..spec.class_count)
        .map(|_| (0..len).map(|_| rng.uniform(0.2, 0.8)).collect())
        .collect()
}

/// Draws `spec.count` samples from the templates of `template_seed` using
/// an independent noise stream. Classes cycle so counts are balanced.
pub fn synthesize_split(
    spec: &SynthSpec,
    template_seed: u64,
    noise_seed: u64,
) -> Result<Dataset, DataError> {
    spec.validate()?;
    let templates = class_templates(spec, template_seed);
    let mut rng = SeededRng::new(noise_seed);
    let len = templates[0].len();
    let mut labels: Vec<usize> = (0..spec.count).map(|i| i % spec.class_count).collect();
    labels.shuffle(rng.inner_mut());
    let mut values = Vec::with_capacity(spec.count * len);
    for &label in &labels {
        for &t in &templates[label] {
            let v = if spec.difficulty > 0.0 {
                t + spec.difficulty * rng.standard_normal()
            } else {
                t
            };
            values.push(v.clamp(0.0, 1.0));
        }
    }
    let images = Tensor::from_vec(
        &[spec.count, spec.height, spec.width, spec.channels],
        values,
    )?;
    Dataset::new(images, labels, spec.class_count, "synthetic")
}

/// Synthetic dataset: templates from `derive_child(seed, 1)`, noise from
/// `derive_child(seed, 2)`.
pub fn synthesize_dataset(
    count: usize,
    class_count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Dataset, DataError> {
    let spec = SynthSpec {
        count,
        class_count,
        height,
        width,
        channels,
        difficulty,
    };
    synthesize_split(
        &spec,
        SeededRng::derive_child(seed, 1),
        SeededRng::derive_child(seed, 2),
    )
}

/// A held-out split drawn from the same templates as
/// [`synthesize_dataset`] with the same `seed`.
pub fn synthesize_validation(
    count: usize,
    class_count: usize,
    height: usize,
    width: usize,
    channels: usize,
    seed: u64,
    difficulty: f64,
) -> Result<Dataset, DataError> {
    let spec = SynthSpec {
        count,
        class_count,
        height,
        width,
        channels,
        difficulty,
    };
    synthesize_split(
        &spec,
        SeededRng::derive_child(seed, 1),
        SeededRng::derive_child(seed, 3),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub rotation_max_degrees: f64,
    /// Maximum shift as a fraction of each spatial extent.
    pub shift_max_fraction: f64,
    /// Contrast scale range around the per-image mean.
    pub contrast_range: (f64, f64),
    pub copies_per_image: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_max_degrees: 15.0,
            shift_max_fraction: 0.1,
            contrast_range: (0.8, 1.2),
            copies_per_image: 9,
        }
    }
}

impl AugmentParams {
    /// Zero-width ranges: every copy equals its original.
    pub fn identity() -> Self {
        Self {
            rotation_max_degrees: 0.0,
            shift_max_fraction: 0.0,
            contrast_range: (1.0, 1.0),
            copies_per_image: 9,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.contrast_range;
        let ok = self.rotation_max_degrees >= 0.0
            && self.shift_max_fraction >= 0.0
            && lo >= 0.0
            && hi >= lo
            && [self.rotation_max_degrees, self.shift_max_fraction, lo, hi]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(DataError::Invalid(format!(
                "bad augmentation params {self:?}"
            )));
        }
        Ok(())
    }
}

/// Bilinear sample of channel `c`; coordinates outside the image read 0.
fn bilinear(img: &[f64], h: usize, w: usize, ch: usize, y: f64, x: f64, c: usize) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[((yy as usize) * w + xx as usize) * ch + c]
        }
    };
    let top = if fx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx
    };
    if fy == 0.0 {
        return top;
    }
    let bottom = if fx == 0.0 {
        at(y0 + 1.0, x0)
    } else {
        at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx
    };
    top * (1.0 - fy) + bottom * fy
}

/// Rotation about the image centre, translation, and contrast scaling,
/// resampled bilinearly and clamped to `[0, 1]`.
fn transform_image(
    img: &[f64],
    (h, w, ch): (usize, usize, usize),
    angle_rad: f64,
    shift: (f64, f64),
    contrast: f64,
) -> Vec<f64> {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_rad.sin_cos();
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..h {
        for x in 0..w {
            // inverse map: output pixel -> source coordinate
            let dy = y as f64 - shift.0 - cy;
            let dx = x as f64 - shift.1 - cx;
            let sy = cos * dy - sin * dx + cy;
            let sx = sin * dy + cos * dx + cx;
            for c in 0..ch {
                let v = bilinear(img, h, w, ch, sy, sx, c);
                out.push((contrast * v + (1.0 - contrast) * mean).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Expands each image into itself plus `copies_per_image` transformed
/// copies. Output order: original, then its copies, image by image.
pub fn augment_tenfold(
    ds: &Dataset,
    params: &AugmentParams,
    seed: u64,
) -> Result<Dataset, DataError> {
    params.validate()?;
    let (h, w, ch) = ds.image_shape();
    let len = h * w * ch;
    let per = params.copies_per_image + 1;
    let mut rng = SeededRng::new(seed);
    let mut values = Vec::with_capacity(ds.len() * per * len);
    let mut labels = Vec::with_capacity(ds.len() * per);
    let max_angle = params.rotation_max_degrees.to_radians();
    for (i, &label) in ds.labels.iter().enumerate() {
        let img = &ds.images.values()[i * len..(i + 1) * len];
        values.extend_from_slice(img);
        labels.push(label);
        for _ in 0..params.copies_per_image {
            let angle = rng.uniform(-max_angle, max_angle);
            let shift_y =
                rng.uniform(-params.shift_max_fraction, params.shift_max_fraction) * h as f64;
            let shift_x =
                rng.uniform(-params.shift_max_fraction, params.shift_max_fraction) * w as f64;
            let contrast = rng.uniform(params.contrast_range.0, params.contrast_range.1);
            values.extend(transform_image(
                img,
                (h, w, ch),
                angle,
                (shift_y, shift_x),
                contrast,
            ));
            labels.push(label);
        }
    }
    let images = Tensor::from_vec(&[labels.len(), h, w, ch], values)?;
    Dataset::new(images, labels, ds.class_count, format!("{}-aug", ds.name))
}

/// Writes an augmented dataset cache: magic, `K H W C M` (u32 LE), seed
/// (u64 LE), rotation, shift, contrast low/high (f64 LE), copies (u32 LE),
/// then one label byte per sample, then 8-bit quantized pixels.
pub fn write_augmented_cache(
    ds: &Dataset,
    params: &AugmentParams,
    seed: u64,
    path: &Path,
) -> Result<(), DataError> {
    if ds.class_count > 256 {
        return Err(DataError::Invalid("cache labels are single bytes".into()));
    }
    let (h, w, c) = ds.image_shape();
    let mut out = Vec::with_capacity(64 + ds.len() * (1 + h * w * c));
    out.extend_from_slice(AUG_MAGIC);
    for v in [ds.len(), h, w, c, ds.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&seed.to_le_bytes());
    for v in [
        params.rotation_max_degrees,
        params.shift_max_fraction,
        params.contrast_range.0,
        params.contrast_range.1,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(params.copies_per_image as u32).to_le_bytes());
    out.extend(ds.labels.iter().map(|&l| l as u8));
    out.extend(ds.images.values().iter().map(|&v| quantize(v)));
    write_file(path, &out)
}

pub fn read_augmented_cache(path: &Path) -> Result<(Dataset, AugmentParams, u64), DataError> {
    let bytes = read_file(path)?;
    let header = 8 + 5 * 4 + 8 + 4 * 8 + 4;
    check_len(path, &bytes, header)?;
    if &bytes[..8] != AUG_MAGIC {
        return Err(DataError::BadMagic {
            path: path.display().to_string(),
            found: be_u32(&bytes, 0),
            expected: u32::from_be_bytes(AUG_MAGIC[..4].try_into().expect("4 bytes")),
        });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4")) as usize;
    let f64_at = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().expect("8"));
    let (k, h, w, c, m) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20), u32_at(24));
    let seed = u64::from_le_bytes(bytes[28..36].try_into().expect("8"));
    let params = AugmentParams {
        rotation_max_degrees: f64_at(36),
        shift_max_fraction: f64_at(44),
        contrast_range: (f64_at(52), f64_at(60)),
        copies_per_image: u32_at(68),
    };
    let needed = header + k + k * h * w * c;
    check_len(path, &bytes, needed)?;
    let labels = bytes[header..header + k]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let values = bytes[header + k..needed]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let images = Tensor::from_vec(&[k, h, w, c], values)?;
    Ok((Dataset::new(images, labels, m, "augmented")?, params, seed))
}

/// Disjoint index blocks of one seeded permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetPlan {
    pub b: usize,
    pub subset_indices: Vec<Vec<usize>>,
    /// Executed subset ids, ascending.
    pub runs_selected: Vec<usize>,
    /// Samples beyond `b * floor(K / b)`; excluded from subset training.
    pub remainder: Vec<usize>,
    pub seed: u64,
}

impl SubsetPlan {
    pub fn subset_size(&self) -> usize {
        self.subset_indices[0].len()
    }
}

/// Partitions `0..count` into `b` blocks of `floor(count / b)` from a seeded
/// permutation. At most `max_runs` blocks are selected for execution, by a
/// seeded draw without replacement. `b = 1` is the identity plan.
pub fn partition_subsets(
    count: usize,
    b: usize,
    seed: u64,
    max_runs: usize,
) -> Result<SubsetPlan, DataError> {
    if !ALLOWED_DIVISORS.contains(&b) {
        return Err(DataError::InvalidDivisor(b));
    }
    if count < b || count == 0 {
        return Err(DataError::TooFewSamples { count, b });
    }
    if max_runs == 0 {
        return Err(DataError::Invalid("max_runs must be positive".into()));
    }
    if b == 1 {
        return Ok(SubsetPlan {
            b,
            subset_indices: vec![(0..count).collect()],
            runs_selected: vec![0],
            remainder: Vec::new(),
            seed,
        });
    }
    let mut rng = SeededRng::new(seed);
    let mut perm: Vec<usize> = (0..count).collect();
    perm.shuffle(rng.inner_mut());
    let size = count / b;
    let subset_indices: Vec<Vec<usize>> = perm[..b * size]
        .chunks(size)
        .map(<[usize]>::to_vec)
        .collect();
    let remainder = perm[b * size..].to_vec();
    let runs_selected = if b <= max_runs {
        (0..b).collect()
    } else {
        let mut chosen = index::sample(rng.inner_mut(), b, max_runs).into_vec();
        chosen.sort_unstable();
        chosen
    };
    Ok(SubsetPlan {
        b,
        subset_indices,
        runs_selected,
        remainder,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn idx_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3];
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 7, 3];
        let ip = dir.join("img.idx");
        let lp = dir.join("lab.idx");
        fs::write(&ip, img).unwrap();
        fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_values() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path());
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), &[2, 2, 3, 1]);
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.class_count, 10);
        let expected: Vec<f64> = [0u8, 51, 102, 153, 204, 255, 1, 2, 3, 4, 5, 6]
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect();
        assert_eq!(ds.images.values(), expected.as_slice());
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path());
        let good_img = fs::read(&ip).unwrap();
        let good_lab = fs::read(&lp).unwrap();

        let mut bad = good_img.clone();
        bad[3] = 0x04;
        fs::write(&ip, &bad).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic { .. })
        ));

        fs::write(&ip, &good_img[..good_img.len() - 1]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::Truncated { .. })
        ));

        fs::write(&ip, &good_img).unwrap();
        let mut lab = good_lab.clone();
        lab[7] = 3;
        lab.push(1);
        fs::write(&lp, &lab).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::CountMismatch {
                images: 2,
                labels: 3
            })
        ));

        let mut lab = good_lab.clone();
        lab[3] = 0x03;
        fs::write(&lp, &lab).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn every_flipped_header_byte_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = idx_fixture(dir.path());
        let good = fs::read(&ip).unwrap();
        for i in 0..16 {
            let mut bad = good.clone();
            bad[i] ^= 0xff;
            fs::write(&ip, &bad).unwrap();
            assert!(load_idx(&ip, &lp).is_err(), "image header byte {i}");
        }
        fs::write(&ip, &good).unwrap();
        let good = fs::read(&lp).unwrap();
        for i in 0..8 {
            let mut bad = good.clone();
            bad[i] ^= 0xff;
            fs::write(&lp, &bad).unwrap();
            assert!(load_idx(&ip, &lp).is_err(), "label header byte {i}");
        }
    }

    #[test]
    fn idx_write_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(20, 4, 5, 6, 1, 3, 0.1).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.values().iter().zip(ds.images.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    fn cifar_record(label_bytes: &[u8]) -> Vec<u8> {
        let mut rec = label_bytes.to_vec();
        // red plane = pixel index % 256, green = 10, blue = 20
        rec.extend((0..1024).map(|p| (p % 256) as u8));
        rec.extend(std::iter::repeat_n(10u8, 1024));
        rec.extend(std::iter::repeat_n(20u8, 1024));
        rec
    }

    #[test]
    fn cifar10_single_record_placement() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        fs::write(&p, cifar_record(&[6])).unwrap();
        let ds = load_cifar10(&[p.as_path()]).unwrap();
        assert_eq!(ds.images.shape(), &[1, 32, 32, 3]);
        assert_eq!(ds.labels, vec![6]);
        let v = ds.images.values();
        // pixel (row 1, col 3) = planar index 35
        let at = (32 + 3) * 3;
        assert_eq!(v[at], 35.0 / 255.0);
        assert_eq!(v[at + 1], 10.0 / 255.0);
        assert_eq!(v[at + 2], 20.0 / 255.0);
    }

    #[test]
    fn cifar_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut rec = cifar_record(&[1]);
        rec.pop();
        fs::write(&p, &rec).unwrap();
        assert!(matches!(
            load_cifar10(&[p.as_path()]),
            Err(DataError::SizeMismatch { .. })
        ));
        fs::write(&p, cifar_record(&[10])).unwrap();
        assert!(matches!(
            load_cifar10(&[p.as_path()]),
            Err(DataError::LabelOutOfRange {
                label: 10,
                classes: 10
            })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("train.bin");
        let mut bytes = cifar_record(&[3, 87]);
        bytes.extend(cifar_record(&[19, 99]));
        fs::write(&p, bytes).unwrap();
        let ds = load_cifar100(&p, Cifar100Labels::Fine).unwrap();
        assert_eq!(ds.labels, vec![87, 99]);
        assert_eq!(ds.class_count, 100);
        assert_eq!(ds.images.values()[0], 0.0);
        assert_eq!(ds.images.values()[1], 10.0 / 255.0);
        let coarse = load_cifar100(&p, Cifar100Labels::Coarse).unwrap();
        assert_eq!(coarse.labels, vec![3, 19]);
        // a CIFAR-10 sized file is not a CIFAR-100 file
        fs::write(&p, cifar_record(&[1])).unwrap();
        assert!(load_cifar100(&p, Cifar100Labels::Fine).is_err());
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let ds = synthesize_dataset(1000, 10, 6, 6, 1, 9, 0.3).unwrap();
        assert_eq!(ds.class_histogram(), vec![100; 10]);
        let again = synthesize_dataset(1000, 10, 6, 6, 1, 9, 0.3).unwrap();
        assert_eq!(ds, again);
        assert!(matches!(
            synthesize_dataset(5, 10, 6, 6, 1, 9, 0.3),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn noiseless_synthetic_is_template_separable() {
        let spec = SynthSpec {
            count: 200,
            class_count: 10,
            height: 5,
            width: 5,
            channels: 2,
            difficulty: 0.0,
        };
        let seed = SeededRng::derive_child(17, 1);
        let ds = synthesize_split(&spec, seed, 4).unwrap();
        let templates = class_templates(&spec, seed);
        let len = 50;
        let mut correct = 0;
        for (i, &label) in ds.labels.iter().enumerate() {
            let img = &ds.images.values()[i * len..(i + 1) * len];
            let nearest = (0..10)
                .min_by(|&a, &b| {
                    let d = |t: &Vec<f64>| -> f64 {
                        t.iter().zip(img).map(|(x, y)| (x - y).powi(2)).sum()
                    };
                    d(&templates[a]).total_cmp(&d(&templates[b]))
                })
                .unwrap();
            correct += usize::from(nearest == label);
        }
        assert_eq!(correct, 200);
    }

    #[test]
    fn validation_shares_templates() {
        let train = synthesize_dataset(40, 4, 3, 3, 1, 5, 0.0).unwrap();
        let valid = synthesize_validation(40, 4, 3, 3, 1, 5, 0.0).unwrap();
        let img = |ds: &Dataset, label: usize| {
            let i = ds.labels.iter().position(|&l| l == label).unwrap();
            ds.images.values()[i * 9..(i + 1) * 9].to_vec()
        };
        assert_eq!(img(&train, 2), img(&valid, 2));
    }

    #[test]
    fn identity_augmentation_copies() {
        let ds = synthesize_dataset(10, 2, 7, 6, 2, 1, 0.2).unwrap();
        let aug = augment_tenfold(&ds, &AugmentParams::identity(), 3).unwrap();
        assert_eq!(aug.len(), 100);
        let len = 7 * 6 * 2;
        for i in 0..10 {
            let orig = &ds.images.values()[i * len..(i + 1) * len];
            for k in 0..10 {
                let j = i * 10 + k;
                assert_eq!(&aug.images.values()[j * len..(j + 1) * len], orig);
                assert_eq!(aug.labels[j], ds.labels[i]);
            }
        }
    }

    #[test]
    fn augmentation_counts_and_range() {
        let ds = synthesize_dataset(100, 5, 8, 8, 1, 2, 0.4).unwrap();
        let aug = augment_tenfold(&ds, &AugmentParams::default(), 7).unwrap();
        assert_eq!(aug.len(), 1000);
        let expected: Vec<usize> = ds.class_histogram().iter().map(|c| c * 10).collect();
        assert_eq!(aug.class_histogram(), expected);
        let mut rng = SeededRng::new(1);
        for _ in 0..10_000 {
            let i = (rng.next_u64() % aug.images.len() as u64) as usize;
            assert!((0.0..=1.0).contains(&aug.images.values()[i]));
        }
        assert_eq!(
            aug,
            augment_tenfold(&ds, &AugmentParams::default(), 7).unwrap()
        );
        // transformed copies actually differ from the original
        assert_ne!(aug.images.values()[..64], aug.images.values()[64..128]);
    }

    #[test]
    fn augmented_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(6, 3, 4, 4, 1, 2, 0.2).unwrap();
        let params = AugmentParams::default();
        let aug = augment_tenfold(&ds, &params, 11).unwrap();
        let path = dir.path().join("aug.bin");
        write_augmented_cache(&aug, &params, 11, &path).unwrap();
        let (back, p2, seed) = read_augmented_cache(&path).unwrap();
        assert_eq!((p2, seed), (params, 11));
        assert_eq!(back.labels, aug.labels);
        assert_eq!(back.images.shape(), aug.images.shape());
        for (a, b) in back.images.values().iter().zip(aug.images.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn partition_examples() {
        let plan = partition_subsets(60_000, 4, 1, 5).unwrap();
        assert_eq!(plan.subset_indices.len(), 4);
        assert!(plan.subset_indices.iter().all(|s| s.len() == 15_000));
        assert_eq!(plan.runs_selected, vec![0, 1, 2, 3]);

        let plan = partition_subsets(1000, 2, 1, 5).unwrap();
        assert!(plan.subset_indices.iter().all(|s| s.len() == 500));

        let plan = partition_subsets(60_000, 128, 1, 5).unwrap();
        assert_eq!(plan.subset_size(), 468);
        assert_eq!(plan.runs_selected.len(), 5);
        assert_eq!(plan.remainder.len(), 60_000 - 128 * 468);

        let base = partition_subsets(10, 1, 3, 5).unwrap();
        assert_eq!(base.subset_indices, vec![(0..10).collect::<Vec<_>>()]);
    }

    #[test]
    fn partition_errors() {
        assert!(matches!(
            partition_subsets(100, 3, 0, 5),
            Err(DataError::InvalidDivisor(3))
        ));
        assert!(matches!(
            partition_subsets(100, 256, 0, 5),
            Err(DataError::InvalidDivisor(256))
        ));
        assert!(matches!(
            partition_subsets(100, 128, 0, 5),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn partition_is_disjoint_and_covers() {
        for &b in &ALLOWED_DIVISORS {
            let plan = partition_subsets(1003, b, 77, 5).unwrap();
            assert_eq!(plan, partition_subsets(1003, b, 77, 5).unwrap());
            let mut seen = HashSet::new();
            for s in &plan.subset_indices {
                assert_eq!(s.len(), 1003 / b);
                for &i in s {
                    assert!(seen.insert(i));
                }
            }
            for &i in &plan.remainder {
                assert!(seen.insert(i));
            }
            assert_eq!(seen.len(), 1003);
            assert_eq!(plan.runs_selected.len(), b.min(5));
        }
    }
}
