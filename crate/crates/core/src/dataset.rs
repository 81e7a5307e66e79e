//! Labelled image sets: the CIFAR binary batch format and a seeded
//! synthetic generator with a known linear separator.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images are `N×C×H×W` in `[0, 1]`; labels lie in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.order() != 4 {
            return Err(Error::Shape(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Copy of sample `i` as a `C×H×W` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let n = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("sample shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarFormat {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is kept.
    Cifar100,
}

pub const CIFAR_PIXELS: usize = 3 * 32 * 32;

impl CifarFormat {
    pub fn record_len(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1 + CIFAR_PIXELS,
            CifarFormat::Cifar100 => 2 + CIFAR_PIXELS,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        self.record_len() - CIFAR_PIXELS
    }
}

/// Parse the raw bytes of one or more concatenated batch files.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat, split: Split, path: &Path) -> Result<Dataset> {
    let rec = format.record_len();
    let bad = |reason: String| Error::Cifar {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(bad(format!(
            "length {} is not a positive multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[format.label_bytes() - 1] as usize;
        if label >= format.classes() {
            return Err(bad(format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(record[format.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, format.classes(), split)
}

pub fn load_cifar_file(path: &Path, format: CifarFormat, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, format, split, path)
}

/// Standard batch file names inside an extracted archive directory.
pub fn cifar_batch_files(dir: &Path, format: CifarFormat, split: Split) -> Vec<PathBuf> {
    match (format, split) {
        (CifarFormat::Cifar10, Split::Train) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (CifarFormat::Cifar10, Split::Test) => vec![dir.join("test_batch.bin")],
        (CifarFormat::Cifar100, Split::Train) => vec![dir.join("train.bin")],
        (CifarFormat::Cifar100, Split::Test) => vec![dir.join("test.bin")],
    }
}

/// Load a split from an extracted directory, or a single batch file.
pub fn load_cifar(path: &Path, format: CifarFormat, split: Split) -> Result<Dataset> {
    if path.is_file() {
        return load_cifar_file(path, format, split);
    }
    let mut bytes = Vec::new();
    for file in cifar_batch_files(path, format, split) {
        let chunk = std::fs::read(&file).map_err(|e| Error::io(&file, e))?;
        if chunk.len() % format.record_len() != 0 {
            return parse_cifar(&chunk, format, split, &file);
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, format, split, path)
}

pub fn load_cifar10(path: &Path, split: Split) -> Result<Dataset> {
    load_cifar(path, CifarFormat::Cifar10, split)
}

/// Class-conditional Gaussian images around means `0.5 + margin·dir_k`.
///
/// `dir_k` is a unit vector over `C×H×W`: a signed channel indicator
/// (`+e_c`, `−e_c`, cycling through channels) times a spatial pattern that
/// changes once every `2C` classes (constant, then left/right halves, then
/// top/bottom halves, ...). The nearest-mean rule over these directions is a
/// linear separator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub test: usize,
    pub margin: f64,
    pub noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            height: 8,
            width: 8,
            train: 256,
            test: 256,
            margin: 0.3,
            noise: 0.2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "synthetic data needs ≥ 2 classes and non-empty images".into(),
            ));
        }
        if self.classes > 2 * self.channels * (1 + 2 * (self.height.min(self.width) / 2)) {
            return Err(Error::Config(format!(
                "{} classes exceed the distinct directions available",
                self.classes
            )));
        }
        if !(self.margin.is_finite() && self.noise.is_finite() && self.margin >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("margin and noise must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn pattern(&self, p: usize, h: usize, w: usize) -> f64 {
        if p == 0 {
            return 1.0;
        }
        // p = 1.. alternates vertical / horizontal splits at growing frequency
        let freq = p.div_ceil(2);
        let (pos, len) = if p % 2 == 1 { (w, self.width) } else { (h, self.height) };
        let cell = (pos * 2 * freq) / len;
        if cell.is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Unit-norm class direction, `C×H×W` row-major.
    pub fn class_direction(&self, k: usize) -> Vec<f64> {
        let c = (k / 2) % self.channels;
        let sign = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
        let p = k / (2 * self.channels);
        let plane = self.height * self.width;
        let mut v = vec![0.0; self.channels * plane];
        for h in 0..self.height {
            for w in 0..self.width {
                v[c * plane + h * self.width + w] = sign * self.pattern(p, h, w);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

fn synth_split(spec: &SynthSpec, n: usize, split: Split, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let dirs: Vec<Vec<f64>> = (0..spec.classes).map(|k| spec.class_direction(k)).collect();
    // scale so the per-pixel offset is `margin` on a constant pattern
    let scale = spec.margin * ((spec.height * spec.width) as f64).sqrt();
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    labels.shuffle(rng);
    let dim = spec.channels * spec.height * spec.width;
    let mut data = Vec::with_capacity(n * dim);
    for &label in &labels {
        for &d in &dirs[label] {
            let z: f64 = rng.sample(StandardNormal);
            data.push((0.5 + scale * d + spec.noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    let images = Tensor::new(vec![n, spec.channels, spec.height, spec.width], data)?;
    Dataset::new(images, labels, spec.classes, split)
}

/// `(train, test)`, deterministic in `seed`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synth_split(spec, spec.train, Split::Train, &mut rng)?;
    let test = synth_split(spec, spec.test, Split::Test, &mut rng)?;
    Ok((train, test))
}
