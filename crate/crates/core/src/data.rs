//! Datasets: 7x7 average-pooled MNIST read from IDX files and the
//! two-class concentric circles generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("IDX format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// A labelled classification dataset held in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self, DataError> {
        if inputs.len() != labels.len() {
            return Err(DataError::Invalid(format!("{} inputs but {} labels", inputs.len(), labels.len())));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(DataError::Invalid("ragged inputs".into()));
            }
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { name: name.into(), inputs, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn one_hot_labels(&self) -> Vec<Vec<f64>> {
        self.labels.iter().map(|&l| one_hot(l, self.num_classes).expect("labels validated on construction")).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Sample order drawn from `seed`, cycling through epochs of fresh
    /// permutations until `n` indices are produced.
    pub fn presentation_order(&self, n: usize, seed: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order = Vec::with_capacity(n);
        let mut perm: Vec<usize> = (0..self.len()).collect();
        while order.len() < n && !perm.is_empty() {
            perm.shuffle(&mut rng);
            order.extend(perm.iter().take(n - order.len()));
        }
        order
    }

    /// Deterministic shuffled split into `(train, test)`.
    pub fn split(&self, n_test: usize, seed: u64) -> Result<(Self, Self), DataError> {
        if n_test > self.len() {
            return Err(DataError::Invalid(format!("cannot hold out {n_test} of {} samples", self.len())));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

pub fn one_hot(label: usize, num_classes: usize) -> Result<Vec<f64>, DataError> {
    if label >= num_classes {
        return Err(DataError::LabelOutOfRange { label, num_classes });
    }
    let mut v = vec![0.0; num_classes];
    v[label] = 1.0;
    Ok(v)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Format { offset, message: "truncated header".into() })
}

/// Raw IDX image tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::Format { offset: 0, message: format!("bad image magic {magic:#010x}") });
    }
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(DataError::Format {
            offset: bytes.len(),
            message: format!("truncated image data: expected {need} bytes"),
        });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..need].to_vec() })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let magic = read_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::Format { offset: 0, message: format!("bad label magic {magic:#010x}") });
    }
    let count = read_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(DataError::Format {
            offset: bytes.len(),
            message: format!("truncated label data: expected {need} bytes"),
        });
    }
    Ok(bytes[8..need].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Non-overlapping `window x window` average pooling of a byte image, with
/// pixels scaled to `[0, 1]` first.
pub fn average_pool(image: &[u8], rows: usize, cols: usize, window: usize) -> Vec<f64> {
    let (out_r, out_c) = (rows / window, cols / window);
    let norm = 1.0 / (255.0 * (window * window) as f64);
    let mut out = vec![0.0; out_r * out_c];
    for r in 0..out_r * window {
        for c in 0..out_c * window {
            out[(r / window) * out_c + c / window] += image[r * cols + c] as f64;
        }
    }
    out.iter_mut().for_each(|v| *v *= norm);
    out
}

/// Loads an IDX image/label pair and pools each 28x28 image down to 7x7.
pub fn load_mnist_7x7(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read_file(images.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels.as_ref())?)?;
    mnist_from_idx(&images, &labels)
}

pub fn mnist_from_idx(images: &IdxImages, labels: &[u8]) -> Result<Dataset, DataError> {
    if images.rows != 28 || images.cols != 28 {
        return Err(DataError::Format { offset: 8, message: format!("expected 28x28 images, got {}x{}", images.rows, images.cols) });
    }
    if labels.len() != images.count {
        return Err(DataError::Invalid(format!("{} images but {} labels", images.count, labels.len())));
    }
    let inputs = (0..images.count).map(|i| average_pool(images.image(i), 28, 28, 4)).collect();
    Dataset::new("mnist7x7", inputs, labels.iter().map(|&l| l as usize).collect(), 10)
}

/// Train and test splits of pooled MNIST from a directory holding the four
/// canonical IDX files.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset), DataError> {
    let dir = dir.as_ref();
    let train = load_mnist_7x7(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_7x7(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Two concentric circles: `n/2` points on the unit circle (label 0) and
/// `n/2` on a circle of radius `factor` (label 1), angles evenly spaced,
/// Gaussian coordinate noise, shuffled.
pub fn make_circles(n: usize, noise_std: f64, factor: f64, seed: u64) -> Result<Dataset, DataError> {
    if n % 2 != 0 || n == 0 {
        return Err(DataError::Invalid(format!("circles needs a positive even count, got {n}")));
    }
    if !(factor > 0.0 && factor < 1.0) {
        return Err(DataError::Invalid(format!("radius factor must lie in (0, 1), got {factor}")));
    }
    if !(noise_std >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be non-negative, got {noise_std}")));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (radius, label) in [(1.0, 0usize), (factor, 1usize)] {
        for i in 0..half {
            let angle = 2.0 * std::f64::consts::PI * i as f64 / half as f64;
            points.push((vec![radius * angle.cos(), radius * angle.sin()], label));
        }
    }
    points.shuffle(&mut rng);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| DataError::Invalid(e.to_string()))?;
        for (p, _) in points.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let (inputs, labels) = points.into_iter().unzip();
    Dataset::new("circles", inputs, labels, 2)
}

/// Circles defaults used by the experiments: factor 0.5, noise 0.08.
pub fn default_circles(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let all = make_circles(n_train + n_test, 0.08, 0.5, seed)?;
    all.split(n_test, seed ^ 0x5eed)
}

/// Writes a 2-D dataset as `x,y,label` CSV.
pub fn write_points_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["x", "y", "label"])?;
    for (p, l) in dataset.inputs.iter().zip(&dataset.labels) {
        w.write_record([p[0].to_string(), p[1].to_string(), l.to_string()])?;
    }
    w.flush().map_err(|source| DataError::Io { path: path.as_ref().display().to_string(), source })?;
    Ok(())
}

pub fn read_points_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Dataset, DataError> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64, DataError> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| DataError::Invalid(format!("bad field {i} in {rec:?}")))
        };
        inputs.push(vec![parse(0)?, parse(1)?]);
        labels.push(parse(2)? as usize);
    }
    Dataset::new("circles", inputs, labels, num_classes)
}
