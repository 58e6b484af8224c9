//! Datasets and temporal encodings.
//!
//! IDX image files are read into a [`Dataset`] with pixels scaled to
//! `[0, 1]`. Static samples are presented with direct encoding (the same
//! frame at every step). Temporal samples come from the synthetic
//! generator or from `SQE1` event-tensor files, layout little-endian:
//!
//! ```text
//! "SQE1" | u32 version | u32 T | u32 B | u32 ndims | u32 dims.. | u32 labels[B] | f32 data[T*B*prod(dims)]
//! ```

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorCategory;
use crate::model::StepInput;
use crate::tensor::{Tensor, TensorError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const EVENT_MAGIC: [u8; 4] = *b"SQE1";
pub const EVENT_VERSION: u32 = 1;

/// PRNG stream for shuffling; model initialization uses stream 0.
pub const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {got:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, expected: u32, got: u32 },
    #[error("{path}: truncated, need {expected} bytes, found {got}")]
    Truncated { path: String, expected: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {detail}")]
    BadDimensions { path: String, detail: String },
    #[error("event tensor: bad magic {0:?}")]
    BadEventMagic([u8; 4]),
    #[error("event tensor: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("event tensor: {detail}")]
    SizeMismatch { detail: String },
    #[error("firing rate {0} outside [0, 1]")]
    InvalidRate(f32),
    #[error("invalid data spec: {0}")]
    InvalidSpec(String),
    #[error("dataset not found: {0}")]
    Missing(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            DataError::Io { .. } => ErrorCategory::Io,
            DataError::BadMagic { .. }
            | DataError::Truncated { .. }
            | DataError::BadDimensions { .. }
            | DataError::BadEventMagic(_)
            | DataError::UnsupportedVersion(_)
            | DataError::SizeMismatch { .. } => ErrorCategory::Format,
            DataError::InvalidRate(_) | DataError::InvalidSpec(_) => ErrorCategory::Config,
            DataError::CountMismatch { .. } | DataError::Missing(_) => ErrorCategory::Data,
            DataError::Tensor(_) => ErrorCategory::Shape,
        }
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        context: format!("reading {}", path.display()),
        source,
    })
}

/// Labeled samples stored sample-major.
///
/// Static samples have `sample_shape` equal to the feature shape. Temporal
/// samples carry their own time axis first: `[T, ...features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    data: Vec<f32>,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    temporal: bool,
}

impl Dataset {
    pub fn new(data: Vec<f32>, sample_shape: Vec<usize>, labels: Vec<usize>, temporal: bool) -> Result<Self> {
        let per: usize = sample_shape.iter().product();
        if data.len() != per * labels.len() {
            return Err(DataError::CountMismatch {
                images: if per == 0 { 0 } else { data.len() / per },
                labels: labels.len(),
            });
        }
        if temporal && sample_shape.len() < 2 {
            return Err(DataError::InvalidSpec("temporal samples need [T, features..]".into()));
        }
        Ok(Self {
            data,
            sample_shape,
            labels,
            temporal,
        })
    }

    /// Builds a temporal dataset from a `[T, B, ...]` batch.
    pub fn from_sequences(inputs: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let s = inputs.shape();
        if s.len() < 3 || s[1] != labels.len() {
            return Err(DataError::InvalidSpec(format!(
                "sequence batch {s:?} with {} labels",
                labels.len()
            )));
        }
        let (t, b) = (s[0], s[1]);
        let feat: usize = s[2..].iter().product();
        let mut data = vec![0.0; inputs.numel()];
        for step in 0..t {
            for i in 0..b {
                let src = &inputs.data()[(step * b + i) * feat..][..feat];
                data[(i * t + step) * feat..][..feat].copy_from_slice(src);
            }
        }
        let mut shape = vec![t];
        shape.extend_from_slice(&s[2..]);
        Self::new(data, shape, labels, true)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    /// Per-step feature shape (the sample shape minus any time axis).
    pub fn feature_shape(&self) -> &[usize] {
        if self.temporal {
            &self.sample_shape[1..]
        } else {
            &self.sample_shape
        }
    }

    pub fn is_temporal(&self) -> bool {
        self.temporal
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn sample(&self, index: usize) -> &[f32] {
        let per: usize = self.sample_shape.iter().product();
        &self.data[index * per..(index + 1) * per]
    }

    /// Reinterprets the per-step feature shape, e.g. `[28, 28]` as `[1, 28, 28]`.
    pub fn with_feature_shape(mut self, shape: &[usize]) -> Result<Self> {
        let old: usize = self.feature_shape().iter().product();
        let new: usize = shape.iter().product();
        if old != new {
            return Err(DataError::InvalidSpec(format!(
                "cannot view features {:?} as {shape:?}",
                self.feature_shape()
            )));
        }
        let mut s = if self.temporal { vec![self.sample_shape[0]] } else { Vec::new() };
        s.extend_from_slice(shape);
        self.sample_shape = s;
        Ok(self)
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.sample(0).len().max(1));
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Self {
            data,
            sample_shape: self.sample_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            temporal: self.temporal,
        }
    }

    /// Gathers `indices` into an encoded batch. Static samples are repeated
    /// for `steps`; temporal samples keep their own length.
    pub fn batch(&self, indices: &[usize], steps: usize) -> Result<EncodedBatch> {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        if self.temporal {
            let t = self.sample_shape[0];
            let feat: usize = self.sample_shape[1..].iter().product();
            let b = indices.len();
            let mut data = vec![0.0; t * b * feat];
            for (k, &i) in indices.iter().enumerate() {
                let s = self.sample(i);
                for step in 0..t {
                    data[(step * b + k) * feat..][..feat].copy_from_slice(&s[step * feat..][..feat]);
                }
            }
            let mut shape = vec![t, b];
            shape.extend_from_slice(&self.sample_shape[1..]);
            Ok(EncodedBatch {
                frames: Frames::PerStep(Tensor::new(shape, data)?),
                labels,
            })
        } else {
            let mut data = Vec::with_capacity(indices.len() * self.sample(0).len());
            for &i in indices {
                data.extend_from_slice(self.sample(i));
            }
            let mut shape = vec![indices.len()];
            shape.extend_from_slice(&self.sample_shape);
            Ok(direct_encode(&Tensor::new(shape, data)?, labels, steps))
        }
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap())
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let p = path.display().to_string();
    let head = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            path: p,
            expected: head,
            got: bytes.len(),
        });
    }
    let got = be_u32(bytes, 0);
    if got != magic {
        return Err(DataError::BadMagic { path: p, expected: magic, got });
    }
    if bytes.len() < head {
        return Err(DataError::Truncated {
            path: p,
            expected: head,
            got: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims).map(|k| be_u32(bytes, 4 + 4 * k) as usize).collect();
    let need = head + dims.iter().product::<usize>();
    if bytes.len() < need {
        return Err(DataError::Truncated {
            path: p,
            expected: need,
            got: bytes.len(),
        });
    }
    if bytes.len() > need {
        return Err(DataError::BadDimensions {
            path: p,
            detail: format!("{} bytes after the declared payload", bytes.len() - need),
        });
    }
    Ok(dims)
}

/// Reads an IDX image file (`[N, rows, cols]` u8) and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read(ip)?;
    let idims = idx_header(&ib, ip, IDX_IMAGES_MAGIC, 3)?;
    let lb = read(lp)?;
    let ldims = idx_header(&lb, lp, IDX_LABELS_MAGIC, 1)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let data = ib[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let labels = lb[8..].iter().map(|&l| l as usize).collect();
    Dataset::new(data, vec![idims[1], idims[2]], labels, false)
}

/// Writes `[N, rows, cols]` pixels and labels as IDX files.
pub fn save_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != labels.len() * rows * cols {
        return Err(DataError::CountMismatch {
            images: pixels.len() / (rows * cols).max(1),
            labels: labels.len(),
        });
    }
    let mut ib = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, labels.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend_from_slice(labels);
    write(images_path.as_ref(), &ib)?;
    write(labels_path.as_ref(), &lb)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| DataError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}

/// FashionMNIST train and test splits from the standard IDX file names.
pub fn load_fashion_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let f = |n: &str| -> Result<PathBuf> {
        let p = dir.join(n);
        if p.exists() {
            Ok(p)
        } else {
            Err(DataError::Missing(p.display().to_string()))
        }
    };
    let train = load_idx(f("train-images-idx3-ubyte")?, f("train-labels-idx1-ubyte")?)?;
    let test = load_idx(f("t10k-images-idx3-ubyte")?, f("t10k-labels-idx1-ubyte")?)?;
    Ok((train, test))
}

/// Per-step frames of a batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Frames {
    /// One `[B, ...]` frame presented at every step.
    Repeated { frame: Tensor, steps: usize },
    /// `[T, B, ...]`.
    PerStep(Tensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub frames: Frames,
    pub labels: Vec<usize>,
}

impl EncodedBatch {
    pub fn steps(&self) -> usize {
        match &self.frames {
            Frames::Repeated { steps, .. } => *steps,
            Frames::PerStep(t) => t.shape()[0],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }

    pub fn inputs(&self) -> StepInput<'_> {
        match &self.frames {
            Frames::Repeated { frame, steps } => StepInput::Repeated { frame, steps: *steps },
            Frames::PerStep(t) => StepInput::Sequence(t),
        }
    }

    /// The same batch with `steps` steps; only static batches can change length.
    pub fn with_steps(&self, steps: usize) -> Self {
        match &self.frames {
            Frames::Repeated { frame, .. } => Self {
                frames: Frames::Repeated {
                    frame: frame.clone(),
                    steps,
                },
                labels: self.labels.clone(),
            },
            Frames::PerStep(_) => self.clone(),
        }
    }

    /// The full `[T, B, ...]` input tensor.
    pub fn materialize(&self) -> Tensor {
        match &self.frames {
            Frames::Repeated { frame, steps } => Tensor::stack(&vec![frame.clone(); *steps]).unwrap(),
            Frames::PerStep(t) => t.clone(),
        }
    }
}

/// Presents `images` `[B, ...]` as constant input for `steps` steps.
pub fn direct_encode(images: &Tensor, labels: Vec<usize>, steps: usize) -> EncodedBatch {
    EncodedBatch {
        frames: Frames::Repeated {
            frame: images.clone(),
            steps: steps.max(1),
        },
        labels,
    }
}

/// Bernoulli spike trains with class-dependent channel rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_size: usize,
    pub steps: usize,
    pub samples: usize,
    /// Rate of the channels in a class's own band.
    #[serde(default = "default_high")]
    pub high_rate: f32,
    /// Rate of every other channel.
    #[serde(default = "default_low")]
    pub low_rate: f32,
    /// Explicit `[class][channel]` rates, overriding the band profile.
    #[serde(default)]
    pub rates: Option<Vec<Vec<f32>>>,
    #[serde(default)]
    pub seed: u64,
}

fn default_high() -> f32 {
    0.6
}

fn default_low() -> f32 {
    0.05
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, input_size: usize, steps: usize, samples: usize, seed: u64) -> Self {
        Self {
            num_classes,
            input_size,
            steps,
            samples,
            high_rate: default_high(),
            low_rate: default_low(),
            rates: None,
            seed,
        }
    }

    /// `[class][channel]` firing probabilities. By default channel `c`
    /// belongs to class `c * K / N` and fires at `high_rate` for that class.
    pub fn rate_table(&self) -> Result<Vec<Vec<f32>>> {
        if self.num_classes == 0 || self.input_size == 0 || self.steps == 0 {
            return Err(DataError::InvalidSpec(
                "classes, input size and steps must be positive".into(),
            ));
        }
        let table = match &self.rates {
            Some(r) => {
                if r.len() != self.num_classes || r.iter().any(|row| row.len() != self.input_size) {
                    return Err(DataError::InvalidSpec(format!(
                        "rate table must be {} x {}",
                        self.num_classes, self.input_size
                    )));
                }
                r.clone()
            }
            None => (0..self.num_classes)
                .map(|k| {
                    (0..self.input_size)
                        .map(|c| {
                            if c * self.num_classes / self.input_size == k {
                                self.high_rate
                            } else {
                                self.low_rate
                            }
                        })
                        .collect()
                })
                .collect(),
        };
        if let Some(&bad) = table.iter().flatten().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(DataError::InvalidRate(bad));
        }
        Ok(table)
    }
}

/// Draws `[T, samples, input_size]` spike trains; sample `i` has class `i % K`.
pub fn synth_spikes(spec: &SyntheticSpec) -> Result<EncodedBatch> {
    let table = spec.rate_table()?;
    let (t, b, n) = (spec.steps, spec.samples, spec.input_size);
    let labels: Vec<usize> = (0..b).map(|i| i % spec.num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = vec![0.0f32; t * b * n];
    for step in 0..t {
        for (i, &label) in labels.iter().enumerate() {
            let row = &mut data[(step * b + i) * n..][..n];
            for (z, &r) in row.iter_mut().zip(&table[label]) {
                *z = if rng.gen::<f32>() < r { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(EncodedBatch {
        frames: Frames::PerStep(Tensor::new(vec![t, b, n], data)?),
        labels,
    })
}

pub fn event_tensor_bytes(batch: &EncodedBatch) -> Vec<u8> {
    let inputs = batch.materialize();
    let s = inputs.shape();
    let mut out = Vec::with_capacity(24 + 4 * (s.len() + batch.labels.len() + inputs.numel()));
    out.extend_from_slice(&EVENT_MAGIC);
    let mut put = |v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(EVENT_VERSION);
    put(s[0] as u32);
    put(s[1] as u32);
    put((s.len() - 2) as u32);
    for &d in &s[2..] {
        put(d as u32);
    }
    for &l in &batch.labels {
        put(l as u32);
    }
    for v in inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_event_tensor(path: impl AsRef<Path>, batch: &EncodedBatch) -> Result<()> {
    write(path.as_ref(), &event_tensor_bytes(batch))
}

pub fn parse_event_tensor(bytes: &[u8]) -> Result<EncodedBatch> {
    let short = |need: usize| DataError::SizeMismatch {
        detail: format!("header needs {need} bytes, file has {}", bytes.len()),
    };
    if bytes.len() < 4 {
        return Err(short(4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != EVENT_MAGIC {
        return Err(DataError::BadEventMagic(magic));
    }
    let le = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    if bytes.len() < 20 {
        return Err(short(20));
    }
    let version = le(4);
    if version != EVENT_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let (t, b, nd) = (le(8) as usize, le(12) as usize, le(16) as usize);
    let dims_end = 20 + 4 * nd;
    if bytes.len() < dims_end {
        return Err(short(dims_end));
    }
    let dims: Vec<usize> = (0..nd).map(|k| le(20 + 4 * k) as usize).collect();
    let labels_end = dims_end + 4 * b;
    if bytes.len() < labels_end {
        return Err(short(labels_end));
    }
    let labels: Vec<usize> = (0..b).map(|k| le(dims_end + 4 * k) as usize).collect();
    let n = t * b * dims.iter().product::<usize>();
    let expected = labels_end + 4 * n;
    if bytes.len() != expected {
        return Err(DataError::SizeMismatch {
            detail: format!("payload needs {expected} bytes in total, file has {}", bytes.len()),
        });
    }
    if t == 0 {
        return Err(DataError::SizeMismatch { detail: "zero time steps".into() });
    }
    let data = bytes[labels_end..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut shape = vec![t, b];
    shape.extend(dims);
    Ok(EncodedBatch {
        frames: Frames::PerStep(Tensor::new(shape, data)?),
        labels,
    })
}

pub fn load_event_tensor(path: impl AsRef<Path>) -> Result<EncodedBatch> {
    parse_event_tensor(&read(path.as_ref())?)
}

/// Sample order for `epoch`, drawn from the shuffle stream of `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
