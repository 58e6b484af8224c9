//! Losses on output spike trains and the spike-count accuracy metric.
//!
//! Graph losses take one `[B, M]` spike var per step. Tensor helpers take a
//! stacked `[T, B, M]` record.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{labels} labels for a batch of {batch}")]
    BatchMismatch { labels: usize, batch: usize },
    #[error("spike record has no steps")]
    NoSteps,
    #[error("invalid targets: {0}")]
    InvalidTargets(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross entropy with total spike counts as logits.
    #[default]
    CeCount,
    /// Cross entropy applied to each step's spikes, summed over steps.
    CeRate,
    /// Squared error against per-step target rates.
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "ce_count" | "ce" => Ok(LossKind::CeCount),
            "ce_rate" => Ok(LossKind::CeRate),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss '{other}'")),
        }
    }
}

/// Per-step firing targets for the squared-error loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeCountTargets {
    pub correct_rate: f32,
    pub incorrect_rate: f32,
}

impl Default for SpikeCountTargets {
    fn default() -> Self {
        Self {
            correct_rate: 1.0,
            incorrect_rate: 0.0,
        }
    }
}

impl SpikeCountTargets {
    pub fn new(correct_rate: f32, incorrect_rate: f32) -> Result<Self> {
        let t = Self {
            correct_rate,
            incorrect_rate,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.correct_rate > 0.0
            && self.correct_rate <= 1.0
            && self.incorrect_rate >= 0.0
            && self.incorrect_rate < 1.0
            && self.correct_rate > self.incorrect_rate;
        if ok {
            Ok(())
        } else {
            Err(LossError::InvalidTargets(format!(
                "correct {} / incorrect {}",
                self.correct_rate, self.incorrect_rate
            )))
        }
    }
}

fn check_labels(batch: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != batch {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch,
        });
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(LossError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

fn batch_classes(graph: &Graph, spikes: &[Var]) -> Result<(usize, usize)> {
    let first = spikes.first().ok_or(LossError::NoSteps)?;
    match *graph.shape(*first) {
        [b, m] => Ok((b, m)),
        ref s => Err(TensorError::Invalid(format!("spikes must be [B, M], got {s:?}")).into()),
    }
}

/// Sum of per-step spikes on the tape, `[B, M]`.
pub fn spike_count_var(graph: &mut Graph, spikes: &[Var]) -> Result<Var> {
    let mut acc = *spikes.first().ok_or(LossError::NoSteps)?;
    for &s in &spikes[1..] {
        acc = graph.add(acc, s)?;
    }
    Ok(acc)
}

/// Batch mean of `-log softmax(sum_t z_t)[label]`.
pub fn ce_spike_count_loss(graph: &mut Graph, spikes: &[Var], labels: &[usize]) -> Result<Var> {
    let (b, m) = batch_classes(graph, spikes)?;
    check_labels(b, m, labels)?;
    let counts = spike_count_var(graph, spikes)?;
    Ok(graph.softmax_cross_entropy(counts, labels)?)
}

/// Sum over steps of the batch-mean cross entropy of each step's spikes.
pub fn ce_rate_loss(graph: &mut Graph, spikes: &[Var], labels: &[usize]) -> Result<Var> {
    let (b, m) = batch_classes(graph, spikes)?;
    check_labels(b, m, labels)?;
    let mut total: Option<Var> = None;
    for &s in spikes {
        let l = graph.softmax_cross_entropy(s, labels)?;
        total = Some(match total {
            Some(t) => graph.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

fn target_tensor(b: usize, m: usize, labels: &[usize], t: SpikeCountTargets) -> Tensor {
    Tensor::from_fn(&[b, m], |i| {
        if labels[i / m] == i % m {
            t.correct_rate
        } else {
            t.incorrect_rate
        }
    })
}

/// `sum_t sum_j (c_j - z_t[j])^2`, averaged over the batch.
pub fn mse_spike_loss(
    graph: &mut Graph,
    spikes: &[Var],
    labels: &[usize],
    targets: SpikeCountTargets,
) -> Result<Var> {
    let (b, m) = batch_classes(graph, spikes)?;
    check_labels(b, m, labels)?;
    targets.validate()?;
    let target = target_tensor(b, m, labels, targets);
    let scale = 1.0 / b as f32;
    let mut total: Option<Var> = None;
    for &s in spikes {
        let l = graph.squared_error(s, &target, scale)?;
        total = Some(match total {
            Some(t) => graph.add(t, l)?,
            None => l,
        });
    }
    Ok(total.unwrap())
}

impl LossKind {
    pub fn apply(
        self,
        graph: &mut Graph,
        spikes: &[Var],
        labels: &[usize],
        targets: SpikeCountTargets,
    ) -> Result<Var> {
        match self {
            LossKind::CeCount => ce_spike_count_loss(graph, spikes, labels),
            LossKind::CeRate => ce_rate_loss(graph, spikes, labels),
            LossKind::Mse => mse_spike_loss(graph, spikes, labels, targets),
        }
    }
}

/// Spike counts `[B, M]` of a `[T, B, M]` record.
pub fn spike_counts(spikes: &Tensor) -> Result<Tensor> {
    let [t, b, m] = *spikes.shape() else {
        return Err(TensorError::Invalid(format!("spikes must be [T, B, M], got {:?}", spikes.shape())).into());
    };
    if t == 0 {
        return Err(LossError::NoSteps);
    }
    let mut out = vec![0.0f32; b * m];
    for step in spikes.data().chunks(b * m) {
        for (o, &z) in out.iter_mut().zip(step) {
            *o += z;
        }
    }
    Ok(Tensor::new(vec![b, m], out)?)
}

/// Predicted class per sample: argmax of spike count, ties to the lowest index.
pub fn predictions(spikes: &Tensor) -> Result<Vec<usize>> {
    let counts = spike_counts(spikes)?;
    let m = counts.shape()[1];
    Ok(counts
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy(spikes: &Tensor, labels: &[usize]) -> Result<f64> {
    let pred = predictions(spikes)?;
    if pred.len() != labels.len() {
        return Err(LossError::BatchMismatch {
            labels: labels.len(),
            batch: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(correct(&pred, labels) as f64 / pred.len() as f64)
}

pub(crate) fn correct(pred: &[usize], labels: &[usize]) -> usize {
    pred.iter().zip(labels).filter(|(p, l)| p == l).count()
}
