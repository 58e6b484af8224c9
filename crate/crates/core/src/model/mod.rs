//! Layer stacks of conv/dense/pool/norm/dropout and LIF populations.
//!
//! A [`Model`] owns full-precision parameters. With weight quantization on,
//! each forward pass uses fake-quantized copies whose backward is the
//! identity, so optimizer updates land on the full-precision weights. With
//! state quantization on, every LIF layer snaps its membrane to a level grid
//! at every step.

mod checkpoint;
mod ptq;
mod spec;

pub use checkpoint::{load, save, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use ptq::{fake_quant_weights, ptq_convert, weight_levels, PtqTarget, PTQ_PASSTHROUGH_BITS};
pub use spec::{
    build_preset, LayerSpec, ModelSpec, PresetOverrides, StateQuantSpec, WeightQuantSpec,
    DEFAULT_DROPOUT,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::ErrorCategory;
use crate::neuron::{lif_step, LifNeuron, LifState, NeuronError, StateQuantizer};
use crate::quantizer::{straight_through, ObserverMode, QuantError, QuantGrid, RangeObserver};
use crate::tensor::{BatchNormStats, Graph, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown preset '{0}' (expected tiny, fmnist, shd or dvs)")]
    UnknownPreset(String),
    #[error("layer {layer}: expected input {expected}, got {got:?}")]
    Composition {
        layer: usize,
        expected: String,
        got: Vec<usize>,
    },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input frame shape {got:?} does not match model input [B, {expected:?}]")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("checkpoint: unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint is missing tensor '{0}'")]
    MissingTensor(String),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl ModelError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            ModelError::UnknownPreset(_) | ModelError::InvalidSpec(_) => ErrorCategory::Config,
            ModelError::Composition { .. } | ModelError::InputShape { .. } | ModelError::Tensor(_) => {
                ErrorCategory::Shape
            }
            ModelError::BadMagic(_)
            | ModelError::UnsupportedVersion(_)
            | ModelError::Truncated(_)
            | ModelError::Malformed(_)
            | ModelError::MissingTensor(_) => ErrorCategory::Format,
            ModelError::EmptyCalibration => ErrorCategory::Data,
            ModelError::Io { .. } => ErrorCategory::Io,
            ModelError::Neuron(NeuronError::NumericFault { .. }) => ErrorCategory::Numeric,
            ModelError::Neuron(_) => ErrorCategory::Shape,
            ModelError::Quant(_) => ErrorCategory::Config,
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Input to one forward pass over `T` steps.
#[derive(Clone, Copy, Debug)]
pub enum StepInput<'a> {
    /// The same frame `[B, ...]` at every step.
    Repeated { frame: &'a Tensor, steps: usize },
    /// One frame per step, `[T, B, ...]`.
    Sequence(&'a Tensor),
}

impl StepInput<'_> {
    pub fn steps(&self) -> usize {
        match self {
            StepInput::Repeated { steps, .. } => *steps,
            StepInput::Sequence(t) => t.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            StepInput::Repeated { frame, .. } => frame.shape().first().copied().unwrap_or(0),
            StepInput::Sequence(t) => t.shape().get(1).copied().unwrap_or(0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Dense {
        /// `[inputs, outputs]`
        weight: Tensor,
        bias: Tensor,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        stats: BatchNormStats,
    },
    Dropout {
        p: f32,
    },
    MaxPool {
        window: usize,
    },
    Flatten,
    Lif(LifNeuron),
}

impl Layer {
    fn is_stateless_in(&self, mode: Mode) -> bool {
        match self {
            Layer::Lif(_) => false,
            Layer::Dropout { p } => mode == Mode::Eval || *p == 0.0,
            _ => true,
        }
    }
}

/// Result of [`Model::forward`].
pub struct Forward {
    /// Output-layer spikes `[B, M]`, one per step.
    pub spikes: Vec<Var>,
    /// Output-layer membrane after quantization, before reset, one per step.
    pub membranes: Vec<Var>,
    /// Trainable parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    rng: ChaCha8Rng,
}

/// Stream id of the dropout generator, kept apart from initialization.
const DROPOUT_STREAM: u64 = 7;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Model {
    /// Initializes parameters from `spec.seed` with `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            layers.push(match *l {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let bound = 1.0 / ((in_channels * kernel * kernel) as f32).sqrt();
                    Layer::Conv {
                        weight: uniform(&mut init, &[out_channels, in_channels, kernel, kernel], bound),
                        bias: uniform(&mut init, &[out_channels], bound),
                        stride,
                        padding,
                    }
                }
                LayerSpec::Dense { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f32).sqrt();
                    Layer::Dense {
                        weight: uniform(&mut init, &[inputs, outputs], bound),
                        bias: uniform(&mut init, &[outputs], bound),
                    }
                }
                LayerSpec::BatchNorm { channels } => Layer::BatchNorm {
                    gamma: Tensor::full(&[channels], 1.0),
                    beta: Tensor::zeros(&[channels]),
                    stats: BatchNormStats::new(channels),
                },
                LayerSpec::Dropout { p } => Layer::Dropout { p },
                LayerSpec::MaxPool { window } => Layer::MaxPool { window },
                LayerSpec::Flatten => Layer::Flatten,
                LayerSpec::Lif(cfg) => {
                    let mut n = LifNeuron::new(cfg);
                    if let Some(sq) = spec.state_quant {
                        n.state_quant = Some(StateQuantizer::new(sq.grid, sq.training_observer()));
                    }
                    Layer::Lif(n)
                }
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(DROPOUT_STREAM);
        Ok(Self { spec, layers, rng })
    }

    pub(crate) fn from_parts(spec: ModelSpec, layers: Vec<Layer>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(DROPOUT_STREAM);
        Self { spec, layers, rng }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Trainable parameters with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push((format!("layers.{i}.weight"), weight));
                    out.push((format!("layers.{i}.bias"), bias));
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push((format!("layers.{i}.gamma"), gamma));
                    out.push((format!("layers.{i}.beta"), beta));
                }
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            match l {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::BatchNorm { gamma, beta, .. } => {
                    out.push(gamma);
                    out.push(beta);
                }
                _ => {}
            }
        }
        out
    }

    /// Conv and dense weight tensors (the ones weight quantization touches).
    pub fn weights_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv { weight, .. } | Layer::Dense { weight, .. } => Some(weight),
                _ => None,
            })
            .collect()
    }

    pub fn lif_layers(&self) -> impl Iterator<Item = &LifNeuron> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Lif(n) => Some(n),
            _ => None,
        })
    }

    pub fn lif_layers_mut(&mut self) -> impl Iterator<Item = &mut LifNeuron> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Lif(n) => Some(n),
            _ => None,
        })
    }

    /// Current state grids, keyed by layer index.
    pub fn state_grids(&self) -> Vec<(usize, &QuantGrid)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Layer::Lif(n) => n.state_quant.as_ref()?.grid().map(|g| (i, g)),
                _ => None,
            })
            .collect()
    }

    pub fn set_weight_quant(&mut self, wq: Option<WeightQuantSpec>) {
        self.spec.weight_quant = wq;
    }

    /// Attaches (or removes) state quantizers on every LIF layer, using the
    /// spec's training observer.
    pub fn set_state_quant(&mut self, sq: Option<StateQuantSpec>) {
        self.spec.state_quant = sq;
        for n in self.lif_layers_mut() {
            n.state_quant = sq.map(|s| StateQuantizer::new(s.grid, s.training_observer()));
        }
    }

    /// Puts every state quantizer back on its training observer.
    pub fn reset_state_observers(&mut self) {
        if let Some(sq) = self.spec.state_quant.filter(|s| s.observer != ObserverMode::Frozen) {
            for n in self.lif_layers_mut() {
                if let Some(q) = n.state_quant.as_mut() {
                    q.observer = sq.training_observer();
                }
            }
        }
    }

    /// One pass over `input`. In `Train` mode parameters are trainable leaves;
    /// in `Eval` mode they are constants.
    pub fn forward(&mut self, graph: &mut Graph, input: StepInput<'_>, mode: Mode) -> Result<Forward> {
        let steps = input.steps();
        if steps == 0 {
            return Err(NeuronError::NoSteps.into());
        }
        let frame_shape = match input {
            StepInput::Repeated { frame, .. } => frame.shape(),
            StepInput::Sequence(t) => &t.shape()[1..],
        };
        if frame_shape.len() != self.spec.input_shape.len() + 1 || frame_shape[1..] != self.spec.input_shape[..] {
            return Err(ModelError::InputShape {
                expected: self.spec.input_shape.clone(),
                got: frame_shape.to_vec(),
            });
        }

        let weight_bits = self.spec.weight_quant.map(|w| w.n_bits);
        let Model { layers, rng, .. } = self;

        // Parameter leaves are created once so gradients accumulate over steps.
        let mut params = Vec::new();
        let mut leaf = |graph: &mut Graph, t: &Tensor| {
            let v = match mode {
                Mode::Train => graph.param(t.clone()),
                Mode::Eval => graph.constant(t.clone()),
            };
            params.push(v);
            v
        };
        let mut bound: Vec<Option<(Var, Var)>> = Vec::with_capacity(layers.len());
        for l in layers.iter() {
            bound.push(match l {
                Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias } => {
                    let w = leaf(graph, weight);
                    let b = leaf(graph, bias);
                    let w = match weight_bits {
                        Some(bits) => {
                            let q = fake_quant_weights(graph.value(w), bits);
                            straight_through(graph, w, q)
                        }
                        None => w,
                    };
                    Some((w, b))
                }
                Layer::BatchNorm { gamma, beta, .. } => Some((leaf(graph, gamma), leaf(graph, beta))),
                _ => None,
            });
        }

        let mut states: Vec<LifState> = layers.iter().map(|_| LifState::new()).collect();
        let mut out = Forward {
            spikes: Vec::with_capacity(steps),
            membranes: Vec::with_capacity(steps),
            params,
        };

        // With a repeated frame, the leading stateless block sees identical
        // input at every step; evaluate it once.
        let (hoisted, start) = match input {
            StepInput::Repeated { frame, .. } => {
                let end = layers
                    .iter()
                    .position(|l| !l.is_stateless_in(mode))
                    .unwrap_or(layers.len());
                let x = graph.constant(frame.clone());
                let h = apply_range(graph, layers, &bound, &mut states, 0..end, x, mode, rng)?;
                if mode == Mode::Train {
                    for l in layers[..end].iter_mut() {
                        if let Layer::BatchNorm { stats, .. } = l {
                            stats.reapply_last(steps - 1);
                        }
                    }
                }
                (Some(h), end)
            }
            StepInput::Sequence(_) => (None, 0),
        };

        let last_lif = layers.iter().rposition(|l| matches!(l, Layer::Lif(_))).unwrap();
        let n_layers = layers.len();
        for t in 0..steps {
            let x = match (hoisted, input) {
                (Some(h), _) => h,
                (None, StepInput::Sequence(seq)) => graph.constant(seq.index_outer(t)?),
                (None, StepInput::Repeated { .. }) => unreachable!(),
            };
            let h = apply_range(graph, layers, &bound, &mut states, start..n_layers, x, mode, rng)?;
            out.spikes.push(h);
            out.membranes.push(states[last_lif].membrane().unwrap());
        }
        Ok(out)
    }

    /// Eval-mode forward that returns output spikes as a `[T, B, M]` tensor.
    pub fn infer(&mut self, input: StepInput<'_>) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, input, Mode::Eval)?;
        let parts: Vec<Tensor> = fwd.spikes.iter().map(|&v| g.value(v).clone()).collect();
        Ok(Tensor::stack(&parts)?)
    }

    /// Runs `batches` in eval mode and returns, per LIF layer, the union of
    /// the membrane ranges seen before quantization.
    pub fn record_membrane_ranges<'a>(
        &mut self,
        batches: impl IntoIterator<Item = StepInput<'a>>,
    ) -> Result<Vec<(f32, f32)>> {
        for n in self.lif_layers_mut() {
            n.recorder = Some(RangeObserver::calibration());
        }
        let mut seen = false;
        let mut result = Ok(());
        for b in batches {
            seen = true;
            if let Err(e) = self.infer(b) {
                result = Err(e);
                break;
            }
        }
        let bounds: Vec<Option<(f32, f32)>> = self
            .lif_layers_mut()
            .map(|n| n.recorder.take().and_then(|r| r.bounds()))
            .collect();
        result?;
        if !seen {
            return Err(ModelError::EmptyCalibration);
        }
        bounds
            .into_iter()
            .map(|b| b.ok_or(ModelError::EmptyCalibration))
            .collect()
    }

    /// Calibrates and freezes every state quantizer. Calibration runs with
    /// the quantizers on their training observers.
    pub fn calibrate_state_quant<'a>(
        &mut self,
        batches: impl IntoIterator<Item = StepInput<'a>>,
    ) -> Result<()> {
        self.reset_state_observers();
        let bounds = self.record_membrane_ranges(batches)?;
        for (n, (lo, hi)) in self.lif_layers_mut().zip(bounds) {
            let theta = n.config.theta;
            if let Some(q) = n.state_quant.as_mut() {
                q.freeze_to(lo, hi, theta)?;
            }
        }
        Ok(())
    }

    /// Copies parameter values (not observers or grids) from `other`.
    pub fn load_params_from(&mut self, other: &Model) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            match (dst, src) {
                (Layer::Conv { weight, bias, .. }, Layer::Conv { weight: w, bias: b, .. })
                | (Layer::Dense { weight, bias }, Layer::Dense { weight: w, bias: b }) => {
                    *weight = w.clone();
                    *bias = b.clone();
                }
                (
                    Layer::BatchNorm { gamma, beta, stats },
                    Layer::BatchNorm {
                        gamma: g,
                        beta: b,
                        stats: s,
                    },
                ) => {
                    *gamma = g.clone();
                    *beta = b.clone();
                    *stats = s.clone();
                }
                _ => {}
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_range(
    graph: &mut Graph,
    layers: &mut [Layer],
    bound: &[Option<(Var, Var)>],
    states: &mut [LifState],
    range: std::ops::Range<usize>,
    mut h: Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    for i in range {
        h = match &mut layers[i] {
            Layer::Conv { stride, padding, .. } => {
                let (w, b) = bound[i].unwrap();
                let y = graph.conv2d(h, w, *stride, *padding)?;
                graph.add_channel_bias(y, b)?
            }
            Layer::Dense { .. } => {
                let (w, b) = bound[i].unwrap();
                let y = graph.matmul(h, w)?;
                graph.add_bias(y, b)?
            }
            Layer::BatchNorm { stats, .. } => {
                let (g, b) = bound[i].unwrap();
                graph.batchnorm(h, g, b, stats, mode)?
            }
            Layer::Dropout { p } => graph.dropout(h, *p, mode, rng)?,
            Layer::MaxPool { window } => graph.maxpool2d(h, *window)?,
            Layer::Flatten => graph.flatten(h)?,
            Layer::Lif(n) => lif_step(graph, &mut states[i], h, n)?,
        };
    }
    Ok(h)
}
