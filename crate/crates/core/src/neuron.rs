//! Discrete-time leaky integrate-and-fire neurons.
//!
//! One step: `u' = beta * u + I`, optionally `u' <- quantize(u')`, then
//! `z = [u' > theta]` and the stored state becomes `u' - z * theta`. The spike
//! is a hard step going forward and an arc-tangent surrogate going backward.
//! The reset term uses a detached copy of `z`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{quantize_var, GridSpec, ObserverMode, QuantError, QuantGrid, RangeObserver};
use crate::tensor::{BackwardRule, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuronError {
    #[error("invalid LIF parameters: {0}")]
    InvalidConfig(String),
    #[error("lif_step: input shape {input:?} does not match state shape {state:?}")]
    ShapeMismatch { input: Vec<usize>, state: Vec<usize> },
    #[error("numeric fault: NaN in membrane potential at step {step}")]
    NumericFault { step: usize },
    #[error("unroll needs at least one time step")]
    NoSteps,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifConfig {
    pub beta: f32,
    pub theta: f32,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
}

fn default_alpha() -> f32 {
    2.0
}

impl Default for LifConfig {
    fn default() -> Self {
        Self {
            beta: 0.9,
            theta: 1.0,
            alpha: default_alpha(),
        }
    }
}

impl LifConfig {
    pub fn new(beta: f32, theta: f32, alpha: f32) -> Result<Self, NeuronError> {
        let c = Self { beta, theta, alpha };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(NeuronError::InvalidConfig(format!("beta {} not in (0, 1)", self.beta)));
        }
        if !(self.theta > 0.0) {
            return Err(NeuronError::InvalidConfig(format!("theta {} must be > 0", self.theta)));
        }
        if !(self.alpha > 0.0) {
            return Err(NeuronError::InvalidConfig(format!("alpha {} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// `(1/pi) / (1 + (pi * x * alpha)^2)` for threshold-shifted membrane `x`.
pub fn arctan_surrogate(x: f64, alpha: f64) -> f64 {
    let s = PI * x * alpha;
    (1.0 / PI) / (1.0 + s * s)
}

/// Element-wise [`arctan_surrogate`].
pub fn surrogate_grad(u_centered: &Tensor, alpha: f32) -> Tensor {
    u_centered.map(|x| arctan_surrogate(x as f64, alpha as f64) as f32)
}

/// Heaviside forward, arc-tangent surrogate backward.
struct ArcTanSpike {
    theta: f32,
    alpha: f32,
}

impl BackwardRule for ArcTanSpike {
    fn name(&self) -> &'static str {
        "arctan_spike"
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _: &Tensor) -> Vec<Option<Tensor>> {
        let u = inputs[0];
        let d = upstream
            .data()
            .iter()
            .zip(u.data())
            .map(|(&g, &u)| g * arctan_surrogate((u - self.theta) as f64, self.alpha as f64) as f32)
            .collect();
        vec![Some(Tensor::new(u.shape().to_vec(), d).unwrap())]
    }
}

/// `z = [u > theta]` with surrogate gradient.
pub fn spike(graph: &mut Graph, u: Var, theta: f32, alpha: f32) -> Var {
    let z = graph.value(u).map(|v| if v > theta { 1.0 } else { 0.0 });
    graph.custom(&[u], z, Box::new(ArcTanSpike { theta, alpha }))
}

/// Membrane quantization attached to one LIF layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StateQuantizer {
    pub spec: GridSpec,
    pub observer: RangeObserver,
    grid: Option<QuantGrid>,
}

impl StateQuantizer {
    pub fn new(spec: GridSpec, observer: RangeObserver) -> Self {
        Self {
            spec,
            observer,
            grid: None,
        }
    }

    /// Quantizer with bounds fixed to an existing grid.
    pub fn frozen(spec: GridSpec, grid: QuantGrid) -> Self {
        Self {
            spec,
            observer: RangeObserver::frozen(grid.u_min(), grid.u_max()),
            grid: Some(grid),
        }
    }

    pub fn grid(&self) -> Option<&QuantGrid> {
        self.grid.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.observer.mode() == ObserverMode::Frozen
    }

    /// Sets new frozen bounds and builds their grid.
    pub fn freeze_to(&mut self, u_min: f32, u_max: f32, theta: f32) -> Result<(), QuantError> {
        let grid = self.spec.build(u_min, u_max, theta)?;
        self.observer = RangeObserver::frozen(grid.u_min(), grid.u_max());
        self.grid = Some(grid);
        Ok(())
    }

    pub fn apply(&mut self, graph: &mut Graph, u: Var, theta: f32) -> Result<Var, QuantError> {
        let reuse = self.is_frozen() && self.grid.is_some();
        if !reuse {
            let (lo, hi) = self.observer.observe(graph.value(u))?;
            self.grid = Some(self.spec.build(lo, hi, theta)?);
        }
        Ok(quantize_var(graph, u, self.grid.as_ref().unwrap()))
    }
}

/// One LIF population: parameters, optional state quantizer, and an
/// optional recorder of pre-quantization membrane extremes.
#[derive(Clone, Debug, PartialEq)]
pub struct LifNeuron {
    pub config: LifConfig,
    pub state_quant: Option<StateQuantizer>,
    pub recorder: Option<RangeObserver>,
}

impl LifNeuron {
    pub fn new(config: LifConfig) -> Self {
        Self {
            config,
            state_quant: None,
            recorder: None,
        }
    }

    pub fn with_state_quant(mut self, q: StateQuantizer) -> Self {
        self.state_quant = Some(q);
        self
    }
}

/// Membrane state of one layer across a sequence. Starts at zero.
#[derive(Clone, Debug, Default)]
pub struct LifState {
    u: Option<Var>,
    membrane: Option<Var>,
    step: usize,
}

impl LifState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stored (post-reset) state.
    pub fn u(&self) -> Option<Var> {
        self.u
    }

    /// Membrane after integration and quantization in the last step, before
    /// the reset.
    pub fn membrane(&self) -> Option<Var> {
        self.membrane
    }

    pub fn steps(&self) -> usize {
        self.step
    }
}

/// Advances `state` one step under `input_current` and returns the spikes.
pub fn lif_step(
    graph: &mut Graph,
    state: &mut LifState,
    input_current: Var,
    neuron: &mut LifNeuron,
) -> Result<Var, NeuronError> {
    let cfg = neuron.config;
    let integrated = match state.u {
        None => input_current,
        Some(u) => {
            if graph.shape(u) != graph.shape(input_current) {
                return Err(NeuronError::ShapeMismatch {
                    input: graph.shape(input_current).to_vec(),
                    state: graph.shape(u).to_vec(),
                });
            }
            graph.axpy(cfg.beta, u, input_current)?
        }
    };
    if graph.value(integrated).has_nan() {
        return Err(NeuronError::NumericFault { step: state.step });
    }
    if let Some(rec) = neuron.recorder.as_mut() {
        rec.observe(graph.value(integrated))?;
    }
    let membrane = match neuron.state_quant.as_mut() {
        Some(q) => q.apply(graph, integrated, cfg.theta)?,
        None => integrated,
    };
    let z = spike(graph, membrane, cfg.theta, cfg.alpha);
    let z_detached = graph.detach(z);
    state.u = Some(graph.axpy(-cfg.theta, z_detached, membrane)?);
    state.membrane = Some(membrane);
    state.step += 1;
    Ok(z)
}

/// Dense synapses feeding one LIF population.
pub struct DenseLif<'a> {
    pub weight: Var,
    pub bias: Option<Var>,
    pub neuron: &'a mut LifNeuron,
}

/// Output of [`unroll`]: per-step spikes and membranes of the last layer.
pub struct Unrolled {
    pub spikes: Vec<Var>,
    pub membranes: Vec<Var>,
}

/// Runs a stack of dense LIF layers over `input_sequence` on one tape, so
/// that backward is BPTT over every step. States start at zero.
pub fn unroll(
    graph: &mut Graph,
    input_sequence: &[Var],
    stack: &mut [DenseLif<'_>],
) -> Result<Unrolled, NeuronError> {
    if input_sequence.is_empty() {
        return Err(NeuronError::NoSteps);
    }
    let mut states: Vec<LifState> = stack.iter().map(|_| LifState::new()).collect();
    let mut out = Unrolled {
        spikes: Vec::with_capacity(input_sequence.len()),
        membranes: Vec::with_capacity(input_sequence.len()),
    };
    for &x in input_sequence {
        let mut h = x;
        for (layer, state) in stack.iter_mut().zip(states.iter_mut()) {
            let mut current = graph.matmul(h, layer.weight)?;
            if let Some(b) = layer.bias {
                current = graph.add_bias(current, b)?;
            }
            h = lif_step(graph, state, current, layer.neuron)?;
        }
        out.spikes.push(h);
        out.membranes.push(states.last().unwrap().membrane().unwrap());
    }
    Ok(out)
}
