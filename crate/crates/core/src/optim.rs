//! Adam and the cosine learning-rate schedule.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("numeric fault: NaN gradient for parameter {param}")]
    NanGradient { param: usize },
    #[error("parameter {param}: gradient shape {grad:?} does not match {param_shape:?}")]
    ShapeMismatch {
        param: usize,
        param_shape: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("schedule step {step} beyond horizon {total}")]
    StepBeyondHorizon { step: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    shapes: Vec<Vec<usize>>,
    t: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            shapes: Vec::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update at learning rate `lr`. Nothing is modified if any
    /// gradient is NaN or mis-shaped.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(OptimError::ParamCount {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.t > 0 && self.shapes.len() != params.len() {
            return Err(OptimError::ParamCount {
                expected: self.shapes.len(),
                got: params.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || (self.t > 0 && self.shapes[i] != p.shape()) {
                return Err(OptimError::ShapeMismatch {
                    param: i,
                    param_shape: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if g.has_nan() {
                return Err(OptimError::NanGradient { param: i });
            }
        }
        if self.t == 0 {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
        }
        self.t += 1;
        let (b1, b2) = (self.beta1 as f64, self.beta2 as f64);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = (b1 * *m as f64 + (1.0 - b1) * g as f64) as f32;
                *v = (b2 * *v as f64 + (1.0 - b2) * (g as f64) * (g as f64)) as f32;
                let mhat = *m as f64 / c1;
                let vhat = *v as f64 / c2;
                *w = (*w as f64 - lr as f64 * mhat / (vhat.sqrt() + self.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f32, lr_min: f32) -> Result<f32> {
    if step > total_steps {
        return Err(OptimError::StepBeyondHorizon {
            step,
            total: total_steps,
        });
    }
    if total_steps == 0 {
        return Ok(lr_max);
    }
    let c = (std::f64::consts::PI * step as f64 / total_steps as f64).cos();
    let (hi, lo) = (lr_max as f64, lr_min as f64);
    Ok((lo + 0.5 * (hi - lo) * (1.0 + c)) as f32)
}
