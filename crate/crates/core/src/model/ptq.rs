use serde::{Deserialize, Serialize};

use super::{Layer, Model, ModelError, Result, StateQuantSpec, StepInput};
use crate::neuron::StateQuantizer;
use crate::quantizer::{GridSpec, ObserverMode, RangeObserver};
use crate::tensor::Tensor;

/// Bit widths at or above this leave weights untouched.
pub const PTQ_PASSTHROUGH_BITS: u8 = 32;

fn qmax(n_bits: u8) -> f64 {
    ((1u64 << (n_bits - 1)) - 1) as f64
}

/// Per-tensor symmetric fake quantization.
///
/// Codes are `round(w * qmax / max|w|)` clamped to `[-qmax, qmax]` with
/// `qmax = 2^(n-1) - 1`, mapped back as `code * max|w| / qmax`. The largest
/// magnitude therefore maps to itself and the result is idempotent. An
/// all-zero tensor stays zero.
///
/// # Panics
/// If `n_bits < 2` (there would be no nonzero code).
pub fn fake_quant_weights(w: &Tensor, n_bits: u8) -> Tensor {
    assert!(n_bits >= 2, "weight quantization needs at least 2 bits");
    if n_bits >= PTQ_PASSTHROUGH_BITS {
        return w.clone();
    }
    let max = w.data().iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    if max == 0.0 {
        return Tensor::zeros(w.shape());
    }
    let q = qmax(n_bits);
    w.map(|v| {
        let code = (v as f64 * q / max).round().clamp(-q, q);
        (code * max / q) as f32
    })
}

/// Every value [`fake_quant_weights`] can produce for `w`, ascending.
pub fn weight_levels(w: &Tensor, n_bits: u8) -> Vec<f32> {
    let max = w.data().iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    if max == 0.0 {
        return vec![0.0];
    }
    let q = qmax(n_bits);
    let qi = q as i64;
    (-qi..=qi).map(|c| (c as f64 * max / q) as f32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PtqTarget {
    Weights,
    States,
    Both,
}

impl std::str::FromStr for PtqTarget {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weights" => Ok(PtqTarget::Weights),
            "states" => Ok(PtqTarget::States),
            "both" => Ok(PtqTarget::Both),
            other => Err(format!("unknown PTQ target '{other}' (weights, states or both)")),
        }
    }
}

impl PtqTarget {
    pub fn weights(self) -> bool {
        matches!(self, PtqTarget::Weights | PtqTarget::Both)
    }

    pub fn states(self) -> bool {
        matches!(self, PtqTarget::States | PtqTarget::Both)
    }
}

/// Post-training quantization of a trained model; nothing is retrained.
///
/// Weights are replaced by their fake-quantized values. For states, one
/// eval pass over `calib` records each LIF layer's membrane extremes with
/// state quantization off (but with the already-quantized weights), then a
/// frozen grid is attached per layer.
pub fn ptq_convert<'a>(
    source: &Model,
    target: PtqTarget,
    weight_bits: u8,
    state_grid: GridSpec,
    calib: impl IntoIterator<Item = StepInput<'a>>,
) -> Result<Model> {
    let mut m = source.clone();
    if target.weights() {
        if weight_bits < 2 {
            return Err(ModelError::InvalidSpec(format!("weight n_bits {weight_bits} below 2")));
        }
        for w in m.weights_mut() {
            *w = fake_quant_weights(w, weight_bits);
        }
        m.spec.weight_quant = None;
    }
    if target.states() {
        m.set_state_quant(None);
        let bounds = m.record_membrane_ranges(calib)?;
        for (layer, (lo, hi)) in m.layers.iter_mut().filter(|l| matches!(l, Layer::Lif(_))).zip(bounds) {
            let Layer::Lif(n) = layer else { unreachable!() };
            let mut q = StateQuantizer::new(state_grid, RangeObserver::per_forward());
            q.freeze_to(lo, hi, n.config.theta)?;
            n.state_quant = Some(q);
        }
        m.spec.state_quant = Some(StateQuantSpec::new(state_grid, ObserverMode::Frozen));
    }
    Ok(m)
}
