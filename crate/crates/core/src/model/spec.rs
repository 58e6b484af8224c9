use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::neuron::LifConfig;
use crate::quantizer::{GridSpec, ObserverMode, RangeObserver};

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Dropout {
        p: f32,
    },
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Lif(LifConfig),
}

impl LayerSpec {
    /// Per-sample output shape for per-sample input shape `input`.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>, ModelError> {
        let bad = |expected: String| ModelError::Composition {
            layer: index,
            expected,
            got: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = input else {
                    return Err(bad(format!("[{in_channels}, H, W]")));
                };
                if *c != in_channels || stride == 0 || kernel > h + 2 * padding || kernel > w + 2 * padding {
                    return Err(bad(format!("[{in_channels}, H >= {kernel}, W >= {kernel}]")));
                }
                let out = |s: usize| (s + 2 * padding - kernel) / stride + 1;
                Ok(vec![out_channels, out(*h), out(*w)])
            }
            LayerSpec::MaxPool { window } => {
                let [c, h, w] = input else {
                    return Err(bad("[C, H, W]".into()));
                };
                if window == 0 || h % window != 0 || w % window != 0 {
                    return Err(bad(format!("spatial dims divisible by {window}")));
                }
                Ok(vec![*c, h / window, w / window])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return Err(bad(format!("[{channels}, ...]")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(ModelError::InvalidSpec(format!("layer {index}: dropout p {p} outside [0, 1)")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(bad(format!("[{inputs}]")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Lif(cfg) => {
                cfg.validate()
                    .map_err(|e| ModelError::InvalidSpec(format!("layer {index}: {e}")))?;
                Ok(input.to_vec())
            }
        }
    }
}

/// Per-tensor symmetric weight fake-quantization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightQuantSpec {
    pub n_bits: u8,
}

/// Membrane quantization applied to every LIF layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateQuantSpec {
    pub grid: GridSpec,
    /// Observer used while training; evaluation always uses frozen bounds.
    pub observer: ObserverMode,
    /// Fixed `[u_min, u_max]` for a frozen training observer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<[f32; 2]>,
}

impl StateQuantSpec {
    pub fn new(grid: GridSpec, observer: ObserverMode) -> Self {
        Self {
            grid,
            observer,
            clip: None,
        }
    }

    /// The observer a freshly attached quantizer starts with. A frozen mode
    /// without `clip` has no bounds and fails on first use.
    pub fn training_observer(&self) -> RangeObserver {
        match (self.observer, self.clip) {
            (ObserverMode::Frozen, Some([lo, hi])) => RangeObserver::frozen(lo, hi),
            (mode, _) => RangeObserver::new(mode),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub weight_quant: Option<WeightQuantSpec>,
    #[serde(default)]
    pub state_quant: Option<StateQuantSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    /// Checks that layer shapes compose and returns the per-layer output shapes.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::InvalidSpec("model has no layers".into()));
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Lif(_))) {
            return Err(ModelError::InvalidSpec("the output layer must be LIF".into()));
        }
        if let Some(wq) = self.weight_quant {
            if !(2..=16).contains(&wq.n_bits) {
                return Err(ModelError::InvalidSpec(format!(
                    "weight n_bits {} outside 2..=16",
                    wq.n_bits
                )));
            }
        }
        if let Some(sq) = self.state_quant {
            if !(1..=16).contains(&sq.grid.n_bits) {
                return Err(ModelError::InvalidSpec(format!(
                    "state n_bits {} outside 1..=16",
                    sq.grid.n_bits
                )));
            }
        }
        let mut shape = self.input_shape.clone();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(i, &shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    pub fn output_size(&self) -> Result<usize, ModelError> {
        Ok(self.validate()?.last().unwrap().iter().product())
    }

    pub fn input_size(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Knobs applied on top of a preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresetOverrides {
    #[serde(default)]
    pub beta: Option<f32>,
    #[serde(default)]
    pub theta: Option<f32>,
    #[serde(default)]
    pub alpha: Option<f32>,
    /// Hidden width of the `tiny` preset.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub dropout: Option<f32>,
    /// Input features for the dense presets (`tiny`, `shd`).
    #[serde(default)]
    pub inputs: Option<usize>,
    #[serde(default)]
    pub classes: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

pub const DEFAULT_DROPOUT: f32 = 0.25;

/// Architecture presets: `fmnist`, `shd`, `dvs`, and the reduced `tiny`.
pub fn build_preset(name: &str, o: &PresetOverrides) -> Result<ModelSpec, ModelError> {
    let lif = LayerSpec::Lif(LifConfig {
        beta: o.beta.unwrap_or(0.9),
        theta: o.theta.unwrap_or(1.0),
        alpha: o.alpha.unwrap_or(2.0),
    });
    let p = o.dropout.unwrap_or(DEFAULT_DROPOUT);
    let conv = |i, o| LayerSpec::Conv {
        in_channels: i,
        out_channels: o,
        kernel: 5,
        stride: 1,
        padding: 0,
    };
    let (input_shape, layers) = match name {
        "tiny" => {
            let inputs = o.inputs.unwrap_or(784);
            let hidden = o.hidden.unwrap_or(128);
            let classes = o.classes.unwrap_or(10);
            (
                vec![inputs],
                vec![
                    LayerSpec::Dense { inputs, outputs: hidden },
                    lif.clone(),
                    LayerSpec::Dense { inputs: hidden, outputs: classes },
                    lif,
                ],
            )
        }
        "fmnist" => (
            vec![1, 28, 28],
            vec![
                conv(1, 16),
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::MaxPool { window: 2 },
                lif.clone(),
                conv(16, 64),
                LayerSpec::BatchNorm { channels: 64 },
                LayerSpec::MaxPool { window: 2 },
                lif.clone(),
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 1024,
                    outputs: o.classes.unwrap_or(10),
                },
                lif,
            ],
        ),
        "shd" => {
            let inputs = o.inputs.unwrap_or(700);
            let classes = o.classes.unwrap_or(20);
            (
                vec![inputs],
                vec![
                    LayerSpec::Dense { inputs, outputs: 1000 },
                    LayerSpec::BatchNorm { channels: 1000 },
                    lif.clone(),
                    LayerSpec::Dropout { p },
                    LayerSpec::Dense { inputs: 1000, outputs: classes },
                    LayerSpec::BatchNorm { channels: classes },
                    lif,
                ],
            )
        }
        // 2x56x112 event frames flatten to 32 * 11 * 25 = 8800 features.
        "dvs" => (
            vec![2, 56, 112],
            vec![
                conv(2, 16),
                LayerSpec::BatchNorm { channels: 16 },
                LayerSpec::MaxPool { window: 2 },
                lif.clone(),
                conv(16, 32),
                LayerSpec::BatchNorm { channels: 32 },
                LayerSpec::MaxPool { window: 2 },
                lif.clone(),
                LayerSpec::Flatten,
                LayerSpec::Dropout { p },
                LayerSpec::Dense {
                    inputs: 8800,
                    outputs: o.classes.unwrap_or(11),
                },
                lif,
            ],
        ),
        other => return Err(ModelError::UnknownPreset(other.to_string())),
    };
    let spec = ModelSpec {
        name: name.to_string(),
        input_shape,
        layers,
        weight_quant: None,
        state_quant: None,
        seed: o.seed.unwrap_or(0),
    };
    spec.validate()?;
    Ok(spec)
}
