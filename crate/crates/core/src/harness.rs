//! Experiment orchestration: configs, training runs, the quantization
//! matrix, and CSV reports.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{epoch_order, load_event_tensor, load_fashion_mnist, synth_spikes, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::loss::{correct, predictions, LossKind, SpikeCountTargets};
use crate::model::{
    build_preset, ptq_convert, Checkpoint, Model, ModelSpec, PresetOverrides, PtqTarget, StateQuantSpec,
    TrainingMeta, WeightQuantSpec,
};
use crate::optim::{cosine_lr, Adam};
use crate::quantizer::{GridSpec, ObserverMode, Scheme};
use crate::tensor::{Graph, Mode, Tensor};

pub const DATA_DIR_ENV: &str = "SQUAT_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Fp32,
    PtqW,
    PtqS,
    PtqWs,
    QatW,
    SquatS,
    QatSquat,
}

impl RunMode {
    pub const ALL: [RunMode; 7] = [
        RunMode::Fp32,
        RunMode::PtqW,
        RunMode::PtqS,
        RunMode::PtqWs,
        RunMode::QatW,
        RunMode::SquatS,
        RunMode::QatSquat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Fp32 => "fp32",
            RunMode::PtqW => "ptq_w",
            RunMode::PtqS => "ptq_s",
            RunMode::PtqWs => "ptq_ws",
            RunMode::QatW => "qat_w",
            RunMode::SquatS => "squat_s",
            RunMode::QatSquat => "qat_squat",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RunMode::Fp32 => "Full precision",
            RunMode::PtqW => "PTQ weights",
            RunMode::PtqS => "PTQ states",
            RunMode::PtqWs => "PTQ weights and states",
            RunMode::QatW => "QAT weights",
            RunMode::SquatS => "SQUAT states",
            RunMode::QatSquat => "QAT weights and SQUAT states",
        }
    }

    pub fn is_ptq(self) -> bool {
        matches!(self, RunMode::PtqW | RunMode::PtqS | RunMode::PtqWs)
    }

    pub fn quantizes_weights(self) -> bool {
        matches!(self, RunMode::PtqW | RunMode::PtqWs | RunMode::QatW | RunMode::QatSquat)
    }

    pub fn quantizes_states(self) -> bool {
        matches!(self, RunMode::PtqS | RunMode::PtqWs | RunMode::SquatS | RunMode::QatSquat)
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        RunMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    FashionMnist {
        /// Directory with the IDX files; falls back to `SQUAT_DATA_DIR`.
        #[serde(default)]
        dir: Option<PathBuf>,
        #[serde(default = "default_train_subset")]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    Synthetic {
        train: SyntheticSpec,
        test_samples: usize,
        #[serde(default)]
        test_seed: Option<u64>,
    },
    Events {
        train: PathBuf,
        test: PathBuf,
    },
}

fn default_train_subset() -> Option<usize> {
    Some(10_000)
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::FashionMnist {
            dir: None,
            train_subset: default_train_subset(),
            test_subset: None,
        }
    }
}

/// One cell of the experiment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetConfig,
    pub model: String,
    pub overrides: PresetOverrides,
    pub mode: RunMode,
    pub n_bits: u8,
    pub scheme: Scheme,
    /// Exponential grid ratio; `None` picks the default for `n_bits`.
    pub ratio: Option<f32>,
    /// Range observer used while training with state quantization.
    pub observer: ObserverMode,
    /// Fixed state bounds, used with the frozen observer.
    pub state_clip: Option<[f32; 2]>,
    pub epochs: usize,
    /// Stop after this many epochs without a new best test accuracy.
    pub patience: Option<usize>,
    pub trials: usize,
    /// Explicit trial seeds; empty means `0..trials`.
    pub seeds: Vec<u64>,
    pub lr: f32,
    pub lr_min: f32,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub steps_train: usize,
    pub steps_test: usize,
    pub loss: LossKind,
    pub targets: SpikeCountTargets,
    pub calibration_samples: usize,
    /// Full-precision checkpoint converted by the PTQ modes.
    pub source_checkpoint: Option<PathBuf>,
    /// Worker threads for matrix cells.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetConfig::default(),
            model: "tiny".into(),
            overrides: PresetOverrides::default(),
            mode: RunMode::Fp32,
            n_bits: 8,
            scheme: Scheme::Exponential,
            ratio: None,
            observer: ObserverMode::PerForward,
            state_clip: None,
            epochs: 3,
            patience: Some(20),
            trials: 1,
            seeds: Vec::new(),
            lr: 5e-4,
            lr_min: 0.0,
            batch_size: 128,
            eval_batch_size: 500,
            steps_train: 25,
            steps_test: 25,
            loss: LossKind::CeCount,
            targets: SpikeCountTargets::default(),
            calibration_samples: 1024,
            source_checkpoint: None,
            threads: 1,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_train == 0 || self.steps_test == 0 {
            return Err(cfg_err("steps_train and steps_test must be >= 1"));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(cfg_err("batch sizes must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_min < 0.0 || self.lr_min > self.lr {
            return Err(cfg_err(format!("need 0 <= lr_min <= lr, lr > 0 (lr {}, lr_min {})", self.lr, self.lr_min)));
        }
        if self.seeds.is_empty() && self.trials == 0 {
            return Err(cfg_err("trials must be >= 1"));
        }
        if self.mode.quantizes_weights() && !(2..=16).contains(&self.n_bits) {
            return Err(cfg_err(format!("weight n_bits {} outside 2..=16", self.n_bits)));
        }
        if self.mode.quantizes_states() && !(1..=16).contains(&self.n_bits) {
            return Err(cfg_err(format!("state n_bits {} outside 1..=16", self.n_bits)));
        }
        if self.mode.quantizes_states() && self.mode.is_ptq() && self.calibration_samples == 0 {
            return Err(cfg_err("PTQ of states needs calibration_samples >= 1"));
        }
        if self.mode.quantizes_states() && !self.mode.is_ptq() {
            match (self.observer, self.state_clip) {
                (ObserverMode::Frozen, None) => {
                    return Err(cfg_err("observer frozen needs state_clip [u_min, u_max]"))
                }
                (ObserverMode::Frozen, Some([lo, hi])) if !(lo < hi) => {
                    return Err(cfg_err(format!("state_clip [{lo}, {hi}] is empty")))
                }
                (ObserverMode::Frozen, _) => {}
                (_, Some(_)) => return Err(cfg_err("state_clip requires observer frozen")),
                _ => {}
            }
        }
        if let Some(r) = self.ratio {
            if !(r > 1.0) {
                return Err(cfg_err(format!("ratio {r} must be > 1")));
            }
        }
        self.targets.validate().map_err(|e| cfg_err(e.to_string()))?;
        build_preset(&self.model, &self.overrides)?;
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (0..self.trials as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn grid_spec(&self) -> GridSpec {
        GridSpec {
            ratio: self.ratio,
            ..GridSpec::new(self.n_bits, self.scheme)
        }
    }

    /// Model spec for `seed` with this config's training-time attachments.
    pub fn model_spec(&self, seed: u64) -> Result<ModelSpec> {
        let mut spec = build_preset(&self.model, &self.overrides)?;
        spec.seed = seed;
        if matches!(self.mode, RunMode::QatW | RunMode::QatSquat) {
            spec.weight_quant = Some(WeightQuantSpec { n_bits: self.n_bits });
        }
        if matches!(self.mode, RunMode::SquatS | RunMode::QatSquat) {
            spec.state_quant = Some(StateQuantSpec {
                clip: self.state_clip,
                ..StateQuantSpec::new(self.grid_spec(), self.observer)
            });
        }
        Ok(spec)
    }

    /// The same cell in another mode/bits/scheme.
    pub fn cell(&self, mode: RunMode, n_bits: u8, scheme: Scheme) -> Self {
        Self {
            mode,
            n_bits,
            scheme,
            ..self.clone()
        }
    }
}

/// Train, test and calibration splits, shaped for the model input.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub calib: Dataset,
}

/// Resolves the FashionMNIST directory from the config, `SQUAT_DATA_DIR`,
/// or `data/fashion-mnist`.
pub fn resolve_data_dir(dir: Option<&Path>) -> PathBuf {
    let root = dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"));
    if root.join("train-images-idx3-ubyte").exists() {
        root
    } else {
        root.join("fashion-mnist")
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<Prepared> {
    let spec = build_preset(&cfg.model, &cfg.overrides)?;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::FashionMnist {
            dir,
            train_subset,
            test_subset,
        } => {
            let (train, test) = load_fashion_mnist(resolve_data_dir(dir.as_deref()))?;
            let train = train_subset.map_or(train.clone(), |n| train.take(n));
            let test = test_subset.map_or(test.clone(), |n| test.take(n));
            (train, test)
        }
        DatasetConfig::Synthetic {
            train,
            test_samples,
            test_seed,
        } => {
            let tr = synth_spikes(train)?;
            let te = synth_spikes(&SyntheticSpec {
                samples: *test_samples,
                seed: test_seed.unwrap_or(train.seed.wrapping_add(1)),
                ..train.clone()
            })?;
            (
                Dataset::from_sequences(&tr.materialize(), tr.labels)?,
                Dataset::from_sequences(&te.materialize(), te.labels)?,
            )
        }
        DatasetConfig::Events { train, test } => {
            let tr = load_event_tensor(train)?;
            let te = load_event_tensor(test)?;
            (
                Dataset::from_sequences(&tr.materialize(), tr.labels)?,
                Dataset::from_sequences(&te.materialize(), te.labels)?,
            )
        }
    };
    let train = train.with_feature_shape(&spec.input_shape)?;
    let test = test.with_feature_shape(&spec.input_shape)?;
    if train.is_empty() || test.is_empty() {
        return Err(crate::data::DataError::Missing("empty train or test split".into()).into());
    }
    let calib = train.take(cfg.calibration_samples.max(1));
    Ok(Prepared { train, test, calib })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub layer: usize,
    pub scheme: Scheme,
    pub n_bits: u8,
    pub levels: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub mode: RunMode,
    /// `None` for full precision.
    pub n_bits: Option<u8>,
    /// `None` unless states are quantized.
    pub scheme: Option<Scheme>,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub epochs: Vec<EpochRecord>,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Evaluation of a converted model (PTQ cells).
    pub converted: Option<EvalRecord>,
    /// Parameter hash of the PTQ source, identical before and after conversion.
    pub source_param_hash: Option<u64>,
    pub wall_time_s: f64,
    pub grids: Vec<GridSnapshot>,
}

impl RunRecord {
    /// Headline accuracy: best test accuracy, or the converted model's.
    pub fn accuracy(&self) -> f64 {
        self.converted
            .as_ref()
            .map(|c| c.accuracy)
            .or(self.best_accuracy)
            .unwrap_or(0.0)
    }

    pub fn cell_key(&self) -> (RunMode, Option<u8>, Option<Scheme>) {
        (self.mode, self.n_bits, self.scheme)
    }
}

pub struct RunOutput {
    pub record: RunRecord,
    /// Best model (trained cells) or converted model (PTQ cells).
    pub checkpoint: Checkpoint,
}

fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    let mut id = format!("{}-{}", cfg.name, cfg.mode);
    if cfg.mode != RunMode::Fp32 {
        id.push_str(&format!("-{}b", cfg.n_bits));
    }
    if cfg.mode.quantizes_states() {
        id.push_str(&format!("-{}", cfg.scheme));
    }
    id.push_str(&format!("-s{seed}"));
    id
}

fn snapshots(model: &Model) -> Vec<GridSnapshot> {
    model
        .state_grids()
        .into_iter()
        .map(|(layer, g)| GridSnapshot {
            layer,
            scheme: g.scheme(),
            n_bits: g.n_bits(),
            levels: g.levels().to_vec(),
        })
        .collect()
}

/// Hash of every parameter and running statistic, bit for bit.
pub fn param_hash(model: &Model) -> u64 {
    let mut h = DefaultHasher::new();
    let ck = Checkpoint::from_model(model, TrainingMeta::default());
    for (name, t) in &ck.tensors {
        name.hash(&mut h);
        t.shape().hash(&mut h);
        for v in t.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn chunks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size).map(move |s| s..(s + size).min(n))
}

/// Eval-mode loss and accuracy over `data`.
pub fn evaluate(
    model: &mut Model,
    data: &Dataset,
    steps: usize,
    batch_size: usize,
    loss: LossKind,
    targets: SpikeCountTargets,
) -> Result<EvalRecord> {
    let (mut total_loss, mut hits) = (0.0f64, 0usize);
    for r in chunks(data.len(), batch_size) {
        let idx: Vec<usize> = r.collect();
        let batch = data.batch(&idx, steps)?;
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, batch.inputs(), Mode::Eval)?;
        let l = loss.apply(&mut g, &fwd.spikes, &batch.labels, targets)?;
        total_loss += g.value(l).data()[0] as f64 * idx.len() as f64;
        let spikes = Tensor::stack(&fwd.spikes.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>())?;
        hits += correct(&predictions(&spikes)?, &batch.labels);
    }
    let n = data.len().max(1) as f64;
    Ok(EvalRecord {
        loss: total_loss / n,
        accuracy: hits as f64 / n,
    })
}

fn calibrate(model: &mut Model, calib: &Dataset, steps: usize, batch_size: usize) -> Result<()> {
    let batches = chunks(calib.len(), batch_size)
        .map(|r| calib.batch(&r.collect::<Vec<_>>(), steps))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    model.calibrate_state_quant(batches.iter().map(|b| b.inputs()))?;
    Ok(())
}

/// Trains one cell with BPTT and early stopping on test accuracy.
pub fn train(cfg: &ExperimentConfig, seed: u64, data: &Prepared) -> Result<RunOutput> {
    if cfg.mode.is_ptq() {
        return Err(cfg_err(format!("mode {} converts a checkpoint; use ptq_run", cfg.mode)));
    }
    let start = Instant::now();
    let mut model = Model::new(cfg.model_spec(seed)?)?;
    let has_states = model.spec().state_quant.is_some();
    // Fixed training bounds are already the evaluation bounds.
    let fixed_states = cfg.observer == ObserverMode::Frozen;
    let mut adam = Adam::new();
    let n = data.train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut step = 0usize;
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    for epoch in 0..cfg.epochs {
        let order = epoch_order(n, seed, epoch);
        let (mut loss_sum, mut hits) = (0.0f64, 0usize);
        let mut lr = cfg.lr;
        for (b, r) in chunks(n, cfg.batch_size).enumerate() {
            let batch = data.train.batch(&order[r], cfg.steps_train)?;
            let mut g = Graph::new();
            let fwd = model.forward(&mut g, batch.inputs(), Mode::Train)?;
            let loss = cfg.loss.apply(&mut g, &fwd.spikes, &batch.labels, cfg.targets)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: b,
                    reason: format!("loss is {lv}"),
                });
            }
            let spikes = Tensor::stack(&fwd.spikes.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>())?;
            hits += correct(&predictions(&spikes)?, &batch.labels);
            loss_sum += lv as f64 * batch.labels.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Tensor> = fwd
                .params
                .iter()
                .map(|&v| g.grad(v).cloned().expect("trainable leaf has a gradient"))
                .collect();
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min)?;
            let mut params = model.params_mut();
            adam.step(&mut params, &grads.iter().collect::<Vec<_>>(), lr)
                .map_err(|e| Error::Diverged {
                    epoch,
                    step: b,
                    reason: e.to_string(),
                })?;
            step += 1;
        }
        if has_states && !fixed_states {
            calibrate(&mut model, &data.calib, cfg.steps_test, cfg.eval_batch_size)?;
        }
        let test = evaluate(&mut model, &data.test, cfg.steps_test, cfg.eval_batch_size, cfg.loss, cfg.targets)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: hits as f64 / n as f64,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
            lr: lr as f64,
        };
        log::info!(
            "{} epoch {epoch}: train loss {:.4} acc {:.4}, test loss {:.4} acc {:.4}",
            run_id(cfg, seed),
            rec.train_loss,
            rec.train_accuracy,
            rec.test_loss,
            rec.test_accuracy
        );
        epochs.push(rec);
        if best.as_ref().map_or(true, |(a, _, _)| test.accuracy > *a) {
            let meta = TrainingMeta {
                epoch,
                seed,
                ptq_weight_bits: None,
            };
            best = Some((test.accuracy, epoch, Checkpoint::from_model(&model, meta)));
        }
        if has_states {
            model.reset_state_observers();
        }
        let best_epoch = best.as_ref().unwrap().1;
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            log::info!("{}: early stop after epoch {epoch}", run_id(cfg, seed));
            break;
        }
    }
    let (best_accuracy, best_epoch, checkpoint) = match best {
        Some((a, e, c)) => (Some(a), Some(e), c),
        None => (
            None,
            None,
            Checkpoint::from_model(
                &model,
                TrainingMeta {
                    epoch: 0,
                    seed,
                    ptq_weight_bits: None,
                },
            ),
        ),
    };
    let grids = snapshots(&checkpoint.to_model()?);
    Ok(RunOutput {
        record: RunRecord {
            run_id: run_id(cfg, seed),
            mode: cfg.mode,
            n_bits: (cfg.mode != RunMode::Fp32).then_some(cfg.n_bits),
            scheme: cfg.mode.quantizes_states().then_some(cfg.scheme),
            seed,
            config: cfg.clone(),
            epochs,
            best_accuracy,
            best_epoch,
            converted: None,
            source_param_hash: None,
            wall_time_s: start.elapsed().as_secs_f64(),
            grids,
        },
        checkpoint,
    })
}

/// Converts `source` by post-training quantization and evaluates it.
pub fn ptq_run(cfg: &ExperimentConfig, seed: u64, source: &Checkpoint, data: &Prepared) -> Result<RunOutput> {
    let target = match cfg.mode {
        RunMode::PtqW => PtqTarget::Weights,
        RunMode::PtqS => PtqTarget::States,
        RunMode::PtqWs => PtqTarget::Both,
        m => return Err(cfg_err(format!("mode {m} is not a PTQ mode"))),
    };
    let start = Instant::now();
    let src = source.to_model()?;
    let before = param_hash(&src);
    let calib = chunks(data.calib.len(), cfg.eval_batch_size)
        .map(|r| data.calib.batch(&r.collect::<Vec<_>>(), cfg.steps_test))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut converted = ptq_convert(&src, target, cfg.n_bits, cfg.grid_spec(), calib.iter().map(|b| b.inputs()))?;
    if param_hash(&src) != before {
        return Err(cfg_err("PTQ modified its source parameters"));
    }
    let eval = evaluate(&mut converted, &data.test, cfg.steps_test, cfg.eval_batch_size, cfg.loss, cfg.targets)?;
    log::info!("{}: accuracy {:.4}", run_id(cfg, seed), eval.accuracy);
    let meta = TrainingMeta {
        epoch: source.meta.epoch,
        seed,
        ptq_weight_bits: target.weights().then_some(cfg.n_bits),
    };
    Ok(RunOutput {
        record: RunRecord {
            run_id: run_id(cfg, seed),
            mode: cfg.mode,
            n_bits: Some(cfg.n_bits),
            scheme: cfg.mode.quantizes_states().then_some(cfg.scheme),
            seed,
            config: cfg.clone(),
            epochs: Vec::new(),
            best_accuracy: None,
            best_epoch: None,
            converted: Some(eval),
            source_param_hash: Some(before),
            wall_time_s: start.elapsed().as_secs_f64(),
            grids: snapshots(&converted),
        },
        checkpoint: Checkpoint::from_model(&converted, meta),
    })
}

/// Runs `cfg` for every seed, loading `source_checkpoint` for PTQ modes.
pub fn run_trials(cfg: &ExperimentConfig, data: &Prepared) -> Result<Vec<RunOutput>> {
    let source = match (cfg.mode.is_ptq(), &cfg.source_checkpoint) {
        (true, Some(p)) => Some(crate::model::load(p)?),
        (true, None) => return Err(cfg_err(format!("mode {} needs source_checkpoint", cfg.mode))),
        _ => None,
    };
    cfg.seed_list()
        .into_iter()
        .map(|s| match &source {
            Some(src) => ptq_run(cfg, s, src, data),
            None => train(cfg, s, data),
        })
        .collect()
}

/// Matrix cells to run; modes without state quantization ignore `schemes`
/// and fp32 ignores `bits`.
pub fn matrix_cells(modes: &[RunMode], bits: &[u8], schemes: &[Scheme]) -> Vec<(RunMode, u8, Scheme)> {
    let mut cells = Vec::new();
    for &m in modes {
        if m == RunMode::Fp32 {
            cells.push((m, 32, Scheme::Uniform));
            continue;
        }
        for &b in bits {
            if m.quantizes_states() {
                for &s in schemes {
                    cells.push((m, b, s));
                }
            } else {
                cells.push((m, b, Scheme::Uniform));
            }
        }
    }
    cells.dedup();
    cells
}

fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let out: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= items.len() {
                    break;
                }
                *out[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    out.into_iter().map(|m| m.into_inner().unwrap().unwrap()).collect()
}

/// Runs the requested matrix for every seed. A full-precision baseline is
/// trained per seed first whenever fp32 or a PTQ mode is requested; PTQ
/// cells convert that baseline. Trial `k` of every cell shares data order
/// and initial weights.
pub fn run_matrix(
    base: &ExperimentConfig,
    modes: &[RunMode],
    bits: &[u8],
    schemes: &[Scheme],
    data: &Prepared,
) -> Result<Vec<RunOutput>> {
    let seeds = base.seed_list();
    let cells = matrix_cells(modes, bits, schemes);
    let needs_base = cells.iter().any(|c| c.0 == RunMode::Fp32 || c.0.is_ptq());
    let mut baselines: BTreeMap<u64, Checkpoint> = BTreeMap::new();
    let mut out = Vec::new();
    if needs_base {
        let fp = base.cell(RunMode::Fp32, 32, Scheme::Uniform);
        let runs = parallel_map(&seeds, base.threads, |&s| train(&fp, s, data));
        for (s, r) in seeds.iter().zip(runs) {
            let r = r?;
            baselines.insert(*s, r.checkpoint.clone());
            out.push(r);
        }
    }
    let jobs: Vec<(ExperimentConfig, u64)> = cells
        .iter()
        .filter(|c| c.0 != RunMode::Fp32)
        .flat_map(|&(m, b, sc)| seeds.iter().map(move |&s| (base.cell(m, b, sc), s)))
        .collect();
    let runs = parallel_map(&jobs, base.threads, |(cfg, s)| {
        if cfg.mode.is_ptq() {
            ptq_run(cfg, *s, &baselines[s], data)
        } else {
            train(cfg, *s, data)
        }
    });
    for r in runs {
        out.push(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: RunMode,
    pub bits: Option<u8>,
    pub scheme: Option<Scheme>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub trials: usize,
}

pub fn metric_rows(records: &[RunRecord]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for r in records {
        for e in &r.epochs {
            for (split, loss, accuracy) in [("train", e.train_loss, e.train_accuracy), ("test", e.test_loss, e.test_accuracy)] {
                rows.push(MetricRow {
                    run_id: r.run_id.clone(),
                    epoch: e.epoch,
                    split: split.into(),
                    loss,
                    accuracy,
                    lr: Some(e.lr),
                });
            }
        }
        if let Some(c) = &r.converted {
            rows.push(MetricRow {
                run_id: r.run_id.clone(),
                epoch: 0,
                split: "test".into(),
                loss: c.loss,
                accuracy: c.accuracy,
                lr: None,
            });
        }
    }
    rows
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// One row per cell, in mode, descending bits, scheme order.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(RunMode, std::cmp::Reverse<Option<u8>>, Option<Scheme>), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.mode, std::cmp::Reverse(r.n_bits), r.scheme))
            .or_default()
            .push(r.accuracy());
    }
    cells
        .into_iter()
        .map(|((mode, bits, scheme), accs)| {
            let (mean_acc, std_acc) = mean_std(&accs);
            SummaryRow {
                mode,
                bits: bits.0,
                scheme,
                mean_acc,
                std_acc,
                trials: accs.len(),
            }
        })
        .collect()
}

/// Mean-accuracy table for one state scheme: six quantized rows by bit
/// columns, plus the full-precision baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixTable {
    pub scheme: Scheme,
    pub bits: Vec<u8>,
    pub baseline: Option<f64>,
    pub rows: Vec<(RunMode, Vec<Option<f64>>)>,
}

pub const TABLE_ROWS: [RunMode; 6] = [
    RunMode::PtqW,
    RunMode::PtqS,
    RunMode::PtqWs,
    RunMode::QatW,
    RunMode::SquatS,
    RunMode::QatSquat,
];

pub fn matrix_tables(summary: &[SummaryRow]) -> Vec<MatrixTable> {
    let mut bits: Vec<u8> = summary.iter().filter_map(|r| r.bits).collect();
    bits.sort_unstable_by(|a, b| b.cmp(a));
    bits.dedup();
    let baseline = summary.iter().find(|r| r.mode == RunMode::Fp32).map(|r| r.mean_acc);
    let mut schemes: Vec<Scheme> = summary.iter().filter_map(|r| r.scheme).collect();
    schemes.sort();
    schemes.dedup();
    if schemes.is_empty() {
        schemes.push(Scheme::Uniform);
    }
    schemes
        .into_iter()
        .map(|scheme| {
            let rows = TABLE_ROWS
                .iter()
                .map(|&mode| {
                    let vals = bits
                        .iter()
                        .map(|&b| {
                            summary
                                .iter()
                                .find(|r| {
                                    r.mode == mode
                                        && r.bits == Some(b)
                                        && (!mode.quantizes_states() || r.scheme == Some(scheme))
                                })
                                .map(|r| r.mean_acc)
                        })
                        .collect();
                    (mode, vals)
                })
                .collect();
            MatrixTable {
                scheme,
                bits: bits.clone(),
                baseline,
                rows,
            }
        })
        .collect()
}

impl MatrixTable {
    /// Plain-text rendering with accuracies in percent.
    pub fn render(&self) -> String {
        let mut s = format!("{} quantization", self.scheme);
        if let Some(b) = self.baseline {
            s.push_str(&format!(" (full precision {:.2})", 100.0 * b));
        }
        s.push('\n');
        s.push_str(&format!("{:<30}", "mode"));
        for b in &self.bits {
            s.push_str(&format!("{:>9}", format!("{b}-bit")));
        }
        s.push('\n');
        for (mode, vals) in &self.rows {
            s.push_str(&format!("{:<30}", mode.label()));
            for v in vals {
                match v {
                    Some(v) => s.push_str(&format!("{:>9.2}", 100.0 * v)),
                    None => s.push_str(&format!("{:>9}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(format!("writing {}", path.display()), std::io::Error::other(e.to_string()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub const METRICS_COLUMNS: [&str; 6] = ["run_id", "epoch", "split", "loss", "accuracy", "lr"];
pub const SUMMARY_COLUMNS: [&str; 6] = ["mode", "bits", "scheme", "mean_acc", "std_acc", "trials"];

/// Writes `metrics.csv`, `summary.csv` and `tables.txt` into `out_dir`.
pub fn report(records: &[RunRecord], out_dir: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(cfg_err("report needs at least one run record"));
    }
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_csv(&dir.join("metrics.csv"), &metric_rows(records), &METRICS_COLUMNS)?;
    let summary = summarize(records);
    write_csv(&dir.join("summary.csv"), &summary, &SUMMARY_COLUMNS)?;
    let text: String = matrix_tables(&summary).iter().map(|t| t.render() + "\n").collect();
    let p = dir.join("tables.txt");
    std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    Ok(summary)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<SummaryRow>> {
    read_csv(path.as_ref())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    read_csv(path.as_ref())
}

pub fn save_record(record: &RunRecord, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let p = dir.join(format!("{}.json", record.run_id));
    let text = serde_json::to_string_pretty(record).expect("record serializes");
    std::fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
    Ok(p)
}

/// Every `*.json` run record in `dir`, sorted by file name.
pub fn load_records(dir: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}
