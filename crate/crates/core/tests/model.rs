use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squat::model::{
    build_preset, fake_quant_weights, load, ptq_convert, save, weight_levels, Checkpoint, Model, ModelError,
    PresetOverrides, PtqTarget, StateQuantSpec, StepInput, TrainingMeta, WeightQuantSpec, CHECKPOINT_VERSION,
};
use squat::neuron::{lif_step, LifConfig, LifNeuron, LifState, StateQuantizer};
use squat::quantizer::{GridSpec, ObserverMode, Scheme};
use squat::tensor::{Graph, Mode, Tensor};
use squat::ErrorCategory;

fn frames(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
}

fn tiny(seed: u64) -> Model {
    let mut spec = build_preset(
        "tiny",
        &PresetOverrides {
            inputs: Some(20),
            hidden: Some(16),
            classes: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    spec.seed = seed;
    Model::new(spec).unwrap()
}

/// Conv preset with BN statistics populated and calibrated state grids.
fn trained_conv_model() -> Model {
    let mut spec = build_preset("fmnist", &PresetOverrides::default()).unwrap();
    spec.seed = 3;
    spec.state_quant = Some(StateQuantSpec::new(GridSpec::new(3, Scheme::Exponential), ObserverMode::PerForward));
    let mut m = Model::new(spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = frames(&mut rng, &[2, 1, 28, 28]);
    let mut g = Graph::new();
    m.forward(&mut g, StepInput::Repeated { frame: &x, steps: 2 }, Mode::Train).unwrap();
    m.calibrate_state_quant([StepInput::Repeated { frame: &x, steps: 2 }]).unwrap();
    m
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut m = trained_conv_model();
    let meta = TrainingMeta {
        epoch: 4,
        seed: 3,
        ptq_weight_bits: None,
    };
    let ck = Checkpoint::from_model(&m, meta.clone());
    assert_eq!(ck.grids.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.sqt");
    save(&ck, &p).unwrap();
    let back = load(&p).unwrap();
    assert_eq!(back.to_bytes(), std::fs::read(&p).unwrap());
    assert_eq!(back.meta, meta);
    assert_eq!(back.spec, ck.spec);
    for ((na, a), (nb, b)) in ck.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
    assert_eq!(ck.grids, back.grids);

    let mut restored = back.to_model().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = frames(&mut rng, &[3, 1, 28, 28]);
    let input = StepInput::Repeated { frame: &x, steps: 3 };
    assert_eq!(m.infer(input).unwrap(), restored.infer(input).unwrap());
}

#[test]
fn corrupted_checkpoints_map_to_format_errors() {
    let good = Checkpoint::from_model(&tiny(0), TrainingMeta::default()).to_bytes();

    let mut magic = good.clone();
    magic[0] = b'Z';
    let e = Checkpoint::from_bytes(&magic).unwrap_err();
    assert!(matches!(e, ModelError::BadMagic(_)));
    assert_eq!(e.category(), ErrorCategory::Format);

    let mut version = good.clone();
    version[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    let e = Checkpoint::from_bytes(&version).unwrap_err();
    assert!(matches!(e, ModelError::UnsupportedVersion(v) if v == CHECKPOINT_VERSION + 1));
    assert_eq!(e.category(), ErrorCategory::Format);

    for cut in [0, 3, 7, 11, 20, good.len() / 2, good.len() - 1] {
        let e = Checkpoint::from_bytes(&good[..cut]).unwrap_err();
        assert!(matches!(e, ModelError::Truncated(_) | ModelError::Malformed(_)), "cut {cut}: {e}");
        assert_eq!(e.category(), ErrorCategory::Format);
    }

    let mut header = good.clone();
    header[12] = b'!';
    assert!(matches!(Checkpoint::from_bytes(&header), Err(ModelError::Malformed(_))));

    let mut trailing = good;
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing), Err(ModelError::Malformed(_))));

    let mut missing = Checkpoint::from_model(&tiny(0), TrainingMeta::default());
    missing.tensors.remove(1);
    let e = Checkpoint::from_bytes(&missing.to_bytes()).unwrap().to_model().unwrap_err();
    assert!(matches!(e, ModelError::MissingTensor(ref n) if n == "layers.0.bias"), "{e}");
    assert_eq!(e.category(), ErrorCategory::Format);

    let e = load("/nonexistent/model.sqt").unwrap_err();
    assert_eq!(e.category(), ErrorCategory::Io);
}

#[test]
fn ptq_leaves_source_untouched_and_snaps_everything() {
    let source = tiny(5);
    let before = Checkpoint::from_model(&source, TrainingMeta::default()).to_bytes();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let calib = frames(&mut rng, &[32, 20]);
    let mut q = ptq_convert(
        &source,
        PtqTarget::Both,
        4,
        GridSpec::new(2, Scheme::Exponential),
        [StepInput::Repeated { frame: &calib, steps: 5 }],
    )
    .unwrap();
    assert_eq!(Checkpoint::from_model(&source, TrainingMeta::default()).to_bytes(), before);

    let src_w: Vec<Tensor> = source.params().into_iter().filter(|(n, _)| n.ends_with("weight")).map(|(_, t)| t.clone()).collect();
    let q_w: Vec<Tensor> = q.params().into_iter().filter(|(n, _)| n.ends_with("weight")).map(|(_, t)| t.clone()).collect();
    for (s, w) in src_w.iter().zip(&q_w) {
        let levels = weight_levels(s, 4);
        assert!(w.data().iter().all(|v| levels.contains(v)));
    }

    let grids: Vec<_> = q.state_grids().into_iter().map(|(_, g)| g.clone()).collect();
    assert_eq!(grids.len(), 2);
    let x = frames(&mut rng, &[8, 20]);
    let mut g = Graph::new();
    let fwd = q.forward(&mut g, StepInput::Repeated { frame: &x, steps: 6 }, Mode::Eval).unwrap();
    let out_grid = &grids[1];
    for &m in &fwd.membranes {
        assert!(g.value(m).data().iter().all(|&v| out_grid.contains(v)));
    }
}

#[test]
fn ptq_weights_only_keeps_states_unquantized() {
    let source = tiny(1);
    let q = ptq_convert(&source, PtqTarget::Weights, 8, GridSpec::new(8, Scheme::Uniform), std::iter::empty()).unwrap();
    assert!(q.state_grids().is_empty());
    assert!(q.spec().weight_quant.is_none());
    let e = ptq_convert(&source, PtqTarget::States, 8, GridSpec::new(2, Scheme::Uniform), std::iter::empty()).unwrap_err();
    assert!(matches!(e, ModelError::EmptyCalibration));
    assert_eq!(e.category(), ErrorCategory::Data);
}

#[test]
fn qat_and_ptq_forward_agree() {
    let mut base = tiny(9);
    for w in base.weights_mut() {
        *w = fake_quant_weights(w, 4);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let calib = frames(&mut rng, &[40, 20]);
    let grid_spec = GridSpec::new(3, Scheme::Exponential);
    let mut ptq = ptq_convert(
        &base,
        PtqTarget::Both,
        4,
        grid_spec,
        [StepInput::Repeated { frame: &calib, steps: 8 }],
    )
    .unwrap();
    let mut qat = base.clone();
    qat.set_weight_quant(Some(WeightQuantSpec { n_bits: 4 }));
    let grids: Vec<_> = ptq.state_grids().into_iter().map(|(_, g)| g.clone()).collect();
    for (n, g) in qat.lif_layers_mut().zip(grids) {
        n.state_quant = Some(StateQuantizer::frozen(grid_spec, g));
    }
    let x = frames(&mut rng, &[30, 20]);
    let input = StepInput::Repeated { frame: &x, steps: 10 };
    let a = qat.infer(input).unwrap();
    assert_eq!(a, ptq.infer(input).unwrap());
    assert!(a.sum() > 0.0, "no output spikes; the comparison would be vacuous");
}

#[test]
fn frozen_state_quant_stores_level_minus_reset() {
    let grid_spec = GridSpec::new(2, Scheme::Exponential);
    let grid = grid_spec.build(-1.0, 2.0, 1.0).unwrap();
    let theta = 1.0;
    let mut neuron = LifNeuron::new(LifConfig::new(0.9, theta, 2.0).unwrap())
        .with_state_quant(StateQuantizer::frozen(grid_spec, grid.clone()));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let mut state = LifState::new();
    for _ in 0..20 {
        let i = g.constant(Tensor::from_fn(&[4, 16], |_| rng.gen_range(-1.0..1.5)));
        let z = lif_step(&mut g, &mut state, i, &mut neuron).unwrap();
        let u = g.value(state.u().unwrap());
        let m = g.value(state.membrane().unwrap());
        for ((&s, &l), &zz) in u.data().iter().zip(m.data()).zip(g.value(z).data()) {
            assert!(grid.contains(l));
            assert_eq!(zz, if l > theta { 1.0 } else { 0.0 });
            assert_eq!(s, l - zz * theta);
        }
    }
}

#[test]
fn unknown_preset_and_bad_input_shape() {
    let e = build_preset("nope", &PresetOverrides::default()).unwrap_err();
    assert_eq!(e.category(), ErrorCategory::Config);
    let mut m = tiny(0);
    let x = Tensor::zeros(&[2, 21]);
    let e = m.infer(StepInput::Repeated { frame: &x, steps: 2 }).unwrap_err();
    assert_eq!(e.category(), ErrorCategory::Shape);
}
