//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.
//!
//! The training criteria need FashionMNIST under `data/fashion-mnist` at the
//! workspace root, or wherever `SQUAT_DATA_DIR` points.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{fd_check, random};
use squat::data::{event_tensor_bytes, parse_event_tensor, save_idx, load_idx, DataError};
use squat::harness::{mean_std, prepare_data, ptq_run, train, DatasetConfig, ExperimentConfig, Prepared, RunMode, RunOutput, DATA_DIR_ENV};
use squat::loss::{ce_spike_count_loss, mse_spike_loss, SpikeCountTargets};
use squat::model::{fake_quant_weights, ptq_convert, Checkpoint, ModelError, PtqTarget, WeightQuantSpec, CHECKPOINT_VERSION};
use squat::neuron::{arctan_surrogate, unroll, DenseLif, LifConfig, LifNeuron, StateQuantizer};
use squat::quantizer::{
    build_exponential_grid, build_uniform_grid, default_ratio, quantize, quantize_var, straight_through, GridSpec,
    ObserverMode, QuantGrid, Scheme,
};
use squat::tensor::{BatchNormStats, Graph, Mode, Tensor};
use squat::ErrorCategory;

const SEEDS: [u64; 3] = [0, 1, 2];
const STATE_CLIP: [f32; 2] = [-1.0, 2.0];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- quantizer

fn brute_force(levels: &[f32], u: f32) -> f32 {
    let mut best = levels[0];
    for &l in levels {
        if (u - l).abs() < (u - best).abs() {
            best = l;
        }
    }
    best
}

fn quantizer_conformance() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0usize;
    for scheme in [Scheme::Uniform, Scheme::Exponential] {
        for n in [1u8, 2, 3, 4, 8] {
            let lo = rng.gen_range(-4.0f32..0.0);
            let hi = rng.gen_range(1.5f32..4.0);
            let g = match scheme {
                Scheme::Uniform => build_uniform_grid(n, lo, hi),
                Scheme::Exponential => build_exponential_grid(n, lo, hi, 1.0, default_ratio(n)),
            }
            .map_err(|e| e.to_string())?;
            let us: Vec<f32> = (0..10_000).map(|_| rng.gen_range(lo - 2.0..hi + 2.0)).collect();
            let t = Tensor::new(vec![us.len()], us.clone()).map_err(|e| e.to_string())?;
            let q = quantize(&t, &g);
            check(quantize(&q, &g) == q, format!("{scheme} n={n}: not idempotent"))?;
            for (&u, &v) in us.iter().zip(q.data()) {
                check(v == brute_force(g.levels(), u), format!("{scheme} n={n}: u={u} gave {v}"))?;
                check(g.contains(v), format!("{scheme} n={n}: {v} not a level"))?;
                check(v >= g.u_min() && v <= g.u_max(), format!("{scheme} n={n}: {v} outside bounds"))?;
                if u <= g.u_min() {
                    check(v == g.u_min(), format!("{scheme} n={n}: {u} not clipped low"))?;
                }
                if u >= g.u_max() {
                    check(v == g.u_max(), format!("{scheme} n={n}: {u} not clipped high"))?;
                }
            }
            let mut sorted = us;
            sorted.sort_by(f32::total_cmp);
            check(
                sorted.windows(2).all(|w| g.snap(w[0]) <= g.snap(w[1])),
                format!("{scheme} n={n}: not monotone"),
            )?;
            checked += t.numel();
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("took {secs:.1}s"))?;
    Ok(format!("{checked} inputs, zero violations, {secs:.2}s"))
}

fn threshold_centering() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f32;
    for _ in 0..50 {
        let lo = rng.gen_range(-10.0f32..0.0);
        let hi = lo + rng.gen_range(0.5f32..12.0);
        let theta = lo + rng.gen_range(0.1f32..0.9) * (hi - lo);
        for n in 3u8..=8 {
            // The default ratio is 2.0 up to 4 bits; beyond that a ratio of 2
            // would need gaps below f32 resolution, so the default shrinks.
            let g = build_exponential_grid(n, lo, hi, theta, default_ratio(n)).map_err(|e| e.to_string())?;
            let du = (hi - lo) / ((1u32 << n) - 1) as f32;
            let min_gap = g.gaps().into_iter().fold(f32::INFINITY, f32::min);
            check(min_gap < du, format!("n={n} [{lo}, {hi}] theta {theta}: gap {min_gap} >= {du}"))?;
            worst = worst.max(min_gap / du);
        }
    }
    Ok(format!("50 configs x n=3..8, largest min-gap/uniform-step ratio {worst:.3}"))
}

// ---------------------------------------------------------------- gradients

fn ste_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = build_exponential_grid(2, -2.0, 3.0, 1.0, 2.0).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let uv = g.param(random(&mut rng, &[7, 9], 5.0));
    let q = quantize_var(&mut g, uv, &grid);
    let loss = g.sum(q);
    g.backward(loss).map_err(|e| e.to_string())?;
    check(g.grad(uv).unwrap().data().iter().all(|&d| d == 1.0), "quantize gradient is not all ones")?;

    let w = random(&mut rng, &[4, 3], 1.0);
    let x = random(&mut rng, &[5, 4], 1.0);
    let grad = |quantized: bool| {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let xv = g.constant(x.clone());
        let used = if quantized { straight_through(&mut g, wv, fake_quant_weights(&w, 4)) } else { wv };
        let y = g.matmul(xv, used).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        g.grad(wv).unwrap().clone()
    };
    check(grad(true) == grad(false), "fake-quant gradient differs from identity")?;
    Ok("quantize gradient all ones, fake-quant gradient equals identity".into())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut note = |r: f64| worst = worst.max(r);

    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 5], 1.0);
    note(fd_check("matmul", &[a, b], &|g, v| g.matmul(v[0], v[1]).unwrap())?);

    let x = random(&mut rng, &[2, 2, 6, 6], 1.0);
    let k = random(&mut rng, &[3, 2, 3, 3], 0.5);
    note(fd_check("conv2d", &[x.clone(), k.clone()], &|g, v| g.conv2d(v[0], v[1], 1, 0).unwrap())?);
    note(fd_check("conv2d stride 2", &[x, k], &|g, v| g.conv2d(v[0], v[1], 2, 1).unwrap())?);

    let x = random(&mut rng, &[4, 3, 2, 2], 1.0);
    let gamma = random(&mut rng, &[3], 1.0);
    let beta = random(&mut rng, &[3], 1.0);
    note(fd_check("batchnorm", &[x, gamma, beta], &|g, v| {
        let mut stats = BatchNormStats::new(3);
        g.batchnorm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
    })?);

    let mut idx: Vec<usize> = (0..2 * 2 * 4 * 4).collect();
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(vec![2, 2, 4, 4], idx.iter().map(|&i| i as f32 * 0.05).collect()).unwrap();
    note(fd_check("maxpool", &[x], &|g, v| g.maxpool2d(v[0], 2).unwrap())?);

    let mut inputs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[2, 4], 1.0)).collect();
    inputs.extend([random(&mut rng, &[4, 5], 0.5), random(&mut rng, &[5], 0.2)]);
    let cfg = LifConfig::new(0.8, 1e3, 2.0).map_err(|e| e.to_string())?;
    note(fd_check("lif unroll", &inputs, &|g, v| {
        let mut n = LifNeuron::new(cfg);
        let mut stack = [DenseLif {
            weight: v[3],
            bias: Some(v[4]),
            neuron: &mut n,
        }];
        let out = unroll(g, &v[..3], &mut stack).unwrap();
        assert!(out.spikes.iter().all(|&s| g.value(s).sum() == 0.0));
        let mut acc = out.membranes[0];
        for &m in &out.membranes[1..] {
            acc = g.add(acc, m).unwrap();
        }
        acc
    })?);

    let soft: Vec<Tensor> = (0..3).map(|_| Tensor::from_fn(&[4, 5], |_| rng.gen_range(0.0..1.0))).collect();
    note(fd_check("ce count", &soft, &|g, v| ce_spike_count_loss(g, v, &[0, 3, 4, 1]).unwrap())?);
    let targets = SpikeCountTargets::new(0.8, 0.1).map_err(|e| e.to_string())?;
    note(fd_check("mse", &soft, &|g, v| mse_spike_loss(g, v, &[2, 2, 0, 4], targets).unwrap())?);

    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("8 checks, worst relative error {worst:.1e}, {secs:.2}s"))
}

fn surrogate() -> Outcome {
    let peak = arctan_surrogate(0.0, 2.0);
    check((peak - 1.0 / std::f64::consts::PI).abs() < 1e-12, format!("peak {peak}"))?;
    let mut prev = peak;
    for i in 1..=1000 {
        let x = i as f64 * 0.01;
        let s = arctan_surrogate(x, 2.0);
        check(s == arctan_surrogate(-x, 2.0), format!("asymmetric at {x}"))?;
        check(s < prev, format!("not decaying at {x}"))?;
        prev = s;
    }
    Ok(format!("peak error {:.1e}, 1000 points symmetric and decaying", (peak - 1.0 / std::f64::consts::PI).abs()))
}

// ---------------------------------------------------------------- training

struct Runs {
    data: Prepared,
    fp32: Vec<RunOutput>,
    squat8_exp: Vec<RunOutput>,
    squat2_exp: Vec<RunOutput>,
    squat2_uni: Vec<RunOutput>,
    qat_w4: Vec<RunOutput>,
    squat_s4_uni: Vec<RunOutput>,
    ptq2_exp: Vec<RunOutput>,
    fp32_secs: f64,
}

fn desk_config() -> ExperimentConfig {
    let dir = std::env::var_os(DATA_DIR_ENV)
        .is_none()
        .then(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")));
    ExperimentConfig {
        name: "acceptance".into(),
        dataset: DatasetConfig::FashionMnist {
            dir,
            train_subset: Some(10_000),
            test_subset: None,
        },
        ..Default::default()
    }
}

/// State-quantized cells train against fixed bounds.
fn clipped(cfg: ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        observer: ObserverMode::Frozen,
        state_clip: Some(STATE_CLIP),
        ..cfg
    }
}

fn run_all() -> Result<Runs, String> {
    let base = desk_config();
    let data = prepare_data(&base).map_err(|e| format!("loading FashionMNIST: {e}"))?;
    let cell = |mode, bits, scheme| base.cell(mode, bits, scheme);
    let trials = |cfg: &ExperimentConfig| -> Result<Vec<RunOutput>, String> {
        SEEDS.iter().map(|&s| train(cfg, s, &data).map_err(|e| e.to_string())).collect()
    };
    let start = Instant::now();
    let fp32 = trials(&base)?;
    let fp32_secs = start.elapsed().as_secs_f64() / SEEDS.len() as f64;
    let ptq = cell(RunMode::PtqWs, 2, Scheme::Exponential);
    let ptq2_exp = fp32
        .iter()
        .map(|o| ptq_run(&ptq, o.record.seed, &o.checkpoint, &data).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    Ok(Runs {
        squat8_exp: trials(&clipped(cell(RunMode::QatSquat, 8, Scheme::Exponential)))?,
        squat2_exp: trials(&clipped(cell(RunMode::QatSquat, 2, Scheme::Exponential)))?,
        squat2_uni: trials(&clipped(cell(RunMode::QatSquat, 2, Scheme::Uniform)))?,
        qat_w4: trials(&cell(RunMode::QatW, 4, Scheme::Exponential))?,
        squat_s4_uni: trials(&clipped(cell(RunMode::SquatS, 4, Scheme::Uniform)))?,
        data,
        fp32,
        ptq2_exp,
        fp32_secs,
    })
}

fn accs(runs: &[RunOutput]) -> Vec<f64> {
    runs.iter().map(|o| o.record.accuracy()).collect()
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|a| format!("{a:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn mean(v: &[f64]) -> f64 {
    mean_std(v).0
}

fn baseline(r: &Runs) -> Outcome {
    let a = accs(&r.fp32);
    let m = mean(&a);
    check(m >= 0.80, format!("mean accuracy {m:.4} < 0.80 {}", fmt(&a)))?;
    check(r.fp32_secs <= 1800.0, format!("{:.0}s per run", r.fp32_secs))?;
    Ok(format!("mean {m:.4} {} in {:.1}s per run", fmt(&a), r.fp32_secs))
}

fn near_parity(r: &Runs) -> Outcome {
    let (f, q) = (accs(&r.fp32), accs(&r.squat8_exp));
    let close = f.iter().zip(&q).filter(|(a, b)| *a - *b <= 0.03).count();
    let msg = format!("{close}/3 seeds within 3 points: fp32 {} vs 8-bit {}", fmt(&f), fmt(&q));
    check(close >= 2, msg.clone())?;
    Ok(msg)
}

fn extreme_ordering(r: &Runs) -> Outcome {
    let (q, p) = (accs(&r.squat2_exp), accs(&r.ptq2_exp));
    let margin = mean(&q) - mean(&p);
    let msg = format!("QAT+SQUAT {:.4} vs PTQ {:.4}, margin {:.1} points", mean(&q), mean(&p), 100.0 * margin);
    check(margin >= 0.10, msg.clone())?;
    Ok(msg)
}

fn scheme_ordering(r: &Runs) -> Outcome {
    let (e, u) = (mean(&accs(&r.squat2_exp)), mean(&accs(&r.squat2_uni)));
    let msg = format!("exponential {e:.4} vs uniform {u:.4}");
    check(e >= u, msg.clone())?;
    Ok(msg)
}

fn qat_priority(r: &Runs) -> Outcome {
    let (w, s) = (mean(&accs(&r.qat_w4)), mean(&accs(&r.squat_s4_uni)));
    let msg = format!("QAT-only {w:.4} vs SQUAT-only {s:.4}");
    check(w >= s, msg.clone())?;
    Ok(msg)
}

fn forward_equivalence(r: &Runs) -> Outcome {
    let mut base = r.fp32[0].checkpoint.to_model().map_err(|e| e.to_string())?;
    for w in base.weights_mut() {
        *w = fake_quant_weights(w, 4);
    }
    let steps = 25;
    let calib = r.data.calib.batch(&(0..256).collect::<Vec<_>>(), steps).map_err(|e| e.to_string())?;
    let grid_spec = GridSpec::new(3, Scheme::Exponential);
    let mut ptq = ptq_convert(&base, PtqTarget::Both, 4, grid_spec, [calib.inputs()]).map_err(|e| e.to_string())?;
    let mut qat = base;
    qat.set_weight_quant(Some(WeightQuantSpec { n_bits: 4 }));
    let grids: Vec<QuantGrid> = ptq.state_grids().into_iter().map(|(_, g)| g.clone()).collect();
    for (n, g) in qat.lif_layers_mut().zip(grids) {
        n.state_quant = Some(StateQuantizer::frozen(grid_spec, g));
    }
    let test = r.data.test.batch(&(0..100).collect::<Vec<_>>(), steps).map_err(|e| e.to_string())?;
    let a = qat.infer(test.inputs()).map_err(|e| e.to_string())?;
    let b = ptq.infer(test.inputs()).map_err(|e| e.to_string())?;
    check(a.sum() > 0.0, "no output spikes")?;
    let diff = a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count();
    check(diff == 0, format!("{diff} of {} spike entries differ", a.numel()))?;
    Ok(format!("100 samples x {steps} steps identical, {} output spikes", a.sum()))
}

fn serialization(r: &Runs) -> Outcome {
    let src = &r.squat2_exp[0].checkpoint;
    let bytes = src.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    check(back.to_bytes() == bytes, "checkpoint bytes changed on reload")?;
    check(back.grids == src.grids && back.spec == src.spec && back.meta == src.meta, "checkpoint header changed")?;
    for ((na, a), (nb, b)) in src.tensors.iter().zip(&back.tensors) {
        check(na == nb && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), format!("tensor {na}"))?;
    }
    let test = r.data.test.batch(&(0..100).collect::<Vec<_>>(), 25).map_err(|e| e.to_string())?;
    let reference = src.to_model().map_err(|e| e.to_string())?.infer(test.inputs()).map_err(|e| e.to_string())?;
    let restored = back.to_model().map_err(|e| e.to_string())?.infer(test.inputs()).map_err(|e| e.to_string())?;
    check(reference == restored, "restored model infers differently")?;

    let events = squat::data::EncodedBatch {
        frames: squat::data::Frames::PerStep(test.materialize()),
        labels: test.labels.clone(),
    };
    let sqe = event_tensor_bytes(&events);
    let parsed = parse_event_tensor(&sqe).map_err(|e| e.to_string())?;
    check(parsed.labels == events.labels, "SQE1 labels changed")?;
    let (x, y) = (events.materialize(), parsed.materialize());
    check(
        x.shape() == y.shape() && x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "SQE1 data changed",
    )?;

    let mut fixtures = 0;
    let mut expect = |what: &str, got: ErrorCategory, want: ErrorCategory| -> Result<(), String> {
        fixtures += 1;
        check(got == want, format!("{what}: {got:?}, expected {want:?}"))
    };
    let mut bad = bytes.clone();
    bad[0] = b'X';
    let e = Checkpoint::from_bytes(&bad).unwrap_err();
    check(matches!(e, ModelError::BadMagic(_)), format!("checkpoint magic: {e}"))?;
    expect("checkpoint magic", e.category(), ErrorCategory::Format)?;
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 7).to_le_bytes());
    expect("checkpoint version", Checkpoint::from_bytes(&bad).unwrap_err().category(), ErrorCategory::Format)?;
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    expect("checkpoint header length", Checkpoint::from_bytes(&bad).unwrap_err().category(), ErrorCategory::Format)?;
    expect("checkpoint truncated", Checkpoint::from_bytes(&bytes[..10]).unwrap_err().category(), ErrorCategory::Format)?;

    let mut bad = sqe.clone();
    bad[0] = b'X';
    let e = parse_event_tensor(&bad).unwrap_err();
    check(matches!(e, DataError::BadEventMagic(_)), format!("SQE1 magic: {e}"))?;
    expect("SQE1 magic", e.category(), ErrorCategory::Format)?;
    let mut bad = sqe.clone();
    bad[4] = 9;
    expect("SQE1 version", parse_event_tensor(&bad).unwrap_err().category(), ErrorCategory::Format)?;
    expect("SQE1 truncated", parse_event_tensor(&sqe[..sqe.len() - 3]).unwrap_err().category(), ErrorCategory::Format)?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
    save_idx(&ip, &lp, &[0u8; 8], 2, 2, &[1, 2]).map_err(|e| e.to_string())?;
    let mut img = std::fs::read(&ip).map_err(|e| e.to_string())?;
    img[2] = 0x09;
    std::fs::write(&ip, &img).map_err(|e| e.to_string())?;
    expect("IDX magic", load_idx(&ip, &lp).unwrap_err().category(), ErrorCategory::Format)?;

    Ok(format!("checkpoint and SQE1 bit-exact, {fixtures} corrupted fixtures rejected"))
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(msg)
    })
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let quick: [(&str, fn() -> Outcome); 5] = [
        ("quantizer conformance", quantizer_conformance),
        ("threshold centering", threshold_centering),
        ("straight-through contract", ste_contract),
        ("gradient correctness", gradient_correctness),
        ("surrogate", surrogate),
    ];
    for (i, (name, f)) in quick.into_iter().enumerate() {
        results.push((i + 1, name, guarded(f)));
    }

    let trained: [(&str, fn(&Runs) -> Outcome); 7] = [
        ("desk-scale baseline", baseline),
        ("8-bit near-parity", near_parity),
        ("2-bit QAT+SQUAT beats PTQ", extreme_ordering),
        ("exponential beats uniform at 2 bits", scheme_ordering),
        ("QAT-only beats SQUAT-only at 4 bits", qat_priority),
        ("QAT/PTQ forward equivalence", forward_equivalence),
        ("serialization", serialization),
    ];
    let runs = catch_unwind(run_all).unwrap_or_else(|_| Err("training panicked".into()));
    for (i, (name, f)) in trained.into_iter().enumerate() {
        let outcome = match &runs {
            Ok(r) => guarded(|| f(r)),
            Err(e) => Err(format!("training unavailable: {e}")),
        };
        results.push((i + 6, name, outcome));
    }

    let mut failed = 0;
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
