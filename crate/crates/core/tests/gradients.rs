//! Analytic gradients against central finite differences, plus the
//! straight-through and surrogate contracts.

mod common;

use common::{random, Build};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squat::loss::{ce_spike_count_loss, mse_spike_loss, SpikeCountTargets};
use squat::model::fake_quant_weights;
use squat::neuron::{arctan_surrogate, unroll, DenseLif, LifConfig, LifNeuron};
use squat::quantizer::{build_exponential_grid, quantize_var, straight_through};
use squat::tensor::{BatchNormStats, Graph, Mode, Tensor};

fn fd_check(name: &str, inputs: &[Tensor], f: &Build<'_>) {
    if let Err(e) = common::fd_check(name, inputs, f) {
        panic!("{e}");
    }
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4], 1.0);
    let b = random(&mut rng, &[4, 5], 1.0);
    fd_check("matmul", &[a, b], &|g, v| g.matmul(v[0], v[1]).unwrap());
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[2, 2, 6, 6], 1.0);
    let k = random(&mut rng, &[3, 2, 3, 3], 0.5);
    fd_check("conv2d", &[x.clone(), k.clone()], &|g, v| g.conv2d(v[0], v[1], 1, 0).unwrap());
    fd_check("conv2d stride 2 pad 1", &[x, k], &|g, v| g.conv2d(v[0], v[1], 2, 1).unwrap());
}

#[test]
fn batchnorm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 3, 2, 2], 1.0);
    let gamma = random(&mut rng, &[3], 1.0);
    let beta = random(&mut rng, &[3], 1.0);
    fd_check("batchnorm train", &[x.clone(), gamma.clone(), beta.clone()], &|g, v| {
        let mut stats = BatchNormStats::new(3);
        g.batchnorm(v[0], v[1], v[2], &mut stats, Mode::Train).unwrap()
    });
    fd_check("batchnorm eval", &[x, gamma, beta], &|g, v| {
        let mut stats = BatchNormStats::from_running(vec![0.1, -0.2, 0.3], vec![0.5, 1.5, 2.0], 1);
        g.batchnorm(v[0], v[1], v[2], &mut stats, Mode::Eval).unwrap()
    });
}

#[test]
fn maxpool_gradients_away_from_ties() {
    // A shuffled ramp: every window maximum beats its runner-up by far more
    // than the step size.
    let mut idx: Vec<usize> = (0..2 * 2 * 4 * 4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in (1..idx.len()).rev() {
        idx.swap(i, rng.gen_range(0..=i));
    }
    let x = Tensor::new(vec![2, 2, 4, 4], idx.iter().map(|&i| i as f32 * 0.05).collect()).unwrap();
    fd_check("maxpool", &[x], &|g, v| g.maxpool2d(v[0], 2).unwrap());
}

#[test]
fn spikeless_lif_unroll_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[2, 4], 1.0)).collect();
    let w = random(&mut rng, &[4, 5], 0.5);
    let b = random(&mut rng, &[5], 0.2);
    // A threshold this high is never reached, so the unroll is smooth and
    // the gradient flows through the leak across all three steps.
    let cfg = LifConfig::new(0.8, 1e3, 2.0).unwrap();
    let mut inputs = xs.clone();
    inputs.extend([w, b]);
    fd_check("lif unroll T=3", &inputs, &|g, v| {
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
    });
}

fn soft_steps(rng: &mut ChaCha8Rng, t: usize, b: usize, m: usize) -> Vec<Tensor> {
    (0..t).map(|_| Tensor::from_fn(&[b, m], |_| rng.gen_range(0.0..1.0))).collect()
}

#[test]
fn ce_count_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let steps = soft_steps(&mut rng, 3, 4, 5);
    let labels = [0, 3, 4, 1];
    fd_check("ce count", &steps, &|g, v| ce_spike_count_loss(g, v, &labels).unwrap());
}

#[test]
fn mse_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let steps = soft_steps(&mut rng, 3, 4, 5);
    let labels = [2, 2, 0, 4];
    let targets = SpikeCountTargets::new(0.8, 0.1).unwrap();
    fd_check("mse", &steps, &|g, v| mse_spike_loss(g, v, &labels, targets).unwrap());
}

#[test]
fn quantize_gradient_is_all_ones() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = build_exponential_grid(2, -2.0, 3.0, 1.0, 2.0).unwrap();
    // Includes values outside the clip range.
    let u = random(&mut rng, &[7, 9], 5.0);
    let mut g = Graph::new();
    let uv = g.param(u);
    let q = quantize_var(&mut g, uv, &grid);
    let loss = g.sum(q);
    g.backward(loss).unwrap();
    assert!(g.grad(uv).unwrap().data().iter().all(|&d| d == 1.0));
}

#[test]
fn fake_quant_gradient_matches_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&mut rng, &[4, 3], 1.0);
    let x = random(&mut rng, &[5, 4], 1.0);
    let grad_w = |quantized: bool| -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let wv = g.param(w.clone());
        let xv = g.param(x.clone());
        let used = if quantized {
            let value = fake_quant_weights(&w, 4);
            straight_through(&mut g, wv, value)
        } else {
            wv
        };
        let y = g.matmul(xv, used).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        (g.grad(wv).unwrap().clone(), g.grad(xv).unwrap().clone())
    };
    let (plain_w, _) = grad_w(false);
    let (quant_w, _) = grad_w(true);
    // d(sum(x w))/dw does not depend on w, so the two are identical.
    assert_eq!(plain_w, quant_w);
}

#[test]
fn surrogate_peak_symmetry_and_decay() {
    assert!((arctan_surrogate(0.0, 2.0) - 1.0 / std::f64::consts::PI).abs() < 1e-12);
    let mut prev = arctan_surrogate(0.0, 2.0);
    for i in 1..=1000 {
        let x = i as f64 * 0.01;
        let s = arctan_surrogate(x, 2.0);
        assert_eq!(s, arctan_surrogate(-x, 2.0), "asymmetric at {x}");
        assert!(s < prev, "not decaying at {x}");
        prev = s;
    }
}
