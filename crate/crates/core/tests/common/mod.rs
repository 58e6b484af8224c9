//! Finite-difference helpers shared by the gradient tests and the
//! acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use squat::tensor::{Graph, Tensor, Var};

pub const H: f32 = 1e-3;
pub const RTOL: f64 = 1e-3;

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Builds `f(inputs)`; the output may have any shape.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

fn eval_output(inputs: &[Tensor], f: &Build<'_>) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.value(out).clone()
}

/// Compares analytic gradients of `sum(w * f(inputs))`, for fixed random
/// `w`, with central differences. The error is relative to the largest
/// gradient magnitude of that input, so near-zero entries are not judged on
/// f32 round-off alone. The weighted sum is accumulated in f64 and divided
/// by the step actually taken. Returns the worst relative error.
pub fn fd_check(name: &str, inputs: &[Tensor], f: &Build<'_>) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let shape = eval_output(inputs, f).shape().to_vec();
    let w = random(&mut rng, &shape, 1.0);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv).map_err(|e| e.to_string())?;
    let loss = g.sum(p);
    g.backward(loss).map_err(|e| e.to_string())?;
    let objective = |ins: &[Tensor]| -> f64 {
        let o = eval_output(ins, f);
        o.data().iter().zip(w.data()).map(|(&a, &b)| a as f64 * b as f64).sum()
    };
    let mut rel = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).ok_or_else(|| format!("{name}: input {k} has no gradient"))?.clone();
        let mut worst = (0.0f64, 0usize, 0.0f64, 0.0f64);
        let mut norm = 0.0f64;
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let step = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            let numeric = (objective(&plus) - objective(&minus)) / step;
            let a = analytic.data()[i] as f64;
            norm = norm.max(a.abs()).max(numeric.abs());
            if (a - numeric).abs() > worst.0 {
                worst = ((a - numeric).abs(), i, a, numeric);
            }
        }
        if worst.0 > RTOL * norm {
            return Err(format!(
                "{name}: input {k} element {}: analytic {} vs numeric {} (gradient scale {norm})",
                worst.1, worst.2, worst.3
            ));
        }
        if norm > 0.0 {
            rel = rel.max(worst.0 / norm);
        }
    }
    Ok(rel)
}
