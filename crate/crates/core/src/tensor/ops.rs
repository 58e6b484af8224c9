use rand::Rng;

use super::graph::{BackwardRule, Graph, Node, Var};
use super::{matmul_into, Result, Tensor, TensorError};

/// Train/eval switch for batch norm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-channel statistics shared by every time step.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
    pub updates: u64,
    last: Option<(Vec<f32>, Vec<f32>)>,
}

impl BatchNormStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            updates: 0,
            last: None,
        }
    }

    /// Statistics restored from storage, with default momentum and eps.
    pub fn from_running(mean: Vec<f32>, var: Vec<f32>, updates: u64) -> Self {
        Self {
            mean,
            var,
            updates,
            ..Self::new(0)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[f32], batch_var_unbiased: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var_unbiased) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
        self.last = Some((batch_mean.to_vec(), batch_var_unbiased.to_vec()));
    }

    /// Applies the most recent batch statistics `times` more times, as if the
    /// same batch had been normalized again.
    pub fn reapply_last(&mut self, times: usize) {
        if let Some((mean, var)) = self.last.clone() {
            for _ in 0..times {
                self.update(&mean, &var);
            }
        }
    }
}

pub(crate) enum Op {
    Leaf {
        requires_grad: bool,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    /// alpha * x + y
    Axpy {
        x: Var,
        y: Var,
        alpha: f32,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Sum(Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        train: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    SquaredError {
        x: Var,
        target: Vec<f32>,
        scale: f32,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn BackwardRule>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Reshape(a) => vec![*a],
            Op::Axpy { x, y, .. } => vec![*x, *y],
            Op::AddBias { x, bias } | Op::AddChannelBias { x, bias } => vec![*x, *bias],
            Op::Conv2d { x, kernel, .. } => vec![*x, *kernel],
            Op::MaxPool { x, .. } | Op::Dropout { x, .. } | Op::SquaredError { x, .. } => vec![*x],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// Gradient contributions of this node to its inputs.
    pub(crate) fn backward(&self, g: &Tensor, nodes: &[Node], out: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: &Var| &nodes[v.0].value;
        let needs = |v: &Var| nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match self {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    // g [m,n] * b^T [n,k]
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = bv.data()[p * n + j];
                        }
                    }
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), &bt, &mut da, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], da).unwrap()));
                }
                if needs(b) {
                    // a^T [k,m] * g [m,n]
                    let mut at = vec![0.0; k * m];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = av.data()[i * k + p];
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g.data(), &mut db, k, m, n);
                    res.push((*b, Tensor::new(vec![k, n], db).unwrap()));
                }
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    let d = g.data().iter().zip(val(b).data()).map(|(g, b)| g * b).collect();
                    res.push((*a, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
                if needs(b) {
                    let d = g.data().iter().zip(val(a).data()).map(|(g, a)| g * a).collect();
                    res.push((*b, Tensor::new(g.shape().to_vec(), d).unwrap()));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.map(|v| v * c))),
            Op::Axpy { x, y, alpha } => {
                if needs(x) {
                    res.push((*x, g.map(|v| v * alpha)));
                }
                res.push((*y, g.clone()));
            }
            Op::AddBias { x, bias } => {
                res.push((*x, g.clone()));
                if needs(bias) {
                    let f = val(bias).numel();
                    let mut db = vec![0.0; f];
                    for row in g.data().chunks(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    res.push((*bias, Tensor::new(vec![f], db).unwrap()));
                }
            }
            Op::AddChannelBias { x, bias } => {
                res.push((*x, g.clone()));
                if needs(bias) {
                    let s = g.shape();
                    let (c, hw) = (s[1], s[2..].iter().product::<usize>());
                    let mut db = vec![0.0; c];
                    for (i, chunk) in g.data().chunks(hw).enumerate() {
                        db[i % c] += chunk.iter().sum::<f32>();
                    }
                    res.push((*bias, Tensor::new(vec![c], db).unwrap()));
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                res.push((*a, Tensor::full(val(a).shape(), s)));
            }
            Op::Reshape(a) => {
                res.push((*a, Tensor::new(val(a).shape().to_vec(), g.data().to_vec()).unwrap()));
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let (dx, dk) = conv2d_backward(
                    val(x),
                    val(kernel),
                    g,
                    *stride,
                    *padding,
                    needs(x),
                    needs(kernel),
                );
                if let Some(dx) = dx {
                    res.push((*x, dx));
                }
                if let Some(dk) = dk {
                    res.push((*kernel, dk));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(x).shape());
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[src] += gv;
                }
                res.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = val(x).shape();
                let c = s[1];
                let r: usize = s[2..].iter().product();
                let gam = val(gamma).data();
                let n = (s[0] * r) as f64;
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for (i, (&gv, &xh)) in g.data().iter().zip(xhat).enumerate() {
                    let ch = (i / r) % c;
                    sum_g[ch] += gv as f64;
                    sum_gx[ch] += (gv * xh) as f64;
                }
                if needs(x) {
                    let mut dx = vec![0.0; g.numel()];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let ch = (i / r) % c;
                        let dxhat = g.data()[i] * gam[ch];
                        *d = if *train {
                            let mean_dxhat = gam[ch] as f64 * sum_g[ch] / n;
                            let mean_dxhat_xhat = gam[ch] as f64 * sum_gx[ch] / n;
                            (inv_std[ch] as f64
                                * (dxhat as f64 - mean_dxhat - xhat[i] as f64 * mean_dxhat_xhat))
                                as f32
                        } else {
                            dxhat * inv_std[ch]
                        };
                    }
                    res.push((*x, Tensor::new(s.to_vec(), dx).unwrap()));
                }
                if needs(gamma) {
                    let d = sum_gx.iter().map(|&v| v as f32).collect();
                    res.push((*gamma, Tensor::new(vec![c], d).unwrap()));
                }
                if needs(beta) {
                    let d = sum_g.iter().map(|&v| v as f32).collect();
                    res.push((*beta, Tensor::new(vec![c], d).unwrap()));
                }
            }
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), d).unwrap()));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = val(logits).shape();
                let (b, m) = (s[0], s[1]);
                let scale = g.data()[0] / b as f32;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(m).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                res.push((*logits, Tensor::new(s.to_vec(), d).unwrap()));
            }
            Op::SquaredError { x, target, scale } => {
                let k = -2.0 * scale * g.data()[0];
                let d = val(x).data().iter().zip(target).map(|(x, t)| k * (t - x)).collect();
                res.push((*x, Tensor::new(val(x).shape().to_vec(), d).unwrap()));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(val).collect();
                for (v, gi) in inputs.iter().zip(rule.backward(g, &ins, out)) {
                    if let Some(gi) = gi {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - k) / stride + 1
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    if x.rank() != 4 || k.rank() != 4 || x.shape()[1] != k.shape()[1] {
        return Err(mismatch("conv2d", x, k));
    }
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    if kh != kw {
        return Err(mismatch("conv2d (square kernel)", x, k));
    }
    if stride == 0 {
        return Err(TensorError::Invalid("conv2d: stride must be positive".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(TensorError::KernelTooLarge {
            kernel: kh,
            padded_h: h + 2 * padding,
            padded_w: w + 2 * padding,
        });
    }
    let (oh, ow) = (conv_out(h, kh, stride, padding), conv_out(w, kw, stride, padding));
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0f32; bs * o * oh * ow];
    for b in 0..bs {
        for oc in 0..o {
            let obase = (b * o + oc) * oh * ow;
            for ic in 0..c {
                let xbase = (b * c + ic) * h * w;
                let kbase = (oc * c + ic) * kh * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let kv = kd[kbase + i * kw + j];
                        for oy in 0..oh {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * w;
                            let orow = obase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[orow + ox] += kv * xd[xrow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![bs, o, oh, ow], out)
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &Tensor,
    stride: usize,
    padding: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (bs, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = want_dx.then(|| vec![0.0f32; xd.len()]);
    let mut dk = want_dk.then(|| vec![0.0f32; kd.len()]);
    for b in 0..bs {
        for oc in 0..o {
            let gbase = (b * o + oc) * oh * ow;
            for ic in 0..c {
                let xbase = (b * c + ic) * h * w;
                let kbase = (oc * c + ic) * kh * kw;
                for i in 0..kh {
                    for j in 0..kw {
                        let kv = kd[kbase + i * kw + j];
                        let mut acc = 0.0f32;
                        for oy in 0..oh {
                            let iy = (oy * stride + i) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox * stride + j) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xi = xbase + iy as usize * w + ix as usize;
                                let gv = gd[gbase + oy * ow + ox];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += gv * kv;
                                }
                                acc += gv * xd[xi];
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kbase + i * kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dk.map(|d| Tensor::new(k.shape().to_vec(), d).unwrap()),
    )
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let d = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), d)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    /// `alpha * x + y`.
    pub fn axpy(&mut self, alpha: f32, x: Var, y: Var) -> Result<Var> {
        let v = self.zip_same("axpy", x, y, |x, y| alpha * x + y)?;
        Ok(self.push(v, Op::Axpy { x, y, alpha }))
    }

    /// Adds `bias[F]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let f = bv.numel();
        if bv.rank() != 1 || xv.shape().last() != Some(&f) {
            return Err(mismatch("add_bias", xv, bv));
        }
        let mut d = xv.data().to_vec();
        for row in d.chunks_mut(f) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), d)?;
        Ok(self.push(v, Op::AddBias { x, bias }))
    }

    /// Adds `bias[C]` along axis 1 of `x[B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() < 2 || bv.rank() != 1 || xv.shape()[1] != bv.numel() {
            return Err(mismatch("add_channel_bias", xv, bv));
        }
        let c = bv.numel();
        let hw: usize = xv.shape()[2..].iter().product();
        let mut d = xv.data().to_vec();
        for (i, chunk) in d.chunks_mut(hw).enumerate() {
            let b = bv.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let v = Tensor::new(xv.shape().to_vec(), d)?;
        Ok(self.push(v, Op::AddChannelBias { x, bias }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Flattens all axes after the first.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let b = s.first().copied().unwrap_or(1);
        let rest: usize = s.iter().skip(1).product();
        self.reshape(a, &[b, rest])
    }

    /// Cross-correlation of `x[B,C,H,W]` with `kernel[O,C,k,k]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = conv2d_forward(self.value(x), self.value(kernel), stride, padding)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Non-overlapping max pooling over the last two axes of a rank-4 tensor.
    /// Ties go to the first position in row-major order.
    pub fn maxpool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(TensorError::Invalid(format!(
                "maxpool2d expects a rank-4 tensor, got {:?}",
                xv.shape()
            )));
        }
        let (bs, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(TensorError::NotDivisible { h, w, window });
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(bs * c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        let d = xv.data();
        for plane in 0..bs * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for i in 0..window {
                        for j in 0..window {
                            let idx = base + (oy * window + i) * w + ox * window + j;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![bs, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    /// Per-channel batch normalization over every axis except axis 1.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if xv.rank() < 2 || xv.shape()[1] != gv.numel() || gv.numel() != bv.numel() {
            return Err(mismatch("batchnorm", xv, gv));
        }
        if stats.channels() != gv.numel() {
            return Err(TensorError::Invalid(format!(
                "batchnorm: running stats hold {} channels, parameters {}",
                stats.channels(),
                gv.numel()
            )));
        }
        let s = xv.shape().to_vec();
        let c = s[1];
        let r: usize = s[2..].iter().product();
        let n = s[0] * r;
        let (mean, inv_std, train) = match mode {
            Mode::Train => {
                let mut sum = vec![0.0f64; c];
                for (i, &v) in xv.data().iter().enumerate() {
                    sum[(i / r) % c] += v as f64;
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
                let mut sq = vec![0.0f64; c];
                for (i, &v) in xv.data().iter().enumerate() {
                    let ch = (i / r) % c;
                    sq[ch] += (v as f64 - mean[ch]).powi(2);
                }
                let var: Vec<f64> = sq.iter().map(|s| s / n as f64).collect();
                let inv_std: Vec<f32> = var
                    .iter()
                    .map(|v| (1.0 / (v + stats.eps as f64).sqrt()) as f32)
                    .collect();
                let unbiased: Vec<f32> = sq
                    .iter()
                    .map(|s| (s / (n.max(2) - 1) as f64) as f32)
                    .collect();
                let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
                stats.update(&mean32, &unbiased);
                (mean32, inv_std, true)
            }
            Mode::Eval => {
                if stats.updates == 0 {
                    return Err(TensorError::UninitializedStats);
                }
                let inv_std = stats
                    .var
                    .iter()
                    .map(|&v| 1.0 / (v + stats.eps).sqrt())
                    .collect();
                (stats.mean.clone(), inv_std, false)
            }
        };
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut out = vec![0.0f32; xv.numel()];
        for (i, &v) in xv.data().iter().enumerate() {
            let ch = (i / r) % c;
            xhat[i] = (v - mean[ch]) * inv_std[ch];
            out[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f32> = (0..xv.numel())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let d = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let v = Tensor::new(xv.shape().to_vec(), d)?;
        Ok(self.push(v, Op::Dropout { x, mask }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]` for `logits[B, M]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(TensorError::Invalid(format!(
                "softmax_cross_entropy: logits {:?} vs {} labels",
                lv.shape(),
                labels.len()
            )));
        }
        let m = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(TensorError::Invalid(format!("label {bad} out of range for {m} classes")));
        }
        let mut probs = vec![0.0f32; lv.numel()];
        let mut total = 0.0f64;
        for ((row, prow), &label) in lv.data().chunks(m).zip(probs.chunks_mut(m)).zip(labels) {
            let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = ((v as f64 - mx).exp() / z) as f32;
            }
            total += z.ln() + mx - row[label] as f64;
        }
        let loss = (total / labels.len() as f64) as f32;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `scale * sum((target - x)^2)`.
    pub fn squared_error(&mut self, x: Var, target: &Tensor, scale: f32) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(mismatch("squared_error", xv, target));
        }
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| ((t - x) as f64).powi(2))
            .sum();
        Ok(self.push(
            Tensor::scalar((s * scale as f64) as f32),
            Op::SquaredError {
                x,
                target: target.data().to_vec(),
                scale,
            },
        ))
    }
}
