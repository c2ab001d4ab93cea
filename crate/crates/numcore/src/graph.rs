//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward sweep is a plain reverse scan. Leaf
//! gradients persist across `backward` calls and accumulate until
//! [`Graph::zero_grad`]; intermediate gradients are transient.

use crate::error::{NumError, Result};
use crate::ops::{self, Conv2dSpec, Pool2dSpec};
use crate::tensor::{check_same_shape, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation whose forward is computed by the caller and whose backward is
/// supplied here. Used for neuron dynamics that live outside this crate.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient for each input (in order), or `None` where not needed.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of reduced elements per channel.
    pub count: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Transpose(Var),
    Conv2d {
        x: Var,
        k: Var,
        spec: Conv2dSpec,
    },
    Matmul(Var, Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        spec: Pool2dSpec,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    MeanLeading(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose_last2()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, spec: Conv2dSpec) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(k), spec)?;
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(v, Op::Conv2d { x, k, spec }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Matmul(a, b), rg))
    }

    /// Batch normalisation over every axis except axis 1, using the batch's
    /// own statistics. Returns the output and the statistics used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (c, inner, outer) = bn_layout(self.value(x), self.value(gamma), self.value(beta))?;
        let xd = self.value(x).data();
        let count = inner * outer;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (ch, m) in mean.iter_mut().enumerate() {
            let mut s = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                s += xd[base..base + inner].iter().sum::<f64>();
            }
            *m = s / count as f64;
        }
        for (ch, vv) in var.iter_mut().enumerate() {
            let mut s = 0.0;
            for o in 0..outer {
                let base = (o * c + ch) * inner;
                s += xd[base..base + inner]
                    .iter()
                    .map(|&v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
            *vv = s / count as f64;
        }
        let out = self.bn_apply(x, gamma, beta, &mean, &var, true)?;
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (c, _, _) = bn_layout(self.value(x), self.value(gamma), self.value(beta))?;
        if mean.len() != c || var.len() != c {
            return Err(NumError::ShapeMismatch {
                op: "batch_norm",
                dim: "running statistics length".into(),
                expected: c,
                got: mean.len().min(var.len()),
            });
        }
        self.bn_apply(x, gamma, beta, mean, var, false)
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], batch_stats: bool) -> Result<Var> {
        let (c, inner, outer) = bn_layout(self.value(x), self.value(gamma), self.value(beta))?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for ch in 0..c {
                let base = (o * c + ch) * inner;
                for i in base..base + inner {
                    let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let xhat = Tensor::new(&shape, xhat)?;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, x: Var, spec: Pool2dSpec) -> Result<Var> {
        let (v, argmax) = ops::max_pool2d(self.value(x), spec)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::MaxPool { x, argmax }, rg))
    }

    pub fn avg_pool2d(&mut self, x: Var, spec: Pool2dSpec) -> Result<Var> {
        let v = ops::avg_pool2d(self.value(x), spec)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::AvgPool { x, spec }, rg))
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return Err(NumError::Rank {
                op: "channel_bias",
                expected: 2,
                shape: xs.to_vec(),
            });
        }
        let c = xs[1];
        if self.value(b).len() != c {
            return Err(NumError::ShapeMismatch {
                op: "channel_bias",
                dim: "bias length vs channels".into(),
                expected: c,
                got: self.value(b).len(),
            });
        }
        let inner: usize = xs[2..].iter().product();
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, e) in v.data_mut().iter_mut().enumerate() {
            *e += bd[(i / inner) % c];
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::ChannelBias { x, b }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(v, Op::Mean(a), rg)
    }

    /// Mean over the two trailing axes: `[N, C, H, W] -> [N, C]`.
    pub fn mean_spatial(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.len() != 4 {
            return Err(NumError::Rank {
                op: "mean_spatial",
                expected: 4,
                shape: s,
            });
        }
        let hw = s[2] * s[3];
        let d = self.value(a).data();
        let out: Vec<f64> = d.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let v = Tensor::new(&[s[0], s[1]], out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MeanSpatial(a), rg))
    }

    /// Mean over the leading axis: `[T, ...] -> [...]`.
    pub fn mean_leading(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).shape().to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(NumError::invalid("mean_leading", "need a non-empty leading axis"));
        }
        let t = s[0];
        let inner: usize = s[1..].iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0; inner];
        for step in 0..t {
            for (o, &x) in out.iter_mut().zip(&d[step * inner..(step + 1) * inner]) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= t as f64;
        }
        let v = Tensor::new(&s[1..], out)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::MeanLeading(a), rg))
    }

    /// Mean over the batch of `-Σ_k target[k] · log softmax(logits)[k]`.
    /// `targets` holds one probability row per sample.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(NumError::Rank {
                op: "softmax_cross_entropy",
                expected: 2,
                shape: lv.shape().to_vec(),
            });
        }
        check_same_shape("softmax_cross_entropy", lv, &targets)?;
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = m + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lz).exp();
                loss -= targets.data()[i * k + j] * (row[j] - lz);
            }
        }
        let probs = Tensor::new(&[b, k], probs)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Record an externally computed operation.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if ls.len() != 1 {
            return Err(NumError::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(ls.shape()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let mut out = Vec::with_capacity(2);
        let need = |v: Var| self.rg(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g.clone()));
                }
                if need(*b) {
                    out.push((*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.mul(self.value(*b))?));
                }
                if need(*b) {
                    out.push((*b, g.mul(self.value(*a))?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Reshape(a) => out.push((*a, g.clone().with_shape(self.value(*a).shape()))),
            Op::Transpose(a) => out.push((*a, g.transpose_last2()?)),
            Op::Conv2d { x, k, spec } => {
                let (gx, gk) = ops::conv2d_backward(self.value(*x), self.value(*k), g, *spec, need(*x), need(*k))?;
                out.extend(gx.map(|t| (*x, t)));
                out.extend(gk.map(|t| (*k, t)));
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), g, need(*a), need(*b))?;
                out.extend(ga.map(|t| (*a, t)));
                out.extend(gb.map(|t| (*b, t)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let c = inv_std.len();
                let shape = xhat.shape();
                let inner: usize = shape[2..].iter().product();
                let outer = shape[0];
                let m = (inner * outer) as f64;
                let (gd, hd) = (g.data(), xhat.data());
                let mut sum_g = vec![0.0; c];
                let mut sum_gh = vec![0.0; c];
                for o in 0..outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * inner;
                        for idx in base..base + inner {
                            sum_g[ch] += gd[idx];
                            sum_gh[ch] += gd[idx] * hd[idx];
                        }
                    }
                }
                if need(*x) {
                    let gam = self.value(*gamma).data();
                    let mut gx = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * inner;
                            let s = gam[ch] * inv_std[ch];
                            for idx in base..base + inner {
                                gx[idx] = if *batch_stats {
                                    s * (gd[idx] - sum_g[ch] / m - hd[idx] * sum_gh[ch] / m)
                                } else {
                                    s * gd[idx]
                                };
                            }
                        }
                    }
                    out.push((*x, Tensor::new(shape, gx)?));
                }
                if need(*gamma) {
                    out.push((*gamma, Tensor::new(self.value(*gamma).shape(), sum_gh)?));
                }
                if need(*beta) {
                    out.push((*beta, Tensor::new(self.value(*beta).shape(), sum_g)?));
                }
            }
            Op::MaxPool { x, argmax } => {
                out.push((*x, ops::max_pool2d_backward(self.value(*x).shape(), argmax, g)));
            }
            Op::AvgPool { x, spec } => {
                out.push((*x, ops::avg_pool2d_backward(self.value(*x).shape(), *spec, g)));
            }
            Op::ChannelBias { x, b } => {
                if need(*x) {
                    out.push((*x, g.clone()));
                }
                if need(*b) {
                    let s = g.shape();
                    let c = s[1];
                    let inner: usize = s[2..].iter().product();
                    let mut gb = vec![0.0; c];
                    for (idx, &v) in g.data().iter().enumerate() {
                        gb[(idx / inner) % c] += v;
                    }
                    out.push((*b, Tensor::new(self.value(*b).shape(), gb)?));
                }
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                out.push((*a, Tensor::full(self.value(*a).shape(), s)));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let s = g.data()[0] / av.len().max(1) as f64;
                out.push((*a, Tensor::full(av.shape(), s)));
            }
            Op::MeanSpatial(a) => {
                let s = self.value(*a).shape();
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(hw * g.len());
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                out.push((*a, Tensor::new(s, gx)?));
            }
            Op::MeanLeading(a) => {
                let s = self.value(*a).shape();
                let t = s[0];
                let mut gx = Vec::with_capacity(t * g.len());
                for _ in 0..t {
                    gx.extend(g.data().iter().map(|&v| v / t as f64));
                }
                out.push((*a, Tensor::new(s, gx)?));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = probs.shape()[0] as f64;
                let s = g.data()[0] / b;
                let gl = probs.zip_map(targets, "softmax_cross_entropy", |p, t| s * (p - t))?;
                out.push((*logits, gl));
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let grads = op.backward(&vals, &node.value, g, &needs)?;
                if grads.len() != inputs.len() {
                    return Err(NumError::invalid(
                        "backward",
                        format!("{} returned {} gradients for {} inputs", op.name(), grads.len(), inputs.len()),
                    ));
                }
                for (&v, gi) in inputs.iter().zip(grads) {
                    if let (true, Some(gi)) = (need(v), gi) {
                        check_same_shape(op.name(), self.value(v), &gi)?;
                        out.push((v, gi));
                    }
                }
            }
        }
        Ok(out)
    }
}

fn bn_layout(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(NumError::Rank {
            op: "batch_norm",
            expected: 2,
            shape: s.to_vec(),
        });
    }
    let c = s[1];
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.len() != c {
            return Err(NumError::ShapeMismatch {
                op: "batch_norm",
                dim: format!("{name} length vs channels"),
                expected: c,
                got: p.len(),
            });
        }
    }
    Ok((c, s[2..].iter().product(), s[0]))
}
