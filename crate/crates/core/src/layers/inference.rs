//! Tensor-level spike operators in deployment form (BN folded into weights).

use spikelab_numcore::ops::{avg_pool2d, conv2d, matmul, max_pool2d};
use spikelab_numcore::{Conv2dSpec, Pool2dSpec, Tensor};

use super::store::{check_domain, Domain};
use crate::error::{param_err, Error, Result};
use crate::neuron::{run_sequence, NeuronParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpikeTag {
    Binary,
    Ternary,
}

/// Time-major spike tensor `[T, ...]` whose values are checked against its tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor {
    data: Tensor,
    tag: SpikeTag,
}

impl SpikeTensor {
    pub fn binary(data: Tensor) -> Result<Self> {
        check_domain(&data, Domain::Binary, "binary spike tensor")?;
        Ok(SpikeTensor {
            data,
            tag: SpikeTag::Binary,
        })
    }

    pub fn ternary(data: Tensor) -> Result<Self> {
        check_domain(&data, Domain::Ternary, "ternary spike tensor")?;
        Ok(SpikeTensor {
            data,
            tag: SpikeTag::Ternary,
        })
    }

    pub fn tag(&self) -> SpikeTag {
        self.tag
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn into_data(self) -> Tensor {
        self.data
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    fn require_binary(&self, what: &str) -> Result<()> {
        match self.tag {
            SpikeTag::Binary => Ok(()),
            SpikeTag::Ternary => Err(Error::Domain(format!("{what} consumes binary spikes only"))),
        }
    }
}

/// Views `[T, B, C, H, W]` (or `[N, C, H, W]`) as a batch of planes.
fn as_planes(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    match s.len() {
        4 => Ok(t.clone()),
        5 => Ok(t.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?),
        _ => param_err(format!("expected [T, B, C, H, W] or [N, C, H, W], got {s:?}")),
    }
}

fn restore(y: Tensor, like: &[usize]) -> Result<Tensor> {
    if like.len() == 5 {
        let s = y.shape().to_vec();
        Ok(y.reshape(&[like[0], like[1], s[1], s[2], s[3]])?)
    } else {
        Ok(y)
    }
}

/// Windowed max without padding. Keeps the input's tag.
pub fn max_pool(x: &SpikeTensor, k: usize, stride: usize) -> Result<SpikeTensor> {
    let spec = Pool2dSpec {
        kernel: k,
        stride,
        padding: 0,
    };
    let (y, _) = max_pool2d(&as_planes(&x.data)?, spec)?;
    Ok(SpikeTensor {
        data: restore(y, x.shape())?,
        tag: x.tag,
    })
}

/// Windowed mean without padding. The result is real-valued.
pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Result<Tensor> {
    let spec = Pool2dSpec {
        kernel: k,
        stride,
        padding: 0,
    };
    restore(avg_pool2d(&as_planes(x)?, spec)?, x.shape())
}

/// Per-channel `k × k` same-padded convolution followed by the neuron over time.
/// `weights` is `[C, 1, k, k]`; `x` is `[T, B, C, H, W]`.
pub fn dwc_token_mix(x: &SpikeTensor, weights: &Tensor, params: &NeuronParams) -> Result<SpikeTensor> {
    x.require_binary("depthwise token mixing")?;
    let ws = weights.shape();
    if ws.len() != 4 || ws[1] != 1 || ws[2] != ws[3] {
        return param_err(format!("depthwise kernel must be [C, 1, k, k], got {ws:?}"));
    }
    let k = ws[2];
    if k % 2 == 0 {
        return param_err(format!("depthwise kernel size must be odd, got {k}"));
    }
    if x.shape().len() != 5 {
        return param_err(format!("expected [T, B, C, H, W], got {:?}", x.shape()));
    }
    let spec = Conv2dSpec {
        stride: 1,
        padding: k / 2,
        groups: ws[0],
    };
    let current = restore(conv2d(&as_planes(&x.data)?, weights, spec)?, x.shape())?;
    SpikeTensor::binary(run_sequence(params, &current)?.0)
}

/// Accumulate-only product `a · b` for binary `a`: each output is the sum of
/// the rows of `b` selected by the ones of `a`. Batched over matching leading axes.
pub fn spike_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_domain(a, Domain::Binary, "spike product left operand")?;
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return param_err(format!("spike product shapes {sa:?} and {sb:?} do not batch"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return param_err(format!("spike product inner sizes differ: {k} vs {k2}"));
    }
    let batches = a.len() / (m * k).max(1);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; batches * m * n];
    for bi in 0..batches {
        for i in 0..m {
            let row = &mut out[(bi * m + i) * n..(bi * m + i + 1) * n];
            for p in 0..k {
                if ad[(bi * m + i) * k + p] == 1.0 {
                    let src = &bd[(bi * k + p) * n..(bi * k + p + 1) * n];
                    for (o, s) in row.iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
    }
    let mut shape = sa[..sa.len() - 1].to_vec();
    shape.push(n);
    Ok(Tensor::new(&shape, out)?)
}

/// Spiking self-attention on `[T, B, N, D]` tokens with folded `[D, D]`
/// projections: `Q, K, V = LIF(x·W)`, output `LIF(Q·(Kᵀ·V)·s)`.
pub fn ssa(x: &SpikeTensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, scale: f64, params: &NeuronParams) -> Result<SpikeTensor> {
    x.require_binary("self-attention")?;
    if x.shape().len() != 4 {
        return param_err(format!("expected [T, B, N, D] tokens, got {:?}", x.shape()));
    }
    let project = |w: &Tensor| -> Result<Tensor> { Ok(run_sequence(params, &matmul(&x.data, w)?)?.0) };
    let (q, k, v) = (project(wq)?, project(wk)?, project(wv)?);
    let kv = spike_matmul(&k.transpose_last2()?, &v)?;
    let qkv = spike_matmul(&q, &kv)?;
    SpikeTensor::binary(run_sequence(params, &qkv.scale(scale))?.0)
}

/// Spiking MLP in deployment form: `LIF(x·W1)` then `x·W2` fired by the next
/// neuron. `w1` is `[D, hidden]`, `w2` is `[hidden, D]`, `x` is `[T, ..., D]`.
pub fn smlp_block(x: &SpikeTensor, w1: &Tensor, w2: &Tensor, params: &NeuronParams) -> Result<SpikeTensor> {
    x.require_binary("spiking MLP")?;
    let hidden = run_sequence(params, &matmul(&x.data, w1)?)?.0;
    SpikeTensor::binary(run_sequence(params, &matmul(&hidden, w2)?)?.0)
}

/// Batch-norm parameters and statistics for folding.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Folds BN into the preceding convolution: `w' = w·γ/√(σ²+ε)`,
/// `b' = (b - μ)·γ/√(σ²+ε) + β`. The kernel is `[O, C, kh, kw]`.
pub fn bn_fold(weight: &Tensor, bias: Option<&[f64]>, bn: &BnParams) -> Result<(Tensor, Vec<f64>)> {
    let o = *weight.shape().first().unwrap_or(&0);
    if [bn.gamma.len(), bn.beta.len(), bn.mean.len(), bn.var.len()].iter().any(|&l| l != o) {
        return param_err(format!("BN statistics must have {o} channels"));
    }
    if bias.is_some_and(|b| b.len() != o) {
        return param_err(format!("bias must have {o} channels"));
    }
    if let Some(c) = bn.var.iter().position(|&v| !(v > 0.0)) {
        return param_err(format!("BN variance of channel {c} is not positive"));
    }
    let per = weight.len() / o.max(1);
    let factor: Vec<f64> = (0..o).map(|c| bn.gamma[c] / (bn.var[c] + bn.eps).sqrt()).collect();
    let mut w = weight.clone();
    for (c, chunk) in w.data_mut().chunks_mut(per).enumerate() {
        for v in chunk {
            *v *= factor[c];
        }
    }
    let b = (0..o)
        .map(|c| (bias.map_or(0.0, |b| b[c]) - bn.mean[c]) * factor[c] + bn.beta[c])
        .collect();
    Ok((w, b))
}

/// Convolution plus per-channel bias, for running folded layers.
pub fn conv2d_bias(x: &Tensor, weight: &Tensor, bias: &[f64], spec: Conv2dSpec) -> Result<Tensor> {
    let mut y = conv2d(x, weight, spec)?;
    let s = y.shape().to_vec();
    if bias.len() != s[1] {
        return param_err(format!("bias has {} entries for {} channels", bias.len(), s[1]));
    }
    let plane = s[2] * s[3];
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let b = bias[i % s[1]];
        for v in chunk {
            *v += b;
        }
    }
    Ok(y)
}
