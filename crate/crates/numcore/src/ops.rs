//! Forward and backward kernels. All loops run in a fixed sequential order so
//! results are bit-reproducible.

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    /// Number of channel groups; `groups == C_in == C_out` is depth-wise.
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }
    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }
    fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.oh, self.ow]
    }

    /// Output columns `ox` in `[lo, hi)` for which `ox*stride + kx - pad` lands inside the input.
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        axis_range(self.ow, self.w, self.stride, self.pad, kx)
    }
    fn oy_range(&self, ky: usize) -> (usize, usize) {
        axis_range(self.oh, self.h, self.stride, self.pad, ky)
    }
}

fn axis_range(out_len: usize, in_len: usize, stride: usize, pad: usize, k: usize) -> (usize, usize) {
    // need 0 <= o*stride + k - pad < in_len
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if in_len + pad > k {
        ((in_len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_geom(input: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    let (is, ks) = (input.shape(), kernel.shape());
    if is.len() != 4 {
        return Err(NumError::Rank {
            op: OP,
            expected: 4,
            shape: is.to_vec(),
        });
    }
    if ks.len() != 4 {
        return Err(NumError::Rank {
            op: OP,
            expected: 4,
            shape: ks.to_vec(),
        });
    }
    if spec.stride == 0 {
        return Err(NumError::invalid(OP, "stride must be positive"));
    }
    if spec.groups == 0 || is[1] % spec.groups != 0 || ks[0] % spec.groups != 0 {
        return Err(NumError::invalid(
            OP,
            format!(
                "groups {} must divide input channels {} and output channels {}",
                spec.groups, is[1], ks[0]
            ),
        ));
    }
    let cin_g = is[1] / spec.groups;
    if ks[1] != cin_g {
        return Err(NumError::ShapeMismatch {
            op: OP,
            dim: "kernel input channels".into(),
            expected: cin_g,
            got: ks[1],
        });
    }
    let (h, w, kh, kw) = (is[2], is[3], ks[2], ks[3]);
    let p2 = 2 * spec.padding;
    if kh == 0 || kh > h + p2 {
        return Err(NumError::ShapeMismatch {
            op: OP,
            dim: "kernel height vs padded input height".into(),
            expected: h + p2,
            got: kh,
        });
    }
    if kw == 0 || kw > w + p2 {
        return Err(NumError::ShapeMismatch {
            op: OP,
            dim: "kernel width vs padded input width".into(),
            expected: w + p2,
            got: kw,
        });
    }
    Ok(ConvGeom {
        n: is[0],
        c_in: is[1],
        h,
        w,
        c_out: ks[0],
        kh,
        kw,
        oh: (h + p2 - kh) / spec.stride + 1,
        ow: (w + p2 - kw) / spec.stride + 1,
        stride: spec.stride,
        pad: spec.padding,
        groups: spec.groups,
    })
}

/// Output spatial extent of a convolution or pooling window.
pub fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - k) / stride + 1
}

/// 2-D cross-correlation of `[N,C,H,W]` input with `[O,C/groups,kh,kw]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let g = conv_geom(input, kernel, spec)?;
    if g.groups == 1 {
        return conv2d_dense(input, kernel, &g);
    }
    let mut out = vec![0.0; g.out_shape().iter().product()];
    let (x, k) = (input.data(), kernel.data());
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / g.cout_g();
            let ob = (n * g.c_out + o) * out_plane;
            for ci in 0..g.cin_g() {
                let c = grp * g.cin_g() + ci;
                let ib = (n * g.c_in + c) * in_plane;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.oy_range(ky);
                    for kx in 0..g.kw {
                        let wv = k[((o * g.cin_g() + ci) * g.kh + ky) * g.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = g.ox_range(kx);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = ob + oy * g.ow;
                            let irow = ib + iy * g.w;
                            for ox in ox0..ox1 {
                                let ix = ox * g.stride + kx - g.pad;
                                out[orow + ox] += wv * x[irow + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&g.out_shape(), out)
}

/// Unfolds an ungrouped input into columns `[c_in·kh·kw, n·oh·ow]`; padding reads as zero.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ohw, cols) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut col = vec![0.0; g.c_in * g.kh * g.kw * cols];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.ox_range(kx);
                let row = ((c * g.kh + ky) * g.kw + kx) * cols;
                for n in 0..g.n {
                    let ib = (n * g.c_in + c) * g.h * g.w;
                    for oy in oy0..oy1 {
                        let irow = ib + (oy * g.stride + ky - g.pad) * g.w;
                        let crow = row + n * ohw + oy * g.ow;
                        for ox in ox0..ox1 {
                            col[crow + ox] = x[irow + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ohw, cols) = (g.oh * g.ow, g.n * g.oh * g.ow);
    let mut x = vec![0.0; g.n * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            let (oy0, oy1) = g.oy_range(ky);
            for kx in 0..g.kw {
                let (ox0, ox1) = g.ox_range(kx);
                let row = ((c * g.kh + ky) * g.kw + kx) * cols;
                for n in 0..g.n {
                    let ib = (n * g.c_in + c) * g.h * g.w;
                    for oy in oy0..oy1 {
                        let irow = ib + (oy * g.stride + ky - g.pad) * g.w;
                        let crow = row + n * ohw + oy * g.ow;
                        for ox in ox0..ox1 {
                            x[irow + ox * g.stride + kx - g.pad] += col[crow + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[c, n·hw]` to `[n, c, hw]` and back.
fn channel_major(src: &[f64], n: usize, c: usize, hw: usize, to_batch_major: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for ni in 0..n {
        for ci in 0..c {
            let (cm, bm) = (ci * n * hw + ni * hw, (ni * c + ci) * hw);
            let (from, to) = if to_batch_major { (cm, bm) } else { (bm, cm) };
            out[to..to + hw].copy_from_slice(&src[from..from + hw]);
        }
    }
    out
}

fn conv2d_dense(input: &Tensor, kernel: &Tensor, g: &ConvGeom) -> Result<Tensor> {
    let col = im2col(input.data(), g);
    let (kk, cols) = (g.c_in * g.kh * g.kw, g.n * g.oh * g.ow);
    let mut out = vec![0.0; g.c_out * cols];
    gemm_acc(kernel.data(), &col, &mut out, g.c_out, kk, cols);
    Tensor::new(&g.out_shape(), channel_major(&out, g.n, g.c_out, g.oh * g.ow, true))
}

fn conv2d_dense_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (kk, cols) = (g.c_in * g.kh * g.kw, g.n * g.oh * g.ow);
    let go = channel_major(grad_out.data(), g.n, g.c_out, g.oh * g.ow, false);
    let gk = if need_kernel {
        let col = im2col(input.data(), g);
        let mut gk = vec![0.0; g.c_out * kk];
        for o in 0..g.c_out {
            let grow = &go[o * cols..(o + 1) * cols];
            for r in 0..kk {
                gk[o * kk + r] = grow.iter().zip(&col[r * cols..(r + 1) * cols]).map(|(a, b)| a * b).sum();
            }
        }
        Some(Tensor::new(kernel.shape(), gk)?)
    } else {
        None
    };
    let gx = if need_input {
        let k = kernel.data();
        let kt: Vec<f64> = (0..kk * g.c_out).map(|i| k[(i % g.c_out) * kk + i / g.c_out]).collect();
        let mut gcol = vec![0.0; kk * cols];
        gemm_acc(&kt, &go, &mut gcol, kk, g.c_out, cols);
        Some(Tensor::new(input.shape(), col2im(&gcol, g))?)
    } else {
        None
    };
    Ok((gx, gk))
}

/// Gradients of `conv2d` with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    spec: Conv2dSpec,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = conv_geom(input, kernel, spec)?;
    if g.groups == 1 {
        return conv2d_dense_backward(input, kernel, grad_out, &g, need_input, need_kernel);
    }
    let (x, k, go) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gk = need_kernel.then(|| vec![0.0; k.len()]);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    for n in 0..g.n {
        for o in 0..g.c_out {
            let grp = o / g.cout_g();
            let ob = (n * g.c_out + o) * out_plane;
            for ci in 0..g.cin_g() {
                let c = grp * g.cin_g() + ci;
                let ib = (n * g.c_in + c) * in_plane;
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.oy_range(ky);
                    for kx in 0..g.kw {
                        let ki = ((o * g.cin_g() + ci) * g.kh + ky) * g.kw + kx;
                        let wv = k[ki];
                        let (ox0, ox1) = g.ox_range(kx);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let orow = ob + oy * g.ow;
                            let irow = ib + iy * g.w;
                            if let Some(gx) = gx.as_mut() {
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    gx[irow + ix] += wv * go[orow + ox];
                                }
                            }
                            if gk.is_some() {
                                for ox in ox0..ox1 {
                                    let ix = ox * g.stride + kx - g.pad;
                                    acc += go[orow + ox] * x[irow + ix];
                                }
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            gk[ki] += acc;
                        }
                    }
                }
            }
        }
    }
    let gx = gx.map(|d| Tensor::new(input.shape(), d)).transpose()?;
    let gk = gk.map(|d| Tensor::new(kernel.shape(), d)).transpose()?;
    Ok((gx, gk))
}

/// Broadcast bookkeeping for batched matmul over leading axes.
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// For every output batch index: (batch index into a, batch index into b).
    pairs: Vec<(usize, usize)>,
}

fn matmul_plan(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    const OP: &str = "matmul";
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 {
        return Err(NumError::Rank {
            op: OP,
            expected: 2,
            shape: sa.to_vec(),
        });
    }
    if sb.len() < 2 {
        return Err(NumError::Rank {
            op: OP,
            expected: 2,
            shape: sb.to_vec(),
        });
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != kb {
        return Err(NumError::ShapeMismatch {
            op: OP,
            dim: "inner dimension".into(),
            expected: k,
            got: kb,
        });
    }
    let ba = &sa[..sa.len() - 2];
    let bb = &sb[..sb.len() - 2];
    let rank = ba.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ba), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (axis, (&x, &y)) in pa.iter().zip(&pb).enumerate() {
        let d = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(NumError::ShapeMismatch {
                op: OP,
                dim: format!("batch axis {axis}"),
                expected: x,
                got: y,
            });
        };
        batch.push(d);
    }
    let total: usize = batch.iter().product();
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            ia = ia * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            ib = ib * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ia, ib));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        pairs,
    })
}

/// `c[m,n] += a[m,k] * b[k,n]` on row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Batched matrix product with broadcasting over leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![0.0; p.pairs.len() * m * n];
    for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
        gemm_acc(
            &a.data()[ia * m * k..(ia + 1) * m * k],
            &b.data()[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    Tensor::new(&p.out_shape, out)
}

/// Gradients of `matmul`, summed over broadcast batch axes.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    grad_out: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let p = matmul_plan(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let go = grad_out.data();
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for (bi, &(ia, ib)) in p.pairs.iter().enumerate() {
        let g = &go[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            // dA = G · Bᵀ
            let bm = &b.data()[ib * k * n..(ib + 1) * k * n];
            let dst = &mut ga[ia * m * k..(ia + 1) * m * k];
            for i in 0..m {
                for q in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += g[i * n + j] * bm[q * n + j];
                    }
                    dst[i * k + q] += acc;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            // dB = Aᵀ · G
            let am = &a.data()[ia * m * k..(ia + 1) * m * k];
            let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for q in 0..k {
                    let av = am[i * k + q];
                    if av == 0.0 {
                        continue;
                    }
                    let drow = &mut dst[q * n..(q + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d += av * gv;
                    }
                }
            }
        }
    }
    let ga = ga.map(|d| Tensor::new(a.shape(), d)).transpose()?;
    let gb = gb.map(|d| Tensor::new(b.shape(), d)).transpose()?;
    Ok((ga, gb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

fn pool_geom(x: &Tensor, spec: Pool2dSpec, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(NumError::Rank {
            op,
            expected: 4,
            shape: s.to_vec(),
        });
    }
    if spec.kernel == 0 || spec.stride == 0 {
        return Err(NumError::invalid(op, "kernel and stride must be positive"));
    }
    if spec.padding >= spec.kernel {
        return Err(NumError::invalid(op, "padding must be smaller than the window"));
    }
    for (dim, len) in [("height", s[2]), ("width", s[3])] {
        if spec.kernel > len + 2 * spec.padding {
            return Err(NumError::ShapeMismatch {
                op,
                dim: format!("window vs padded {dim}"),
                expected: len + 2 * spec.padding,
                got: spec.kernel,
            });
        }
    }
    let oh = conv_out_len(s[2], spec.kernel, spec.stride, spec.padding);
    let ow = conv_out_len(s[3], spec.kernel, spec.stride, spec.padding);
    Ok((s[0] * s[1], s[2], s[3], oh, ow))
}

/// Max pooling. Returns the output and, per output element, the flat input
/// index of the first maximal element in scan order.
pub fn max_pool2d(x: &Tensor, spec: Pool2dSpec) -> Result<(Tensor, Vec<usize>)> {
    let (planes, h, w, oh, ow) = pool_geom(x, spec, "max_pool2d")?;
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = usize::MAX;
                for ky in 0..spec.kernel {
                    let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for kx in 0..spec.kernel {
                        let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let i = base + iy as usize * w + ix as usize;
                        if xd[i] > best || best_i == usize::MAX {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    let s = x.shape();
    Ok((Tensor::new(&[s[0], s[1], oh, ow], out)?, arg))
}

pub fn max_pool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        gd[i] += v;
    }
    g
}

/// Average pooling; padded positions are excluded from the divisor.
pub fn avg_pool2d(x: &Tensor, spec: Pool2dSpec) -> Result<Tensor> {
    let (planes, h, w, oh, ow) = pool_geom(x, spec, "avg_pool2d")?;
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut acc, mut cnt) = (0.0, 0usize);
                for_window(spec, h, w, oy, ox, |iy, ix| {
                    acc += xd[base + iy * w + ix];
                    cnt += 1;
                });
                out.push(acc / cnt as f64);
            }
        }
    }
    let s = x.shape();
    Tensor::new(&[s[0], s[1], oh, ow], out)
}

pub fn avg_pool2d_backward(input_shape: &[usize], spec: Pool2dSpec, grad_out: &Tensor) -> Tensor {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (grad_out.shape()[2], grad_out.shape()[3]);
    let planes = input_shape[0] * input_shape[1];
    let mut g = Tensor::zeros(input_shape);
    let god = grad_out.data();
    let gd = g.data_mut();
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cnt = 0usize;
                for_window(spec, h, w, oy, ox, |_, _| cnt += 1);
                let v = god[(p * oh + oy) * ow + ox] / cnt as f64;
                for_window(spec, h, w, oy, ox, |iy, ix| gd[base + iy * w + ix] += v);
            }
        }
    }
    g
}

fn for_window(spec: Pool2dSpec, h: usize, w: usize, oy: usize, ox: usize, mut f: impl FnMut(usize, usize)) {
    for ky in 0..spec.kernel {
        let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        for kx in 0..spec.kernel {
            let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
            if ix < 0 || ix as usize >= w {
                continue;
            }
            f(iy as usize, ix as usize);
        }
    }
}
