//! CPU kernels with hand-written backward passes for the ops where candle's
//! generic broadcast and reduction paths dominate training time.
//!
//! Every op requires contiguous inputs (callers make them so) and supports
//! `f32` and `f64`.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:ident $(, $arg:expr)*) => {
        match $s {
            CpuStorage::F32(_) => {
                let (v, shape) = $f::<f32>(slice::<f32>($s, $l)?, $l.dims() $(, $arg)*)?;
                Ok((f32::to_cpu_storage_owned(v), shape))
            }
            CpuStorage::F64(_) => {
                let (v, shape) = $f::<f64>(slice::<f64>($s, $l)?, $l.dims() $(, $arg)*)?;
                Ok((f64::to_cpu_storage_owned(v), shape))
            }
            _ => Err(candle_core::Error::Msg("kernel supports f32 and f64 only".into())),
        }
    };
}

macro_rules! dispatch2 {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:ident $(, $arg:expr)*) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let (v, shape) = $f::<f32>(
                    slice::<f32>($s1, $l1)?, $l1.dims(), slice::<f32>($s2, $l2)?, $l2.dims() $(, $arg)*)?;
                Ok((f32::to_cpu_storage_owned(v), shape))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let (v, shape) = $f::<f64>(
                    slice::<f64>($s1, $l1)?, $l1.dims(), slice::<f64>($s2, $l2)?, $l2.dims() $(, $arg)*)?;
                Ok((f64::to_cpu_storage_owned(v), shape))
            }
            _ => Err(candle_core::Error::Msg("kernel supports matching f32 or f64 inputs only".into())),
        }
    };
}

fn last(dims: &[usize]) -> usize {
    *dims.last().unwrap_or(&1)
}

fn cast<T: Float>(x: f64) -> T {
    T::from(x).unwrap()
}

// ---------------------------------------------------------------- layer norm

/// Normalizes rows of the last dimension to zero mean and unit variance.
struct Normalize {
    eps: f64,
}

fn normalize_fwd<T: Float + WithDType>(x: &[T], dims: &[usize], eps: f64) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let mut out = vec![T::zero(); x.len()];
    let inv_d = cast::<T>(1.0 / d as f64);
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let inv = T::one() / (var + cast(eps)).sqrt();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    Ok((out, Shape::from(dims)))
}

/// `dx = (g - mean(g) - y * mean(g * y)) / sigma`, recomputing sigma from `x`.
struct NormalizeBwd {
    eps: f64,
}

fn normalize_bwd<T: Float + WithDType>(
    x: &[T],
    dims: &[usize],
    g: &[T],
    _gdims: &[usize],
    eps: f64,
) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let inv_d = cast::<T>(1.0 / d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); d];
    for ((row, gr), o) in x.chunks_exact(d).zip(g.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
        let inv = T::one() / (var + cast(eps)).sqrt();
        let mut gm = T::zero();
        let mut gy = T::zero();
        for i in 0..d {
            y[i] = (row[i] - mean) * inv;
            gm = gm + gr[i];
            gy = gy + gr[i] * y[i];
        }
        gm = gm * inv_d;
        gy = gy * inv_d;
        for i in 0..d {
            o[i] = (gr[i] - gm - y[i] * gy) * inv;
        }
    }
    Ok((out, Shape::from(dims)))
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch1!(s, l, normalize_fwd, self.eps)
    }
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &NormalizeBwd { eps: self.eps })?))
    }
}

impl CustomOp2 for NormalizeBwd {
    fn name(&self) -> &'static str {
        "normalize-bwd"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, normalize_bwd, self.eps)
    }
}

pub fn normalize(x: &Tensor, eps: f64) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Normalize { eps })
}

// ------------------------------------------------------------------ softmax

struct Softmax;

fn softmax_fwd<T: Float + WithDType>(x: &[T], dims: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
        let mut sum = T::zero();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum = sum + *o;
        }
        let inv = T::one() / sum;
        o.iter_mut().for_each(|v| *v = *v * inv);
    }
    Ok((out, Shape::from(dims)))
}

/// `dx = y * (g - sum(g * y))`.
struct SoftmaxBwd;

fn softmax_bwd<T: Float + WithDType>(y: &[T], dims: &[usize], g: &[T], _gd: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&y, &g)| a + y * g);
        for i in 0..d {
            o[i] = yr[i] * (gr[i] - dot);
        }
    }
    Ok((out, Shape::from(dims)))
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch1!(s, l, softmax_fwd)
    }
    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxBwd)?))
    }
}

impl CustomOp2 for SoftmaxBwd {
    fn name(&self) -> &'static str {
        "softmax-last-bwd"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, softmax_bwd)
    }
}

pub fn softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

struct LogSoftmax;

fn log_softmax_fwd<T: Float + WithDType>(x: &[T], dims: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let max = row.iter().fold(T::neg_infinity(), |a, &v| Float::max(a, v));
        let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
        let lse = max + sum.ln();
        for (o, &v) in o.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Ok((out, Shape::from(dims)))
}

/// `dx = g - exp(y) * sum(g)`.
struct LogSoftmaxBwd;

fn log_softmax_bwd<T: Float + WithDType>(y: &[T], dims: &[usize], g: &[T], _gd: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let d = last(dims);
    let mut out = vec![T::zero(); y.len()];
    for ((yr, gr), o) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(out.chunks_exact_mut(d)) {
        let sum = gr.iter().fold(T::zero(), |a, &g| a + g);
        for i in 0..d {
            o[i] = gr[i] - yr[i].exp() * sum;
        }
    }
    Ok((out, Shape::from(dims)))
}

impl CustomOp1 for LogSoftmax {
    fn name(&self) -> &'static str {
        "log-softmax-last"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch1!(s, l, log_softmax_fwd)
    }
    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &LogSoftmaxBwd)?))
    }
}

impl CustomOp2 for LogSoftmaxBwd {
    fn name(&self) -> &'static str {
        "log-softmax-last-bwd"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, log_softmax_bwd)
    }
}

pub fn log_softmax_last(x: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(LogSoftmax)
}

// ------------------------------------------------------ time-axis unfolding

/// `(B, L, C)` to `(B, L, K*C)`: block `k` of frame `t` holds frame
/// `t + k - K/2`, zero outside the sequence.
struct Unfold {
    kernel: usize,
}

fn unfold_fwd<T: Float + WithDType>(x: &[T], dims: &[usize], kernel: usize) -> CResult<(Vec<T>, Shape)> {
    let (b, l, c) = (dims[0], dims[1], dims[2]);
    let half = kernel / 2;
    let mut out = vec![T::zero(); b * l * kernel * c];
    for bi in 0..b {
        for t in 0..l {
            let o = &mut out[(bi * l + t) * kernel * c..][..kernel * c];
            for k in 0..kernel {
                let src = t as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < l {
                    let s = &x[(bi * l + src as usize) * c..][..c];
                    o[k * c..(k + 1) * c].copy_from_slice(s);
                }
            }
        }
    }
    Ok((out, Shape::from((b, l, kernel * c))))
}

/// Adjoint of [`Unfold`].
struct Fold {
    kernel: usize,
}

fn fold_fwd<T: Float + WithDType>(g: &[T], dims: &[usize], kernel: usize) -> CResult<(Vec<T>, Shape)> {
    let (b, l, kc) = (dims[0], dims[1], dims[2]);
    let c = kc / kernel;
    let half = kernel / 2;
    let mut out = vec![T::zero(); b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let gi = &g[(bi * l + t) * kc..][..kc];
            for k in 0..kernel {
                let dst = t as isize + k as isize - half as isize;
                if dst >= 0 && (dst as usize) < l {
                    let o = &mut out[(bi * l + dst as usize) * c..][..c];
                    for (o, &v) in o.iter_mut().zip(&gi[k * c..(k + 1) * c]) {
                        *o = *o + v;
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((b, l, c))))
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold-time"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch1!(s, l, unfold_fwd, self.kernel)
    }
    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold { kernel: self.kernel })?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold-time"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch1!(s, l, fold_fwd, self.kernel)
    }
}

pub fn unfold_time(x: &Tensor, kernel: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op1(Unfold { kernel })
}

// --------------------------------------------------- depthwise convolution

/// `y[b,t,c] = sum_k w[k,c] * x[b, t+k-K/2, c]` with zero padding.
struct Depthwise;

fn depthwise_fwd<T: Float + WithDType>(x: &[T], xd: &[usize], w: &[T], wd: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let (b, l, c) = (xd[0], xd[1], xd[2]);
    let kernel = wd[0];
    let half = kernel / 2;
    let mut out = vec![T::zero(); b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let o = &mut out[(bi * l + t) * c..][..c];
            for k in 0..kernel {
                let src = t as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < l {
                    let xs = &x[(bi * l + src as usize) * c..][..c];
                    let ws = &w[k * c..(k + 1) * c];
                    for i in 0..c {
                        o[i] = o[i] + ws[i] * xs[i];
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((b, l, c))))
}

/// Gradient with respect to the input: correlation with the flipped kernel.
struct DepthwiseBwdInput;

fn depthwise_bwd_input<T: Float + WithDType>(g: &[T], gd: &[usize], w: &[T], wd: &[usize]) -> CResult<(Vec<T>, Shape)> {
    let (b, l, c) = (gd[0], gd[1], gd[2]);
    let kernel = wd[0];
    let half = kernel / 2;
    let mut out = vec![T::zero(); b * l * c];
    for bi in 0..b {
        for t in 0..l {
            let gs = &g[(bi * l + t) * c..][..c];
            for k in 0..kernel {
                let dst = t as isize + k as isize - half as isize;
                if dst >= 0 && (dst as usize) < l {
                    let o = &mut out[(bi * l + dst as usize) * c..][..c];
                    let ws = &w[k * c..(k + 1) * c];
                    for i in 0..c {
                        o[i] = o[i] + ws[i] * gs[i];
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((b, l, c))))
}

/// Gradient with respect to the `(K, C)` weights.
struct DepthwiseBwdWeight {
    kernel: usize,
}

fn depthwise_bwd_weight<T: Float + WithDType>(
    x: &[T],
    xd: &[usize],
    g: &[T],
    _gd: &[usize],
    kernel: usize,
) -> CResult<(Vec<T>, Shape)> {
    let (b, l, c) = (xd[0], xd[1], xd[2]);
    let half = kernel / 2;
    let mut out = vec![T::zero(); kernel * c];
    for bi in 0..b {
        for t in 0..l {
            let gs = &g[(bi * l + t) * c..][..c];
            for k in 0..kernel {
                let src = t as isize + k as isize - half as isize;
                if src >= 0 && (src as usize) < l {
                    let xs = &x[(bi * l + src as usize) * c..][..c];
                    let o = &mut out[k * c..(k + 1) * c];
                    for i in 0..c {
                        o[i] = o[i] + gs[i] * xs[i];
                    }
                }
            }
        }
    }
    Ok((out, Shape::from((kernel, c))))
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, depthwise_fwd)
    }
    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let g = grad.contiguous()?;
        let dx = g.apply_op2_no_bwd(w, &DepthwiseBwdInput)?;
        let dw = x.apply_op2_no_bwd(&g, &DepthwiseBwdWeight { kernel: w.dim(0)? })?;
        Ok((Some(dx), Some(dw)))
    }
}

impl CustomOp2 for DepthwiseBwdInput {
    fn name(&self) -> &'static str {
        "depthwise-conv-bwd-input"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, depthwise_bwd_input)
    }
}

impl CustomOp2 for DepthwiseBwdWeight {
    fn name(&self) -> &'static str {
        "depthwise-conv-bwd-weight"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        dispatch2!(s1, l1, s2, l2, depthwise_bwd_weight, self.kernel)
    }
}

/// `x`: `(B, L, C)`, `w`: `(K, C)`.
pub fn depthwise_conv(x: &Tensor, w: &Tensor) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn close(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Compares against the same function built from primitive ops.
    fn check(f: impl Fn(&Tensor) -> Tensor, reference: impl Fn(&Tensor) -> Tensor, shape: (usize, usize, usize)) {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, shape, &dev).unwrap()).unwrap();
        let a = f(x.as_tensor());
        let b = reference(x.as_tensor());
        assert!(close(&a, &b) < 1e-10, "forward mismatch");
        let r = Tensor::randn(0f64, 1.0, a.shape(), &dev).unwrap();
        let ga = a.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = b.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(close(ga.get(x.as_tensor()).unwrap(), gb.get(x.as_tensor()).unwrap()) < 1e-10, "backward mismatch");
    }

    #[test]
    fn normalize_matches_primitives() {
        check(
            |x| normalize(x, 1e-5).unwrap(),
            |x| {
                let m = x.mean_keepdim(D::Minus1).unwrap();
                let c = x.broadcast_sub(&m).unwrap();
                let v = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                c.broadcast_div(&(v + 1e-5).unwrap().sqrt().unwrap()).unwrap()
            },
            (2, 3, 7),
        );
    }

    #[test]
    fn softmaxes_match_primitives() {
        let reference = |x: &Tensor| {
            let e = x.exp().unwrap();
            e.broadcast_div(&e.sum_keepdim(D::Minus1).unwrap()).unwrap()
        };
        check(|x| softmax_last(x).unwrap(), reference, (2, 3, 5));
        check(|x| log_softmax_last(x).unwrap(), |x| reference(x).log().unwrap(), (2, 3, 5));
    }

    #[test]
    fn unfold_matches_shifted_concat() {
        check(
            |x| unfold_time(x, 3).unwrap(),
            |x| {
                let l = x.dim(1).unwrap();
                let p = x.pad_with_zeros(1, 1, 1).unwrap();
                let parts: Vec<Tensor> = (0..3).map(|k| p.narrow(1, k, l).unwrap()).collect();
                Tensor::cat(&parts, D::Minus1).unwrap()
            },
            (2, 4, 3),
        );
    }

    #[test]
    fn depthwise_matches_shifted_sum() {
        let dev = Device::Cpu;
        let w = Var::from_tensor(&Tensor::randn(0f64, 1.0, (5, 3), &dev).unwrap()).unwrap();
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, (2, 6, 3), &dev).unwrap()).unwrap();
        let a = depthwise_conv(x.as_tensor(), w.as_tensor()).unwrap();
        let p = x.as_tensor().pad_with_zeros(1, 2, 2).unwrap();
        let mut b = x.as_tensor().zeros_like().unwrap();
        for k in 0..5 {
            b = (b + p.narrow(1, k, 6).unwrap().broadcast_mul(&w.as_tensor().narrow(0, k, 1).unwrap()).unwrap()).unwrap();
        }
        assert!(close(&a, &b) < 1e-10);
        let r = Tensor::randn(0f64, 1.0, a.shape(), &dev).unwrap();
        let ga = a.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = b.mul(&r).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            assert!(close(ga.get(v.as_tensor()).unwrap(), gb.get(v.as_tensor()).unwrap()) < 1e-10);
        }
    }
}
