//! Forward operations on [`Var`] and their gradient rules.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, Taps};
use super::scalar::Real;
use super::tape::{zeros_like, Op, ResampleMode, Var};
use super::tensor::{numel, Tensor};
use crate::error::{bail, Result};

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn suffix_broadcast(lhs: &[usize], rhs: &[usize]) -> Option<bool> {
    if lhs == rhs {
        return Some(false);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Some(true)
    } else {
        None
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let bd = b.data();
    let n = bd.len();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % n])).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Sums `g` over the leading axes so it matches a suffix shape of length `n`.
fn reduce_to_suffix<T: Real>(g: &[T], shape: &[usize]) -> Tensor<T> {
    let n = numel(shape);
    let mut out = vec![T::ZERO; n];
    for chunk in g.chunks(n) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn spatial(shape: &[usize], op: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        bail!(Argument, "{op} expects an N×C×H×W tensor, got {:?}", shape);
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

impl<'t, T: Real> Var<'t, T> {
    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if !self.same_tape(other) {
            bail!(Contract, "variables recorded on different tapes");
        }
        Ok(())
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        name: &'static str,
        make: fn(bool) -> Op<T>,
        f: fn(T, T) -> T,
    ) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let (value, bcast) = {
            let a = self.value();
            let b = rhs.value();
            let Some(bcast) = suffix_broadcast(a.shape(), b.shape()) else {
                bail!(Argument, "{name}: shape {:?} does not broadcast onto {:?}", b.shape(), a.shape());
            };
            (elementwise(&a, &b, f), bcast)
        };
        Ok(self.tape().push(value, make(bcast), &[self.id(), rhs.id()], name))
    }

    /// Elementwise sum; `rhs` may have a suffix of `self`'s shape and is then
    /// repeated over the leading axes.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "add", |bcast| Op::Add { bcast }, |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "sub", |bcast| Op::Sub { bcast }, |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, "mul", |bcast| Op::Mul { bcast }, |a, b| a * b)
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let f = T::from_f64(factor);
        let value = self.value().map(|v| v * f);
        self.tape().push(value, Op::Scale(f), &[self.id()], "scale")
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::from_f64(c);
        let value = self.value().map(|v| v + c);
        self.tape().push(value, Op::AddScalar, &[self.id()], "add_scalar")
    }

    fn matmul_impl(self, rhs: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.check_tape(&rhs)?;
        let (value, bcast_b) = {
            let a = self.value();
            let b = rhs.value();
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sb.len() < 2 {
                bail!(Argument, "matmul needs rank ≥ 2 operands, got {:?} and {:?}", sa, sb);
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) =
                if trans_b { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
            if k != kb {
                bail!(Argument, "matmul inner dims differ: {:?} × {:?} (trans_b={trans_b})", sa, sb);
            }
            let bcast_b = sb.len() == 2 && sa.len() > 2;
            if !bcast_b && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                bail!(Argument, "matmul batch dims differ: {:?} × {:?}", sa, sb);
            }
            let mut out_shape = sa[..sa.len() - 2].to_vec();
            out_shape.extend_from_slice(&[m, n]);
            let mut out = vec![T::ZERO; numel(&out_shape)];
            if bcast_b {
                let rows = a.numel() / k;
                kernels::gemm(rows, k, n, a.data(), false, b.data(), trans_b, &mut out, false);
            } else {
                let batches = a.numel() / (m * k);
                for bi in 0..batches {
                    kernels::gemm(
                        m,
                        k,
                        n,
                        &a.data()[bi * m * k..],
                        false,
                        &b.data()[bi * k * n..],
                        trans_b,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        false,
                    );
                }
            }
            (Tensor::from_parts(out_shape, out), bcast_b)
        };
        Ok(self.tape().push(value, Op::MatMul { trans_b, bcast_b }, &[self.id(), rhs.id()], "matmul"))
    }

    /// Batched `self · rhs`; a rank-2 `rhs` is shared across all leading axes.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, false)
    }

    /// Batched `self · rhsᵀ` (transpose of the trailing two axes of `rhs`).
    pub fn matmul_t(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(rhs, true)
    }

    /// 2-D cross-correlation, N×Cin×H×W with Cout×Cin×kh×kw weights.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
        self.check_tape(&weight)?;
        if stride == 0 {
            bail!(Argument, "conv2d stride must be positive");
        }
        let (value, geom) = {
            let x = self.value();
            let w = weight.value();
            let (n, cin, h, wd) = spatial(x.shape(), "conv2d")?;
            let ws = w.shape();
            if ws.len() != 4 || ws[1] != cin {
                bail!(Argument, "conv2d weight {:?} incompatible with input {:?}", ws, x.shape());
            }
            let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                bail!(Argument, "conv2d kernel {kh}×{kw} larger than padded input {h}×{wd}");
            }
            let geom = ConvGeom {
                cin,
                h,
                w: wd,
                kh,
                kw,
                stride,
                pad,
                ho: (h + 2 * pad - kh) / stride + 1,
                wo: (wd + 2 * pad - kw) / stride + 1,
            };
            let bias_val = match bias {
                Some(b) => {
                    self.check_tape(&b)?;
                    let bv = b.value();
                    if bv.shape() != [cout] {
                        bail!(Argument, "conv2d bias {:?} for {cout} output channels", bv.shape());
                    }
                    Some(bv.data().to_vec())
                }
                None => None,
            };
            let out = kernels::conv2d_forward(x.data(), n, w.data(), cout, bias_val.as_deref(), &geom);
            (Tensor::from_parts(vec![n, cout, geom.ho, geom.wo], out), geom)
        };
        let mut ids = vec![self.id(), weight.id()];
        if let Some(b) = bias {
            ids.push(b.id());
        }
        Ok(self.tape().push(value, Op::Conv2d { geom, has_bias: bias.is_some() }, &ids, "conv2d"))
    }

    fn resample(self, oh: usize, ow: usize, mode: ResampleMode, name: &'static str) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = spatial(x.shape(), name)?;
            if h == 0 || w == 0 || oh == 0 || ow == 0 {
                bail!(Argument, "{name}: empty spatial extent {h}×{w} → {oh}×{ow}");
            }
            let (ty, tx) = taps(mode, (h, w), (oh, ow));
            let out = kernels::resample_forward(x.data(), n * c, (h, w), &ty, &tx);
            Tensor::from_parts(vec![n, c, oh, ow], out)
        };
        Ok(self.tape().push(value, Op::Resample(mode), &[self.id()], name))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn upsample_bilinear(self, scale: usize) -> Result<Var<'t, T>> {
        if scale == 0 {
            bail!(Argument, "upsample scale must be positive");
        }
        let s = self.shape();
        let (_, _, h, w) = spatial(&s, "bilinear_upsample")?;
        self.resample(h * scale, w * scale, ResampleMode::Bilinear, "bilinear_upsample")
    }

    /// Bilinear resize to an explicit spatial size (half-pixel centers).
    pub fn resize_bilinear(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        self.resample(oh, ow, ResampleMode::Bilinear, "bilinear_upsample")
    }

    pub fn upsample_nearest(self, scale: usize) -> Result<Var<'t, T>> {
        if scale == 0 {
            bail!(Argument, "upsample scale must be positive");
        }
        let s = self.shape();
        let (_, _, h, w) = spatial(&s, "nearest_upsample")?;
        self.resample(h * scale, w * scale, ResampleMode::Nearest, "nearest_upsample")
    }

    /// Adaptive average pooling of the spatial axes onto an `oh×ow` grid.
    pub fn adaptive_avg_pool(self, oh: usize, ow: usize) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let (n, c, h, w) = spatial(x.shape(), "adaptive_avg_pool")?;
            if oh == 0 || ow == 0 || h == 0 || w == 0 {
                bail!(Argument, "adaptive_avg_pool: empty grid");
            }
            let out = kernels::adaptive_pool_forward(x.data(), n * c, (h, w), (oh, ow));
            Tensor::from_parts(vec![n, c, oh, ow], out)
        };
        Ok(self.tape().push(value, Op::AdaptivePool, &[self.id()], "adaptive_avg_pool"))
    }

    /// Normalization over the last axis with per-feature affine parameters.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.check_tape(&gamma)?;
        self.check_tape(&beta)?;
        let (value, xhat, rstd) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let Some(&c) = x.shape().last() else {
                bail!(Argument, "layer_norm on a scalar");
            };
            if g.shape() != [c] || b.shape() != [c] {
                bail!(Argument, "layer_norm affine shapes {:?}/{:?} for width {c}", g.shape(), b.shape());
            }
            let (xhat, _, rstd) = kernels::normalize_segments(x.data(), c, T::from_f64(eps));
            let out = elementwise(&Tensor::from_parts(x.shape().to_vec(), xhat.clone()), &g, |a, b| a * b);
            let out = elementwise(&out, &b, |a, b| a + b);
            (out, xhat, rstd)
        };
        Ok(self.tape().push(value, Op::LayerNorm { xhat, rstd }, &[self.id(), gamma.id(), beta.id()], "layer_norm"))
    }

    /// Group normalization of an N×C×H×W tensor with per-channel affine
    /// parameters. Statistics never mix samples of the batch.
    pub fn group_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, groups: usize, eps: f64) -> Result<Var<'t, T>> {
        self.check_tape(&gamma)?;
        self.check_tape(&beta)?;
        let (value, xhat, rstd) = {
            let x = self.value();
            let (n, c, h, w) = spatial(x.shape(), "group_norm")?;
            if groups == 0 || c % groups != 0 {
                bail!(Argument, "group_norm: {c} channels not divisible into {groups} groups");
            }
            let g = gamma.value();
            let b = beta.value();
            if g.shape() != [c] || b.shape() != [c] {
                bail!(Argument, "group_norm affine shapes {:?}/{:?} for {c} channels", g.shape(), b.shape());
            }
            let seg = (c / groups) * h * w;
            let (xhat, _, rstd) = kernels::normalize_segments(x.data(), seg, T::from_f64(eps));
            let plane = h * w;
            let mut out = xhat.clone();
            for bi in 0..n {
                for ch in 0..c {
                    let (gv, bv) = (g.data()[ch], b.data()[ch]);
                    let off = (bi * c + ch) * plane;
                    out[off..off + plane].iter_mut().for_each(|v| *v = *v * gv + bv);
                }
            }
            (Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd)
        };
        Ok(self.tape().push(
            value,
            Op::GroupNorm { groups, xhat, rstd },
            &[self.id(), gamma.id(), beta.id()],
            "group_norm",
        ))
    }

    /// Exact (erf) GELU.
    pub fn gelu(self) -> Var<'t, T> {
        let c = T::from_f64(INV_SQRT_2);
        let half = T::from_f64(0.5);
        let (value, cdf) = {
            let x = self.value();
            let cdf: Vec<T> = x.data().iter().map(|&v| half * (T::ONE + (v * c).erf())).collect();
            let y = x.data().iter().zip(&cdf).map(|(&v, &p)| v * p).collect();
            (Tensor::from_parts(x.shape().to_vec(), y), cdf)
        };
        self.tape().push(value, Op::Gelu { cdf }, &[self.id()], "gelu")
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let value = self.value().map(sigmoid);
        self.tape().push(value, Op::Sigmoid, &[self.id()], "sigmoid")
    }

    pub fn log(self) -> Var<'t, T> {
        let value = self.value().map(|x| x.ln());
        self.tape().push(value, Op::Log, &[self.id()], "log")
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let Some(&c) = x.shape().last() else {
                bail!(Argument, "softmax on a scalar");
            };
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(c) {
                softmax_in_place(row);
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        Ok(self.tape().push(value, Op::Softmax, &[self.id()], "softmax"))
    }

    /// N×H×W×C → (N·nW)×ws²×C windows, after cyclically shifting the grid by
    /// `-shift` on both axes.
    pub fn window_partition(self, ws: usize, shift: usize) -> Result<Var<'t, T>> {
        let (value, map, c) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                bail!(Argument, "window_partition expects N×H×W×C, got {:?}", s);
            }
            let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
            if ws == 0 || h % ws != 0 || w % ws != 0 {
                bail!(Config, "window size {ws} does not tile a {h}×{w} grid");
            }
            if shift >= ws {
                bail!(Argument, "shift {shift} must be smaller than window {ws}");
            }
            let map = kernels::window_rows(n, h, w, ws, shift);
            let out = kernels::gather_rows(x.data(), &map, c);
            (Tensor::from_parts(vec![n * (h / ws) * (w / ws), ws * ws, c], out), map, c)
        };
        Ok(self.tape().push(value, Op::Rows { map, c, gather: true }, &[self.id()], "window_partition"))
    }

    /// Inverse of [`Var::window_partition`] for an `h×w` grid.
    pub fn window_reverse(self, ws: usize, shift: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let (value, map, c) = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 3 || ws == 0 || s[1] != ws * ws || !h.is_multiple_of(ws) || !w.is_multiple_of(ws) {
                bail!(Argument, "window_reverse: {:?} is not a {ws}×{ws} window stack of {h}×{w}", s);
            }
            let per_image = (h / ws) * (w / ws);
            if !s[0].is_multiple_of(per_image) {
                bail!(Argument, "window_reverse: {} windows for {per_image} per image", s[0]);
            }
            if shift >= ws {
                bail!(Argument, "shift {shift} must be smaller than window {ws}");
            }
            let (n, c) = (s[0] / per_image, s[2]);
            let map = kernels::window_rows(n, h, w, ws, shift);
            let out = kernels::scatter_rows(x.data(), &map, c);
            (Tensor::from_parts(vec![n, h, w, c], out), map, c)
        };
        Ok(self.tape().push(value, Op::Rows { map, c, gather: false }, &[self.id()], "window_reverse"))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape().push(value, Op::Reshape, &[self.id()], "reshape"))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            let mut seen = vec![false; x.ndim()];
            if perm.len() != x.ndim() || perm.iter().any(|&p| p >= x.ndim() || core::mem::replace(&mut seen[p], true)) {
                bail!(Argument, "{:?} is not a permutation of {} axes", perm, x.ndim());
            }
            let (shape, data) = kernels::permute(x.data(), x.shape(), perm);
            Tensor::from_parts(shape, data)
        };
        Ok(self.tape().push(value, Op::Permute(perm.to_vec()), &[self.id()], "permute"))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let Some(first) = parts.first() else {
            bail!(Argument, "concat of zero tensors");
        };
        for p in parts {
            first.check_tape(p)?;
        }
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let s0 = vals[0].shape().to_vec();
            if axis >= s0.len() {
                bail!(Argument, "concat axis {axis} out of range for {:?}", s0);
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                    bail!(Argument, "concat shape mismatch {:?} vs {:?} on axis {axis}", s, s0);
                }
                total += s[axis];
            }
            let outer: usize = s0[..axis].iter().product();
            let inner: usize = s0[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
                }
            }
            let mut shape = s0;
            shape[axis] = total;
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        Ok(first.tape().push(value, Op::Concat { axis }, &ids, "concat"))
    }

    pub fn sum(self) -> Var<'t, T> {
        let value = Tensor::scalar(self.value().sum());
        self.tape().push(value, Op::Sum, &[self.id()], "sum")
    }

    pub fn mean(self) -> Var<'t, T> {
        let value = {
            let x = self.value();
            Tensor::scalar(x.sum() / T::from_usize(x.numel()))
        };
        self.tape().push(value, Op::Mean, &[self.id()], "mean")
    }

    /// Sum over elements where `mask` is true.
    pub fn masked_sum(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let value = {
            let x = self.value();
            if mask.len() != x.numel() {
                bail!(Argument, "mask of {} entries for {} elements", mask.len(), x.numel());
            }
            Tensor::scalar(masked_total(x.data(), mask))
        };
        Ok(self.tape().push(value, Op::MaskedSum { mask: mask.to_vec() }, &[self.id()], "masked_sum"))
    }

    /// Mean over elements where `mask` is true.
    pub fn masked_mean(self, mask: &[bool]) -> Result<Var<'t, T>> {
        let (value, count) = {
            let x = self.value();
            if mask.len() != x.numel() {
                bail!(Argument, "mask of {} entries for {} elements", mask.len(), x.numel());
            }
            let count = mask.iter().filter(|&&m| m).count();
            if count == 0 {
                bail!(EmptyInput, "masked_mean over an empty mask");
            }
            (Tensor::scalar(masked_total(x.data(), mask) / T::from_usize(count)), count)
        };
        Ok(self.tape().push(value, Op::MaskedMean { mask: mask.to_vec(), count }, &[self.id()], "masked_mean"))
    }
}

fn masked_total<T: Real>(x: &[T], mask: &[bool]) -> T {
    x.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum()
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(row[0], T::max);
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn taps<T: Real>(mode: ResampleMode, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> (Vec<Taps<T>>, Vec<Taps<T>>) {
    match mode {
        ResampleMode::Bilinear => (kernels::bilinear_taps(h, oh), kernels::bilinear_taps(w, ow)),
        ResampleMode::Nearest => (kernels::nearest_taps(h, oh), kernels::nearest_taps(w, ow)),
    }
}

fn map_grad<T: Real>(g: &Tensor<T>, x: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| f(gv, xv)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

/// Input gradients for one tape node.
pub(crate) fn backward<T: Real>(
    op: &Op<T>,
    g: &Tensor<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Leaf => Vec::new(),
        Op::Add { bcast } => {
            let rhs = needs[1].then(|| if *bcast { reduce_to_suffix(g.data(), inputs[1].shape()) } else { g.clone() });
            vec![needs[0].then(|| g.clone()), rhs]
        }
        Op::Sub { bcast } => {
            let rhs = needs[1].then(|| {
                let t = if *bcast { reduce_to_suffix(g.data(), inputs[1].shape()) } else { g.clone() };
                t.map(|v| -v)
            });
            vec![needs[0].then(|| g.clone()), rhs]
        }
        Op::Mul { bcast } => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = needs[0].then(|| elementwise(g, b, |x, y| x * y));
            let db = needs[1].then(|| {
                let prod = map_grad(g, a, |x, y| x * y);
                if *bcast {
                    reduce_to_suffix(prod.data(), b.shape())
                } else {
                    prod
                }
            });
            vec![da, db]
        }
        Op::Scale(f) => vec![Some(g.map(|v| v * *f))],
        Op::AddScalar | Op::Reshape => vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), g.data().to_vec()))],
        Op::MatMul { trans_b, bcast_b } => matmul_backward(g, inputs[0], inputs[1], *trans_b, *bcast_b, needs),
        Op::Conv2d { geom, has_bias } => {
            let (x, w) = (inputs[0], inputs[1]);
            let n = x.shape()[0];
            let cout = w.shape()[0];
            let (dx, dw, db) =
                kernels::conv2d_backward(x.data(), n, w.data(), cout, g.data(), geom, needs[0], needs[1]);
            let mut res = vec![
                dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if *has_bias {
                res.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            res
        }
        Op::Resample(mode) => {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let (oh, ow) = (out.shape()[2], out.shape()[3]);
            let (ty, tx) = taps(*mode, (h, w), (oh, ow));
            let dx = kernels::resample_backward(g.data(), n * c, (h, w), &ty, &tx);
            vec![Some(Tensor::from_parts(s.to_vec(), dx))]
        }
        Op::AdaptivePool => {
            let s = inputs[0].shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let dx = kernels::adaptive_pool_backward(g.data(), n * c, (h, w), (out.shape()[2], out.shape()[3]));
            vec![Some(Tensor::from_parts(s.to_vec(), dx))]
        }
        Op::LayerNorm { xhat, rstd } => {
            let x = inputs[0];
            let gamma = inputs[1].data();
            let c = gamma.len();
            let gd = g.data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let mut dxhat = vec![T::ZERO; gd.len()];
            for (i, ((&gv, &xh), d)) in gd.iter().zip(xhat).zip(dxhat.iter_mut()).enumerate() {
                let ch = i % c;
                dgamma[ch] += gv * xh;
                dbeta[ch] += gv;
                *d = gv * gamma[ch];
            }
            let dx = needs[0].then(|| {
                Tensor::from_parts(x.shape().to_vec(), kernels::normalize_segments_backward(&dxhat, xhat, rstd, c))
            });
            vec![dx, Some(Tensor::from_parts(vec![c], dgamma)), Some(Tensor::from_parts(vec![c], dbeta))]
        }
        Op::GroupNorm { groups, xhat, rstd } => {
            let x = inputs[0];
            let gamma = inputs[1].data();
            let s = x.shape();
            let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
            let gd = g.data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            let mut dxhat = vec![T::ZERO; gd.len()];
            for bi in 0..n {
                for ch in 0..c {
                    let off = (bi * c + ch) * plane;
                    for i in off..off + plane {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                        dxhat[i] = gd[i] * gamma[ch];
                    }
                }
            }
            let seg = (c / groups) * plane;
            let dx = needs[0]
                .then(|| Tensor::from_parts(s.to_vec(), kernels::normalize_segments_backward(&dxhat, xhat, rstd, seg)));
            vec![dx, Some(Tensor::from_parts(vec![c], dgamma)), Some(Tensor::from_parts(vec![c], dbeta))]
        }
        Op::Gelu { cdf } => {
            let k = T::from_f64(INV_SQRT_2PI);
            let half = T::from_f64(0.5);
            let dx = g
                .data()
                .iter()
                .zip(inputs[0].data())
                .zip(cdf)
                .map(|((&gv, &x), &p)| gv * (p + x * k * (-(x * x) * half).exp()))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), dx))]
        }
        Op::Sigmoid => vec![Some(map_grad(g, out, |gv, y| gv * y * (T::ONE - y)))],
        Op::Log => vec![Some(map_grad(g, inputs[0], |gv, x| gv / x))],
        Op::Softmax => {
            let c = *out.shape().last().unwrap();
            let mut dx = vec![T::ZERO; g.numel()];
            for ((d, gr), y) in dx.chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                let dot: T = gr.iter().zip(y).map(|(&a, &b)| a * b).sum();
                for ((di, &gi), &yi) in d.iter_mut().zip(gr).zip(y) {
                    *di = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))]
        }
        Op::Rows { map, c, gather } => {
            let dx = if *gather {
                kernels::scatter_rows(g.data(), map, *c)
            } else {
                kernels::gather_rows(g.data(), map, *c)
            };
            vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
        }
        Op::Permute(perm) => {
            let inv = kernels::inverse_perm(perm);
            let (shape, data) = kernels::permute(g.data(), g.shape(), &inv);
            vec![Some(Tensor::from_parts(shape, data))]
        }
        Op::Concat { axis } => {
            let s = out.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let mut parts: Vec<Vec<T>> = inputs.iter().map(|t| Vec::with_capacity(t.numel())).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (p, t) in parts.iter_mut().zip(inputs) {
                    let len = t.shape()[*axis] * inner;
                    p.extend_from_slice(&g.data()[off..off + len]);
                    off += len;
                }
            }
            parts
                .into_iter()
                .zip(inputs)
                .zip(needs)
                .map(|((p, t), &need)| need.then(|| Tensor::from_parts(t.shape().to_vec(), p)))
                .collect()
        }
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g.item()))],
        Op::Mean => {
            let n = T::from_usize(inputs[0].numel());
            vec![Some(Tensor::full(inputs[0].shape(), g.item() / n))]
        }
        Op::MaskedSum { mask } => {
            let gv = g.item();
            let mut dx = zeros_like(inputs[0]);
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                if m {
                    *d = gv;
                }
            }
            vec![Some(dx)]
        }
        Op::MaskedMean { mask, count } => {
            let gv = g.item() / T::from_usize(*count);
            let mut dx = zeros_like(inputs[0]);
            for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                if m {
                    *d = gv;
                }
            }
            vec![Some(dx)]
        }
        Op::Custom(op) => op.backward(g, inputs, out, needs),
    }
}

fn matmul_backward<T: Real>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_b: bool,
    bcast_b: bool,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let sa = a.shape();
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let n = *g.shape().last().unwrap();
    let mut da = needs[0].then(|| vec![T::ZERO; a.numel()]);
    let mut db = needs[1].then(|| vec![T::ZERO; b.numel()]);
    let (rows, batches) = if bcast_b { (a.numel() / k, 1) } else { (m, a.numel() / (m * k)) };
    for bi in 0..batches {
        let ga = &g.data()[bi * rows * n..(bi + 1) * rows * n];
        let aa = &a.data()[bi * rows * k..(bi + 1) * rows * k];
        let bb = if bcast_b { b.data() } else { &b.data()[bi * k * n..(bi + 1) * k * n] };
        if let Some(da) = da.as_mut() {
            // dA = G · Bᵀ, where B is k×n (or stored n×k when trans_b)
            kernels::gemm(rows, n, k, ga, false, bb, !trans_b, &mut da[bi * rows * k..(bi + 1) * rows * k], false);
        }
        if let Some(db) = db.as_mut() {
            let dst = if bcast_b { &mut db[..] } else { &mut db[bi * k * n..(bi + 1) * k * n] };
            if trans_b {
                // dB (n×k) = Gᵀ · A
                kernels::gemm(n, rows, k, ga, true, aa, false, dst, bcast_b);
            } else {
                // dB (k×n) = Aᵀ · G
                kernels::gemm(k, rows, n, aa, true, ga, false, dst, bcast_b);
            }
        }
    }
    vec![da.map(|d| Tensor::from_parts(sa.to_vec(), d)), db.map(|d| Tensor::from_parts(b.shape().to_vec(), d))]
}
