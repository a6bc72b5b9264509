//! Forward and adjoint kernels on raw row-major buffers.
//!
//! Every kernel is single-threaded and visits memory in a fixed order, so
//! results are bit-reproducible for a given build.

use alloc::vec;
use alloc::vec::Vec;

use super::scalar::Real;
use super::tensor::strides;

/// `c (m×n) = a (m×k) · b (k×n)`, optionally transposed operands, optionally
/// accumulating into `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    b: &[T],
    b_trans: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::ZERO);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: slice lengths are checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm(m, k, n, T::ONE, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Axis permutation; `perm[i]` names the source axis of output axis `i`.
pub(crate) fn permute<T: Copy + Default>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    if nd == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    let inner = out_shape[nd - 1];
    let inner_step = step[nd - 1];
    let outer = total / inner;
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_step;
        }
        // advance multi-index over the leading nd-1 axes
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox·stride + kj − pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj { (g.w + g.pad - kj - 1) / g.stride + 1 } else { 0 };
    (lo.min(g.wo), hi.min(g.wo).max(lo.min(g.wo)))
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].iter_mut().for_each(|v| *v = T::ZERO);
                    drow[hi..].iter_mut().for_each(|v| *v = T::ZERO);
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, ix) in drow[lo..hi].iter_mut().zip((start..).step_by(g.stride)) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in drow[start..start + hi - lo].iter_mut().zip(srow) {
                            *d += v;
                        }
                    } else {
                        for (&v, ix) in srow.iter().zip((start..).step_by(g.stride)) {
                            drow[ix] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x`: N×Cin×H×W, `w`: Cout×Cin×kh×kw.
pub(crate) fn conv2d_forward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let ckk = g.cin * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let mut out = vec![T::ZERO; n * cout * plane];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; ckk * plane] };
    for b in 0..n {
        let xb = &x[b * g.cin * g.h * g.w..(b + 1) * g.cin * g.h * g.w];
        let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
        let colsb: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(cout, ckk, plane, w, false, colsb, false, ob, false);
        if let Some(bias) = bias {
            for (co, &bv) in bias.iter().enumerate() {
                ob[co * plane..(co + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)` for a batched convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    n: usize,
    w: &[T],
    cout: usize,
    dout: &[T],
    g: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let ckk = g.cin * g.kh * g.kw;
    let plane = g.ho * g.wo;
    let in_sz = g.cin * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::ZERO; n * in_sz]);
    let mut dw = need_dw.then(|| vec![T::ZERO; cout * ckk]);
    let mut db = vec![T::ZERO; cout];
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![T::ZERO; ckk * plane] };
    let mut dcols = if pointwise || !need_dx { Vec::new() } else { vec![T::ZERO; ckk * plane] };
    for b in 0..n {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let gb = &dout[b * cout * plane..(b + 1) * cout * plane];
        for co in 0..cout {
            db[co] += gb[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
        if let Some(dw) = dw.as_mut() {
            let colsb: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(cout, plane, ckk, gb, false, colsb, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                gemm(ckk, cout, plane, w, true, gb, false, dxb, false);
            } else {
                gemm(ckk, cout, plane, w, true, gb, false, &mut dcols, false);
                col2im_add(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// One-dimensional linear interpolation taps with the half-pixel-center
/// convention (`align_corners = false`).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub i0: usize,
    pub i1: usize,
    pub w0: T,
    pub w1: T,
}

pub(crate) fn bilinear_taps<T: Real>(input: usize, output: usize) -> Vec<Taps<T>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(src) as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let l1 = src - i0 as f64;
            Taps { i0, i1, w0: T::from_f64(1.0 - l1), w1: T::from_f64(l1) }
        })
        .collect()
}

pub(crate) fn nearest_taps<T: Real>(input: usize, output: usize) -> Vec<Taps<T>> {
    (0..output)
        .map(|o| {
            let i = ((o * input) / output).min(input - 1);
            Taps { i0: i, i1: i, w0: T::ONE, w1: T::ZERO }
        })
        .collect()
}

/// Separable resampling of the trailing two axes of a `planes×H×W` buffer.
pub(crate) fn resample_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[Taps<T>],
    tx: &[Taps<T>],
) -> Vec<T> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut out = vec![T::ZERO; planes * ho * wo];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        let op = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &xp[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &xp[t.i1 * w..(t.i1 + 1) * w];
            let orow = &mut op[oy * wo..(oy + 1) * wo];
            for (o, s) in orow.iter_mut().zip(tx) {
                let a = r0[s.i0] * s.w0 + r0[s.i1] * s.w1;
                let b = r1[s.i0] * s.w0 + r1[s.i1] * s.w1;
                *o = a * t.w0 + b * t.w1;
            }
        }
    }
    out
}

pub(crate) fn resample_backward<T: Real>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ty: &[Taps<T>],
    tx: &[Taps<T>],
) -> Vec<T> {
    let (ho, wo) = (ty.len(), tx.len());
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let gp = &dout[p * ho * wo..(p + 1) * ho * wo];
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let g = gp[oy * wo + ox];
                let g0 = g * t.w0;
                let g1 = g * t.w1;
                dp[t.i0 * w + s.i0] += g0 * s.w0;
                dp[t.i0 * w + s.i1] += g0 * s.w1;
                dp[t.i1 * w + s.i0] += g1 * s.w0;
                dp[t.i1 * w + s.i1] += g1 * s.w1;
            }
        }
    }
    dx
}

/// Adaptive pooling bins: `[floor(i·in/out), ceil((i+1)·in/out))`.
pub(crate) fn pool_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| {
            let start = (i * input) / output;
            let end = ((i + 1) * input).div_ceil(output);
            (start, end)
        })
        .collect()
}

pub(crate) fn adaptive_pool_forward<T: Real>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let by = pool_bins(h, oh);
    let bx = pool_bins(w, ow);
    let mut out = vec![T::ZERO; planes * oh * ow];
    for p in 0..planes {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let mut s = T::ZERO;
                for y in y0..y1 {
                    for v in &xp[y * w + x0..y * w + x1] {
                        s += *v;
                    }
                }
                out[(p * oh + i) * ow + j] = s / T::from_usize((y1 - y0) * (x1 - x0));
            }
        }
    }
    out
}

pub(crate) fn adaptive_pool_backward<T: Real>(
    dout: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let by = pool_bins(h, oh);
    let bx = pool_bins(w, ow);
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let dp = &mut dx[p * h * w..(p + 1) * h * w];
        for (i, &(y0, y1)) in by.iter().enumerate() {
            for (j, &(x0, x1)) in bx.iter().enumerate() {
                let g = dout[(p * oh + i) * ow + j] / T::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for v in &mut dp[y * w + x0..y * w + x1] {
                        *v += g;
                    }
                }
            }
        }
    }
    dx
}

/// Normalizes `groups` contiguous segments; returns `(xhat, mean, rstd)`.
pub(crate) fn normalize_segments<T: Real>(x: &[T], seg_len: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let segs = x.len() / seg_len;
    let mut xhat = vec![T::ZERO; x.len()];
    let mut means = Vec::with_capacity(segs);
    let mut rstds = Vec::with_capacity(segs);
    let inv_n = T::ONE / T::from_usize(seg_len);
    for s in 0..segs {
        let seg = &x[s * seg_len..(s + 1) * seg_len];
        let mean = seg.iter().copied().sum::<T>() * inv_n;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::ONE / (var + eps).sqrt();
        for (o, &v) in xhat[s * seg_len..(s + 1) * seg_len].iter_mut().zip(seg) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (xhat, means, rstds)
}

/// Input gradient of segment normalization given `dxhat`.
pub(crate) fn normalize_segments_backward<T: Real>(dxhat: &[T], xhat: &[T], rstd: &[T], seg_len: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; dxhat.len()];
    let inv_n = T::ONE / T::from_usize(seg_len);
    for (s, &r) in rstd.iter().enumerate() {
        let range = s * seg_len..(s + 1) * seg_len;
        let g = &dxhat[range.clone()];
        let xh = &xhat[range.clone()];
        let mean_g = g.iter().copied().sum::<T>() * inv_n;
        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((d, &gi), &xi) in dx[range].iter_mut().zip(g).zip(xh) {
            *d = r * (gi - mean_g - xi * mean_gx);
        }
    }
    dx
}

/// Row map for (shifted) window partition of an N×H×W×C token grid.
///
/// Output row `b·ws² + t` (window `b = (n, wy, wx)`, in-window position
/// `t = (iy, ix)`) reads input pixel `(n, (wy·ws+iy+shift) mod H,
/// (wx·ws+ix+shift) mod W)`.
pub(crate) fn window_rows(n: usize, h: usize, w: usize, ws: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (h / ws, w / ws);
    let mut rows = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for wy in 0..nwy {
            for wx in 0..nwx {
                for iy in 0..ws {
                    for ix in 0..ws {
                        let y = (wy * ws + iy + shift) % h;
                        let x = (wx * ws + ix + shift) % w;
                        rows.push((b * h + y) * w + x);
                    }
                }
            }
        }
    }
    rows
}

/// `out[r] = src[map[r]]` over rows of length `c`.
pub(crate) fn gather_rows<T: Copy + Default>(src: &[T], map: &[usize], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(map.len() * c);
    for &r in map {
        out.extend_from_slice(&src[r * c..(r + 1) * c]);
    }
    out
}

/// `out[map[r]] = src[r]` over rows of length `c`; `map` must be a permutation.
pub(crate) fn scatter_rows<T: Copy + Default>(src: &[T], map: &[usize], c: usize) -> Vec<T> {
    let mut out = vec![T::default(); map.len() * c];
    for (r, &dst) in map.iter().enumerate() {
        out[dst * c..(dst + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
    }
    out
}
