//! Hierarchical shifted-window transformer encoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::layers::{to_channels_first, to_channels_last, Builder, Conv, LayerNorm, Linear};
use super::params::{Ctx, ParamId};
use super::EncoderConfig;
use crate::error::{bail, Result};
use crate::numerics::kernels::window_rows;
use crate::numerics::{Real, Tensor, Var};

/// Additive attention mask value between tokens from different regions.
const MASK_VALUE: f64 = -100.0;

/// Encoder outputs consumed by the decoder, all N×C×H×W.
pub struct FeaturePyramid<'t, T: Real> {
    /// Patch-embedding output (stride 4) before any attention block.
    pub post_embed: Var<'t, T>,
    /// Stage outputs at strides 4, 8, 16 and 32.
    pub stages: [Var<'t, T>; 4],
}

/// Shifted-window mask, nW×T×T: 0 within a region, `MASK_VALUE` across
/// regions of the cyclically shifted grid.
fn shift_mask(side: usize, ws: usize, shift: usize) -> Vec<f64> {
    let region = |r: usize| {
        if r < side - ws {
            0
        } else if r < side - shift {
            1
        } else {
            2
        }
    };
    let nw = side / ws;
    let t = ws * ws;
    let mut out = vec![0.0; nw * nw * t * t];
    for wy in 0..nw {
        for wx in 0..nw {
            let ids: Vec<usize> = (0..t)
                .map(|i| {
                    let (r, c) = (wy * ws + i / ws, wx * ws + i % ws);
                    region(r) * 3 + region(c)
                })
                .collect();
            let base = (wy * nw + wx) * t * t;
            for i in 0..t {
                for j in 0..t {
                    if ids[i] != ids[j] {
                        out[base + i * t + j] = MASK_VALUE;
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct SwinBlock {
    norm1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    rel_bias: ParamId,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
    ws: usize,
    shift: usize,
    mask: Option<Vec<f64>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        name: &str,
        dim: usize,
        heads: usize,
        side: usize,
        ws: usize,
        shift: usize,
        mlp_ratio: usize,
        depth: usize,
    ) -> Result<Self> {
        let t = ws * ws;
        Ok(Self {
            norm1: LayerNorm::new(b, &format!("{name}.norm1"), dim, depth)?,
            q: Linear::new(b, &format!("{name}.attn.q"), dim, dim, true, depth)?,
            k: Linear::new(b, &format!("{name}.attn.k"), dim, dim, true, depth)?,
            v: Linear::new(b, &format!("{name}.attn.v"), dim, dim, true, depth)?,
            proj: Linear::new(b, &format!("{name}.attn.proj"), dim, dim, true, depth)?,
            rel_bias: b.free(&format!("{name}.attn.rel_bias"), &[heads, t, t], depth)?,
            norm2: LayerNorm::new(b, &format!("{name}.norm2"), dim, depth)?,
            fc1: Linear::new(b, &format!("{name}.mlp.fc1"), dim, dim * mlp_ratio, true, depth)?,
            fc2: Linear::new(b, &format!("{name}.mlp.fc2"), dim * mlp_ratio, dim, true, depth)?,
            heads,
            ws,
            shift,
            mask: (shift > 0).then(|| shift_mask(side, ws, shift)),
        })
    }

    /// `x` is N×side×side×C. With `groups` (one id per token, row-major per
    /// image), tokens only attend to tokens carrying the same id.
    pub fn forward<'t, T: Real>(
        &self,
        cx: &Ctx<'t, '_, T>,
        x: Var<'t, T>,
        groups: Option<&[u8]>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, side, c) = (s[0], s[1], s[3]);
        let (ws, h) = (self.ws, self.heads);
        let (t, d) = (ws * ws, c / h);
        let nw = (side / ws) * (side / ws);
        let b = n * nw;

        let y = self.norm1.forward(cx, x)?.window_partition(ws, self.shift)?;
        let split =
            |lin: &Linear| -> Result<Var<'t, T>> { lin.forward(cx, y)?.reshape(&[b, t, h, d])?.permute(&[0, 2, 1, 3]) };
        let q = split(&self.q)?.scale(1.0 / libm::sqrt(d as f64));
        let k = split(&self.k)?;
        let v = split(&self.v)?;
        let mut att = q.matmul_t(k)?.add(cx.p(self.rel_bias))?;
        if let Some(mask) = &self.mask {
            let m = Tensor::from_fn(&[nw, h, t, t], |i| {
                let (w, rest) = (i / (h * t * t), i % (t * t));
                T::from_f64(mask[w * t * t + rest])
            });
            att = att.reshape(&[n, nw, h, t, t])?.add(cx.constant(m))?.reshape(&[b, h, t, t])?;
        }
        if let Some(ids) = groups {
            if ids.len() != n * side * side {
                bail!(Internal, "{} token groups for {n}×{side}×{side} tokens", ids.len());
            }
            let rows = window_rows(n, side, side, ws, self.shift);
            let m = Tensor::from_fn(&[b, h, t, t], |i| {
                let (w, rest) = (i / (h * t * t), i % (t * t));
                let (a, c) = (rows[w * t + rest / t], rows[w * t + rest % t]);
                if ids[a] == ids[c] {
                    T::ZERO
                } else {
                    T::from_f64(MASK_VALUE)
                }
            });
            att = att.add(cx.constant(m))?;
        }
        let o = att.softmax()?.matmul(v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, t, c])?;
        let o = self.proj.forward(cx, o)?.window_reverse(ws, self.shift, side, side)?;
        let x = x.add(o)?;
        let m = self.fc1.forward(cx, self.norm2.forward(cx, x)?)?.gelu();
        x.add(self.fc2.forward(cx, m)?)
    }
}

/// 2×2 neighbourhood concatenation, normalization and linear reduction.
struct PatchMerging {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerging {
    fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (n, hh, ww, c) = (s[0], s[1] / 2, s[2] / 2, s[3]);
        let y = x.reshape(&[n, hh, 2, ww, 2, c])?.permute(&[0, 1, 3, 4, 2, 5])?.reshape(&[n, hh, ww, 4 * c])?;
        self.reduction.forward(cx, self.norm.forward(cx, y)?)
    }
}

struct Stage {
    merge: Option<PatchMerging>,
    blocks: Vec<SwinBlock>,
    norm: LayerNorm,
}

pub(crate) struct Encoder {
    cfg: EncoderConfig,
    embed: Conv,
    embed_norm: LayerNorm,
    stages: Vec<Stage>,
}

impl Encoder {
    /// Registers encoder parameters under `encoder.`; depths run from 0
    /// (patch embedding) to the total block count.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let embed = Conv::new(
            b,
            "encoder.patch_embed.proj",
            cfg.in_channels,
            c[0],
            cfg.patch_stride,
            cfg.patch_stride,
            true,
            0,
        )?;
        let embed_norm = LayerNorm::new(b, "encoder.patch_embed.norm", c[0], 0)?;
        let mut stages = Vec::new();
        let mut depth = 0;
        for s in 0..4 {
            let side = cfg.stage_side(s);
            let merge = if s == 0 {
                None
            } else {
                let name = format!("encoder.stages.{s}.downsample");
                Some(PatchMerging {
                    norm: LayerNorm::new(b, &format!("{name}.norm"), 4 * c[s - 1], depth)?,
                    reduction: Linear::new(b, &format!("{name}.reduction"), 4 * c[s - 1], c[s], false, depth)?,
                })
            };
            let (ws, shift) = cfg.window_at(s);
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks[s] {
                depth += 1;
                let name = format!("encoder.stages.{s}.blocks.{i}");
                let sh = if i % 2 == 1 { shift } else { 0 };
                blocks.push(SwinBlock::new(b, &name, c[s], cfg.heads[s], side, ws, sh, cfg.mlp_ratio, depth)?);
            }
            let norm = LayerNorm::new(b, &format!("encoder.norm{s}"), c[s], depth)?;
            stages.push(Stage { merge, blocks, norm });
        }
        Ok(Self { cfg: cfg.clone(), embed, embed_norm, stages })
    }

    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        self.forward_grouped(cx, image, None)
    }

    /// Forward pass where attention never crosses between regions of a
    /// mixed input. `groups` holds one id per `cell`×`cell` pixel block,
    /// row-major per image; `cell` must be a multiple of the coarsest
    /// token stride.
    pub fn forward_grouped<'t, T: Real>(
        &self,
        cx: &Ctx<'t, '_, T>,
        image: Var<'t, T>,
        groups: Option<(&[u8], usize)>,
    ) -> Result<FeaturePyramid<'t, T>> {
        let s = image.shape();
        let size = self.cfg.input_size;
        if s.len() != 4 || s[1] != self.cfg.in_channels || s[2] != size || s[3] != size {
            bail!(Config, "encoder built for N×{}×{size}×{size} inputs, got {s:?}", self.cfg.in_channels);
        }
        let n = s[0];
        if let Some((ids, cell)) = groups {
            let coarsest = self.cfg.patch_stride << 3;
            if cell == 0 || cell % coarsest != 0 || !size.is_multiple_of(cell) {
                bail!(Config, "mix cell {cell} must be a multiple of {coarsest} dividing {size}");
            }
            if ids.len() != n * (size / cell) * (size / cell) {
                bail!(Argument, "{} cell groups for {n} images of {size}×{size} at cell {cell}", ids.len());
            }
        }
        // Per-token group ids at token grid `side`.
        let token_groups = |side: usize| -> Option<Vec<u8>> {
            let (ids, cell) = groups?;
            let stride = size / side;
            let g = size / cell;
            let mut out = Vec::with_capacity(n * side * side);
            for b in 0..n {
                for i in 0..side {
                    for j in 0..side {
                        out.push(ids[(b * g + i * stride / cell) * g + j * stride / cell]);
                    }
                }
            }
            Some(out)
        };
        let prev = cx.tape.set_scope("encoder");
        let x = self.embed.forward(cx, image)?;
        let mut x = self.embed_norm.forward(cx, to_channels_last(x)?)?;
        let post_embed = to_channels_first(x)?;
        let mut outs = Vec::with_capacity(4);
        for (si, st) in self.stages.iter().enumerate() {
            if let Some(m) = &st.merge {
                x = m.forward(cx, x)?;
            }
            let tg = token_groups(self.cfg.stage_side(si));
            for blk in &st.blocks {
                x = blk.forward(cx, x, tg.as_deref())?;
            }
            outs.push(to_channels_first(st.norm.forward(cx, x)?)?);
        }
        cx.tape.set_scope(prev);
        Ok(FeaturePyramid { post_embed, stages: [outs[0], outs[1], outs[2], outs[3]] })
    }
}
