//! Mixed-mask pretraining: two images are combined cell by cell, the
//! encoder sees the mixture, and a small decoder reconstructs both
//! originals under a backscatter-power weighted squared error.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{AdamW, Schedule};
use crate::error::{bail, Result};
use crate::model::{Builder, Ctx, Encoder, EncoderConfig, LayerNorm, Linear, ParamId, ParamStore, SwinBlock};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::sampling::NormStats;

/// Which image each cell of a square-celled grid is taken from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixMask {
    rows: usize,
    cols: usize,
    cell: usize,
    /// Row-major, `true` where the cell comes from the first image.
    from_first: Vec<bool>,
}

impl MixMask {
    pub fn new(rows: usize, cols: usize, cell: usize, from_first: Vec<bool>) -> Result<Self> {
        if rows == 0 || cols == 0 || cell == 0 {
            bail!(Argument, "mix grid {rows}×{cols} with cell {cell} is empty");
        }
        if from_first.len() != rows * cols {
            bail!(Argument, "{} mask entries for a {rows}×{cols} grid", from_first.len());
        }
        Ok(Self { rows, cols, cell, from_first })
    }

    /// Exactly `round(ratio · rows · cols)` cells from the first image,
    /// chosen without replacement.
    pub fn random(rows: usize, cols: usize, cell: usize, ratio: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        if !(ratio > 0.0 && ratio < 1.0) {
            bail!(Argument, "mix ratio {ratio} outside (0, 1)");
        }
        let total = rows * cols;
        let take = libm::round(ratio * total as f64) as usize;
        let mut from_first = vec![false; total];
        for i in index::sample(rng, total, take.min(total)) {
            from_first[i] = true;
        }
        Self::new(rows, cols, cell, from_first)
    }

    pub fn complement(&self) -> Self {
        Self { from_first: self.from_first.iter().map(|b| !b).collect(), ..self.clone() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    pub fn cells(&self) -> &[bool] {
        &self.from_first
    }

    pub fn num_patches(&self) -> usize {
        self.from_first.len()
    }

    pub fn first_count(&self) -> usize {
        self.from_first.iter().filter(|&&b| b).count()
    }

    /// Fraction of cells taken from the first image.
    pub fn ratio(&self) -> f64 {
        self.first_count() as f64 / self.num_patches() as f64
    }

    pub fn height(&self) -> usize {
        self.rows * self.cell
    }

    pub fn width(&self) -> usize {
        self.cols * self.cell
    }

    /// Per-pixel membership, row-major over `height × width`.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let w = self.width();
        (0..self.height() * w).map(|i| self.from_first[(i / w / self.cell) * self.cols + (i % w) / self.cell]).collect()
    }
}

/// `M⊙x1 + (1−M)⊙x2` over images whose last two axes match the mask.
pub fn apply_mix<T: Real>(x1: &Tensor<T>, x2: &Tensor<T>, mask: &MixMask) -> Result<Tensor<T>> {
    if x1.shape() != x2.shape() {
        bail!(Argument, "cannot mix shapes {:?} and {:?}", x1.shape(), x2.shape());
    }
    let s = x1.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.height() || s[s.len() - 1] != mask.width() {
        bail!(Argument, "images {:?} do not match a {}×{} mix mask", s, mask.height(), mask.width());
    }
    let pm = mask.pixel_mask();
    let plane = pm.len();
    let data =
        x1.data().iter().zip(x2.data()).enumerate().map(|(i, (&a, &b))| if pm[i % plane] { a } else { b }).collect();
    Tensor::new(s, data)
}

/// Draws a mask with `cell`-pixel granularity and mixes `x1` and `x2`.
pub fn make_mix<T: Real>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    ratio: f64,
    cell: usize,
    seed: u64,
) -> Result<(Tensor<T>, MixMask)> {
    if x1.shape() != x2.shape() {
        bail!(Argument, "cannot mix shapes {:?} and {:?}", x1.shape(), x2.shape());
    }
    let s = x1.shape();
    if s.len() < 2 || cell == 0 {
        bail!(Argument, "need images with two spatial axes and a positive cell size");
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h % cell != 0 || w % cell != 0 {
        bail!(Argument, "cell {cell} does not tile {h}×{w}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = MixMask::random(h / cell, w / cell, cell, ratio, &mut rng)?;
    Ok((apply_mix(x1, x2, &mask)?, mask))
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerBounds {
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for PowerBounds {
    fn default() -> Self {
        Self { w_min: 0.1, w_max: 10.0 }
    }
}

/// Per-pixel reconstruction weights with mean 1 over valid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerWeight {
    pub weights: Vec<f64>,
    pub bounds: PowerBounds,
    /// Factor applied after clamping to bring the mean back to 1.
    pub renorm: f64,
}

/// `clamp(|a|² / mean |a|², w_min, w_max)`, rescaled to mean 1 over the
/// valid pixels. Invalid pixels get weight 0.
pub fn power_weights(amplitude: &[f32], valid: Option<&[bool]>, bounds: PowerBounds) -> Result<PowerWeight> {
    if !(bounds.w_min >= 0.0 && bounds.w_max > 0.0 && bounds.w_min <= bounds.w_max) {
        bail!(Config, "power weight bounds [{}, {}] are invalid", bounds.w_min, bounds.w_max);
    }
    if let Some(v) = valid {
        if v.len() != amplitude.len() {
            bail!(Argument, "{} validity flags for {} pixels", v.len(), amplitude.len());
        }
    }
    let is_valid = |i: usize| valid.is_none_or(|v| v[i]);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &a) in amplitude.iter().enumerate() {
        if !(a >= 0.0 && a.is_finite()) {
            bail!(Data, "amplitude {a} at pixel {i} is not a finite non-negative value");
        }
        if is_valid(i) {
            sum += (a as f64) * (a as f64);
            count += 1;
        }
    }
    if count == 0 {
        bail!(EmptyInput, "no valid pixels to weight");
    }
    let mean = sum / count as f64;
    if !(mean > 0.0) {
        bail!(Degenerate, "image has zero backscatter power");
    }
    let mut weights: Vec<f64> = amplitude
        .iter()
        .enumerate()
        .map(
            |(i, &a)| {
                if is_valid(i) {
                    ((a as f64) * (a as f64) / mean).clamp(bounds.w_min, bounds.w_max)
                } else {
                    0.0
                }
            },
        )
        .collect();
    let wmean = weights.iter().sum::<f64>() / count as f64;
    let renorm = 1.0 / wmean;
    weights.iter_mut().for_each(|w| *w *= renorm);
    Ok(PowerWeight { weights, bounds, renorm })
}

fn masked_term<'t, T: Real>(
    pred: Var<'t, T>,
    target: &Tensor<T>,
    masks: &[MixMask],
    weights: &[PowerWeight],
    from_first: bool,
) -> Result<Var<'t, T>> {
    let shape = pred.shape();
    if target.shape() != shape.as_slice() {
        bail!(Argument, "prediction {:?} and target {:?} differ", shape, target.shape());
    }
    let n = shape[0];
    if masks.len() != n || weights.len() != n {
        bail!(Argument, "{n} predictions need {n} masks and weights, got {} and {}", masks.len(), weights.len());
    }
    let per_image = target.numel() / n.max(1);
    let mut coef = vec![0.0f64; target.numel()];
    let mut count = 0usize;
    for (b, (m, w)) in masks.iter().zip(weights).enumerate() {
        let pm = m.pixel_mask();
        if pm.len() != per_image || w.weights.len() != per_image {
            bail!(Argument, "mask or weights do not cover the {per_image}-pixel image");
        }
        for (i, &keep) in pm.iter().enumerate() {
            // Reconstruct where this target was hidden by the other image.
            if keep != from_first {
                coef[b * per_image + i] = w.weights[i];
                count += 1;
            }
        }
    }
    if count == 0 {
        bail!(EmptyInput, "no hidden pixels to reconstruct");
    }
    let inv = 1.0 / count as f64;
    let c = Tensor::from_fn(&shape, |i| T::from_f64(coef[i] * inv));
    let tape = pred.tape();
    let diff = pred.sub(tape.constant(target.clone()))?;
    Ok(diff.mul(diff)?.mul(tape.constant(c))?.sum())
}

/// Power-weighted squared error of each reconstruction over the pixels its
/// target lost in the mixture, averaged per term and summed over both.
pub fn reconstruction_loss<'t, T: Real>(
    pred1: Var<'t, T>,
    pred2: Var<'t, T>,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    masks: &[MixMask],
    weights1: &[PowerWeight],
    weights2: &[PowerWeight],
) -> Result<Var<'t, T>> {
    let a = masked_term(pred1, x1, masks, weights1, true)?;
    let b = masked_term(pred2, x2, masks, weights2, false)?;
    a.add(b)
}

/// Settings of the reconstruction decoder and the mixing procedure.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub decoder_blocks: usize,
    /// Mixing granularity in pixels.
    pub mix_cell: usize,
    pub mask_ratio: f64,
    pub bounds: PowerBounds,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            decoder_dim: 64,
            decoder_heads: 4,
            decoder_blocks: 2,
            mix_cell: 32,
            mask_ratio: 0.5,
            bounds: PowerBounds::default(),
        }
    }
}

/// Unlabeled raw-amplitude images of one size. Carries no labels by
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainBatch {
    pub size: usize,
    pub images: Vec<Vec<f32>>,
}

/// Encoder plus reconstruction decoder.
pub struct PretrainModel<T: Real> {
    encoder_cfg: EncoderConfig,
    cfg: PretrainConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    embed: Linear,
    mask_token: ParamId,
    pos: ParamId,
    blocks: Vec<SwinBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl<T: Real> PretrainModel<T> {
    pub fn new(encoder_cfg: EncoderConfig, cfg: PretrainConfig, seed: u64) -> Result<Self> {
        encoder_cfg.validate()?;
        let token_stride = encoder_cfg.patch_stride << 3;
        if cfg.mix_cell == 0
            || !cfg.mix_cell.is_multiple_of(token_stride)
            || !encoder_cfg.input_size.is_multiple_of(cfg.mix_cell)
        {
            bail!(Config, "mix cell {} must be a multiple of {token_stride} dividing the input size", cfg.mix_cell);
        }
        if cfg.decoder_dim == 0 || cfg.decoder_heads == 0 || !cfg.decoder_dim.is_multiple_of(cfg.decoder_heads) {
            bail!(Config, "decoder width {} does not split over {} heads", cfg.decoder_dim, cfg.decoder_heads);
        }
        if !(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0) {
            bail!(Config, "mask ratio {} outside (0, 1)", cfg.mask_ratio);
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let encoder = Encoder::new(&mut b, &encoder_cfg)?;
        let depth = encoder_cfg.total_blocks() + 1;
        let (d, side) = (cfg.decoder_dim, encoder_cfg.stage_side(3));
        let c3 = encoder_cfg.channels[3];
        let embed = Linear::new(&mut b, "recon.embed", c3, d, true, depth)?;
        let mask_token = b.free("recon.mask_token", &[d], depth)?;
        let pos = b.free("recon.pos_embed", &[side, side, d], depth)?;
        let blocks = (0..cfg.decoder_blocks)
            .map(|i| {
                SwinBlock::new(&mut b, &format!("recon.blocks.{i}"), d, cfg.decoder_heads, side, side, 0, 4, depth)
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut b, "recon.norm", d, depth)?;
        let px = token_stride * token_stride * encoder_cfg.in_channels;
        let head = Linear::new(&mut b, "recon.head", d, px, true, depth)?;
        Ok(Self { encoder_cfg, cfg, store, encoder, embed, mask_token, pos, blocks, norm, head })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder_cfg
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn ctx<'t, 's>(&'s self, tape: &'t Tape<T>, trainable: bool) -> Ctx<'t, 's, T> {
        Ctx::new(tape, &self.store, trainable)
    }

    /// Only the `encoder.` parameters, as loaded into a segmentation model.
    pub fn encoder_store(&self) -> Result<ParamStore<T>> {
        let mut out = ParamStore::new();
        for p in self.store.iter().filter(|p| p.name.starts_with("encoder.")) {
            out.add(p.name.clone(), p.value.clone(), p.depth, p.decay)?;
        }
        Ok(out)
    }

    /// Reconstructions of the first and second images (both N×C×S×S) from
    /// the mixed batch `mixed`, one mask per image.
    pub fn reconstruct<'t>(
        &self,
        cx: &Ctx<'t, '_, T>,
        mixed: Var<'t, T>,
        masks: &[MixMask],
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = mixed.shape();
        let n = s[0];
        if masks.len() != n {
            bail!(Argument, "{n} mixed images need {n} masks, got {}", masks.len());
        }
        let size = self.encoder_cfg.input_size;
        let cell = self.cfg.mix_cell;
        let mut ids = Vec::with_capacity(n * (size / cell) * (size / cell));
        for m in masks {
            if m.cell() != cell || m.height() != size || m.width() != size {
                bail!(Argument, "mask grid {}×{} at cell {} does not match the model", m.rows(), m.cols(), m.cell());
            }
            ids.extend(m.cells().iter().map(|&b| b as u8));
        }
        let pyr = self.encoder.forward_grouped(cx, mixed, Some((&ids, cell)))?;
        let prev = cx.tape.set_scope("recon");
        let top = pyr.stages[3].permute(&[0, 2, 3, 1])?;
        let side = top.shape()[1];
        let tokens = self.embed.forward(cx, top)?;
        let d = self.cfg.decoder_dim;
        let stride = size / side;
        let per_cell = cell / stride;
        let g = size / cell;
        let decode = |first: bool| -> Result<Var<'t, T>> {
            let keep = Tensor::from_fn(&[n, side, side, d], |i| {
                let tok = i / d;
                let (b, r, c) = (tok / (side * side), (tok / side) % side, tok % side);
                let from_first = masks[b].cells()[(r / per_cell) * g + c / per_cell];
                if from_first == first {
                    T::ONE
                } else {
                    T::ZERO
                }
            });
            let hide = keep.map(|v| T::ONE - v);
            let filler = cx.constant(hide).mul(cx.p(self.mask_token))?;
            let mut y = tokens.mul(cx.constant(keep))?.add(filler)?.add(cx.p(self.pos))?;
            for blk in &self.blocks {
                y = blk.forward(cx, y, None)?;
            }
            let y = self.head.forward(cx, self.norm.forward(cx, y)?)?;
            let ch = self.encoder_cfg.in_channels;
            y.reshape(&[n, side, side, ch, stride, stride])?.permute(&[0, 3, 1, 4, 2, 5])?.reshape(&[n, ch, size, size])
        };
        let out = (decode(true)?, decode(false)?);
        cx.tape.set_scope(prev);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainStats {
    pub loss: f64,
    pub mean_ratio: f64,
}

fn normalized<'a>(raw: &'a [f32], norm: &NormStats) -> impl Iterator<Item = f32> + 'a {
    let norm = *norm;
    raw.iter().map(move |&v| norm.normalize(v))
}

/// Pairs consecutive images, mixes each pair, reconstructs both members and
/// applies one optimizer update. Mask draws depend only on `seed` and `step`.
pub fn pretrain_step<T: Real>(
    model: &mut PretrainModel<T>,
    opt: &mut AdamW<T>,
    schedule: &Schedule,
    step: usize,
    batch: &PretrainBatch,
    norm: &NormStats,
    seed: u64,
) -> Result<PretrainStats> {
    let n = batch.images.len();
    if n == 0 || !n.is_multiple_of(2) {
        bail!(Argument, "pretraining needs an even, non-zero batch, got {n} images");
    }
    let size = model.encoder_cfg.input_size;
    if batch.size != size || batch.images.iter().any(|im| im.len() != size * size) {
        bail!(Argument, "pretraining batch does not hold {size}×{size} images");
    }
    let pairs = n / 2;
    let cell = model.cfg.mix_cell;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    let plane = size * size;
    let mut x1 = Vec::with_capacity(pairs * plane);
    let mut x2 = Vec::with_capacity(pairs * plane);
    let (mut w1, mut w2, mut masks) = (Vec::new(), Vec::new(), Vec::new());
    for p in 0..pairs {
        let (a, b) = (&batch.images[2 * p], &batch.images[2 * p + 1]);
        x1.extend(normalized(a, norm).map(|v| T::from_f64(v as f64)));
        x2.extend(normalized(b, norm).map(|v| T::from_f64(v as f64)));
        w1.push(power_weights(a, None, model.cfg.bounds)?);
        w2.push(power_weights(b, None, model.cfg.bounds)?);
        masks.push(MixMask::random(size / cell, size / cell, cell, model.cfg.mask_ratio, &mut rng)?);
    }
    let x1 = Tensor::new(&[pairs, 1, size, size], x1)?;
    let x2 = Tensor::new(&[pairs, 1, size, size], x2)?;
    let mut mixed = Vec::with_capacity(pairs * plane);
    for (p, m) in masks.iter().enumerate() {
        let pm = m.pixel_mask();
        let (a, b) = (&x1.data()[p * plane..(p + 1) * plane], &x2.data()[p * plane..(p + 1) * plane]);
        mixed.extend(pm.iter().enumerate().map(|(i, &f)| if f { a[i] } else { b[i] }));
    }
    let mixed = Tensor::new(&[pairs, 1, size, size], mixed)?;

    let tape = Tape::new();
    let grads = {
        let cx = model.ctx(&tape, true);
        let (p1, p2) = model.reconstruct(&cx, cx.constant(mixed), &masks)?;
        let loss = reconstruction_loss(p1, p2, &x1, &x2, &masks, &w1, &w2)?;
        let value = loss.item().to_f64();
        if !value.is_finite() {
            bail!(Numeric, "reconstruction loss is {value}");
        }
        let mut g = tape.backward(loss)?;
        (value, cx.param_grads(&mut g))
    };
    let lrs = schedule.lrs(step, &model.store);
    opt.step(&mut model.store, &grads.1, &lrs)?;
    let mean_ratio = masks.iter().map(|m| m.ratio()).sum::<f64>() / pairs as f64;
    Ok(PretrainStats { loss: grads.0, mean_ratio })
}
