//! Class-imbalance objectives: subtraction-normalized class weights, the
//! α-scaled focal loss, multi-class soft dice, their weighted sum, and the
//! binary water objective (BCE plus soft dice).
//!
//! Every loss is recorded on the tape as one fused node whose gradient with
//! respect to the logits is computed in closed form during the forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::datagen::IGNORE;
use crate::error::{bail, Result};
use crate::numerics::{CustomOp, Real, Tensor, Var};
use crate::sampling::ClassStats;

/// `w_k = 1 − f_k` and `alpha_k = w_k / Σ w`.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ClassWeights {
    /// `alpha_k = 1/K`, used when α-scaling is switched off.
    pub fn uniform(k: usize) -> Self {
        Self { w: vec![1.0; k], alpha: vec![1.0 / k as f64; k] }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }
}

pub fn class_weights(stats: &ClassStats) -> Result<ClassWeights> {
    if stats.total() == 0 {
        bail!(EmptyInput, "class statistics hold no pixels");
    }
    let w: Vec<f64> = stats.frequencies.iter().map(|f| 1.0 - f).collect();
    let sum: f64 = w.iter().sum();
    if !(sum > 0.0) {
        bail!(Degenerate, "class weights sum to {sum}; a single class covers every pixel");
    }
    let alpha = w.iter().map(|x| x / sum).collect();
    Ok(ClassWeights { w, alpha })
}

/// Coefficients of the segmentation objective.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParams {
    pub alpha_scale: f64,
    pub gamma: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub epsilon_focal: f64,
    pub epsilon_dice: f64,
    pub ignore_label: u8,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            alpha_scale: 2.25,
            gamma: 1.1,
            lambda_focal: 0.57,
            lambda_dice: 0.32,
            epsilon_focal: 1e-8,
            epsilon_dice: 1e-6,
            ignore_label: IGNORE,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.lambda_focal >= 0.0) || !(self.lambda_dice >= 0.0) {
            bail!(Config, "gamma and loss weights must be non-negative");
        }
        if !(self.epsilon_focal > 0.0) || !(self.epsilon_dice > 0.0) {
            bail!(Config, "loss epsilons must be positive");
        }
        if !(self.alpha_scale >= 0.0 && self.alpha_scale.is_finite()) {
            bail!(Config, "alpha_scale must be finite and non-negative");
        }
        Ok(())
    }

    /// Focal weighting actually applied: with α-scaling disabled the scale is
    /// 1 and the class weights are uniform.
    pub fn focal_weighting(&self, weights: &ClassWeights, alpha_scale_enabled: bool) -> (f64, ClassWeights) {
        if alpha_scale_enabled {
            (self.alpha_scale, weights.clone())
        } else {
            (1.0, ClassWeights::uniform(weights.num_classes()))
        }
    }
}

/// Pixels that take part in a loss (`Ω`), in N·H·W order.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidMask {
    mask: Vec<bool>,
    count: usize,
}

impl ValidMask {
    pub fn from_labels(labels: &[u8], ignore: u8) -> Self {
        let mask: Vec<bool> = labels.iter().map(|&l| l != ignore).collect();
        let count = mask.iter().filter(|&&m| m).count();
        Self { mask, count }
    }

    pub fn from_bools(mask: Vec<bool>) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        Self { mask, count }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
}

/// Scalar loss node whose logit gradient was computed with the value.
struct FusedLoss<T> {
    name: &'static str,
    dz: Tensor<T>,
}

impl<T: Real> CustomOp<T> for FusedLoss<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, grad: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        if !needs[0] {
            return vec![None];
        }
        let g = grad.item();
        vec![Some(self.dz.map(|v| v * g))]
    }
}

/// Logits laid out as N×K×H×W, viewed per pixel.
struct PixelView {
    n: usize,
    k: usize,
    hw: usize,
}

impl PixelView {
    fn new(shape: &[usize], labels: usize, mask: &ValidMask) -> Result<Self> {
        if shape.len() != 4 {
            bail!(Argument, "logits must be N×K×H×W, got {shape:?}");
        }
        let (n, k, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        if labels != n * hw || mask.mask.len() != n * hw {
            bail!(Argument, "labels and mask need {} entries for logits {shape:?}", n * hw);
        }
        if mask.count == 0 {
            bail!(EmptyInput, "no valid pixels");
        }
        Ok(Self { n, k, hw })
    }

    /// Flat index of class `c` at pixel `p` (p in N·H·W order).
    fn at(&self, p: usize, c: usize) -> usize {
        (p / self.hw) * self.k * self.hw + c * self.hw + p % self.hw
    }

    fn pixels(&self) -> usize {
        self.n * self.hw
    }
}

fn check_finite<T: Real>(z: &Tensor<T>) -> Result<()> {
    if !z.all_finite() {
        bail!(Numeric, "logits contain non-finite values");
    }
    Ok(())
}

/// Softmax over the class axis of every valid pixel (invalid pixels stay 0).
fn class_probs<T: Real>(z: &Tensor<T>, v: &PixelView, mask: &ValidMask) -> Vec<f64> {
    let zd = z.data();
    let mut p = vec![0.0; zd.len()];
    let mut row = vec![0.0; v.k];
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let mut m = f64::NEG_INFINITY;
        for (c, r) in row.iter_mut().enumerate() {
            *r = zd[v.at(px, c)].to_f64();
            m = m.max(*r);
        }
        let mut s = 0.0;
        for r in row.iter_mut() {
            *r = libm::exp(*r - m);
            s += *r;
        }
        for (c, r) in row.iter().enumerate() {
            p[v.at(px, c)] = r / s;
        }
    }
    p
}

fn check_labels(labels: &[u8], mask: &ValidMask, k: usize) -> Result<()> {
    for (px, &l) in labels.iter().enumerate() {
        if mask.mask[px] && l as usize >= k {
            bail!(Data, "label {l} at pixel {px} outside 0..{k}");
        }
    }
    Ok(())
}

fn fused<'t, T: Real>(z: Var<'t, T>, value: f64, dz: Vec<f64>, shape: &[usize], name: &'static str) -> Var<'t, T> {
    let dz = Tensor::from_fn(shape, |i| T::from_f64(dz[i]));
    z.tape().custom(&[z], Tensor::scalar(T::from_f64(value)), FusedLoss { name, dz })
}

/// Mean over `Ω` of `−scale·α_y·(1−p_t)^γ·ln(p_t + ε)`.
pub fn focal_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[u8],
    mask: &ValidMask,
    alpha: &[f64],
    alpha_scale: f64,
    params: &LossParams,
) -> Result<Var<'t, T>> {
    let z = logits.to_tensor();
    let v = PixelView::new(z.shape(), labels.len(), mask)?;
    if alpha.len() != v.k {
        bail!(Argument, "{} class weights for {} classes", alpha.len(), v.k);
    }
    check_finite(&z)?;
    check_labels(labels, mask, v.k)?;
    let p = class_probs(&z, &v, mask);
    let (gamma, eps) = (params.gamma, params.epsilon_focal);
    let inv_n = 1.0 / mask.count as f64;
    let mut total = 0.0;
    let mut dz = vec![0.0; p.len()];
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let y = labels[px] as usize;
        let pt = p[v.at(px, y)];
        let c = alpha_scale * alpha[y] * inv_n;
        let q = 1.0 - pt;
        let log_pt = libm::log(pt + eps);
        total += -c * libm::pow(q, gamma) * log_pt;
        // dℓ/dp_t, then through the softmax: dp_t/dz_j = p_t(δ_jy − p_j).
        let focusing = if gamma == 0.0 || q <= 0.0 { 0.0 } else { gamma * libm::pow(q, gamma - 1.0) };
        let dpt = -c * (-focusing * log_pt + libm::pow(q, gamma) / (pt + eps));
        for j in 0..v.k {
            let delta = if j == y { 1.0 } else { 0.0 };
            dz[v.at(px, j)] = dpt * pt * (delta - p[v.at(px, j)]);
        }
    }
    Ok(fused(logits, total, dz, z.shape(), "focal_loss"))
}

/// `1 − (1/K) Σ_k (2 Σ p·g + ε) / (Σ p + Σ g + ε)`, sums pooled over the
/// batch and restricted to `Ω`.
pub fn dice_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[u8],
    mask: &ValidMask,
    params: &LossParams,
) -> Result<Var<'t, T>> {
    let z = logits.to_tensor();
    let v = PixelView::new(z.shape(), labels.len(), mask)?;
    check_finite(&z)?;
    check_labels(labels, mask, v.k)?;
    let p = class_probs(&z, &v, mask);
    let eps = params.epsilon_dice;
    let (mut inter, mut psum, mut gsum) = (vec![0.0; v.k], vec![0.0; v.k], vec![0.0; v.k]);
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let y = labels[px] as usize;
        for c in 0..v.k {
            psum[c] += p[v.at(px, c)];
        }
        inter[y] += p[v.at(px, y)];
        gsum[y] += 1.0;
    }
    let kf = v.k as f64;
    let mut score = 0.0;
    let (mut num, mut den) = (vec![0.0; v.k], vec![0.0; v.k]);
    for c in 0..v.k {
        num[c] = 2.0 * inter[c] + eps;
        den[c] = psum[c] + gsum[c] + eps;
        score += num[c] / den[c];
    }
    let value = 1.0 - score / kf;
    let mut dz = vec![0.0; p.len()];
    let mut a = vec![0.0; v.k];
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let y = labels[px] as usize;
        let mut ap = 0.0;
        for c in 0..v.k {
            let g = if c == y { 1.0 } else { 0.0 };
            a[c] = -(2.0 * g * den[c] - num[c]) / (kf * den[c] * den[c]);
            ap += a[c] * p[v.at(px, c)];
        }
        for c in 0..v.k {
            let i = v.at(px, c);
            dz[i] = p[i] * (a[c] - ap);
        }
    }
    Ok(fused(logits, value, dz, z.shape(), "dice_loss"))
}

/// Combined objective with its two components (for logging).
pub struct LossOutput<'t, T: Real> {
    pub total: Var<'t, T>,
    pub focal: f64,
    pub dice: f64,
}

/// `λ_focal·L_focal + λ_dice·L_dice`.
pub fn total_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[u8],
    mask: &ValidMask,
    weights: &ClassWeights,
    alpha_scale: f64,
    params: &LossParams,
) -> Result<LossOutput<'t, T>> {
    params.validate()?;
    let focal = focal_loss(logits, labels, mask, &weights.alpha, alpha_scale, params)?;
    let dice = dice_loss(logits, labels, mask, params)?;
    let (fv, dv) = (focal.item().to_f64(), dice.item().to_f64());
    let total = focal.scale(params.lambda_focal).add(dice.scale(params.lambda_dice))?;
    Ok(LossOutput { total, focal: fv, dice: dv })
}

/// Coefficients of the binary water objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterLossParams {
    pub lambda_dice: f64,
    /// Lower clamp for probabilities inside the BCE logarithms.
    pub epsilon_log: f64,
    pub epsilon_dice: f64,
}

impl Default for WaterLossParams {
    fn default() -> Self {
        Self { lambda_dice: 1.0, epsilon_log: 1e-8, epsilon_dice: 1e-6 }
    }
}

fn log_sigmoid(z: f64) -> f64 {
    // ln σ(z) = −softplus(−z), evaluated without overflow.
    if z >= 0.0 {
        -libm::log1p(libm::exp(-z))
    } else {
        z - libm::log1p(libm::exp(z))
    }
}

/// BCE (mean over `Ω`) plus `λ_dice` times soft dice averaged over the
/// water and background channels.
pub fn water_loss<'t, T: Real>(
    logits: Var<'t, T>,
    labels: &[u8],
    mask: &ValidMask,
    params: &WaterLossParams,
) -> Result<Var<'t, T>> {
    let z = logits.to_tensor();
    let shape = z.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        bail!(Argument, "water logits must be N×1×H×W, got {shape:?}");
    }
    let v = PixelView::new(&shape, labels.len(), mask)?;
    check_finite(&z)?;
    check_labels(labels, mask, 2)?;
    let zd = z.data();
    let ln_eps = libm::log(params.epsilon_log);
    let inv_n = 1.0 / mask.count as f64;
    let mut bce = 0.0;
    let mut dz = vec![0.0; zd.len()];
    // Dice sums for [background, water].
    let (mut inter, mut psum, mut gsum) = ([0.0f64; 2], [0.0f64; 2], [0.0f64; 2]);
    let mut probs = vec![0.0; zd.len()];
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let zi = zd[px].to_f64();
        let y = labels[px] as usize;
        let s = crate::numerics::sigmoid(zi);
        probs[px] = s;
        if y == 1 {
            let l = log_sigmoid(zi);
            if l > ln_eps {
                bce -= l;
                dz[px] -= (1.0 - s) * inv_n;
            } else {
                bce -= ln_eps;
            }
        } else {
            let l = log_sigmoid(-zi);
            if l > ln_eps {
                bce -= l;
                dz[px] += s * inv_n;
            } else {
                bce -= ln_eps;
            }
        }
        let pc = [1.0 - s, s];
        psum[0] += pc[0];
        psum[1] += pc[1];
        inter[y] += pc[y];
        gsum[y] += 1.0;
    }
    bce *= inv_n;
    let eps = params.epsilon_dice;
    let mut num = [0.0; 2];
    let mut den = [0.0; 2];
    let mut score = 0.0;
    for c in 0..2 {
        num[c] = 2.0 * inter[c] + eps;
        den[c] = psum[c] + gsum[c] + eps;
        score += num[c] / den[c];
    }
    let dice = 1.0 - score / 2.0;
    let lam = params.lambda_dice;
    for px in 0..v.pixels() {
        if !mask.mask[px] {
            continue;
        }
        let y = labels[px] as usize;
        let mut a = [0.0; 2];
        for c in 0..2 {
            let g = if c == y { 1.0 } else { 0.0 };
            a[c] = -(2.0 * g * den[c] - num[c]) / (2.0 * den[c] * den[c]);
        }
        let s = probs[px];
        dz[px] += lam * (a[1] - a[0]) * s * (1.0 - s);
    }
    let value = bce + lam * dice;
    if !value.is_finite() {
        bail!(Numeric, "{}", format!("water loss evaluated to {value}"));
    }
    Ok(fused(logits, value, dz, &shape, "water_loss"))
}
