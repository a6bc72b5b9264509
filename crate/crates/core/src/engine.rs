//! AdamW, the warmup + cosine schedule with layer-wise decay, and single
//! training and evaluation steps. Loops, files and checkpoints live in the
//! `sarseg` crate.

use alloc::vec::Vec;

use crate::datagen::IGNORE;
use crate::error::{bail, Result};
use crate::losses::{total_loss, water_loss, ClassWeights, LossParams, ValidMask, WaterLossParams};
use crate::metrics::{argmax_classes, ConfusionMatrix, WaterCounts};
use crate::model::{AblationFlags, ParamStore, SegModel};
use crate::numerics::{Real, Tape, Tensor};

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub layer_decay: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Multiply `base_lr` by `batch_size / 256`.
    pub global_batch_scaling: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::finetune_desk()
    }
}

impl OptimConfig {
    /// Finetuning recipe at desk scale: 40 epochs with 2 warmup epochs and a
    /// larger base rate than the full-scale recipe, since runs last only a
    /// few hundred steps.
    pub fn finetune_desk() -> Self {
        Self {
            base_lr: 3e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            layer_decay: 0.7,
            min_lr: 1e-6,
            warmup_epochs: 2,
            total_epochs: 40,
            global_batch_scaling: false,
        }
    }

    /// Full-length finetuning: base rate 6e-4, 200 epochs, 10 warmup.
    pub fn finetune_full() -> Self {
        Self { base_lr: 6e-4, warmup_epochs: 10, total_epochs: 200, ..Self::finetune_desk() }
    }

    /// Pretraining at desk scale: no layer decay, schedule down to 0, fixed
    /// base rate (batch scaling would shrink it to nothing at small batches).
    pub fn pretrain_desk() -> Self {
        Self {
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            layer_decay: 1.0,
            min_lr: 0.0,
            warmup_epochs: 2,
            total_epochs: 25,
            global_batch_scaling: false,
        }
    }

    /// Full-scale pretraining: 1.5e-4 scaled by batch/256, 600 epochs, 40
    /// warmup.
    pub fn pretrain_full() -> Self {
        Self {
            base_lr: 1.5e-4,
            warmup_epochs: 40,
            total_epochs: 600,
            global_batch_scaling: true,
            ..Self::pretrain_desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            bail!(Config, "layer_decay {} outside (0, 1]", self.layer_decay);
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            bail!(Config, "base_lr must be finite and non-negative");
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            bail!(Config, "min_lr {} must lie in [0, base_lr = {}]", self.min_lr, self.base_lr);
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            bail!(Config, "weight_decay must be non-negative and eps positive");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            bail!(Config, "betas must lie in [0, 1)");
        }
        if self.total_epochs == 0 || self.warmup_epochs > self.total_epochs {
            bail!(Config, "need 0 ≤ warmup_epochs ≤ total_epochs and total_epochs > 0");
        }
        Ok(())
    }
}

/// [`OptimConfig`] bound to a concrete run length and model depth.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub cfg: OptimConfig,
    pub steps_per_epoch: usize,
    pub max_depth: usize,
    pub batch_size: usize,
}

impl Schedule {
    pub fn new(cfg: OptimConfig, steps_per_epoch: usize, max_depth: usize, batch_size: usize) -> Result<Self> {
        cfg.validate()?;
        if steps_per_epoch == 0 || batch_size == 0 {
            bail!(Config, "steps per epoch and batch size must be positive");
        }
        Ok(Self { cfg, steps_per_epoch, max_depth, batch_size })
    }

    pub fn warmup_steps(&self) -> usize {
        self.cfg.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.total_epochs * self.steps_per_epoch
    }

    pub fn peak_lr(&self) -> f64 {
        if self.cfg.global_batch_scaling {
            self.cfg.base_lr * self.batch_size as f64 / 256.0
        } else {
            self.cfg.base_lr
        }
    }

    /// Learning rate of the deepest layer at `step`.
    pub fn base_at(&self, step: usize) -> f64 {
        let peak = self.peak_lr();
        let warm = self.warmup_steps();
        let total = self.total_steps();
        if step < warm {
            return peak * step as f64 / warm as f64;
        }
        if step >= total {
            return self.cfg.min_lr.min(peak);
        }
        let progress = (step - warm) as f64 / (total - warm) as f64;
        let min = self.cfg.min_lr.min(peak);
        min + (peak - min) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }

    pub fn lr_at(&self, step: usize, depth: usize) -> f64 {
        let gap = self.max_depth.saturating_sub(depth) as i32;
        self.base_at(step) * libm::pow(self.cfg.layer_decay, gap as f64)
    }

    /// One learning rate per parameter of `store`.
    pub fn lrs<T: Real>(&self, step: usize, store: &ParamStore<T>) -> Vec<f64> {
        store.iter().map(|p| self.lr_at(step, p.depth)).collect()
    }
}

pub fn lr_at(step: usize, depth: usize, schedule: &Schedule) -> f64 {
    schedule.lr_at(step, depth)
}

/// First and second moments per parameter and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
    state: AdamState<T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &OptimConfig, store: &ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Ok(Self {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: AdamState { step: 0, m: zeros(), v: zeros() },
        })
    }

    /// Resumes from saved moments; shapes must match `store`.
    pub fn from_state(cfg: &OptimConfig, store: &ParamStore<T>, state: AdamState<T>) -> Result<Self> {
        let mut opt = Self::new(cfg, store)?;
        if state.m.len() != store.len() || state.v.len() != store.len() {
            bail!(Config, "optimizer state holds {} entries for {} parameters", state.m.len(), store.len());
        }
        for ((p, m), v) in store.iter().zip(&state.m).zip(&state.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                bail!(Config, "optimizer state for {} has the wrong shape", p.name);
            }
        }
        opt.state = state;
        Ok(opt)
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// Applies one update. Parameters without a gradient are left alone;
    /// weight decay applies only to decay-eligible parameters. A non-finite
    /// gradient aborts the step before anything changes.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lrs: &[f64]) -> Result<()> {
        if grads.len() != store.len() || lrs.len() != store.len() {
            bail!(Argument, "{} gradients and {} rates for {} parameters", grads.len(), lrs.len(), store.len());
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    bail!(Argument, "gradient of {} has shape {:?}", p.name, g.shape());
                }
                if !g.all_finite() {
                    bail!(Numeric, "non-finite gradient for {}", p.name);
                }
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - libm::pow(b1, t as f64);
        let bc2 = 1.0 - libm::pow(b2, t as f64);
        for (i, (p, g)) in store.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let lr = lrs[i];
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gf = gi.to_f64();
                let mf = b1 * mi.to_f64() + (1.0 - b1) * gf;
                let vf = b2 * vi.to_f64() + (1.0 - b2) * gf * gf;
                *mi = T::from_f64(mf);
                *vi = T::from_f64(vf);
                let mut xf = x.to_f64();
                xf -= decay * xf;
                xf -= lr * (mf / bc1) / (libm::sqrt(vf / bc2) + self.eps);
                *x = T::from_f64(xf);
            }
        }
        Ok(())
    }
}

/// Training objective of a task.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// Focal + dice over K classes with the focal weighting already resolved
    /// from the α-scale flag.
    Lulc { alpha: ClassWeights, alpha_scale: f64, params: LossParams },
    /// Binary cross-entropy + dice on a single water logit.
    Water(WaterLossParams),
}

impl Objective {
    pub fn lulc(weights: &ClassWeights, params: LossParams, flags: AblationFlags) -> Result<Self> {
        params.validate()?;
        let (alpha_scale, alpha) = params.focal_weighting(weights, flags.alpha_scale_enabled);
        Ok(Self::Lulc { alpha, alpha_scale, params })
    }

    pub fn water() -> Self {
        Self::Water(WaterLossParams::default())
    }

    pub fn ignore_label(&self) -> u8 {
        match self {
            Self::Lulc { params, .. } => params.ignore_label,
            Self::Water(_) => IGNORE,
        }
    }
}

/// Normalized N×1×S×S images and their labels in N·S·S order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub focal: Option<f64>,
    pub dice: Option<f64>,
}

/// Loss and per-parameter gradients on one batch.
pub fn loss_and_grads<T: Real>(
    model: &SegModel<T>,
    batch: &Batch<T>,
    objective: &Objective,
) -> Result<(StepStats, Vec<Option<Tensor<T>>>)> {
    let tape = Tape::new();
    let cx = model.ctx(&tape, true);
    let logits = model.forward(&cx, tape.constant(batch.images.clone()))?;
    let mask = ValidMask::from_labels(&batch.labels, objective.ignore_label());
    let (loss, stats) = match objective {
        Objective::Lulc { alpha, alpha_scale, params } => {
            let out = total_loss(logits, &batch.labels, &mask, alpha, *alpha_scale, params)?;
            let loss = out.total.item().to_f64();
            (out.total, StepStats { loss, focal: Some(out.focal), dice: Some(out.dice) })
        }
        Objective::Water(p) => {
            let l = water_loss(logits, &batch.labels, &mask, p)?;
            (l, StepStats { loss: l.item().to_f64(), focal: None, dice: None })
        }
    };
    if !stats.loss.is_finite() {
        bail!(Numeric, "loss is {}", stats.loss);
    }
    let mut g = tape.backward(loss)?;
    Ok((stats, cx.param_grads(&mut g)))
}

/// Forward, backward and one optimizer update at schedule position `step`.
pub fn train_step<T: Real>(
    model: &mut SegModel<T>,
    opt: &mut AdamW<T>,
    schedule: &Schedule,
    step: usize,
    batch: &Batch<T>,
    objective: &Objective,
) -> Result<StepStats> {
    let (stats, grads) = loss_and_grads(model, batch, objective)?;
    let lrs = schedule.lrs(step, model.store());
    opt.step(model.store_mut(), &grads, &lrs)?;
    Ok(stats)
}

/// Logits for a batch of normalized images, without recording gradients.
pub fn predict<T: Real>(model: &SegModel<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    let cx = model.ctx(&tape, false);
    let z = model.forward(&cx, tape.constant(images.clone()))?;
    Ok(z.to_tensor())
}

/// Running evaluation statistics of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum Evaluation {
    Lulc(ConfusionMatrix),
    Water { counts: WaterCounts, threshold: f64 },
}

impl Evaluation {
    pub fn for_model<T: Real>(model: &SegModel<T>, objective: &Objective, threshold: f64) -> Self {
        match objective {
            Objective::Lulc { .. } => Self::Lulc(ConfusionMatrix::new(model.config().num_classes)),
            Objective::Water(_) => Self::Water { counts: WaterCounts::default(), threshold },
        }
    }

    /// Adds predictions from `logits` against `labels`.
    pub fn accumulate<T: Real>(&mut self, logits: &Tensor<T>, labels: &[u8], ignore: u8) -> Result<()> {
        match self {
            Self::Lulc(cm) => cm.accumulate(&argmax_classes(logits)?, labels, ignore),
            Self::Water { counts, threshold } => {
                if logits.shape().get(1) != Some(&1) {
                    bail!(Argument, "water evaluation expects one logit channel, got {:?}", logits.shape());
                }
                let probs: Vec<f64> = logits.data().iter().map(|z| sigmoid(z.to_f64())).collect();
                counts.accumulate(&probs, labels, *threshold, ignore)
            }
        }
    }

    /// mIoU for segmentation, water IoU for the binary task.
    pub fn primary(&self) -> Option<f64> {
        match self {
            Self::Lulc(cm) => cm.mean_iou(),
            Self::Water { counts, .. } => counts.metrics().iou_water,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}
