//! Run configuration. Every key of the JSON config file is also a command
//! line flag of the same name (`base_lr` ↔ `--base-lr`); flags win.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use sarseg_core::engine::OptimConfig;
use sarseg_core::losses::LossParams;
use sarseg_core::model::{AblationFlags, EncoderConfig, ModelConfig};
use sarseg_core::pretrain::PretrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::read_json;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lulc,
    Water,
    Pretrain,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Lulc => "lulc",
            Task::Water => "water",
            Task::Pretrain => "pretrain",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelPreset {
    #[default]
    Desk,
    Full,
}

impl ModelPreset {
    pub fn encoder(self, input_size: usize) -> EncoderConfig {
        let mut e = match self {
            ModelPreset::Desk => EncoderConfig::desk(),
            ModelPreset::Full => EncoderConfig::full(),
        };
        e.input_size = input_size;
        e
    }

    pub fn model(self, input_size: usize, num_classes: usize) -> ModelConfig {
        let mut m = match self {
            ModelPreset::Desk => ModelConfig::desk(num_classes),
            ModelPreset::Full => ModelConfig::full(num_classes),
        };
        m.encoder.input_size = input_size;
        m
    }

    fn finetune(self) -> OptimConfig {
        match self {
            ModelPreset::Desk => OptimConfig::finetune_desk(),
            ModelPreset::Full => OptimConfig::finetune_full(),
        }
    }

    fn pretrain(self) -> OptimConfig {
        match self {
            ModelPreset::Desk => OptimConfig::pretrain_desk(),
            ModelPreset::Full => OptimConfig::pretrain_full(),
        }
    }
}

/// Partial run configuration; unset keys fall back to the preset of the task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, Args)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub task: Option<Task>,
    /// Model and schedule preset.
    #[arg(long, value_enum)]
    pub model: Option<ModelPreset>,
    /// Encoder checkpoint from pretraining to initialize from.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Checkpoint directory (with optimizer state) to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub high_res_injection: Option<bool>,
    #[arg(long)]
    pub refine_up: Option<bool>,
    #[arg(long)]
    pub alpha_scale_enabled: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub min_lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub layer_decay: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub global_batch_scaling: Option<bool>,
    #[arg(long)]
    pub alpha_scale: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lambda_focal: Option<f64>,
    #[arg(long)]
    pub lambda_dice: Option<f64>,
    /// Class id treated as water when deriving binary labels.
    #[arg(long)]
    pub water_class: Option<u8>,
    /// Probability at or above which a pixel counts as water.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Fraction of mixing cells taken from the first image in pretraining.
    #[arg(long)]
    pub mask_ratio: Option<f64>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),* $(,)?) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Keys set in `over` replace those here.
    pub fn overlay(mut self, over: &RunConfig) -> Self {
        let s = &mut self;
        overlay!(s, over; dataset, out, task, model, pretrained, resume, high_res_injection, refine_up,
            alpha_scale_enabled, epochs, warmup_epochs, batch_size, seed, base_lr, min_lr, weight_decay,
            layer_decay, beta1, beta2, eps, global_batch_scaling, alpha_scale, gamma, lambda_focal,
            lambda_dice, water_class, threshold, mask_ratio);
        self
    }

    /// Reads `file` if given and applies the flags on top.
    pub fn from_file_and_flags(file: Option<&Path>, flags: &RunConfig) -> Result<Self> {
        let base = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        Ok(base.overlay(flags))
    }

    /// Fills defaults and validates.
    pub fn resolve(&self, default_task: Task) -> Result<RunSpec> {
        let task = self.task.unwrap_or(default_task);
        let preset = self.model.unwrap_or_default();
        let mut optim = if task == Task::Pretrain { preset.pretrain() } else { preset.finetune() };
        if let Some(e) = self.epochs {
            optim.total_epochs = e;
            if self.warmup_epochs.is_none() {
                optim.warmup_epochs = optim.warmup_epochs.min(e.saturating_sub(1));
            }
        }
        let o = &mut optim;
        if let Some(v) = self.warmup_epochs {
            o.warmup_epochs = v;
        }
        if let Some(v) = self.base_lr {
            o.base_lr = v;
        }
        if let Some(v) = self.min_lr {
            o.min_lr = v;
        }
        if let Some(v) = self.weight_decay {
            o.weight_decay = v;
        }
        if let Some(v) = self.layer_decay {
            o.layer_decay = v;
        }
        if let Some(v) = self.beta1 {
            o.betas.0 = v;
        }
        if let Some(v) = self.beta2 {
            o.betas.1 = v;
        }
        if let Some(v) = self.eps {
            o.eps = v;
        }
        if let Some(v) = self.global_batch_scaling {
            o.global_batch_scaling = v;
        }
        optim.validate()?;

        let d = LossParams::default();
        let loss = LossParams {
            alpha_scale: self.alpha_scale.unwrap_or(d.alpha_scale),
            gamma: self.gamma.unwrap_or(d.gamma),
            lambda_focal: self.lambda_focal.unwrap_or(d.lambda_focal),
            lambda_dice: self.lambda_dice.unwrap_or(d.lambda_dice),
            ..d
        };
        loss.validate()?;

        let flags = AblationFlags {
            high_res_injection: self.high_res_injection.unwrap_or(true),
            refine_up: self.refine_up.unwrap_or(true),
            alpha_scale_enabled: self.alpha_scale_enabled.unwrap_or(true),
        };
        let batch_size = self.batch_size.unwrap_or(8);
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if task == Task::Pretrain && !batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!("pretraining pairs images; batch size {batch_size} is odd")));
        }
        let threshold = self.threshold.unwrap_or(0.5);
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
        }
        let mut pretrain = PretrainConfig::default();
        if let Some(r) = self.mask_ratio {
            pretrain.mask_ratio = r;
        }
        if !(pretrain.mask_ratio > 0.0 && pretrain.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", pretrain.mask_ratio)));
        }
        if self.pretrained.is_some() && task == Task::Pretrain {
            return Err(Error::Config("pretraining cannot start from a pretrained encoder".into()));
        }
        Ok(RunSpec {
            task,
            preset,
            flags,
            optim,
            loss,
            batch_size,
            seed: self.seed.unwrap_or(0),
            pretrained: self.pretrained.clone(),
            resume: self.resume.clone(),
            water_class: self.water_class.unwrap_or(0),
            threshold,
            pretrain,
        })
    }
}

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSpec {
    pub task: Task,
    pub preset: ModelPreset,
    /// Ignored for pretraining.
    pub flags: AblationFlags,
    pub optim: OptimConfig,
    pub loss: LossParams,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrained: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub water_class: u8,
    pub threshold: f64,
    pub pretrain: PretrainConfig,
}

impl RunSpec {
    pub fn finetune(task: Task) -> Self {
        RunConfig { task: Some(task), ..Default::default() }.resolve(task).expect("defaults are valid")
    }

    pub fn epochs(&self) -> usize {
        self.optim.total_epochs
    }
}
