//! Segmentation network: shifted-window transformer encoder, pyramid
//! pooling + feature pyramid decoder, and the baseline or refine-up head.
//!
//! Tensors are N×C×H×W between modules; the encoder works channels-last
//! internally.

mod decoder;
mod encoder;
mod layers;
mod params;

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use decoder::PPM_GRIDS;
pub use encoder::FeaturePyramid;
pub(crate) use encoder::{Encoder, SwinBlock};
pub(crate) use layers::{Builder, LayerNorm, Linear};
pub use params::{Ctx, Param, ParamId, ParamStore};

use crate::error::{bail, Result};
use crate::numerics::{Real, Tape, Var};

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub heads: [usize; 4],
    pub blocks: [usize; 4],
    pub window: usize,
    pub patch_stride: usize,
    pub input_size: usize,
    pub in_channels: usize,
    pub mlp_ratio: usize,
}

impl EncoderConfig {
    /// C=(16,32,64,128), H=(1,2,4,8), B=(1,1,2,1), window 8, 64 px inputs.
    pub fn desk() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            heads: [1, 2, 4, 8],
            blocks: [1, 1, 2, 1],
            window: 8,
            patch_stride: 4,
            input_size: 64,
            in_channels: 1,
            mlp_ratio: 4,
        }
    }

    /// C=(128,256,512,1024), H=(4,8,16,32), B=(2,2,18,2), 256 px inputs.
    pub fn full() -> Self {
        Self {
            channels: [128, 256, 512, 1024],
            heads: [4, 8, 16, 32],
            blocks: [2, 2, 18, 2],
            window: 8,
            patch_stride: 4,
            input_size: 256,
            in_channels: 1,
            mlp_ratio: 4,
        }
    }

    /// Token grid side at stage `s` (strides 4, 8, 16, 32).
    pub fn stage_side(&self, s: usize) -> usize {
        self.input_size / (self.patch_stride << s)
    }

    /// Window size and shift used at stage `s`. A stage whose grid is no
    /// larger than the window attends over the whole grid without shifting.
    pub fn window_at(&self, s: usize) -> (usize, usize) {
        let side = self.stage_side(s);
        if side <= self.window {
            (side, 0)
        } else {
            (self.window, self.window / 2)
        }
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_stride == 0 || self.window == 0 || self.in_channels == 0 || self.mlp_ratio == 0 {
            bail!(Config, "patch stride, window, input channels and MLP ratio must be positive");
        }
        let total_stride = self.patch_stride << 3;
        if self.input_size == 0 || !self.input_size.is_multiple_of(total_stride) {
            bail!(Config, "input size {} is not divisible by the stride-{total_stride} token grid", self.input_size);
        }
        for s in 0..4 {
            if self.channels[s] == 0 || self.heads[s] == 0 || !self.channels[s].is_multiple_of(self.heads[s]) {
                bail!(Config, "stage {s}: {} channels do not split over {} heads", self.channels[s], self.heads[s]);
            }
            let side = self.stage_side(s);
            let (ws, _) = self.window_at(s);
            if !side.is_multiple_of(ws) {
                bail!(Config, "stage {s}: window {ws} does not tile the {side}×{side} grid");
            }
        }
        Ok(())
    }
}

/// The three switchable refinements.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct AblationFlags {
    pub high_res_injection: bool,
    pub refine_up: bool,
    pub alpha_scale_enabled: bool,
}

impl AblationFlags {
    pub const BASELINE: Self = Self { high_res_injection: false, refine_up: false, alpha_scale_enabled: false };
    pub const FULL: Self = Self { high_res_injection: true, refine_up: true, alpha_scale_enabled: true };

    /// All eight combinations.
    pub fn all() -> [Self; 8] {
        core::array::from_fn(|i| Self {
            high_res_injection: i & 1 != 0,
            refine_up: i & 2 != 0,
            alpha_scale_enabled: i & 4 != 0,
        })
    }
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Common channel width of the decoder.
    pub decoder_width: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn desk(num_classes: usize) -> Self {
        Self { encoder: EncoderConfig::desk(), decoder_width: 64, num_classes }
    }

    pub fn full(num_classes: usize) -> Self {
        Self { encoder: EncoderConfig::full(), decoder_width: 256, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.num_classes == 0 || self.num_classes > 254 {
            bail!(Config, "class count {} out of range", self.num_classes);
        }
        Ok(())
    }
}

/// One entry of the parameter partition used by the optimizer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub depth: usize,
    pub decay_eligible: bool,
}

/// Encoder, decoder and head with their parameters.
pub struct SegModel<T: Real> {
    config: ModelConfig,
    flags: AblationFlags,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: decoder::UperDecoder,
}

impl<T: Real> SegModel<T> {
    /// Randomly initialized model; deterministic given `seed`.
    pub fn new(config: ModelConfig, flags: AblationFlags, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut store, rng: &mut rng };
        let encoder = Encoder::new(&mut b, &config.encoder)?;
        let head_depth = config.encoder.total_blocks() + 1;
        let decoder = decoder::UperDecoder::new(&mut b, &config, &flags, head_depth)?;
        Ok(Self { config, flags, store, encoder, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Binds this model's parameters to `tape` for one forward pass.
    pub fn ctx<'t, 's>(&'s self, tape: &'t Tape<T>, trainable: bool) -> Ctx<'t, 's, T> {
        Ctx::new(tape, &self.store, trainable)
    }

    pub fn encode<'t>(&self, cx: &Ctx<'t, '_, T>, image: Var<'t, T>) -> Result<FeaturePyramid<'t, T>> {
        self.encoder.forward(cx, image)
    }

    pub fn decode<'t>(&self, cx: &Ctx<'t, '_, T>, pyr: &FeaturePyramid<'t, T>) -> Result<Var<'t, T>> {
        self.decoder.forward(cx, pyr)
    }

    /// Logits N×K×S×S for a normalized N×1×S×S image batch.
    pub fn forward<'t>(&self, cx: &Ctx<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        let pyr = self.encode(cx, image)?;
        self.decode(cx, &pyr)
    }

    /// Name, layer depth and weight-decay eligibility of every parameter.
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        self.store
            .iter()
            .map(|p| ParamGroup { name: p.name.clone(), depth: p.depth, decay_eligible: p.decay })
            .collect()
    }

    /// Classifier weight and bias of the final convolution.
    pub fn classifier_params(&self) -> (ParamId, Option<ParamId>) {
        let c = self.decoder.classifier();
        (c.weight(), c.bias())
    }

    /// Same model in another precision.
    pub fn cast<U: Real>(&self) -> Result<SegModel<U>> {
        let mut m = SegModel::<U>::new(self.config.clone(), self.flags, 0)?;
        m.store = self.store.cast();
        Ok(m)
    }
}
