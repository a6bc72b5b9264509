//! Pyramid-pooling + feature-pyramid decoder and the segmentation heads.

use alloc::format;
use alloc::vec::Vec;

use super::encoder::FeaturePyramid;
use super::layers::{Builder, Conv, ConvModule};
use super::params::Ctx;
use super::{AblationFlags, ModelConfig};
use crate::error::{bail, Result};
use crate::numerics::{Real, Var};

pub const PPM_GRIDS: [usize; 4] = [1, 2, 3, 6];

enum Head {
    /// 1×1 classifier at stride 4, then one bilinear 4× upsample.
    Baseline { classifier: Conv },
    /// Two (2× upsample, 3×3 conv, norm, GELU) stages, then a 1×1
    /// classifier at full resolution.
    RefineUp { stages: [ConvModule; 2], classifier: Conv },
}

pub(crate) struct UperDecoder {
    ppm: Vec<ConvModule>,
    bottleneck: ConvModule,
    laterals: Vec<ConvModule>,
    post_embed_proj: Option<ConvModule>,
    fpn: Vec<ConvModule>,
    fuse: ConvModule,
    head: Head,
    patch_stride: usize,
}

impl UperDecoder {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        cfg: &ModelConfig,
        flags: &AblationFlags,
        depth: usize,
    ) -> Result<Self> {
        let c = cfg.encoder.channels;
        let f = cfg.decoder_width;
        let k = cfg.num_classes;
        if !f.is_multiple_of(4) || f == 0 {
            bail!(Config, "decoder width {f} must be a positive multiple of 4");
        }
        if cfg.encoder.patch_stride != 4 {
            bail!(Config, "the decoder heads assume a stride-4 patch embedding");
        }
        let ppm = PPM_GRIDS
            .iter()
            .enumerate()
            .map(|(i, _)| ConvModule::new(b, &format!("decoder.ppm.{i}"), c[3], f, 1, depth))
            .collect::<Result<Vec<_>>>()?;
        let bottleneck = ConvModule::new(b, "decoder.bottleneck", c[3] + PPM_GRIDS.len() * f, f, 3, depth)?;
        let post_embed_proj = if flags.high_res_injection {
            Some(ConvModule::new(b, "decoder.post_embed_proj", c[0], f, 1, depth)?)
        } else {
            None
        };
        let mut laterals = Vec::new();
        for (i, &ci) in c[..3].iter().enumerate() {
            // The stride-4 lateral also takes the projected post-embedding map.
            let cin = if i == 0 && flags.high_res_injection { ci + f } else { ci };
            laterals.push(ConvModule::new(b, &format!("decoder.lateral.{i}"), cin, f, 1, depth)?);
        }
        let fpn = (0..3)
            .map(|i| ConvModule::new(b, &format!("decoder.fpn.{i}"), f, f, 3, depth))
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvModule::new(b, "decoder.fuse", 4 * f, f, 3, depth)?;
        let head = if flags.refine_up {
            Head::RefineUp {
                stages: [
                    ConvModule::new(b, "head.refine.0", f, f / 2, 3, depth)?,
                    ConvModule::new(b, "head.refine.1", f / 2, f / 4, 3, depth)?,
                ],
                classifier: Conv::new(b, "head.classifier", f / 4, k, 1, 1, true, depth)?,
            }
        } else {
            Head::Baseline { classifier: Conv::new(b, "head.classifier", f, k, 1, 1, true, depth)? }
        };
        Ok(Self { ppm, bottleneck, laterals, post_embed_proj, fpn, fuse, head, patch_stride: cfg.encoder.patch_stride })
    }

    /// Stride-4 fused features, N×F×(S/4)×(S/4).
    pub fn features<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, pyr: &FeaturePyramid<'t, T>) -> Result<Var<'t, T>> {
        let prev = cx.tape.set_scope("decoder");
        let top = pyr.stages[3];
        let ts = top.shape();
        let mut parts = Vec::with_capacity(PPM_GRIDS.len() + 1);
        parts.push(top);
        for (g, cm) in PPM_GRIDS.iter().zip(&self.ppm) {
            let pooled = cm.forward(cx, top.adaptive_avg_pool(*g, *g)?)?;
            parts.push(pooled.resize_bilinear(ts[2], ts[3])?);
        }
        let ppm_out = self.bottleneck.forward(cx, Var::concat(&parts, 1)?)?;

        let mut lat: Vec<Var<'t, T>> = Vec::with_capacity(4);
        for (i, l) in self.laterals.iter().enumerate() {
            let mut x = pyr.stages[i];
            if let (0, Some(proj)) = (i, &self.post_embed_proj) {
                let pe = proj.forward(cx, pyr.post_embed)?;
                if pe.shape()[2..] != x.shape()[2..] {
                    bail!(Config, "post-embedding map {:?} does not align with stage 1 {:?}", pe.shape(), x.shape());
                }
                x = Var::concat(&[x, pe], 1)?;
            }
            lat.push(l.forward(cx, x)?);
        }
        lat.push(ppm_out);
        for i in (0..3).rev() {
            let s = lat[i].shape();
            let up = lat[i + 1].resize_bilinear(s[2], s[3])?;
            lat[i] = lat[i].add(up)?;
        }
        let base = lat[0].shape();
        let mut outs = Vec::with_capacity(4);
        for (i, x) in lat.iter().enumerate() {
            let y = if i < 3 { self.fpn[i].forward(cx, *x)? } else { *x };
            outs.push(if i == 0 { y } else { y.resize_bilinear(base[2], base[3])? });
        }
        let fused = self.fuse.forward(cx, Var::concat(&outs, 1)?)?;
        cx.tape.set_scope(prev);
        Ok(fused)
    }

    /// Logits N×K×S×S.
    pub fn forward<'t, T: Real>(&self, cx: &Ctx<'t, '_, T>, pyr: &FeaturePyramid<'t, T>) -> Result<Var<'t, T>> {
        let x = self.features(cx, pyr)?;
        let prev = cx.tape.set_scope("head");
        let out = match &self.head {
            Head::Baseline { classifier } => classifier.forward(cx, x)?.upsample_bilinear(self.patch_stride)?,
            Head::RefineUp { stages, classifier } => {
                let mut y = x;
                for st in stages {
                    y = st.forward(cx, y.upsample_bilinear(2)?)?;
                }
                classifier.forward(cx, y)?
            }
        };
        cx.tape.set_scope(prev);
        Ok(out)
    }

    pub fn classifier(&self) -> &Conv {
        match &self.head {
            Head::Baseline { classifier } | Head::RefineUp { classifier, .. } => classifier,
        }
    }
}
