//! Checkpoint directories: `checkpoint.json` describing the model and the
//! parameter layout, `params.bin` with the raw f32 values in that order and,
//! for resumable checkpoints, `optim.bin` with the Adam moments.

use std::fs;
use std::path::Path;

use sarseg_core::engine::AdamState;
use sarseg_core::model::{AblationFlags, EncoderConfig, ModelConfig, ParamStore, SegModel};
use sarseg_core::numerics::Tensor;
use sarseg_core::sampling::NormStats;
use serde::{Deserialize, Serialize};

use crate::config::Task;
use crate::error::{Error, Result};
use crate::format::{read_json, write_json};

const MAGIC: &[u8; 4] = b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    /// A full segmentation model.
    Segmentation,
    /// Encoder weights only, as produced by pretraining.
    Encoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub depth: usize,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: CheckpointKind,
    /// Encoder weights are (or started from) self-supervised pretraining.
    pub pretrained: bool,
    pub encoder: EncoderConfig,
    /// Present for segmentation checkpoints.
    pub model: Option<ModelConfig>,
    pub flags: Option<AblationFlags>,
    pub task: Task,
    pub norm: NormStats,
    /// Completed epochs and optimizer steps.
    pub epoch: usize,
    pub step: usize,
    /// Validation score of the primary metric at this point.
    pub metric: Option<f64>,
    /// Best validation score seen so far in the run.
    pub best_metric: Option<f64>,
    pub params: Vec<ParamMeta>,
    /// Adam step count when `optim.bin` is present.
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

fn put_values(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn header() -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format { path: path.into(), detail: "missing checkpoint magic".into() });
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version { path: path.into(), found: version, expected: CHECKPOINT_VERSION });
        }
        Ok(Self { path, bytes, at: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at + n;
        if end > self.bytes.len() {
            return Err(Error::Integrity { path: self.path.into(), detail: "file ends early".into() });
        }
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let b = self.take(4 * n)?;
        let data = b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(Tensor::new(shape, data)?)
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Integrity {
                path: self.path.into(),
                detail: format!("{} trailing bytes", self.bytes.len() - self.at),
            });
        }
        Ok(())
    }
}

pub fn param_layout(store: &ParamStore<f32>) -> Vec<ParamMeta> {
    store
        .iter()
        .map(|p| ParamMeta { name: p.name.clone(), shape: p.value.shape().to_vec(), depth: p.depth, decay: p.decay })
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut meta = self.meta.clone();
        meta.params = param_layout(&self.store);
        meta.optimizer_step = self.optimizer.as_ref().map(|s| s.step);
        let mut params = header();
        for p in self.store.iter() {
            put_values(&mut params, &p.value);
        }
        let ppath = dir.join("params.bin");
        fs::write(&ppath, params).map_err(Error::io(&ppath))?;
        let opath = dir.join("optim.bin");
        match &self.optimizer {
            Some(s) => {
                let mut out = header();
                out.extend_from_slice(&s.step.to_le_bytes());
                for t in s.m.iter().chain(&s.v) {
                    put_values(&mut out, t);
                }
                fs::write(&opath, out).map_err(Error::io(&opath))?;
            }
            None if opath.exists() => fs::remove_file(&opath).map_err(Error::io(&opath))?,
            None => {}
        }
        // Written last: a directory with a manifest is complete.
        write_json(&dir.join("checkpoint.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("checkpoint.json");
        let meta: CheckpointMeta = read_json(&mpath)?;
        if meta.version != CHECKPOINT_VERSION {
            return Err(Error::Version { path: mpath, found: meta.version, expected: CHECKPOINT_VERSION });
        }
        if meta.kind == CheckpointKind::Segmentation && meta.model.is_none() {
            return Err(Error::manifest(&mpath, "segmentation checkpoint without a model configuration"));
        }
        let ppath = dir.join("params.bin");
        let bytes = fs::read(&ppath).map_err(Error::io(&ppath))?;
        let mut r = Reader::new(&ppath, &bytes)?;
        let mut store = ParamStore::new();
        for p in &meta.params {
            store.add(p.name.clone(), r.tensor(&p.shape)?, p.depth, p.decay)?;
        }
        r.finish()?;
        let optimizer = match meta.optimizer_step {
            None => None,
            Some(step) => {
                let opath = dir.join("optim.bin");
                let bytes = fs::read(&opath).map_err(Error::io(&opath))?;
                let mut r = Reader::new(&opath, &bytes)?;
                if r.u64()? != step {
                    return Err(Error::Integrity { path: opath, detail: "step differs from the manifest".into() });
                }
                let m = meta.params.iter().map(|p| r.tensor(&p.shape)).collect::<Result<Vec<_>>>()?;
                let v = meta.params.iter().map(|p| r.tensor(&p.shape)).collect::<Result<Vec<_>>>()?;
                r.finish()?;
                Some(AdamState { step, m, v })
            }
        };
        Ok(Self { meta, store, optimizer })
    }

    /// Rebuilds the segmentation model with the stored weights.
    pub fn segmentation_model(&self) -> Result<SegModel<f32>> {
        let (Some(cfg), Some(flags)) = (&self.meta.model, self.meta.flags) else {
            return Err(Error::Config("checkpoint holds an encoder only, not a segmentation model".into()));
        };
        let mut model = SegModel::new(cfg.clone(), flags, 0)?;
        restore(model.store_mut(), &self.store)?;
        Ok(model)
    }
}

/// Overwrites every parameter of `dst` from the same-named entry of `src`;
/// both must hold exactly the same names and shapes.
pub fn restore(dst: &mut ParamStore<f32>, src: &ParamStore<f32>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Config(format!("checkpoint has {} parameters, model expects {}", src.len(), dst.len())));
    }
    dst.load_prefix(src, "")?;
    Ok(())
}
