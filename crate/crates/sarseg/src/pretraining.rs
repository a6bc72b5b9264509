//! Self-supervised pretraining on the unlabeled split.

use std::fs;
use std::path::Path;

use sarseg_core::engine::{AdamW, Schedule};
use sarseg_core::pretrain::{pretrain_step, PretrainBatch, PretrainModel};
use sarseg_core::sampling::Split;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, CHECKPOINT_VERSION};
use crate::config::{RunSpec, Task};
use crate::error::{Error, Result};
use crate::format::Dataset;
use crate::train::epoch_order;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Trains the mixed-image reconstruction model on the pretraining split for
/// the configured epochs (incomplete trailing batches are dropped so every
/// step pairs `batch_size` images). Returns the model and per-epoch losses.
pub fn pretrain_model(spec: &RunSpec, ds: &Dataset) -> Result<(PretrainModel<f32>, Vec<PretrainRecord>)> {
    if spec.task != Task::Pretrain {
        return Err(Error::Config(format!("pretraining run configured for task {}", spec.task.name())));
    }
    let images: Vec<&[f32]> = ds.split(Split::Pretrain).iter().map(|p| p.image.as_slice()).collect();
    let spe = images.len() / spec.batch_size;
    if spe == 0 {
        return Err(Error::Config(format!(
            "{} pretraining patches do not fill one batch of {}",
            images.len(),
            spec.batch_size
        )));
    }
    let mut model = PretrainModel::new(spec.preset.encoder(ds.patch_size), spec.pretrain.clone(), spec.seed)?;
    let mut opt = AdamW::new(&spec.optim, model.store())?;
    let schedule = Schedule::new(spec.optim.clone(), spe, model.store().max_depth(), spec.batch_size)?;
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..spec.epochs() {
        let order = epoch_order(images.len(), spec.seed, epoch);
        let lr = schedule.base_at(step);
        let mut total = 0.0;
        for chunk in order.chunks_exact(spec.batch_size) {
            let batch =
                PretrainBatch { size: ds.patch_size, images: chunk.iter().map(|&i| images[i].to_vec()).collect() };
            total += pretrain_step(&mut model, &mut opt, &schedule, step, &batch, &ds.norm, spec.seed)?.loss;
            step += 1;
        }
        history.push(PretrainRecord { epoch: epoch + 1, loss: total / spe as f64, lr });
    }
    Ok((model, history))
}

/// Encoder-only checkpoint of a pretrained model.
pub fn encoder_checkpoint(model: &PretrainModel<f32>, ds: &Dataset, epochs: usize, steps: usize) -> Result<Checkpoint> {
    Ok(Checkpoint {
        meta: CheckpointMeta {
            version: CHECKPOINT_VERSION,
            kind: CheckpointKind::Encoder,
            pretrained: true,
            encoder: model.encoder_config().clone(),
            model: None,
            flags: None,
            task: Task::Pretrain,
            norm: ds.norm,
            epoch: epochs,
            step: steps,
            metric: None,
            best_metric: None,
            params: Vec::new(),
            optimizer_step: None,
        },
        store: model.encoder_store()?,
        optimizer: None,
    })
}

/// Pretrains and writes `history.jsonl` and the `encoder/` checkpoint under
/// `out`.
pub fn pretrain(spec: &RunSpec, ds: &Dataset, out: &Path) -> Result<Vec<PretrainRecord>> {
    let (model, history) = pretrain_model(spec, ds)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let lines: String = history.iter().map(|r| serde_json::to_string(r).expect("serializable record") + "\n").collect();
    let hpath = out.join("history.jsonl");
    fs::write(&hpath, lines).map_err(Error::io(&hpath))?;
    let steps = ds.split(Split::Pretrain).len() / spec.batch_size * spec.epochs();
    encoder_checkpoint(&model, ds, spec.epochs(), steps)?.save(&out.join("encoder"))?;
    Ok(history)
}
