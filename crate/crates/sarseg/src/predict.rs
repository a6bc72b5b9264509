//! Writes predicted label rasters (and water probabilities) for a split.

use std::fs;
use std::path::Path;

use sarseg_core::engine::{predict, sigmoid};
use sarseg_core::metrics::argmax_classes;
use sarseg_core::numerics::Tensor;
use sarseg_core::sampling::Split;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Task;
use crate::error::{Error, Result};
use crate::format::{write_image, write_json, write_labels, Dataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    /// Index of the source patch in the dataset manifest.
    pub patch: usize,
    pub tag: String,
    pub labels: String,
    pub probabilities: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub task: Task,
    pub split: Split,
    pub threshold: f64,
    pub size: usize,
    pub predictions: Vec<PredictionEntry>,
}

/// For every patch of `split`: `NNNNNN.lbl` with predicted class ids (water:
/// 1 where the probability reaches `threshold`) and, for water,
/// `NNNNNN.prob.img` with the probabilities. Returns the number of patches.
pub fn predict_split(
    ck: &Checkpoint,
    ds: &Dataset,
    split: Split,
    batch_size: usize,
    threshold: f64,
    out: &Path,
) -> Result<usize> {
    let model = ck.segmentation_model()?;
    if model.config().encoder.input_size != ds.patch_size {
        return Err(Error::Config(format!(
            "checkpoint expects {} px patches, dataset has {}",
            model.config().encoder.input_size,
            ds.patch_size
        )));
    }
    let task = ck.meta.task;
    let chosen: Vec<usize> = (0..ds.patches.len()).filter(|&i| ds.split_of(&ds.patches[i]) == split).collect();
    if chosen.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let s = ds.patch_size;
    let mut entries = Vec::new();
    for chunk in chosen.chunks(batch_size.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * s * s);
        for &i in chunk {
            data.extend(ds.patches[i].image.iter().map(|&v| ck.meta.norm.normalize(v)));
        }
        let z = predict(&model, &Tensor::new(&[chunk.len(), 1, s, s], data)?)?;
        let (labels, probs): (Vec<u8>, Option<Vec<f32>>) = match task {
            Task::Water => {
                let p: Vec<f64> = z.data().iter().map(|&v| sigmoid(v as f64)).collect();
                (p.iter().map(|&q| u8::from(q >= threshold)).collect(), Some(p.iter().map(|&q| q as f32).collect()))
            }
            _ => (argmax_classes(&z)?, None),
        };
        for (j, &i) in chunk.iter().enumerate() {
            let stem = format!("{i:06}");
            let lname = format!("{stem}.lbl");
            write_labels(&out.join(&lname), s, s, &labels[j * s * s..(j + 1) * s * s])?;
            let pname = match &probs {
                Some(p) => {
                    let name = format!("{stem}.prob.img");
                    write_image(&out.join(&name), s, s, &p[j * s * s..(j + 1) * s * s])?;
                    Some(name)
                }
                None => None,
            };
            entries.push(PredictionEntry {
                patch: i,
                tag: ds.patches[i].tag.clone(),
                labels: lname,
                probabilities: pname,
            });
        }
    }
    let n = entries.len();
    write_json(
        &out.join("predictions.json"),
        &PredictionManifest { task, split, threshold, size: s, predictions: entries },
    )?;
    Ok(n)
}
