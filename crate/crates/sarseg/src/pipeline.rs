//! Synthetic scenes to a split, remapped, normalized patch dataset.

use std::collections::BTreeMap;

use sarseg_core::datagen::{generate_scene, SceneSpec, SOURCE_CLASSES};
use sarseg_core::sampling::{
    compute_class_stats, compute_norm_stats_of, extract_patches, remap_labels, sample_anchors, split_by_tag, Split,
};

use crate::error::{Error, Result};
use crate::format::{Dataset, RemapFile, SceneSet};

/// Tag of the `i`-th synthetic scene; stands in for an acquisition month.
pub fn scene_tag(i: usize) -> String {
    format!("m{i:02}")
}

/// Seed of scene `i` in a run seeded with `seed`.
fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// `count` long-tailed 14-class scenes of `size`×`size` pixels.
pub fn synthesize(count: usize, size: usize, seed: u64) -> Result<SceneSet> {
    if count == 0 {
        return Err(Error::Config("at least one scene is required".into()));
    }
    let rasters = (0..count)
        .map(|i| {
            let mut spec = SceneSpec::long_tailed(size, size, scene_seed(seed, i));
            spec.tag = scene_tag(i);
            generate_scene(&spec)
        })
        .collect::<sarseg_core::Result<Vec<_>>>()?;
    Ok(SceneSet { classes: SOURCE_CLASSES.iter().map(|s| s.to_string()).collect(), rasters })
}

/// Assigns tags in order: about 40% pretraining, 40% training, and one tenth
/// (at least one) each for validation and test.
pub fn default_splits(tags: &[String]) -> BTreeMap<String, Split> {
    let n = tags.len();
    let val = (n / 10).max(1).min(n);
    let test = (n / 10).min(n - val);
    let rest = n - val - test;
    let pretrain = rest / 2;
    let mut out = BTreeMap::new();
    for (i, t) in tags.iter().enumerate() {
        let s = if i < pretrain {
            Split::Pretrain
        } else if i < rest {
            Split::Train
        } else if i < rest + val {
            Split::Val
        } else {
            Split::Test
        };
        out.insert(t.clone(), s);
    }
    out
}

/// Parses `tag=split` pairs.
pub fn parse_splits(pairs: &[String]) -> Result<BTreeMap<String, Split>> {
    let mut out = BTreeMap::new();
    for p in pairs {
        let (tag, split) = p.split_once('=').ok_or_else(|| Error::Config(format!("expected tag=split, got {p:?}")))?;
        out.insert(tag.to_string(), Split::from_name(split)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub patch_size: usize,
    /// Anchor draws over all scenes, before de-duplication.
    pub anchors: usize,
    pub seed: u64,
    pub remap: RemapFile,
    /// Split per tag; `None` uses [`default_splits`] over scene order.
    pub splits: Option<BTreeMap<String, Split>>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self { patch_size: 64, anchors: 20_000, seed: 0, remap: RemapFile::default_14_to_9(), splits: None }
    }
}

/// Class statistics, inverse-frequency anchors, tile extraction, remapping,
/// tag split and training-split normalization statistics.
pub fn build_dataset(scenes: &SceneSet, cfg: &BuildConfig) -> Result<Dataset> {
    if scenes.classes != cfg.remap.source_classes {
        return Err(Error::Config("remap source classes differ from the scene classes".into()));
    }
    let table = cfg.remap.table()?;
    let mut tags: Vec<String> = Vec::new();
    for r in &scenes.rasters {
        if !tags.contains(&r.tag) {
            tags.push(r.tag.clone());
        }
    }
    let splits = cfg.splits.clone().unwrap_or_else(|| default_splits(&tags));
    if let Some(t) = tags.iter().find(|t| !splits.contains_key(*t)) {
        return Err(Error::Config(format!("tag {t:?} has no split assignment")));
    }
    let stats = compute_class_stats(scenes.rasters.iter().map(|r| r.labels.as_slice()), scenes.classes.len())?;
    let anchors = sample_anchors(&scenes.rasters, &stats, cfg.anchors, cfg.seed)?;
    let mut patches = Vec::new();
    for (r, a) in scenes.rasters.iter().zip(&anchors) {
        for p in extract_patches(r, a, cfg.patch_size)? {
            patches.push(remap_labels(&p, &table)?);
        }
    }
    let sets = split_by_tag(patches.clone(), &splits)?;
    if sets.train.is_empty() {
        return Err(Error::Config("no patches fall in the training split".into()));
    }
    let norm = compute_norm_stats_of(sets.train.iter().map(|p| p.image.as_slice()))?;
    Ok(Dataset {
        patch_size: cfg.patch_size,
        classes: cfg.remap.target_classes.clone(),
        splits,
        norm,
        remap: cfg.remap.clone(),
        patches,
    })
}
