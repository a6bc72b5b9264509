//! Dataset construction: class statistics, inverse-frequency anchors, patch
//! tiling, class remapping, tag splits and normalization statistics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::{Raster, IGNORE};
use crate::error::{bail, Result};

/// Per-class pixel counts and frequencies; ignore pixels are not counted.
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
}

impl ClassStats {
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            bail!(EmptyInput, "no labelled pixels to count");
        }
        let frequencies = counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(Self { counts, frequencies })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

fn count_into(counts: &mut [u64], labels: &[u8]) -> Result<()> {
    for &l in labels {
        if l == IGNORE {
            continue;
        }
        match counts.get_mut(l as usize) {
            Some(c) => *c += 1,
            None => bail!(Data, "label {l} outside 0..{}", counts.len()),
        }
    }
    Ok(())
}

/// Exact class counts over several label grids.
pub fn compute_class_stats<'a>(labels: impl IntoIterator<Item = &'a [u8]>, num_classes: usize) -> Result<ClassStats> {
    let mut counts = vec![0u64; num_classes];
    for grid in labels {
        count_into(&mut counts, grid)?;
    }
    ClassStats::from_counts(counts)
}

/// Anchor pixels of one raster, as (row, col), sorted and unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    pub raster: usize,
    pub anchors: Vec<(usize, usize)>,
}

/// One anchor draw: (raster index, row, col).
pub type AnchorDraw = (usize, usize, usize);

/// Draws `count` pixels with replacement, each non-ignore pixel weighted by
/// `1 / f` of its class.
///
/// The draw is two-stage: a class with probability proportional to
/// `n_k / f_k` (its total weight in these rasters), then a uniform pixel of
/// that class. This is the same distribution as the per-pixel weighting.
pub fn draw_anchor_pixels(rasters: &[Raster], stats: &ClassStats, count: usize, seed: u64) -> Result<Vec<AnchorDraw>> {
    if count == 0 {
        bail!(Argument, "anchor count must be at least 1");
    }
    let k = stats.num_classes();
    let mut members: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k];
    for (ri, r) in rasters.iter().enumerate() {
        for (p, &l) in r.labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let Some(list) = members.get_mut(l as usize) else {
                bail!(Data, "label {l} outside 0..{k}");
            };
            if !(stats.frequencies[l as usize] > 0.0) {
                bail!(Internal, "class {l} occurs in raster {ri} but has zero frequency in the statistics");
            }
            list.push((ri as u32, p as u32));
        }
    }
    let mass: Vec<f64> = members
        .iter()
        .zip(&stats.frequencies)
        .map(|(m, &f)| if m.is_empty() { 0.0 } else { m.len() as f64 / f })
        .collect();
    let classes = WeightedIndex::new(&mass)
        .map_err(|_| crate::Error::EmptyInput(String::from("no labelled pixels to sample anchors from")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(count);
    for _ in 0..count {
        let c = classes.sample(&mut rng);
        let (ri, p) = members[c][rng.random_range(0..members[c].len())];
        let w = rasters[ri as usize].width;
        draws.push((ri as usize, p as usize / w, p as usize % w));
    }
    Ok(draws)
}

/// Inverse-frequency anchors, drawn with replacement then de-duplicated.
/// Returns one set per raster (possibly empty), in raster order.
pub fn sample_anchors(rasters: &[Raster], stats: &ClassStats, count: usize, seed: u64) -> Result<Vec<AnchorSet>> {
    let draws = draw_anchor_pixels(rasters, stats, count, seed)?;
    let mut sets: Vec<AnchorSet> = (0..rasters.len()).map(|raster| AnchorSet { raster, anchors: Vec::new() }).collect();
    for (ri, r, c) in draws {
        sets[ri].anchors.push((r, c));
    }
    for s in &mut sets {
        s.anchors.sort_unstable();
        s.anchors.dedup();
    }
    Ok(sets)
}

/// Where a patch was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchOrigin {
    pub raster: usize,
    pub row: usize,
    pub col: usize,
}

/// Square image patch with its aligned labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub size: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub origin: PatchOrigin,
    pub tag: String,
}

impl PatchPair {
    pub fn new(size: usize, image: Vec<f32>, labels: Vec<u8>, origin: PatchOrigin, tag: String) -> Result<Self> {
        if image.len() != size * size || labels.len() != size * size {
            bail!(Data, "a {size}×{size} patch needs {} pixels", size * size);
        }
        Ok(Self { size, image, labels, origin, tag })
    }
}

/// Cuts the non-overlapping `patch`×`patch` grid (ragged margins dropped)
/// and keeps the tiles holding at least one anchor, in row-major tile order.
pub fn extract_patches(raster: &Raster, anchors: &AnchorSet, patch: usize) -> Result<Vec<PatchPair>> {
    if patch == 0 {
        bail!(Argument, "patch size must be positive");
    }
    if raster.height < patch || raster.width < patch {
        bail!(Argument, "raster {}×{} is smaller than the {patch}px patch", raster.height, raster.width);
    }
    let (ty, tx) = (raster.height / patch, raster.width / patch);
    let mut keep = vec![false; ty * tx];
    for &(r, c) in &anchors.anchors {
        if r >= raster.height || c >= raster.width {
            bail!(Argument, "anchor ({r}, {c}) outside the {}×{} raster", raster.height, raster.width);
        }
        let (i, j) = (r / patch, c / patch);
        if i < ty && j < tx {
            keep[i * tx + j] = true;
        }
    }
    let mut out = Vec::new();
    for i in 0..ty {
        for j in 0..tx {
            if !keep[i * tx + j] {
                continue;
            }
            let (r0, c0) = (i * patch, j * patch);
            let mut image = Vec::with_capacity(patch * patch);
            let mut labels = Vec::with_capacity(patch * patch);
            for r in r0..r0 + patch {
                let row = r * raster.width + c0;
                image.extend_from_slice(&raster.amplitude[row..row + patch]);
                labels.extend_from_slice(&raster.labels[row..row + patch]);
            }
            out.push(PatchPair {
                size: patch,
                image,
                labels,
                origin: PatchOrigin { raster: anchors.raster, row: r0, col: c0 },
                tag: raster.tag.clone(),
            });
        }
    }
    Ok(out)
}

/// Many-to-one class mapping. Ignore always maps to ignore.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RemapTable {
    mapping: BTreeMap<u8, u8>,
    target_classes: usize,
}

impl RemapTable {
    pub fn new(mapping: BTreeMap<u8, u8>, target_classes: usize) -> Result<Self> {
        if target_classes == 0 || target_classes >= IGNORE as usize {
            bail!(Config, "target class count {target_classes} out of range");
        }
        for (&s, &t) in &mapping {
            if s == IGNORE {
                bail!(Config, "the ignore label cannot be remapped");
            }
            if t as usize >= target_classes {
                bail!(Config, "class {s} maps to {t}, outside 0..{target_classes}");
            }
        }
        Ok(Self { mapping, target_classes })
    }

    pub fn identity(k: usize) -> Result<Self> {
        Self::new((0..k).map(|c| (c as u8, c as u8)).collect(), k)
    }

    /// Merges the five forest classes into one and paddy into cropland
    /// (placeholder source ids as in [`crate::datagen::SOURCE_CLASSES`]).
    pub fn default_14_to_9() -> Self {
        let targets = [0u8, 1, 2, 2, 3, 4, 4, 4, 4, 5, 4, 6, 7, 8];
        let mapping = targets.iter().enumerate().map(|(s, &t)| (s as u8, t)).collect();
        Self { mapping, target_classes: 9 }
    }

    pub fn target_classes(&self) -> usize {
        self.target_classes
    }

    pub fn entries(&self) -> impl Iterator<Item = (u8, u8)> + '_ {
        self.mapping.iter().map(|(&s, &t)| (s, t))
    }

    pub fn map(&self, label: u8) -> Result<u8> {
        if label == IGNORE {
            return Ok(IGNORE);
        }
        match self.mapping.get(&label) {
            Some(&t) => Ok(t),
            None => bail!(Data, "class id {label} has no entry in the remap table"),
        }
    }

    /// Pushes per-class counts through the table.
    pub fn push_forward(&self, counts: &[u64]) -> Result<Vec<u64>> {
        let mut out = vec![0u64; self.target_classes];
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                out[self.map(s as u8)? as usize] += n;
            }
        }
        Ok(out)
    }
}

pub fn remap_labels(patch: &PatchPair, table: &RemapTable) -> Result<PatchPair> {
    let labels = patch.labels.iter().map(|&l| table.map(l)).collect::<Result<Vec<u8>>>()?;
    Ok(PatchPair { labels, ..patch.clone() })
}

#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!(Config, "unknown split {other:?}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitSets {
    pub pretrain: Vec<PatchPair>,
    pub train: Vec<PatchPair>,
    pub val: Vec<PatchPair>,
    pub test: Vec<PatchPair>,
}

impl SplitSets {
    pub fn get(&self, s: Split) -> &[PatchPair] {
        match s {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, s: Split) -> &mut Vec<PatchPair> {
        match s {
            Split::Pretrain => &mut self.pretrain,
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Routes every patch to the split its tag maps to. Checks all tags first so
/// an unknown tag leaves nothing half-assigned.
pub fn split_by_tag(patches: Vec<PatchPair>, split_spec: &BTreeMap<String, Split>) -> Result<SplitSets> {
    if let Some(p) = patches.iter().find(|p| !split_spec.contains_key(&p.tag)) {
        bail!(Config, "tag {:?} has no split assignment", p.tag);
    }
    let mut out = SplitSets::default();
    for p in patches {
        let s = split_spec[&p.tag];
        out.get_mut(s).push(p);
    }
    Ok(out)
}

/// Global scalar amplitude statistics (population std).
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            bail!(Data, "normalization std must be positive and finite, got {std}");
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: f32) -> f32 {
        ((x as f64 - self.mean) / self.std) as f32
    }

    pub fn denormalize(&self, x: f32) -> f32 {
        (x as f64 * self.std + self.mean) as f32
    }
}

pub fn compute_norm_stats_of<'a>(images: impl IntoIterator<Item = &'a [f32]> + Clone) -> Result<NormStats> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for img in images.clone() {
        n += img.len();
        sum += img.iter().map(|&v| v as f64).sum::<f64>();
    }
    if n == 0 {
        bail!(EmptyInput, "no pixels for normalization statistics");
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for img in images {
        ss += img.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>();
    }
    let std = libm::sqrt(ss / n as f64);
    if !(std > 0.0) {
        bail!(Data, "amplitudes have zero spread; std is 0");
    }
    NormStats::new(mean, std)
}

/// Statistics over the amplitudes of the given (training) patches.
pub fn compute_norm_stats(train: &[PatchPair]) -> Result<NormStats> {
    compute_norm_stats_of(train.iter().map(|p| p.image.as_slice()))
}

pub fn normalize(patch: &PatchPair, stats: &NormStats) -> Vec<f32> {
    patch.image.iter().map(|&v| stats.normalize(v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(h: usize, w: usize, labels: Vec<u8>) -> Raster {
        Raster::new(h, w, vec![1.0; h * w], labels, String::from("t")).unwrap()
    }

    #[test]
    fn stats_hand_count() {
        let s = compute_class_stats([&[0u8, 0, 1, IGNORE][..]], 2).unwrap();
        assert_eq!(s.counts, vec![2, 1]);
        assert_eq!(s.frequencies, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert!(matches!(compute_class_stats([&[IGNORE; 4][..]], 2), Err(crate::Error::EmptyInput(_))));
        assert!(matches!(compute_class_stats([&[3u8][..]], 2), Err(crate::Error::Data(_))));
    }

    #[test]
    fn zero_frequency_class_is_inconsistent() {
        let r = raster(1, 2, vec![0, 1]);
        let stats = ClassStats { counts: vec![1, 0], frequencies: vec![1.0, 0.0] };
        assert!(matches!(draw_anchor_pixels(&[r], &stats, 5, 0), Err(crate::Error::Internal(_))));
    }

    #[test]
    fn extract_grid_membership() {
        let r = raster(512, 512, vec![0; 512 * 512]);
        let a = AnchorSet { raster: 3, anchors: vec![(10, 20), (255, 255)] };
        let p = extract_patches(&r, &a, 256).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].origin, PatchOrigin { raster: 3, row: 0, col: 0 });
        let all = AnchorSet { raster: 0, anchors: vec![(0, 0), (0, 300), (300, 0), (511, 511)] };
        assert_eq!(extract_patches(&r, &all, 256).unwrap().len(), 4);
        let r = raster(300, 300, vec![0; 300 * 300]);
        let a = AnchorSet { raster: 0, anchors: vec![(0, 0), (299, 299), (280, 10)] };
        assert_eq!(extract_patches(&r, &a, 256).unwrap().len(), 1);
    }

    #[test]
    fn remap_rejects_unknown() {
        let t = RemapTable::identity(2).unwrap();
        let p =
            PatchPair::new(1, vec![0.0], vec![5], PatchOrigin { raster: 0, row: 0, col: 0 }, String::new()).unwrap();
        let err = remap_labels(&p, &t).unwrap_err();
        assert!(matches!(&err, crate::Error::Data(m) if m.contains('5')));
    }

    #[test]
    fn norm_stats_population_convention() {
        let s = compute_norm_stats_of([&[0.0f32, 2.0][..]]).unwrap();
        assert_eq!((s.mean, s.std), (1.0, 1.0));
        assert!(matches!(compute_norm_stats_of([&[3.0f32, 3.0][..]]), Err(crate::Error::Data(_))));
    }
}
