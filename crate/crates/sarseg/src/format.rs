//! On-disk raster files and dataset directories.
//!
//! A raster file is `SSEG`, then little-endian u32 version, height and width,
//! then the row-major payload: f32 for `.img`, u8 for `.lbl`.
//!
//! ```text
//! dataset/
//!   manifest.json
//!   remap.json
//!   patches/000000.img
//!   patches/000000.lbl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sarseg_core::datagen::Raster;
use sarseg_core::sampling::{NormStats, PatchOrigin, PatchPair, RemapTable, Split};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SSEG";
pub const RASTER_VERSION: u32 = 1;
pub const DATASET_VERSION: u32 = 1;
const HEADER: usize = 16;

/// Payload element type of a raster file.
trait Sample: Copy {
    const BYTES: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Self;
}

impl Sample for f32 {
    const BYTES: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Sample for u8 {
    const BYTES: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn get(b: &[u8]) -> Self {
        b[0]
    }
}

fn encode<S: Sample>(height: usize, width: usize, data: &[S]) -> Vec<u8> {
    assert_eq!(data.len(), height * width, "raster payload does not match its shape");
    let mut out = Vec::with_capacity(HEADER + data.len() * S::BYTES);
    out.extend_from_slice(MAGIC);
    for v in [RASTER_VERSION, height as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        v.put(&mut out);
    }
    out
}

fn decode<S: Sample>(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<S>)> {
    if bytes.len() < HEADER {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("{} bytes is shorter than the header", bytes.len()),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format { path: path.into(), detail: format!("bad magic {:?}", &bytes[..4]) });
    }
    let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let version = word(4);
    if version != RASTER_VERSION {
        return Err(Error::Version { path: path.into(), found: version, expected: RASTER_VERSION });
    }
    let (h, w) = (word(8) as usize, word(12) as usize);
    let body = &bytes[HEADER..];
    if body.len() != h * w * S::BYTES {
        return Err(Error::Shape {
            path: path.into(),
            detail: format!("{h}×{w} header needs {} payload bytes, found {}", h * w * S::BYTES, body.len()),
        });
    }
    Ok((h, w, body.chunks_exact(S::BYTES).map(S::get).collect()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let f = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(f);
    w.write_all(bytes).and_then(|_| w.flush()).map_err(Error::io(path))
}

pub fn encode_image(height: usize, width: usize, data: &[f32]) -> Vec<u8> {
    encode(height, width, data)
}

pub fn encode_labels(height: usize, width: usize, data: &[u8]) -> Vec<u8> {
    encode(height, width, data)
}

pub fn write_image(path: &Path, height: usize, width: usize, data: &[f32]) -> Result<()> {
    write_bytes(path, &encode(height, width, data))
}

pub fn write_labels(path: &Path, height: usize, width: usize, data: &[u8]) -> Result<()> {
    write_bytes(path, &encode(height, width, data))
}

/// Returns (height, width, values).
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode(path, &fs::read(path).map_err(Error::io(path))?)
}

pub fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode(path, &fs::read(path).map_err(Error::io(path))?)
}

/// Reads `file`, parsing JSON with manifest errors on failure.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::manifest(path, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

/// Remap table file: named source and target classes plus the id mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemapFile {
    pub source_classes: Vec<String>,
    pub target_classes: Vec<String>,
    pub mapping: BTreeMap<u8, u8>,
}

impl RemapFile {
    pub fn default_14_to_9() -> Self {
        use sarseg_core::datagen::{SOURCE_CLASSES, TARGET_CLASSES};
        Self {
            source_classes: SOURCE_CLASSES.iter().map(|s| s.to_string()).collect(),
            target_classes: TARGET_CLASSES.iter().map(|s| s.to_string()).collect(),
            mapping: RemapTable::default_14_to_9().entries().collect(),
        }
    }

    pub fn table(&self) -> Result<RemapTable> {
        Ok(RemapTable::new(self.mapping.clone(), self.target_classes.len())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: Self = read_json(path)?;
        f.table().map_err(|e| Error::manifest(path, e.to_string()))?;
        if let Some(&s) = f.mapping.keys().find(|&&s| s as usize >= f.source_classes.len()) {
            return Err(Error::manifest(path, format!("source id {s} has no class name")));
        }
        Ok(f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PatchEntry {
    file: String,
    tag: String,
    raster: usize,
    row: usize,
    col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    patch_size: usize,
    count: usize,
    classes: Vec<String>,
    tags: Vec<String>,
    splits: BTreeMap<String, Split>,
    norm: NormStats,
    patches: Vec<PatchEntry>,
}

/// A dataset held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub patch_size: usize,
    pub classes: Vec<String>,
    /// Split of every tag.
    pub splits: BTreeMap<String, Split>,
    pub norm: NormStats,
    pub remap: RemapFile,
    pub patches: Vec<PatchPair>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split_of(&self, p: &PatchPair) -> Split {
        self.splits[&p.tag]
    }

    pub fn split(&self, s: Split) -> Vec<&PatchPair> {
        self.patches.iter().filter(|p| self.split_of(p) == s).collect()
    }
}

fn file_stem(i: usize) -> String {
    format!("{i:06}")
}

pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    if let Some(p) = ds.patches.iter().find(|p| !ds.splits.contains_key(&p.tag)) {
        return Err(Error::Config(format!("tag {:?} has no split", p.tag)));
    }
    if let Some(p) = ds.patches.iter().find(|p| p.size != ds.patch_size) {
        return Err(Error::Config(format!("patch of size {} in a {}-pixel dataset", p.size, ds.patch_size)));
    }
    let pdir = dir.join("patches");
    create_dir(&pdir)?;
    let mut entries = Vec::with_capacity(ds.patches.len());
    for (i, p) in ds.patches.iter().enumerate() {
        let stem = file_stem(i);
        write_image(&pdir.join(format!("{stem}.img")), p.size, p.size, &p.image)?;
        write_labels(&pdir.join(format!("{stem}.lbl")), p.size, p.size, &p.labels)?;
        entries.push(PatchEntry {
            file: stem,
            tag: p.tag.clone(),
            raster: p.origin.raster,
            row: p.origin.row,
            col: p.origin.col,
        });
    }
    let tags: BTreeSet<String> = ds.patches.iter().map(|p| p.tag.clone()).collect();
    let manifest = Manifest {
        version: DATASET_VERSION,
        patch_size: ds.patch_size,
        count: ds.patches.len(),
        classes: ds.classes.clone(),
        tags: tags.into_iter().collect(),
        splits: ds.splits.clone(),
        norm: ds.norm,
        patches: entries,
    };
    write_json(&dir.join("remap.json"), &ds.remap)?;
    write_json(&dir.join("manifest.json"), &manifest)
}

fn count_files(dir: &Path, ext: &str) -> Result<usize> {
    let mut n = 0;
    for e in fs::read_dir(dir).map_err(Error::io(dir))? {
        let e = e.map_err(Error::io(dir))?;
        if e.path().extension().is_some_and(|x| x == ext) {
            n += 1;
        }
    }
    Ok(n)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let value: serde_json::Value = read_json(&mpath)?;
    // Check the version before the schema so a newer layout reports as such.
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => return Err(Error::Version { path: mpath, found: v as u32, expected: DATASET_VERSION }),
        None => return Err(Error::manifest(&mpath, "missing version")),
    }
    let m: Manifest = serde_json::from_value(value).map_err(|e| Error::manifest(&mpath, e.to_string()))?;
    let norm = NormStats::new(m.norm.mean, m.norm.std).map_err(|e| Error::manifest(&mpath, e.to_string()))?;
    if m.classes.is_empty() {
        return Err(Error::manifest(&mpath, "no classes"));
    }
    let pdir = dir.join("patches");
    let (imgs, lbls) = (count_files(&pdir, "img")?, count_files(&pdir, "lbl")?);
    if m.count != m.patches.len() || imgs != m.count || lbls != m.count {
        return Err(Error::Integrity {
            path: mpath,
            detail: format!(
                "manifest count {} with {} entries, {imgs} image and {lbls} label files present",
                m.count,
                m.patches.len()
            ),
        });
    }
    let remap = RemapFile::load(&dir.join("remap.json"))?;
    if remap.target_classes != m.classes {
        return Err(Error::manifest(&mpath, "class list differs from the remap targets"));
    }
    let k = m.classes.len();
    let mut patches = Vec::with_capacity(m.count);
    for e in &m.patches {
        if !m.splits.contains_key(&e.tag) {
            return Err(Error::manifest(&mpath, format!("tag {:?} has no split", e.tag)));
        }
        let ipath = pdir.join(format!("{}.img", e.file));
        let lpath = pdir.join(format!("{}.lbl", e.file));
        let (ih, iw, image) = read_image(&ipath)?;
        let (lh, lw, labels) = read_labels(&lpath)?;
        if (ih, iw) != (m.patch_size, m.patch_size) || (lh, lw) != (ih, iw) {
            return Err(Error::Shape {
                path: ipath,
                detail: format!("image {ih}×{iw}, labels {lh}×{lw}, dataset patch size {}", m.patch_size),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= k && l != sarseg_core::datagen::IGNORE) {
            return Err(Error::Integrity { path: lpath, detail: format!("label {l} outside 0..{k}") });
        }
        let origin = PatchOrigin { raster: e.raster, row: e.row, col: e.col };
        patches.push(PatchPair::new(m.patch_size, image, labels, origin, e.tag.clone())?);
    }
    Ok(Dataset { patch_size: m.patch_size, classes: m.classes, splits: m.splits, norm, remap, patches })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneEntry {
    file: String,
    tag: String,
    height: usize,
    width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SceneManifest {
    version: u32,
    classes: Vec<String>,
    scenes: Vec<SceneEntry>,
}

/// Full synthetic scenes before patch extraction, with their class names.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSet {
    pub classes: Vec<String>,
    pub rasters: Vec<Raster>,
}

pub fn write_scenes(dir: &Path, set: &SceneSet) -> Result<()> {
    create_dir(dir)?;
    let mut scenes = Vec::new();
    for (i, r) in set.rasters.iter().enumerate() {
        let stem = file_stem(i);
        write_image(&dir.join(format!("{stem}.img")), r.height, r.width, &r.amplitude)?;
        write_labels(&dir.join(format!("{stem}.lbl")), r.height, r.width, &r.labels)?;
        scenes.push(SceneEntry { file: stem, tag: r.tag.clone(), height: r.height, width: r.width });
    }
    let m = SceneManifest { version: DATASET_VERSION, classes: set.classes.clone(), scenes };
    write_json(&dir.join("scenes.json"), &m)
}

pub fn read_scenes(dir: &Path) -> Result<SceneSet> {
    let mpath = dir.join("scenes.json");
    let m: SceneManifest = read_json(&mpath)?;
    if m.version != DATASET_VERSION {
        return Err(Error::Version { path: mpath, found: m.version, expected: DATASET_VERSION });
    }
    let mut rasters = Vec::with_capacity(m.scenes.len());
    for s in &m.scenes {
        let ipath: PathBuf = dir.join(format!("{}.img", s.file));
        let (h, w, amplitude) = read_image(&ipath)?;
        let (lh, lw, labels) = read_labels(&dir.join(format!("{}.lbl", s.file)))?;
        if (h, w) != (s.height, s.width) || (lh, lw) != (h, w) {
            return Err(Error::Shape {
                path: ipath,
                detail: format!("listed as {}×{}, image {h}×{w}, labels {lh}×{lw}", s.height, s.width),
            });
        }
        rasters.push(Raster::new(h, w, amplitude, labels, s.tag.clone())?);
    }
    Ok(SceneSet { classes: m.classes, rasters })
}
