//! Synthetic single-channel SAR scenes with known per-pixel labels.
//!
//! A scene is a patchwork of Voronoi cells (sites on a jittered grid), each
//! assigned a class so the class areas match a target distribution, overlaid
//! with thin meandering polylines. Amplitudes follow the L-look intensity
//! speckle model: `amplitude = sqrt(power[class] · G)`, `G ~ Gamma(L, 1/L)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{bail, Result};

/// Label value marking pixels excluded from statistics, losses and metrics.
pub const IGNORE: u8 = 255;

/// Source classes of the default synthetic scenes, ordered like the 14-class
/// land-cover product they imitate.
pub const SOURCE_CLASSES: [&str; 14] = [
    "water",
    "built-up",
    "paddy",
    "cropland",
    "grassland",
    "deciduous-broadleaf",
    "deciduous-needleleaf",
    "evergreen-broadleaf",
    "evergreen-needleleaf",
    "bare",
    "bamboo",
    "solar-panel",
    "wetland",
    "greenhouse",
];

/// Classes after merging the forest types and cropland with paddy.
pub const TARGET_CLASSES: [&str; 9] =
    ["water", "built-up", "cropland", "grassland", "forest", "bare", "solar-panel", "wetland", "greenhouse"];

/// Parameters of one synthetic scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Mean linear backscatter power per class.
    pub class_mean_power: Vec<f64>,
    /// Target area fraction per class; sums to one.
    pub class_target_freq: Vec<f64>,
    pub speckle_looks: u32,
    pub thin_structure_count: usize,
    pub thin_structure_class: u8,
    /// Spacing of the jittered site grid in pixels (mean cell edge).
    pub cell_size: usize,
    pub tag: String,
    pub seed: u64,
}

impl SceneSpec {
    /// Long-tailed 14-class scene. After the default 14→9 merge the forest
    /// class holds ~45% of pixels, cropland ~25%, and solar panels and
    /// greenhouses ~1% each.
    pub fn long_tailed(height: usize, width: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            num_classes: 14,
            class_mean_power: vec![
                0.008, // water
                0.90,  // built-up
                0.060, // paddy
                0.090, // cropland
                0.120, // grassland
                0.200, 0.230, 0.260, 0.290, // forest types
                0.035, // bare
                0.220, // bamboo
                0.450, // solar panel
                0.025, // wetland
                0.650, // greenhouse
            ],
            class_target_freq: vec![0.08, 0.09, 0.12, 0.13, 0.06, 0.10, 0.08, 0.12, 0.10, 0.03, 0.05, 0.01, 0.02, 0.01],
            speckle_looks: 4,
            thin_structure_count: 4,
            thin_structure_class: 0,
            cell_size: 16,
            tag: String::new(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if k < 2 {
            bail!(Argument, "a scene needs at least 2 classes, got {k}");
        }
        if k >= IGNORE as usize {
            bail!(Argument, "at most {} classes fit the label encoding, got {k}", IGNORE);
        }
        if self.height == 0 || self.width == 0 {
            bail!(Argument, "scene has zero area ({}×{})", self.height, self.width);
        }
        if self.class_mean_power.len() != k || self.class_target_freq.len() != k {
            bail!(Argument, "per-class vectors must have {k} entries");
        }
        if self.class_mean_power.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            bail!(Argument, "class mean powers must be positive and finite");
        }
        if self.class_target_freq.iter().any(|&f| !(f >= 0.0)) {
            bail!(Argument, "class frequencies must be non-negative");
        }
        let total: f64 = self.class_target_freq.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            bail!(Argument, "class frequencies sum to {total}, expected 1");
        }
        if self.speckle_looks == 0 {
            bail!(Argument, "speckle looks must be at least 1");
        }
        if self.thin_structure_class as usize >= k {
            bail!(Argument, "thin structure class {} out of range", self.thin_structure_class);
        }
        if self.cell_size == 0 {
            bail!(Argument, "cell size must be positive");
        }
        Ok(())
    }
}

/// Single-channel amplitude image with an aligned label grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub amplitude: Vec<f32>,
    pub labels: Vec<u8>,
    /// Split group (stands in for the acquisition month).
    pub tag: String,
}

impl Raster {
    pub fn new(height: usize, width: usize, amplitude: Vec<f32>, labels: Vec<u8>, tag: String) -> Result<Self> {
        let n = height * width;
        if amplitude.len() != n || labels.len() != n {
            bail!(Data, "raster {height}×{width} needs {n} amplitudes and labels");
        }
        if amplitude.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            bail!(Data, "amplitudes must be finite and non-negative");
        }
        Ok(Self { height, width, amplitude, labels, tag })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct SiteGrid {
    cell: usize,
    gy: usize,
    gx: usize,
    sites: Vec<(f64, f64)>,
}

impl SiteGrid {
    fn new(h: usize, w: usize, cell: usize, rng: &mut ChaCha8Rng) -> Self {
        let gy = h.div_ceil(cell);
        let gx = w.div_ceil(cell);
        let mut sites = Vec::with_capacity(gy * gx);
        for i in 0..gy {
            for j in 0..gx {
                let y0 = (i * cell) as f64;
                let x0 = (j * cell) as f64;
                let hy = (((i + 1) * cell).min(h) - i * cell) as f64;
                let hx = (((j + 1) * cell).min(w) - j * cell) as f64;
                sites.push((y0 + rng.random::<f64>() * hy, x0 + rng.random::<f64>() * hx));
            }
        }
        Self { cell, gy, gx, sites }
    }

    /// Index of the nearest site. One site per grid cell bounds the search to
    /// the 5×5 neighbourhood of grid cells.
    fn nearest(&self, y: usize, x: usize) -> usize {
        let (ci, cj) = (y / self.cell, x / self.cell);
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut best = (f64::INFINITY, 0);
        for i in ci.saturating_sub(2)..(ci + 3).min(self.gy) {
            for j in cj.saturating_sub(2)..(cj + 3).min(self.gx) {
                let idx = i * self.gx + j;
                let (sy, sx) = self.sites[idx];
                let d = (sy - py) * (sy - py) + (sx - px) * (sx - px);
                if d < best.0 {
                    best = (d, idx);
                }
            }
        }
        best.1
    }
}

/// Assigns cells to classes so class areas track `target` pixel counts
/// (rarest first; the most frequent class takes the remainder).
fn assign_cells(areas: &[usize], target: &[f64], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut order: Vec<usize> = (0..areas.len()).collect();
    order.shuffle(rng);
    let mut classes: Vec<usize> = (0..target.len()).collect();
    classes.sort_by(|&a, &b| target[a].partial_cmp(&target[b]).unwrap().then(a.cmp(&b)));
    let mut assignment = vec![u8::MAX; areas.len()];
    let mut free: Vec<usize> = order;
    let last = *classes.last().unwrap();
    for &k in &classes[..classes.len() - 1] {
        let want = target[k];
        if want <= 0.0 {
            continue;
        }
        let mut got = 0.0;
        let mut remaining = Vec::with_capacity(free.len());
        for &c in &free {
            let a = areas[c] as f64;
            if got < want && (got + a - want).abs() <= (got - want).abs() {
                assignment[c] = k as u8;
                got += a;
            } else {
                remaining.push(c);
            }
        }
        free = remaining;
    }
    for c in free {
        assignment[c] = last as u8;
    }
    assignment
}

/// Draws one meandering polyline; returns its pixel indices (deduplicated).
fn thin_polyline(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let width = rng.random_range(1..=3usize);
    let mut y = rng.random::<f64>() * h as f64;
    let mut x = rng.random::<f64>() * w as f64;
    let heading0 = rng.random::<f64>() * core::f64::consts::TAU;
    let mut heading = heading0;
    let short = h.min(w) as f64;
    let length = rng.random_range(0.5 * short..1.5 * short) as usize;
    let mut pixels = Vec::new();
    let off = (width as isize - 1) / 2;
    for _ in 0..length {
        let (cy, cx) = (libm::floor(y) as isize, libm::floor(x) as isize);
        for dy in 0..width as isize {
            for dx in 0..width as isize {
                let (py, px) = (cy + dy - off, cx + dx - off);
                if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                    pixels.push(py as usize * w + px as usize);
                }
            }
        }
        heading += rng.random_range(-0.15..0.15) + 0.1 * (heading0 - heading);
        y += libm::sin(heading);
        x += libm::cos(heading);
        if y < 0.0 || x < 0.0 || y >= h as f64 || x >= w as f64 {
            break;
        }
    }
    pixels.sort_unstable();
    pixels.dedup();
    pixels
}

fn touches(mask: &[bool], pixels: &[usize], h: usize, w: usize) -> bool {
    pixels.iter().any(|&p| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (ny, nx) = (y + dy, x + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && mask[ny as usize * w + nx as usize]
            })
        })
    })
}

/// Generates one scene; deterministic given `spec` (including its seed).
pub fn generate_scene(spec: &SceneSpec) -> Result<Raster> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let grid = SiteGrid::new(h, w, spec.cell_size, &mut rng);
    let mut owner = vec![0usize; h * w];
    let mut areas = vec![0usize; grid.sites.len()];
    for y in 0..h {
        for x in 0..w {
            let s = grid.nearest(y, x);
            owner[y * w + x] = s;
            areas[s] += 1;
        }
    }

    let mut thin = vec![false; h * w];
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < spec.thin_structure_count && attempts < 64 * spec.thin_structure_count.max(1) {
        attempts += 1;
        let line = thin_polyline(h, w, &mut rng);
        if line.len() < 8 || touches(&thin, &line, h, w) {
            continue;
        }
        for &p in &line {
            thin[p] = true;
        }
        drawn += 1;
    }

    // Thin pixels count towards their class, so cells only make up the rest.
    let mut thin_count = 0usize;
    for (p, &t) in thin.iter().enumerate() {
        if t {
            areas[owner[p]] -= 1;
            thin_count += 1;
        }
    }
    let mut target: Vec<f64> = spec.class_target_freq.iter().map(|f| f * (h * w) as f64).collect();
    target[spec.thin_structure_class as usize] -= thin_count as f64;
    let cell_class = assign_cells(&areas, &target, &mut rng);
    let labels: Vec<u8> =
        owner.iter().zip(&thin).map(|(&s, &t)| if t { spec.thin_structure_class } else { cell_class[s] }).collect();

    let looks = spec.speckle_looks as f64;
    let gamma = Gamma::new(looks, 1.0 / looks).map_err(|e| crate::Error::Argument(alloc::format!("{e}")))?;
    let amplitude = labels
        .iter()
        .map(|&c| {
            let g: f64 = gamma.sample(&mut rng);
            libm::sqrt(spec.class_mean_power[c as usize] * g) as f32
        })
        .collect();
    Ok(Raster { height: h, width: w, amplitude, labels, tag: spec.tag.clone() })
}

/// Binary water mask: 1 where the label is `water_class`, 0 elsewhere, ignore
/// kept.
pub fn derive_water_mask(r: &Raster, water_class: u8) -> Raster {
    let labels = r
        .labels
        .iter()
        .map(|&l| match l {
            IGNORE => IGNORE,
            l if l == water_class => 1,
            _ => 0,
        })
        .collect();
    Raster { labels, ..r.clone() }
}
