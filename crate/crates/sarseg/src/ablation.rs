//! The refinement ablation: pretrained or scratch encoder crossed with the
//! decoder and loss refinements, five rows.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sarseg_core::model::AblationFlags;
use sarseg_core::sampling::Split;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunSpec, Task};
use crate::error::{Error, Result};
use crate::format::{write_json, Dataset};
use crate::pretraining::pretrain;
use crate::train::{evaluate_checkpoint, train};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub pretraining: bool,
    pub flags: AblationFlags,
}

const fn row(pretraining: bool, high_res_injection: bool, refine_up: bool, alpha_scale_enabled: bool) -> AblationRow {
    AblationRow { pretraining, flags: AblationFlags { high_res_injection, refine_up, alpha_scale_enabled } }
}

/// Rows in table order: the pretrained baseline, refinements added one at a
/// time, the scratch model with every refinement, and the full model.
pub const TABLE_ROWS: [AblationRow; 5] = [
    row(true, false, false, false),
    row(true, true, false, false),
    row(true, true, true, false),
    row(false, true, true, true),
    row(true, true, true, true),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    /// Finetuning settings shared by every row; flags are set per row.
    pub finetune: RunSpec,
    /// Pretraining settings; its seed is replaced per run.
    pub pretrain: RunSpec,
    pub seeds: Vec<u64>,
    /// Indices into [`TABLE_ROWS`].
    pub rows: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub row: usize,
    pub spec: AblationRow,
    pub runs: Vec<SeedResult>,
    pub median_miou: Option<f64>,
    pub median_macc: Option<f64>,
}

/// Median of the defined values.
pub fn median(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Runs every requested row for every seed. Pretraining happens once per
/// seed and is shared by the pretrained rows. Metrics of a run are those of
/// its best checkpoint re-evaluated on the validation split. Writes
/// `ablation.csv` and `ablation.json` under `out`.
pub fn ablation_matrix(ds: &Dataset, spec: &AblationSpec, out: &Path) -> Result<Vec<RowResult>> {
    if spec.finetune.task != Task::Lulc || spec.pretrain.task != Task::Pretrain {
        return Err(Error::Config("the ablation finetunes the lulc task after pretraining".into()));
    }
    if spec.seeds.is_empty() {
        return Err(Error::Config("the ablation needs at least one seed".into()));
    }
    if let Some(&r) = spec.rows.iter().find(|&&r| r >= TABLE_ROWS.len()) {
        return Err(Error::Config(format!("ablation row {} does not exist", r + 1)));
    }
    let mut results: Vec<RowResult> = spec
        .rows
        .iter()
        .map(|&r| RowResult { row: r, spec: TABLE_ROWS[r], runs: Vec::new(), median_miou: None, median_macc: None })
        .collect();
    for &seed in &spec.seeds {
        let sdir = out.join(format!("seed{seed}"));
        let encoder = if spec.rows.iter().any(|&r| TABLE_ROWS[r].pretraining) {
            let mut p = spec.pretrain.clone();
            p.seed = seed;
            let pdir = sdir.join("pretrain");
            pretrain(&p, ds, &pdir)?;
            Some(pdir.join("encoder"))
        } else {
            None
        };
        for res in &mut results {
            let mut f = spec.finetune.clone();
            f.seed = seed;
            f.flags = res.spec.flags;
            f.pretrained = if res.spec.pretraining { encoder.clone() } else { None };
            f.resume = None;
            let rdir = sdir.join(format!("row{}", res.row + 1));
            let summary = train(&f, ds, &rdir)?;
            let best = Checkpoint::load(&rdir.join("best"))?;
            let report = evaluate_checkpoint(&best, ds, Split::Val, &f)?;
            let (miou, macc) = match report {
                crate::report::MetricsReport::Lulc { metrics, .. } => (metrics.miou, metrics.macc),
                _ => (None, None),
            };
            res.runs.push(SeedResult { seed, miou, macc, best_epoch: summary.best_epoch });
        }
    }
    for res in &mut results {
        res.median_miou = median(res.runs.iter().map(|r| r.miou));
        res.median_macc = median(res.runs.iter().map(|r| r.macc));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_json(&out.join("ablation.json"), &results)?;
    let cpath = out.join("ablation.csv");
    fs::write(&cpath, to_csv(&results)).map_err(Error::io(&cpath))?;
    Ok(results)
}

/// Flag columns, then median mIoU and mAcc in percent.
pub fn to_csv(rows: &[RowResult]) -> String {
    let b = |x: bool| if x { "yes" } else { "no" };
    let pct = |v: Option<f64>| v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_default();
    let mut s = String::from("pretraining,high_res_feat,refine_up,alpha_scale,miou,macc\n");
    for r in rows {
        let f = r.spec.flags;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            b(r.spec.pretraining),
            b(f.high_res_injection),
            b(f.refine_up),
            b(f.alpha_scale_enabled),
            pct(r.median_miou),
            pct(r.median_macc)
        );
    }
    s
}
