//! Metric reports as JSON and CSV.

use std::fmt::Write as _;
use std::path::Path;

use sarseg_core::engine::Evaluation;
use sarseg_core::metrics::{MetricReport, WaterCounts, WaterMetrics};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::write_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricsReport {
    Lulc {
        classes: Vec<String>,
        #[serde(flatten)]
        metrics: MetricReport,
        confusion: Vec<Vec<u64>>,
    },
    Water {
        threshold: f64,
        #[serde(flatten)]
        metrics: WaterMetrics,
        counts: WaterCounts,
    },
}

impl MetricsReport {
    pub fn new(eval: &Evaluation, classes: &[String]) -> Self {
        match eval {
            Evaluation::Lulc(cm) => {
                let k = cm.num_classes();
                MetricsReport::Lulc {
                    classes: classes.to_vec(),
                    metrics: cm.report(),
                    confusion: (0..k).map(|g| (0..k).map(|p| cm.get(g, p)).collect()).collect(),
                }
            }
            Evaluation::Water { counts, threshold } => {
                MetricsReport::Water { threshold: *threshold, metrics: counts.metrics(), counts: *counts }
            }
        }
    }

    /// mIoU or water IoU.
    pub fn primary(&self) -> Option<f64> {
        match self {
            MetricsReport::Lulc { metrics, .. } => metrics.miou,
            MetricsReport::Water { metrics, .. } => metrics.iou_water,
        }
    }

    /// One row per class and a summary row; undefined values are empty.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::new();
        match self {
            MetricsReport::Lulc { classes, metrics, .. } => {
                s.push_str("class,iou,acc\n");
                for (i, (iou, acc)) in metrics.iou.iter().zip(&metrics.acc).enumerate() {
                    let name = classes.get(i).cloned().unwrap_or_else(|| i.to_string());
                    let _ = writeln!(s, "{name},{},{}", f(*iou), f(*acc));
                }
                let _ = writeln!(s, "mean,{},{}", f(metrics.miou), f(metrics.macc));
            }
            MetricsReport::Water { metrics, .. } => {
                s.push_str("class,iou,precision,recall\n");
                let _ = writeln!(s, "water,{},{},{}", f(metrics.iou_water), f(metrics.precision), f(metrics.recall));
            }
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, json: &Path) -> Result<()> {
        if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        write_json(json, self)?;
        let csv = json.with_extension("csv");
        std::fs::write(&csv, self.to_csv()).map_err(Error::io(&csv))
    }
}
