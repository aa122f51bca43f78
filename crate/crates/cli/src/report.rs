//! JSON and CSV artifacts. Nothing here records wall time, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use minmaxcam::wsoleval::BoxAccuracy;

use crate::config::RunConfig;

/// Identifies what produced a report.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Stamp {
    pub version: &'static str,
    pub seed: u64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_sha256: Option<String>,
}

impl Stamp {
    pub fn new(cfg: &RunConfig, checkpoint_sha256: Option<String>) -> Result<Stamp> {
        Ok(Stamp {
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.get("seed")?,
            config_hash: cfg.hash(),
            checkpoint_sha256,
        })
    }
}

/// Key for a δ or τ in report maps, e.g. `0.50`.
pub fn delta_key(d: f64) -> String {
    format!("{d:.2}")
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct EvalReport {
    pub stamp: Stamp,
    pub split: String,
    pub images: usize,
    pub grid_points: usize,
    /// MaxBoxAcc per IoU criterion δ.
    pub maxboxacc: BTreeMap<String, f64>,
    /// Threshold attaining each MaxBoxAcc.
    pub best_tau_per_delta: BTreeMap<String, f64>,
    pub maxboxacc_v2: f64,
    pub pxap: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification_accuracy: Option<f64>,
}

impl EvalReport {
    pub fn new(stamp: Stamp, split: String, images: usize, boxes: &BoxAccuracy, pxap: f64) -> EvalReport {
        let keyed = |vals: &[f64]| {
            boxes
                .deltas
                .iter()
                .zip(vals)
                .map(|(&d, &v)| (delta_key(d), v))
                .collect()
        };
        EvalReport {
            stamp,
            split,
            images,
            grid_points: boxes.taus.len(),
            maxboxacc: keyed(&boxes.max_box_acc),
            best_tau_per_delta: keyed(&boxes.best_tau),
            maxboxacc_v2: boxes.v2,
            pxap,
            classification_accuracy: None,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes `header` then `rows` as CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per threshold, one accuracy column per δ.
pub fn write_curves(path: &Path, boxes: &BoxAccuracy) -> Result<()> {
    let header: Vec<String> = std::iter::once("tau".to_string())
        .chain(boxes.deltas.iter().map(|&d| format!("acc_{}", delta_key(d))))
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = boxes
        .taus
        .iter()
        .enumerate()
        .map(|(t, tau)| {
            std::iter::once(tau.to_string())
                .chain(boxes.curves.iter().map(|c| c[t].to_string()))
                .collect()
        })
        .collect();
    write_csv(path, &header, &rows)
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir.to_path_buf())
}
