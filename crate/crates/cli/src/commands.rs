//! The subcommands, as library functions over a resolved [`RunConfig`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use minmaxcam::cam::LocalizationMap;
use minmaxcam::evaluate::{
    background_proportions, classification_accuracy, evaluate, feature_pairs, gt_boxes, gt_maps, score_maps,
};
use minmaxcam::gradsuite;
use minmaxcam::minmax::{log_csv, train};
use minmaxcam::nets::Model;
use minmaxcam::synthbench::{generate_dataset, Dataset};
use minmaxcam::wsoleval::{feature_dispersion, max_box_acc, EvalResult};

use crate::config::{sha256_file, RunConfig};
use crate::report::{ensure_dir, write_csv, write_curves, write_json, EvalReport, Stamp};

pub const CHECKPOINT_FILE: &str = "model.mmc";
pub const REPORT_FILE: &str = "report.json";
pub const CURVES_FILE: &str = "curves.csv";

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dir = cfg.required_path("data.dir", "--data")?;
    Ok(Dataset::load(&dir)?)
}

fn load_model(cfg: &RunConfig) -> Result<(Model, PathBuf)> {
    let path = cfg.required_path("checkpoint", "--checkpoint")?;
    let model = Model::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok((model, path))
}

fn check_classes(model: &Model, ds: &Dataset) -> Result<()> {
    if model.classes != ds.num_classes {
        bail!(
            "config error: checkpoint has {} classes but the dataset has {}",
            model.classes,
            ds.num_classes
        );
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.required_path("data.dir", "--data")?;
    let rows = generate_dataset(&cfg.synth()?, &dir)?;
    cfg.write_resolved(&cfg.out_dir())?;
    println!("wrote {} images to {}", rows.len(), dir.display());
    Ok(dir)
}

/// Trains and writes the checkpoint, the per-batch log and the resolved config under `out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    let tc = cfg.train()?;
    let ds = load_dataset(cfg)?;
    let out = ensure_dir(&cfg.out_dir())?;
    cfg.write_resolved(&out)?;
    let (model, log) = train(&tc, &ds)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    model.save(&ckpt)?;
    std::fs::write(out.join("train_log.csv"), log_csv(&log)).context("writing training log")?;
    println!("checkpoint {} ({})", ckpt.display(), sha256_file(&ckpt)?);
    Ok(ckpt)
}

/// Maps read from a directory of `<image_id>_<class>.pgm` files, in split order.
pub fn maps_from_dir(dir: &Path, ds: &Dataset, indices: &[usize]) -> Result<Vec<LocalizationMap>> {
    let mut by_id = std::collections::HashMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            let map = LocalizationMap::load_pgm(&path)?;
            by_id.insert(map.image_id.clone(), map);
        }
    }
    indices
        .iter()
        .map(|&i| {
            let rec = &ds.records[i];
            let map = by_id
                .remove(&rec.image_id)
                .with_context(|| format!("no heatmap for {} in {}", rec.image_id, dir.display()))?;
            if map.resolution() != (ds.height, ds.width) {
                bail!("heatmap for {} is {:?}, expected {}×{}", rec.image_id, map.resolution(), ds.height, ds.width);
            }
            Ok(map)
        })
        .collect()
}

fn report_for(cfg: &RunConfig, ds: &Dataset, result: &EvalResult, ckpt: Option<&Path>) -> Result<EvalReport> {
    let boxes = result.boxes.as_ref().context("evaluation produced no box metrics")?;
    let stamp = Stamp::new(cfg, ckpt.map(sha256_file).transpose()?)?;
    let split = cfg.split()?;
    Ok(EvalReport::new(
        stamp,
        split.to_string(),
        ds.split(split).len(),
        boxes,
        result.pxap.context("evaluation produced no PxAP")?,
    ))
}

fn write_eval(out: &Path, report: &EvalReport, result: &EvalResult) -> Result<()> {
    write_json(&out.join(REPORT_FILE), report)?;
    write_curves(&out.join(CURVES_FILE), result.boxes.as_ref().expect("checked by report_for"))
}

/// Scores a checkpoint, or the heatmaps under `maps.dir` when set.
pub fn cmd_eval(cfg: &RunConfig, dump_maps: bool) -> Result<EvalReport> {
    let ds = load_dataset(cfg)?;
    let opts = cfg.eval()?;
    let split = cfg.split()?;
    let indices = ds.split(split);
    let out = ensure_dir(&cfg.out_dir())?;
    cfg.write_resolved(&out)?;
    let (result, report, maps) = if cfg.raw("maps.dir").is_empty() {
        let (model, ckpt) = load_model(cfg)?;
        check_classes(&model, &ds)?;
        let (result, maps) = evaluate(&model, &ds, split, &opts)?;
        let mut report = report_for(cfg, &ds, &result, Some(&ckpt))?;
        report.classification_accuracy = Some(classification_accuracy(&model, &ds, split)?);
        (result, report, maps)
    } else {
        let maps = maps_from_dir(Path::new(cfg.raw("maps.dir")), &ds, &indices)?;
        let result = score_maps(&maps, &ds, &indices, &opts)?;
        let report = report_for(cfg, &ds, &result, None)?;
        (result, report, maps)
    };
    write_eval(&out, &report, &result)?;
    if dump_maps {
        let dir = ensure_dir(&out.join("maps"))?;
        for m in &maps {
            m.save_pgm(&dir)?;
        }
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(report)
}

/// Writes ground-truth-class heatmaps of the configured split as 16-bit PGM files.
pub fn cmd_dump_cam(cfg: &RunConfig) -> Result<PathBuf> {
    let ds = load_dataset(cfg)?;
    let (model, _) = load_model(cfg)?;
    check_classes(&model, &ds)?;
    let indices = ds.split(cfg.split()?);
    let maps = gt_maps(&model, &ds, &indices, &cfg.cam()?)?;
    let dir = ensure_dir(&cfg.out_dir().join("maps"))?;
    for m in &maps {
        m.save_pgm(&dir)?;
    }
    println!("wrote {} heatmaps to {}", maps.len(), dir.display());
    Ok(dir)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct DispersionReport {
    pub stamp: Stamp,
    pub split: String,
    pub mask_variant: String,
    /// Masked-image features `f`.
    pub masked: Spread,
    /// Original-image features `f°`.
    pub original: Spread,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct BgReport {
    pub stamp: Stamp,
    pub split: String,
    pub tau: f64,
    pub images: usize,
    pub images_without_box: usize,
    pub mean: f64,
    pub fraction_above_0_1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Dispersion,
    BgProportion,
}

pub fn dispersion(cfg: &RunConfig, model: &Model, ds: &Dataset, ckpt: Option<&Path>) -> Result<DispersionReport> {
    let split = cfg.split()?;
    let indices = ds.split(split);
    let variant = cfg.train()?.mask_variant;
    let (f, f0) = feature_pairs(model, ds, &indices, &cfg.cam()?, variant)?;
    let labels = ds.labels(&indices);
    let (m, s) = feature_dispersion(&f, &labels)?;
    let (m0, s0) = feature_dispersion(&f0, &labels)?;
    Ok(DispersionReport {
        stamp: Stamp::new(cfg, ckpt.map(sha256_file).transpose()?)?,
        split: split.to_string(),
        mask_variant: variant.to_string(),
        masked: Spread { mean: m, std: s },
        original: Spread { mean: m0, std: s0 },
    })
}

pub fn cmd_analyze(cfg: &RunConfig, analysis: Analysis) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let (model, ckpt) = load_model(cfg)?;
    check_classes(&model, &ds)?;
    let out = ensure_dir(&cfg.out_dir())?;
    cfg.write_resolved(&out)?;
    match analysis {
        Analysis::Dispersion => {
            let r = dispersion(cfg, &model, &ds, Some(&ckpt))?;
            write_json(&out.join("dispersion.json"), &r)?;
            println!("{}", serde_json::to_string(&r)?);
        }
        Analysis::BgProportion => {
            let opts = cfg.eval()?;
            let split = cfg.split()?;
            let indices = ds.split(split);
            let maps = gt_maps(&model, &ds, &indices, &opts.cam)?;
            // operate at the dataset-optimal threshold for δ = 0.5
            let acc = max_box_acc(&maps, &gt_boxes(&ds, &indices), &[0.5], &opts.grid, &opts.boxes)?;
            let tau = acc.best_tau[0];
            let props = background_proportions(&maps, &ds, &indices, tau, &opts.boxes)?;
            let rows: Vec<Vec<String>> = indices
                .iter()
                .zip(&props)
                .map(|(&i, p)| vec![ds.records[i].image_id.clone(), p.map_or(String::new(), |v| v.to_string())])
                .collect();
            write_csv(&out.join("bg_proportion.csv"), &["image_id", "bg_proportion"], &rows)?;
            let vals: Vec<f64> = props.iter().flatten().copied().collect();
            let n = vals.len().max(1) as f64;
            let r = BgReport {
                stamp: Stamp::new(cfg, Some(sha256_file(&ckpt)?))?,
                split: split.to_string(),
                tau,
                images: indices.len(),
                images_without_box: props.len() - vals.len(),
                mean: vals.iter().sum::<f64>() / n,
                fraction_above_0_1: vals.iter().filter(|&&v| v > 0.1).count() as f64 / n,
            };
            write_json(&out.join("bg_proportion.json"), &r)?;
            println!("{}", serde_json::to_string(&r)?);
        }
    }
    Ok(())
}

/// Runs the finite-difference suite; fails if any case exceeds `tol`.
pub fn cmd_check_grad(seeds: &[u64], tol: f64) -> Result<Vec<gradsuite::CaseResult>> {
    let results = gradsuite::run(seeds)?;
    let mut worst = 0.0f64;
    for r in &results {
        worst = worst.max(r.max_rel_error());
        let flag = if r.max_rel_error() <= tol { "ok" } else { "FAIL" };
        println!("{:<24} max rel error {:.3e} over {} seeds  {flag}", r.name, r.max_rel_error(), r.seeds.len());
    }
    if worst > tol {
        bail!("gradient check failed: worst relative error {worst:.3e} > {tol:.1e}");
    }
    Ok(results)
}
