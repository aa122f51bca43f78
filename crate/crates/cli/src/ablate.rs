//! Ablation grids: each cell is a config override, run once per seed.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Result};
use serde::Serialize;

use minmaxcam::evaluate::{evaluate, EvalOptions};
use minmaxcam::minmax::train;
use minmaxcam::synthbench::Dataset;

use crate::config::{Provenance, RunConfig};
use crate::report::{delta_key, ensure_dir, write_csv, write_json, Stamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Study {
    LambdaSweep,
    SetSize,
    Intensity,
    MaskVariant,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::LambdaSweep => "lambda_sweep",
            Study::SetSize => "set_size",
            Study::Intensity => "intensity",
            Study::MaskVariant => "mask_variant",
        }
    }
}

/// One configuration of a study.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Which axis the cell belongs to, e.g. `lambda1`.
    pub axis: String,
    pub value: String,
    pub overrides: Vec<(&'static str, String)>,
}

fn cell(axis: &str, value: impl ToString, overrides: Vec<(&'static str, String)>) -> Cell {
    Cell {
        axis: axis.to_string(),
        value: value.to_string(),
        overrides,
    }
}

/// The cells of `study`; `ablate.values` replaces the default axis values where it applies.
pub fn cells(study: Study, cfg: &RunConfig) -> Result<Vec<Cell>> {
    let values: Vec<String> = cfg.list("ablate.values")?;
    let or = |default: &[&str]| -> Vec<String> {
        if values.is_empty() {
            default.iter().map(|s| s.to_string()).collect()
        } else {
            values.clone()
        }
    };
    let out = match study {
        Study::LambdaSweep => {
            // fix one λ at its configured value and sweep the other
            let vals = or(&["0", "0.25", "0.5", "1", "2", "4"]);
            let mut cells = Vec::new();
            for v in &vals {
                cells.push(cell("lambda1", v, vec![("train.lambda1", v.clone())]));
            }
            for v in &vals {
                cells.push(cell("lambda2", v, vec![("train.lambda2", v.clone())]));
            }
            cells
        }
        Study::SetSize => {
            let batch: usize = cfg.get("ablate.batch")?;
            let mut cells = Vec::new();
            for v in or(&["2", "3", "4", "5"]) {
                let s: usize = v.parse().map_err(|_| anyhow::anyhow!("set size `{v}` is not an integer"))?;
                if s == 0 || s > batch {
                    bail!("set size {s} does not fit a batch of {batch}");
                }
                let groups = ((batch as f64 / s as f64).round() as usize).max(1);
                cells.push(cell(
                    "set_size",
                    s,
                    vec![("train.set_size", s.to_string()), ("train.groups", groups.to_string())],
                ));
            }
            cells
        }
        Study::Intensity => or(&["false", "true"])
            .into_iter()
            .map(|v| cell("intensity_aug", &v, vec![("train.intensity_aug", v.clone())]))
            .collect(),
        Study::MaskVariant => or(&["input", "feature"])
            .into_iter()
            .map(|v| cell("mask_variant", &v, vec![("train.mask_variant", v.clone())]))
            .collect(),
    };
    if out.is_empty() {
        bail!("study {} has no configurations", study.name());
    }
    Ok(out)
}

/// Metrics of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunResult {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub groups: usize,
    pub set_size: usize,
    pub maxboxacc_050: f64,
    pub best_tau_050: f64,
    pub maxboxacc_v2: f64,
    pub pxap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub maxboxacc_050_mean: f64,
    pub maxboxacc_050_std: f64,
    pub maxboxacc_v2_mean: f64,
    pub pxap_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub stamp: Stamp,
    pub study: &'static str,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunResult>,
}

/// Trains and evaluates one (cell, seed) pair on `dataset`.
pub fn run_cell(base: &RunConfig, cell: &Cell, seed: u64, dataset: &Dataset) -> Result<RunResult> {
    let mut cfg = base.clone();
    cfg.set("seed", seed.to_string(), Provenance::Flag)?;
    for (k, v) in &cell.overrides {
        cfg.set(k, v.clone(), Provenance::Flag)?;
    }
    let tc = cfg.train()?;
    let mut opts: EvalOptions = cfg.eval()?;
    if !opts.deltas.iter().any(|d| delta_key(*d) == "0.50") {
        opts.deltas.push(0.5);
    }
    let (model, _) = train(&tc, dataset)?;
    let (res, _) = evaluate(&model, dataset, cfg.split()?, &opts)?;
    let boxes = res.boxes.expect("evaluate always scores boxes");
    let (acc, tau) = boxes.at_delta(0.5).expect("0.5 was added above");
    Ok(RunResult {
        axis: cell.axis.clone(),
        value: cell.value.clone(),
        seed,
        groups: tc.groups,
        set_size: tc.set_size,
        maxboxacc_050: acc,
        best_tau_050: tau,
        maxboxacc_v2: boxes.v2,
        pxap: res.pxap.expect("evaluate always scores pixels"),
    })
}

/// Worker count from `--jobs`, capped by `MMC_THREADS` when set.
pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("MMC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    let jobs = jobs.max(1);
    cap.map_or(jobs, |c| jobs.min(c))
}

/// Runs `tasks` on `workers` threads; results come back in task order whatever the schedule.
pub fn run_parallel<T, R, F>(tasks: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("lock not poisoned").expect("every task ran"))
        .collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn summarize(cells: &[Cell], runs: &[RunResult]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|c| {
            let mut mine: Vec<&RunResult> = runs.iter().filter(|r| r.axis == c.axis && r.value == c.value).collect();
            // sums in seed order, whatever order the runs finished in
            mine.sort_by_key(|r| r.seed);
            let acc: Vec<f64> = mine.iter().map(|r| r.maxboxacc_050).collect();
            let (m, s) = mean_std(&acc);
            let v2: Vec<f64> = mine.iter().map(|r| r.maxboxacc_v2).collect();
            let px: Vec<f64> = mine.iter().map(|r| r.pxap).collect();
            CellSummary {
                axis: c.axis.clone(),
                value: c.value.clone(),
                runs: mine.len(),
                maxboxacc_050_mean: m,
                maxboxacc_050_std: s,
                maxboxacc_v2_mean: mean_std(&v2).0,
                pxap_mean: mean_std(&px).0,
            }
        })
        .collect()
}

/// Runs the whole grid and writes `ablation_<study>.json`, `.csv` and the per-run table.
pub fn cmd_ablate(cfg: &RunConfig, study: Study, jobs: usize) -> Result<AblationReport> {
    let dataset = crate::commands::load_dataset(cfg)?;
    let grid = cells(study, cfg)?;
    let seeds: Vec<u64> = cfg.list("ablate.seeds")?;
    if seeds.is_empty() {
        bail!("no seeds given (ablate.seeds)");
    }
    let tasks: Vec<(usize, u64)> = (0..grid.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = run_parallel(&tasks, worker_count(jobs), |&(c, s)| run_cell(cfg, &grid[c], s, &dataset));
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let report = AblationReport {
        stamp: Stamp::new(cfg, None)?,
        study: study.name(),
        cells: summarize(&grid, &runs),
        runs,
    };
    let out = ensure_dir(&cfg.out_dir())?;
    cfg.write_resolved(&out)?;
    write_json(&out.join(format!("ablation_{}.json", study.name())), &report)?;
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.axis.clone(),
                c.value.clone(),
                c.runs.to_string(),
                c.maxboxacc_050_mean.to_string(),
                c.maxboxacc_050_std.to_string(),
                c.maxboxacc_v2_mean.to_string(),
                c.pxap_mean.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join(format!("ablation_{}.csv", study.name())),
        &["axis", "value", "runs", "maxboxacc_050_mean", "maxboxacc_050_std", "maxboxacc_v2_mean", "pxap_mean"],
        &rows,
    )?;
    for c in &report.cells {
        println!(
            "{}={}: MaxBoxAcc(0.5) {:.4} ± {:.4}, V2 {:.4}, PxAP {:.4} ({} runs)",
            c.axis, c.value, c.maxboxacc_050_mean, c.maxboxacc_050_std, c.maxboxacc_v2_mean, c.pxap_mean, c.runs
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_size_grid_keeps_batch_near_fixed() {
        let cfg = RunConfig::default();
        let cells = cells(Study::SetSize, &cfg).unwrap();
        let sizes: Vec<&str> = cells.iter().map(|c| c.value.as_str()).collect();
        assert_eq!(sizes, ["2", "3", "4", "5"]);
        for c in &cells {
            let s: usize = c.value.parse().unwrap();
            let n: usize = c.overrides[1].1.parse().unwrap();
            assert!((n * s).abs_diff(20) <= 1, "S={s} N={n}");
        }
    }

    #[test]
    fn lambda_sweep_has_two_axes() {
        let mut cfg = RunConfig::default();
        cfg.set("ablate.values", "0,1", Provenance::Flag).unwrap();
        let cells = cells(Study::LambdaSweep, &cfg).unwrap();
        let axes: Vec<&str> = cells.iter().map(|c| c.axis.as_str()).collect();
        assert_eq!(axes, ["lambda1", "lambda1", "lambda2", "lambda2"]);
        assert_eq!(cells[3].overrides, vec![("train.lambda2", "1".to_string())]);
    }

    #[test]
    fn oversized_set_rejected() {
        let mut cfg = RunConfig::default();
        cfg.set("ablate.values", "30", Provenance::Flag).unwrap();
        assert!(cells(Study::SetSize, &cfg).is_err());
    }

    #[test]
    fn parallel_results_keep_task_order() {
        let tasks: Vec<u64> = (0..17).collect();
        for workers in [1, 3, 8] {
            let out = run_parallel(&tasks, workers, |&t| t * t);
            assert_eq!(out, tasks.iter().map(|t| t * t).collect::<Vec<_>>());
        }
    }

    #[test]
    fn summary_is_order_independent() {
        let cells = vec![cell("a", "1", vec![]), cell("a", "2", vec![])];
        let run = |v: &str, seed, acc| RunResult {
            axis: "a".into(),
            value: v.into(),
            seed,
            groups: 1,
            set_size: 2,
            maxboxacc_050: acc,
            best_tau_050: 0.3,
            maxboxacc_v2: acc,
            pxap: acc,
        };
        let runs = vec![run("1", 0, 0.5), run("2", 0, 0.7), run("1", 1, 0.7)];
        let mut rev = runs.clone();
        rev.reverse();
        assert_eq!(summarize(&cells, &runs), summarize(&cells, &rev));
        assert!((summarize(&cells, &runs)[0].maxboxacc_050_mean - 0.6).abs() < 1e-12);
    }
}
