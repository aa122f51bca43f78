//! Acceptance suite: one PASS/FAIL line per criterion. Failures are reported, not fatal,
//! unless `MMC_ACCEPT_STRICT=1`, which makes any FAIL exit nonzero.
//!
//! Criteria 5 to 9 share one set of benchmark runs (5 configurations × 3 seeds at full size),
//! which dominates the runtime. `MMC_THREADS` caps the worker threads used for them.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{ensure, Context, Result};

use minmaxcam::evaluate::{evaluate, feature_pairs, EvalOptions};
use minmaxcam::gradsuite;
use minmaxcam::minmax::{sample_set_batch, stage2_step, train, StageTwoConfig, StageTwoState, TrainConfig};
use minmaxcam::nets::{BackboneSpec, Model};
use minmaxcam::synthbench::{generate_dataset, Dataset, Split, SynthConfig};
use minmaxcam::wsoleval::feature_dispersion;
use mmc_cli::ablate::{run_parallel, worker_count};
use mmc_cli::commands::gen_data;
use mmc_cli::config::{Provenance, RunConfig};
use rand::SeedableRng;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Line {
    pass: bool,
    detail: String,
}

fn line(pass: bool, detail: impl Into<String>) -> Result<Line> {
    Ok(Line { pass, detail: detail.into() })
}

fn small_dataset(dir: &Path) -> Result<Dataset> {
    let cfg = SynthConfig {
        num_classes: 4,
        train_per_class: 10,
        val_per_class: 2,
        test_per_class: 5,
        image_size: 32,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir)?;
    Ok(Dataset::load(dir)?)
}

fn small_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        backbone: BackboneSpec::plain(3, &[8, 8], 8, true),
        epochs: 2,
        seed,
        set_size: 2,
        groups: 2,
        stage2: None,
        ..TrainConfig::default()
    }
}

fn gradient_suite() -> Result<Line> {
    let t = Instant::now();
    let results = gradsuite::run(&[0, 1, 2, 3, 4])?;
    let secs = t.elapsed().as_secs_f64();
    let (worst, name) = results
        .iter()
        .map(|r| (r.max_rel_error(), r.name))
        .fold((0.0, ""), |a, b| if b.0 > a.0 { b } else { a });
    let enough = results.iter().all(|r| r.seeds.len() >= 5);
    line(
        worst <= 1e-4 && enough && secs < 60.0,
        format!("{} cases, worst rel error {worst:.2e} ({name}), {secs:.1}s", results.len()),
    )
}

fn frozen_backbone(dir: &Path) -> Result<Line> {
    let t = Instant::now();
    let ds = small_dataset(dir)?;
    let mut model = Model::build(BackboneSpec::plain(3, &[8, 8], 8, true), ds.num_classes, 3)?;
    let before = model.clone();
    let s2 = StageTwoConfig::new(10.0, 10.0);
    let mut state = StageTwoState::new(&model);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let cam = Default::default();
    for _ in 0..100 {
        let batch = sample_set_batch(&ds, Split::Train, 2, 2, &mut rng)?;
        stage2_step(&mut model, &batch, &s2, Default::default(), &cam, 0.01, 0.9, &mut state)?;
    }
    let mut frozen = true;
    let mut head_changed = false;
    for (a, b) in before.params.iter().zip(model.params.iter()) {
        if Model::is_backbone_param(&a.name) {
            frozen &= a.value.bit_eq(&b.value);
        } else if !a.value.bit_eq(&b.value) {
            head_changed = true;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    line(
        frozen && head_changed && secs < 60.0,
        format!("backbone bit-identical: {frozen}, head changed: {head_changed}, {secs:.1}s"),
    )
}

fn metric_oracle() -> Result<Line> {
    let t = Instant::now();
    let worst = (0..20).map(oracle::max_discrepancy).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    line(
        worst <= 1e-9 && secs < 10.0,
        format!("20 instances, max |Δ| {worst:.1e}, {secs:.2}s"),
    )
}

fn baseline_reduction(dir: &Path) -> Result<Line> {
    let ds = small_dataset(dir)?;
    let plain = small_train_config(5);
    let zero = TrainConfig {
        stage2: Some(StageTwoConfig::new(0.0, 0.0)),
        ..plain.clone()
    };
    let (a, _) = train(&plain, &ds)?;
    let (b, _) = train(&zero, &ds)?;
    let same = a.to_checkpoint_bytes() == b.to_checkpoint_bytes();
    line(same, format!("λ=(0,0) checkpoint bit-identical to Stage-I-only: {same}"))
}

/// One benchmark configuration: a name plus config overrides.
struct Variant {
    name: &'static str,
    overrides: &'static [(&'static str, &'static str)],
}

const VARIANTS: [Variant; 5] = [
    Variant {
        name: "baseline",
        overrides: &[("train.stage2", "false")],
    },
    Variant {
        name: "minmax",
        overrides: &[],
    },
    Variant {
        name: "set_size_2",
        overrides: &[("train.set_size", "2"), ("train.groups", "10")],
    },
    Variant {
        name: "feature_mask",
        overrides: &[("train.mask_variant", "feature")],
    },
    Variant {
        name: "intensity_aug",
        overrides: &[("train.intensity_aug", "true")],
    },
];

struct BenchRun {
    acc: f64,
    secs: f64,
    /// Mean per-class distance std of (f, f°), minmax runs only.
    dispersion: Option<(f64, f64)>,
}

fn bench_run(base: &RunConfig, ds: &Dataset, v: &Variant, seed: u64) -> Result<BenchRun> {
    let t = Instant::now();
    let mut cfg = base.clone();
    cfg.set("seed", seed.to_string(), Provenance::Flag)?;
    for (k, val) in v.overrides {
        cfg.set(k, *val, Provenance::Flag)?;
    }
    let tc = cfg.train()?;
    let (model, _) = train(&tc, ds)?;
    let opts = EvalOptions {
        deltas: vec![0.5],
        ..cfg.eval()?
    };
    let (res, _) = evaluate(&model, ds, Split::Test, &opts)?;
    let acc = res.boxes.context("box metrics")?.max_box_acc[0];
    let secs = t.elapsed().as_secs_f64();
    let dispersion = if v.name == "minmax" {
        let indices = ds.split(Split::Test);
        let (f, f0) = feature_pairs(&model, ds, &indices, &opts.cam, tc.mask_variant)?;
        let labels = ds.labels(&indices);
        Some((feature_dispersion(&f, &labels)?.0, feature_dispersion(&f0, &labels)?.0))
    } else {
        None
    };
    Ok(BenchRun { acc, secs, dispersion })
}

/// Results indexed `[variant][seed]`.
fn benchmark(dir: &Path) -> Result<Vec<Vec<BenchRun>>> {
    let mut base = RunConfig::default();
    base.set("data.dir", dir.display().to_string(), Provenance::Flag)?;
    base.set("out", dir.join("out").display().to_string(), Provenance::Flag)?;
    gen_data(&base)?;
    let ds = Dataset::load(dir)?;
    let tasks: Vec<(usize, u64)> = (0..VARIANTS.len()).flat_map(|v| SEEDS.map(|s| (v, s))).collect();
    let workers = worker_count(std::thread::available_parallelism().map_or(1, |n| n.get()));
    let runs = run_parallel(&tasks, workers, |&(v, s)| bench_run(&base, &ds, &VARIANTS[v], s));
    let mut out: Vec<Vec<BenchRun>> = VARIANTS.iter().map(|_| Vec::new()).collect();
    for (&(v, _), r) in tasks.iter().zip(runs) {
        out[v].push(r?);
    }
    Ok(out)
}

fn mean_acc(runs: &[BenchRun]) -> f64 {
    runs.iter().map(|r| r.acc).sum::<f64>() / runs.len() as f64
}

fn accs(runs: &[BenchRun]) -> String {
    let v: Vec<String> = runs.iter().map(|r| format!("{:.3}", r.acc)).collect();
    v.join("/")
}

fn bench_lines(bench: &[Vec<BenchRun>]) -> Vec<Result<Line>> {
    let [base, mm, s2, feat, aug] = [0, 1, 2, 3, 4].map(|i| &bench[i]);
    let (b, m) = (mean_acc(base), mean_acc(mm));
    let secs: f64 = base.iter().chain(mm.iter()).map(|r| r.secs).sum();
    let improvement = line(
        m >= b + 0.03 && secs <= 900.0,
        format!(
            "MaxBoxAcc(0.5) minmax {m:.4} [{}] vs baseline {b:.4} [{}], Δ {:+.1}pp, {secs:.0}s CPU",
            accs(mm),
            accs(base),
            100.0 * (m - b)
        ),
    );
    let set_size = {
        let s = mean_acc(s2);
        line(m >= s, format!("S=5 {m:.4} [{}] vs S=2 {s:.4} [{}]", accs(mm), accs(s2)))
    };
    let dispersion = {
        let pairs: Vec<(f64, f64)> = mm.iter().filter_map(|r| r.dispersion).collect();
        let wins = pairs.iter().filter(|(f, f0)| f < f0).count();
        let shown: Vec<String> = pairs.iter().map(|(f, f0)| format!("{f:.3}<{f0:.3}")).collect();
        line(wins >= 2, format!("{wins}/3 seeds with std(f) < std(f°): {}", shown.join(", ")))
    };
    let variant = {
        let f = mean_acc(feat);
        line(m >= f, format!("input {m:.4} [{}] vs feature {f:.4} [{}]", accs(mm), accs(feat)))
    };
    let intensity = {
        let a = mean_acc(aug);
        line(
            a <= m + 0.005,
            format!("with aug {a:.4} [{}] vs without {m:.4} [{}]", accs(aug), accs(mm)),
        )
    };
    vec![improvement, set_size, dispersion, variant, intensity]
}

fn mmc(args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmc")).args(args).output()?;
    ensure!(
        out.status.success(),
        "mmc {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn determinism(dir: &Path) -> Result<Line> {
    let data = dir.join("data");
    let data = data.to_str().context("utf-8 path")?;
    let small = [
        "--set", "data.classes=4", "--set", "data.train_per_class=10", "--set", "data.val_per_class=2",
        "--set", "data.test_per_class=5", "--set", "data.image_size=32", "--set", "model.widths=8,8",
        "--set", "model.k=8", "--set", "train.epochs=2", "--set", "train.groups=2", "--set", "train.set_size=2",
    ];
    let with = |extra: &[&str]| -> Vec<String> { extra.iter().chain(small.iter()).map(|s| s.to_string()).collect() };
    let run = |v: Vec<String>| mmc(&v.iter().map(String::as_str).collect::<Vec<_>>());
    let out = dir.join("gen");
    run(with(&["gen-data", "--data", data, "--out", out.to_str().context("utf-8 path")?]))?;
    let mut reports = Vec::new();
    for r in ["a", "b"] {
        let t = dir.join(format!("train_{r}"));
        let e = dir.join(format!("eval_{r}"));
        let (t, e) = (t.to_str().context("utf-8 path")?, e.to_str().context("utf-8 path")?);
        run(with(&["train", "--data", data, "--seed", "7", "--out", t]))?;
        let ckpt = format!("{t}/model.mmc");
        run(with(&["eval", "--data", data, "--seed", "7", "--checkpoint", &ckpt, "--out", e]))?;
        reports.push(std::fs::read(Path::new(e).join("report.json"))?);
    }
    let same = reports[0] == reports[1];
    line(same, format!("two train+eval runs, report.json byte-identical: {same}"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let sub = |name: &str| {
        let p = tmp.path().join(name);
        std::fs::create_dir_all(&p).expect("temp subdir");
        p
    };
    let mut lines: Vec<(&str, Result<Line>)> = vec![
        ("gradient suite", gradient_suite()),
        ("frozen backbone", frozen_backbone(&sub("frozen"))),
        ("metric oracle", metric_oracle()),
        ("baseline reduction", baseline_reduction(&sub("reduction"))),
    ];
    let names = ["end-to-end improvement", "set-size trend", "dispersion direction", "mask-variant direction", "intensity-ablation direction"];
    match benchmark(&sub("bench")) {
        Ok(bench) => lines.extend(names.into_iter().zip(bench_lines(&bench))),
        Err(e) => lines.extend(names.map(|n| (n, Err(anyhow::anyhow!("benchmark failed: {e:#}"))))),
    }
    lines.push(("determinism", determinism(&sub("determinism"))));

    let mut failed = 0;
    for (i, (name, r)) in lines.iter().enumerate() {
        let (pass, detail) = match r {
            Ok(l) => (l.pass, l.detail.clone()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
    }
    if failed == 0 {
        return ExitCode::SUCCESS;
    }
    println!("{failed} criteria failed");
    if std::env::var("MMC_ACCEPT_STRICT").is_ok_and(|v| v == "1") {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
