use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use mmc_cli::ablate::{cmd_ablate, Study};
use mmc_cli::commands::{cmd_analyze, cmd_check_grad, cmd_dump_cam, cmd_eval, cmd_train, gen_data, Analysis};
use mmc_cli::config::{Provenance, RunConfig};

/// MinMaxCAM: CAM training with common/full region regularization, WSOL metrics, synthetic benchmark.
#[derive(Parser, Debug)]
#[command(name = "mmc", version)]
struct Cli {
    /// key=value config file; `#` starts a comment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Default)]
struct DataArg {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct EvalArgs {
    /// Split to score.
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated IoU criteria.
    #[arg(long)]
    deltas: Option<String>,
    /// Number of threshold intervals.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic benchmark.
    GenData {
        #[command(flatten)]
        data: DataArg,
    },
    /// Train a model; writes model.mmc, train_log.csv and config.resolved.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip Stage II entirely (plain CAM training).
        #[arg(long)]
        stage1_only: bool,
    },
    /// Score a checkpoint, or a directory of PGM heatmaps with --maps.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of `<image_id>_<class>.pgm` heatmaps to score instead of a model.
        #[arg(long)]
        maps: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalArgs,
        /// Also write the scored heatmaps under <out>/maps.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Write ground-truth-class heatmaps as 16-bit PGM files.
    DumpCam {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and score a grid of configurations over seeds.
    Ablate {
        #[arg(value_enum)]
        study: Study,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated training seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated axis values replacing the study's defaults.
        #[arg(long)]
        values: Option<String>,
        /// Cells trained concurrently (capped by MMC_THREADS).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Feature dispersion or background proportion of a trained model.
    Analyze {
        #[arg(value_enum)]
        analysis: Analysis,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op and the Stage II loss.
    CheckGrad {
        #[arg(long, default_value = "0,1,2,3,4")]
        seeds: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

struct Flags<'a>(&'a mut RunConfig);

impl Flags<'_> {
    fn put(&mut self, key: &str, v: Option<impl ToString>) -> Result<()> {
        if let Some(v) = v {
            self.0.set(key, v.to_string(), Provenance::Flag)?;
        }
        Ok(())
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> Result<()> {
        self.put(key, v.as_ref().map(|p| p.display().to_string()))
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.merge_file(path)?;
    }
    let mut f = Flags(&mut cfg);
    f.put("seed", cli.seed)?;
    f.path("out", &cli.out)?;
    for s in &cli.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
        f.put(k.trim(), Some(v.trim()))?;
    }
    let eval = |f: &mut Flags, e: &EvalArgs| -> Result<()> {
        f.put("eval.split", e.split.as_ref())?;
        f.put("eval.deltas", e.deltas.as_ref())?;
        f.put("eval.grid", e.grid)
    };
    match &cli.cmd {
        Cmd::GenData { data } => f.path("data.dir", &data.data)?,
        Cmd::Train {
            data,
            lambda1,
            lambda2,
            epochs,
            stage1_only,
        } => {
            f.path("data.dir", &data.data)?;
            f.put("train.lambda1", *lambda1)?;
            f.put("train.lambda2", *lambda2)?;
            f.put("train.epochs", *epochs)?;
            if *stage1_only {
                f.put("train.stage2", Some(false))?;
            }
        }
        Cmd::Eval {
            data,
            checkpoint,
            maps,
            eval: e,
            ..
        } => {
            f.path("data.dir", &data.data)?;
            f.path("checkpoint", checkpoint)?;
            f.path("maps.dir", maps)?;
            eval(&mut f, e)?;
        }
        Cmd::DumpCam { data, checkpoint, split } => {
            f.path("data.dir", &data.data)?;
            f.path("checkpoint", checkpoint)?;
            f.put("eval.split", split.as_ref())?;
        }
        Cmd::Ablate { data, seeds, values, .. } => {
            f.path("data.dir", &data.data)?;
            f.put("ablate.seeds", seeds.as_ref())?;
            f.put("ablate.values", values.as_ref())?;
        }
        Cmd::Analyze { data, checkpoint, .. } => {
            f.path("data.dir", &data.data)?;
            f.path("checkpoint", checkpoint)?;
        }
        Cmd::CheckGrad { .. } => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli)?;
    match cli.cmd {
        Cmd::GenData { .. } => gen_data(&cfg).map(drop),
        Cmd::Train { .. } => cmd_train(&cfg).map(drop),
        Cmd::Eval { dump_maps, .. } => cmd_eval(&cfg, dump_maps).map(drop),
        Cmd::DumpCam { .. } => cmd_dump_cam(&cfg).map(drop),
        Cmd::Ablate { study, jobs, .. } => cmd_ablate(&cfg, study, jobs).map(drop),
        Cmd::Analyze { analysis, .. } => cmd_analyze(&cfg, analysis),
        Cmd::CheckGrad { seeds, tol } => {
            let seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()?;
            cmd_check_grad(&seeds, tol).map(drop)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
