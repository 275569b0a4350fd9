//! Command-line surface of the `arepas` binary.

use std::path::{Path, PathBuf};

use arepas_core::metrics::AblationMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::report;
use crate::rundir::RunDir;
use crate::stages::{self, Ctx};

pub const RUN_DIR_ENV: &str = "AREPAS_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
    Accelerator,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config (TOML). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset manifest (CSV); overrides paths.manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Run directory; falls back to $AREPAS_RUN_DIR, then paths.run_dir.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
    /// Replace existing artifacts instead of refusing.
    #[arg(long, global = true)]
    pub overwrite: bool,
}

#[derive(Debug, Parser)]
#[command(name = "arepas", version, about = "Reconstruction-based anomaly segmentation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic dataset and its manifest.
    SynthGenerate {
        /// Output directory (default: paths.synth_dir, else <run-dir>/data).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Normalize and resize the manifest images into <run-dir>/preprocessed.
    Preprocess,
    /// Train the edge-to-image reconstructor.
    TrainRecon {
        /// Train on clean edge maps only (for the NO_PATCH_SCORING_NO_AUG variant).
        #[arg(long)]
        no_aug: bool,
    },
    /// Train the Siamese patch scorer on reconstructions of the training images.
    TrainScorer {
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Write reconstructions and anomaly maps for the val and test splits.
    Infer(ModeArgs),
    /// Select the threshold on val maps and score the test maps.
    Evaluate(ModeArgs),
    /// Evaluate all three pipeline variants.
    Ablate,
    /// Evaluate the full pipeline at every eval.sweep_patch_sizes entry.
    SweepPatchSize,
    /// Build report/ from every stored evaluation.
    Report,
    /// Print the built-in config as TOML.
    DefaultConfig,
}

#[derive(Debug, Args)]
pub struct ModeArgs {
    #[arg(long, default_value = "FULL")]
    pub mode: AblationMode,
    #[arg(long)]
    pub patch_size: Option<usize>,
}

pub fn load_config(g: &Global) -> CliResult<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_run_dir(g: &Global, cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    g.run_dir
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.paths.run_dir.clone())
        .ok_or_else(|| CliError::Usage(format!("no run directory: pass --run-dir, set {RUN_DIR_ENV} or paths.run_dir")))
}

/// Explicit manifest, else the run's preprocessed or generated one.
fn resolve_manifest(g: &Global, cfg: &ExperimentConfig, run: &Path) -> Option<PathBuf> {
    g.manifest.clone().or_else(|| cfg.paths.manifest.clone()).or_else(|| {
        ["preprocessed/manifest.csv", "data/manifest.csv"]
            .iter()
            .map(|r| run.join(r))
            .find(|p| p.exists())
    })
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if g.device == Device::Accelerator {
        return Err(CliError::Device("no accelerator backend is available in this build; use --device cpu".into()));
    }
    let cfg = load_config(g)?;
    if let Command::DefaultConfig = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let root = resolve_run_dir(g, &cfg)?;
    let run = RunDir::open(&root, &cfg, g.overwrite)?;
    if let Command::SynthGenerate { out } = &cli.command {
        let (out, rel) = match out.clone().or_else(|| cfg.paths.synth_dir.clone()) {
            Some(o) => (o, None),
            None => (run.path("data"), Some("data/manifest.csv")),
        };
        let m = stages::synth_generate(&cfg, &out)?;
        if let Some(rel) = rel {
            let man = arepas_core::manifest::Manifest::read(&m)?;
            for r in &man.records {
                for p in [Some(&r.image_path), r.mask_path.as_ref(), r.gt_path.as_ref()].into_iter().flatten() {
                    run.record("synth-generate", &format!("data/{}", p.display()))?;
                }
            }
            run.record("synth-generate", rel)?;
        }
        println!("{}", m.display());
        return Ok(());
    }
    let ctx = Ctx {
        manifest: resolve_manifest(g, &cfg, &root),
        cfg,
        run,
    };
    match cli.command {
        Command::SynthGenerate { .. } | Command::DefaultConfig => unreachable!(),
        Command::Preprocess => println!("{}", stages::preprocess(&ctx)?.display()),
        Command::TrainRecon { no_aug } => println!("{}", stages::train_recon(&ctx, !no_aug)?.display()),
        Command::TrainScorer { patch_size } => {
            let s = check_patch(&ctx, patch_size)?;
            println!("{}", stages::train_scorer(&ctx, s)?.display())
        }
        Command::Infer(m) => {
            let s = check_patch(&ctx, m.patch_size)?;
            stages::infer(&ctx, m.mode, s, false)?
        }
        Command::Evaluate(m) => {
            let s = check_patch(&ctx, m.patch_size)?;
            print!("{}", stages::results_csv(&[stages::evaluate(&ctx, m.mode, s, false)?]))
        }
        Command::Ablate => print!("{}", stages::results_csv(&stages::ablate(&ctx)?)),
        Command::SweepPatchSize => print!("{}", stages::results_csv(&stages::sweep_patch_size(&ctx)?)),
        Command::Report => println!("{}", report(&ctx)?.display()),
    }
    Ok(())
}

fn check_patch(ctx: &Ctx, s: Option<usize>) -> CliResult<usize> {
    let s = s.unwrap_or(ctx.cfg.siamese.patch_size);
    if s == 0 || s > ctx.cfg.image_size {
        return Err(CliError::Usage(format!("patch size {s} must lie in [1, {}]", ctx.cfg.image_size)));
    }
    Ok(s)
}
