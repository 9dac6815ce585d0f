//! Command-line front end. Logs go to stderr, artifacts to files only.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kinetrack::pipeline::{
    apply_corrections, run_pipeline, write_atomic, CorrectionFile, PipelineConfig, SceneDocument, Stage,
};
use kinetrack::Error;

const CORRECTED_TRUTH_FILE: &str = "ground_truth.corrected.json";
const CORRECTION_SUMMARY_FILE: &str = "corrections.summary.json";

#[derive(Debug, Parser)]
#[command(name = "kinetrack", version, about = "Articulated 3D pose reconstruction from multi-camera keypoints")]
struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory (relative to the working directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a ground-truth run and the corrupted detection grid.
    Synth,
    /// Per-frame robust triangulation.
    Triangulate,
    /// Extended Kalman filter.
    Ekf,
    /// Full trajectory estimation.
    Fte,
    /// Score every estimator against the references.
    Score,
    /// Export a scene document for the viewer.
    ExportScene,
    /// Run the stages listed in the configuration.
    Run,
    /// Fold viewer corrections into a revised ground-truth file.
    ApplyCorrections {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        corrections: PathBuf,
    },
}

impl Command {
    fn stage(&self) -> Option<Stage> {
        match self {
            Command::Synth => Some(Stage::Synth),
            Command::Triangulate => Some(Stage::Triangulate),
            Command::Ekf => Some(Stage::Ekf),
            Command::Fte => Some(Stage::Fte),
            Command::Score => Some(Stage::Score),
            Command::ExportScene => Some(Stage::ExportScene),
            Command::Run | Command::ApplyCorrections { .. } => None,
        }
    }
}

fn load_config(cli: &Cli) -> kinetrack::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = absolute(dir);
    } else if cli.config.is_none() {
        cfg.out_dir = absolute(&cfg.out_dir);
    }
    if let Some(stage) = cli.command.stage() {
        cfg.stages = vec![stage];
    }
    Ok(cfg)
}

fn absolute(path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir().map(|d| d.join(path)).unwrap_or_else(|_| path.to_path_buf())
    }
}

fn corrections(cli: &Cli, scene: &Path, corrections: &Path) -> kinetrack::Result<()> {
    let out = match &cli.out_dir {
        Some(d) => absolute(d),
        None => match &cli.config {
            Some(path) => PipelineConfig::load(path)?.out_path(),
            None => absolute(&PipelineConfig::default().out_dir),
        },
    };
    let doc = SceneDocument::load(scene)?;
    let file = CorrectionFile::load(corrections)?;
    let (truth, summary) = apply_corrections(&doc, &file.corrections);
    for r in &summary.rejected {
        log::warn!("correction {} rejected: {}", r.index, r.reason);
    }
    log::info!(
        "applied {} corrections, {} over {} m ({:.1}%)",
        summary.applied,
        summary.large_count,
        summary.large_threshold,
        100.0 * summary.large_fraction
    );
    write_atomic(&out.join(CORRECTED_TRUTH_FILE), truth.to_json().as_bytes())?;
    write_atomic(&out.join(CORRECTION_SUMMARY_FILE), summary.to_json().as_bytes())
}

fn run(cli: &Cli) -> kinetrack::Result<()> {
    if let Command::ApplyCorrections { scene, corrections: c } = &cli.command {
        return corrections(cli, scene, c);
    }
    let cfg = load_config(cli)?;
    let outcome = run_pipeline(&cfg)?;
    log::info!(
        "completed {} stage(s) into {}",
        outcome.plan.len(),
        outcome.out_dir.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            match e {
                Error::Stage { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
