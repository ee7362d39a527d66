use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use semfield_core::Error;

mod commands;
mod config;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Semantic radiance field experiments: generate a scene, degrade its labels,
/// train, render, score, fuse and mesh.
#[derive(Parser)]
#[command(name = "semfield", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); may name a `preset` to override.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset: desk-scale, quick or paper-scale.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Replace the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Clear a non-empty output directory first.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural scene and render its dataset.
    Gen,
    /// Apply the config's degradation to a generated dataset.
    Degrade {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a field on a (possibly degraded) dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Also save a checkpoint every N iterations.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Render colour, labels, depth and entropy at dataset poses.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = FrameSet::Test)]
        frames: FrameSet,
    },
    /// Score a rendered (or any) dataset against a reference dataset.
    Eval {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Compare multi-view label fusion methods on a fusion-sim dataset.
    Fuse {
        /// Output of `degrade` with a fusion_sim degradation.
        #[arg(long)]
        data: PathBuf,
        /// Clean dataset from `gen`.
        #[arg(long)]
        reference: PathBuf,
        /// Field trained on `data`; adds rendered-depth and field rows.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodFilter::All)]
        method: MethodFilter,
    },
    /// Extract a semantically coloured mesh from a checkpoint.
    Mesh {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid nodes per axis.
        #[arg(long, default_value_t = 96)]
        resolution: usize,
        /// Density level of the surface.
        #[arg(long, default_value_t = semfield_core::meshing::DEFAULT_ISO)]
        iso: f64,
    },
    /// gen, degrade, train and evaluate in one go.
    Run,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameSet {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodFilter {
    Bayesian,
    Average,
    All,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::Load { .. } | Error::Io { .. } => 3,
        Error::Divergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("semfield: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> semfield_core::Result<()> {
    let c = &cli.common;
    if c.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot configure the thread pool: {e}")))?;
    }
    let input: Option<&Path> = match &cli.command {
        Command::Degrade { data } | Command::Train { data, .. } | Command::Render { data, .. } => Some(data),
        Command::Fuse { data, .. } => Some(data),
        _ => None,
    };
    let cfg = config::resolve(c.config.as_deref(), c.preset.as_deref(), input, c.seed)?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir in the config".into()))?;
    commands::prepare_out(&out, c.overwrite)?;
    match cli.command {
        Command::Gen => commands::gen(&cfg, &out),
        Command::Degrade { data } => commands::degrade(&cfg, &data, &out),
        Command::Train { data, checkpoint_every } => commands::train(&cfg, &data, &out, checkpoint_every),
        Command::Render { checkpoint, data, frames } => commands::render(&checkpoint, &data, frames, &out),
        Command::Eval { rendered, reference } => commands::eval(&rendered, &reference, &out),
        Command::Fuse { data, reference, checkpoint, method } => {
            commands::fuse(&data, &reference, checkpoint.as_deref(), method, &out)
        }
        Command::Mesh { checkpoint, resolution, iso } => commands::mesh(&cfg, &checkpoint, resolution, iso, &out),
        Command::Run => commands::run_all(&cfg, &out),
    }
}
