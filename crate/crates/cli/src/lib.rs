//! Command-line driver: configuration, run directories, subcommands and plots.

pub mod commands;
pub mod config;
pub mod plot;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{Ctx, ProbeKind};
use crate::config::{split_overrides, ConfigError, Preset, RunConfig};
use crate::run::RunDir;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "cleandift",
    about = "Train, distill and evaluate clean-image diffusion features",
    after_help = "Any config key can be overridden with --section.key VALUE, e.g. --distill.steps 50."
)]
pub struct Cli {
    /// tiny, default or paper_scale
    #[arg(long, global = true, default_value = "default")]
    pub preset: String,
    /// TOML file merged over the preset
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for run directories (same as --paths.out)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate all synthetic splits into <run>/data
    GenData,
    /// Train the teacher denoiser
    TrainTeacher,
    /// Align a student copy of the teacher on clean images
    Distill,
    /// Keypoint correspondence sweep over timesteps
    EvalPck,
    /// Linear probes (depth, seg) or k-NN classification (knn)
    EvalProbe { task: String },
    /// Noise / clean decomposition of teacher feature variance
    AnalyzeNoise,
    /// Objective and head-architecture ablations
    Ablate,
    /// Render figures for an existing run directory
    Plot { run_dir: PathBuf },
    /// Everything above in one run directory
    Pipeline,
    /// Print the resolved configuration
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::EvalPck => "eval-pck",
            Command::EvalProbe { .. } => "eval-probe",
            Command::AnalyzeNoise => "analyze-noise",
            Command::Ablate => "ablate",
            Command::Plot { .. } => "plot",
            Command::Pipeline => "pipeline",
            Command::ShowConfig => "show-config",
        }
    }
}

/// Outcome of a successful invocation.
#[derive(Debug, Default)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
}

/// Parses `args` (without the program name) and runs the command.
pub fn execute(args: Vec<String>) -> anyhow::Result<Outcome> {
    let (rest, mut overrides) = split_overrides(args)?;
    let cli = Cli::try_parse_from(std::iter::once("cleandift".to_string()).chain(rest)).map_err(|e| {
        if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
            anyhow::Error::new(e)
        } else {
            anyhow::Error::new(ConfigError(e.to_string()))
        }
    })?;
    if let Some(seed) = cli.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(out) = &cli.out {
        overrides.push(("paths.out".into(), out.display().to_string()));
    }
    let preset: Preset = cli.preset.parse()?;
    let cfg = RunConfig::resolve(preset, cli.config.as_deref(), &overrides)?;
    match &cli.command {
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(Outcome::default());
        }
        Command::Plot { run_dir } => {
            if !run_dir.is_dir() {
                return Err(ConfigError(format!("{} is not a directory", run_dir.display())).into());
            }
            plot::plot_run(run_dir);
            return Ok(Outcome {
                run_dir: Some(run_dir.clone()),
            });
        }
        _ => {}
    }
    let probe_kind = match &cli.command {
        Command::EvalProbe { task } => Some(task.parse::<ProbeKind>()?),
        _ => None,
    };
    let ctx = Ctx::new(cfg)?;
    let mut run = RunDir::create(&ctx.cfg, cli.command.name())?;
    log::info!("run directory {}", run.path.display());
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&ctx, &mut run),
        Command::TrainTeacher => commands::train_teacher(&ctx, &mut run),
        Command::Distill => commands::distill(&ctx, &mut run),
        Command::EvalPck => commands::eval_pck(&ctx, &mut run),
        Command::EvalProbe { .. } => commands::eval_probe(&ctx, &mut run, probe_kind.expect("parsed")),
        Command::AnalyzeNoise => commands::analyze_noise(&ctx, &mut run),
        Command::Ablate => commands::ablate(&ctx, &mut run),
        Command::Pipeline => commands::pipeline(&ctx, &mut run),
        Command::Plot { .. } | Command::ShowConfig => unreachable!(),
    };
    // The manifest is written even for failed runs so partial outputs are traceable.
    run.write_manifest()?;
    result?;
    Ok(Outcome {
        run_dir: Some(run.path.clone()),
    })
}

/// Exit code for an error returned by [`execute`].
pub fn exit_code(e: &anyhow::Error) -> i32 {
    if let Some(c) = e.downcast_ref::<clap::Error>() {
        return if c.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
    }
    if e.chain().any(|c| c.downcast_ref::<ConfigError>().is_some()) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}
