use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use neurogen_cli::commands;
use neurogen_cli::{CliError, Experiment};

#[derive(Parser)]
#[command(name = "neurogen", version, about = "Generate small-network weights from instructions and data samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Args)]
struct Stage2Flags {
    /// Generator checkpoint (default: <output_dir>/stage1/generator.nggs).
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Skip stage 1: train a fresh generator on the task loss only.
    #[arg(long)]
    phase2_only: bool,
    /// Soft-clip bound for phase-2-only runs.
    #[arg(long, conflicts_with = "no_clip")]
    alpha: Option<f64>,
    /// Disable soft clipping in phase-2-only runs.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference checkpoints and write the corpus.
    BuildCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Align a fresh generator with the corpus.
    Stage1 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tune the generator on sampled task data.
    Stage2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: Stage2Flags,
    },
    /// Phase-2-only ablation (stage2 --phase2-only).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: Stage2Flags,
    },
    /// Test accuracy of a weights file.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
    },
    /// Re-target a trained generator to the small architecture.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint (default: <output_dir>/stage2/generator.nggs).
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Cap on training samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Aggregate all metrics records into one CSV.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn stage2(common: &Common, flags: Stage2Flags, force_phase2: bool) -> Result<(), CliError> {
    let mut exp = Experiment::load(&common.config)?;
    let ablation = &mut exp.config.ablation;
    ablation.phase2_only |= flags.phase2_only || force_phase2;
    if let Some(a) = flags.alpha {
        ablation.alpha = Some(a);
    }
    if flags.no_clip {
        ablation.alpha = None;
    }
    if let Some(e) = flags.epochs {
        exp.config.stage2.epochs = e;
    }
    let exp = Experiment::new(exp.config, exp.base_dir)?;
    commands::stage2(&exp, flags.generator.as_deref())?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BuildCorpus { common } => {
            commands::build_corpus(&Experiment::load(&common.config)?)?;
        }
        Command::Stage1 { common, corpus, epochs } => {
            let mut exp = Experiment::load(&common.config)?;
            if let Some(e) = epochs {
                exp.config.stage1.epochs = e;
            }
            let exp = Experiment::new(exp.config, exp.base_dir)?;
            commands::stage1(&exp, corpus.as_deref())?;
        }
        Command::Stage2 { common, flags } => stage2(&common, flags, false)?,
        Command::Ablate { common, flags } => stage2(&common, flags, true)?,
        Command::Eval { common, weights } => {
            commands::eval(&Experiment::load(&common.config)?, &weights)?;
        }
        Command::Adapt {
            common,
            generator,
            limit,
            epochs,
        } => {
            let mut exp = Experiment::load(&common.config)?;
            let adapt = exp
                .config
                .adapt
                .as_mut()
                .ok_or_else(|| CliError::config("/adapt", "section required for adapt"))?;
            if limit.is_some() {
                adapt.limit = limit;
            }
            if let Some(e) = epochs {
                adapt.epochs = e;
            }
            let exp = Experiment::new(exp.config, exp.base_dir)?;
            commands::adapt(&exp, generator.as_deref())?;
        }
        Command::Report { common } => {
            commands::report(&Experiment::load(&common.config)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
