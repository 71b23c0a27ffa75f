//! `owcl`: run experiments, ablation sweeps, the verification suite and
//! reports over finished run directories.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Parser)]
#[command(name = "owcl", version, about = "Continual representation learning with dynamic prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every stage of one configuration.
    Run {
        /// JSON experiment configuration.
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Output directory (default: runs/<config hash prefix>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the configuration seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a stage checkpoint instead of starting fresh.
        #[arg(long, conflicts_with_all = ["config", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Run a sweep of variants derived from a base configuration.
    Ablate {
        /// stage_order, rank or peft.
        #[arg(long)]
        kind: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the built-in property suite.
    Verify {
        /// Only run properties whose name contains this string.
        #[arg(long)]
        only: Option<String>,
        /// Inject a known defect to confirm the suite catches it.
        #[arg(long, hide = true)]
        mutate: Option<String>,
    },
    /// Summarise a finished run or ablation directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            resume,
        } => match resume {
            Some(ckpt) => commands::resume(&ckpt, out.as_deref()),
            None => commands::run(config.as_deref().expect("clap enforces --config"), out.as_deref(), seed),
        },
        Command::Ablate { kind, config, out, seed } => commands::ablate(&kind, &config, &out, seed),
        Command::Verify { only, mutate } => commands::verify(only.as_deref(), mutate.as_deref()),
        Command::Report { out } => commands::report(&out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Config(_) => ExitCode::from(2),
                CliError::Runtime(_) => ExitCode::from(3),
            }
        }
    }
}
