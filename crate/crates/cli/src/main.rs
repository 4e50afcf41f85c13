use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opencil::engine::Ablation;

mod plot;
mod prepare;
mod run;

/// Open-set graph class-incremental learning runner.
#[derive(Debug, Parser)]
#[command(name = "opencil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and evaluate every seed of a run config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also run the softmax-threshold replay baseline at the same seeds.
        #[arg(long)]
        baseline: bool,
    },
    /// Run one ablation next to the full method and compare them per seed.
    Ablate {
        config: PathBuf,
        /// One of no-kd, no-phsc, no-id, no-ood.
        #[arg(long)]
        ablation: Ablation,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render SVG bar charts and CCR-FPR curves for the reports under a directory.
    Plot {
        report_dir: PathBuf,
        /// Where to write the images; defaults to `<report_dir>/plots`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a dataset in the three-file text format.
    PrepareData(prepare::PrepareArgs),
}

/// Failure classes mapped to process exit codes.
pub enum Failure {
    /// Bad input: config, arguments, or files. Exit code 1.
    Validation(anyhow::Error),
    /// Anything that goes wrong while executing. Exit code 2.
    Runtime(anyhow::Error),
}

pub type CliResult<T> = Result<T, Failure>;

pub trait Classify<T> {
    fn validation(self) -> CliResult<T>;
    fn runtime(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn validation(self) -> CliResult<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }

    fn runtime(self) -> CliResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Run { config, output, baseline } => run::cmd_run(&config, output, baseline),
        Command::Ablate { config, ablation, output } => run::cmd_ablate(&config, ablation, output),
        Command::Plot { report_dir, output } => plot::cmd_plot(&report_dir, output),
        Command::PrepareData(args) => prepare::cmd_prepare(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
