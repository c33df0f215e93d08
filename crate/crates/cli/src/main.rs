//! `qflow`: train agents, evaluate checkpoints and run the analysis experiments.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "qflow", version, about = "Q-guided flow exploration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct ConfigArgs {
    /// Flat `section.key = value` config file; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value`, applied after the file; repeatable.
    #[arg(short = 'o', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; overrides `output.dir` and `QFLOW_OUTDIR`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AnalysisKind {
    Variance,
    Monotonicity,
    Correlation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an agent; writes metrics, checkpoints and the resolved config.
    Train(ConfigArgs),
    /// Evaluate a checkpoint with deterministic actions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write `eval.json`; defaults to the checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one of the analysis experiments.
    Analyze {
        kind: AnalysisKind,
        #[command(flatten)]
        args: ConfigArgs,
        /// Checkpoint for the correlation and checkpoint-monotonicity modes.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Failure::CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(args) => commands::train(&args.into()),
        Command::Eval {
            checkpoint,
            episodes,
            seed,
            out,
        } => commands::eval(&checkpoint, episodes, seed, out.as_deref()),
        Command::Analyze { kind, args, checkpoint } => {
            let kind = match kind {
                AnalysisKind::Variance => commands::Analysis::Variance,
                AnalysisKind::Monotonicity => commands::Analysis::Monotonicity,
                AnalysisKind::Correlation => commands::Analysis::Correlation,
            };
            commands::analyze(kind, &args.into(), checkpoint)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

impl From<ConfigArgs> for commands::Invocation {
    fn from(a: ConfigArgs) -> Self {
        commands::Invocation {
            config: a.config,
            overrides: a.overrides,
            out: a.out,
        }
    }
}
