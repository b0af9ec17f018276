//! `nar`: generate synthetic spaces, train the ranker, search, evaluate.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nar_core::profile::Profile;
use nar_core::search::SearchMode;

use config::Overrides;

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Failure { code: 3, message: message.into() }
    }
}

impl From<nar_core::Error> for Failure {
    fn from(e: nar_core::Error) -> Self {
        use nar_core::Error as E;
        let code = match &e {
            E::NonFinite(_) => 4,
            E::InvalidArgument(_) | E::Shape { .. } | E::Budget { .. } => 2,
            _ => 3,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "nar", version, about = "Neural architecture ranker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Enumerate the synthetic space and write it as a record file.
    Synth(Common),
    /// Train the ranker and collect tier statistics.
    Train(Common),
    /// Run the sampling loop with a trained checkpoint.
    Search(Common),
    /// Score a record file and emit metrics plus scatter data.
    Eval(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Nb101,
    Nb201,
    Synth,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Random,
    Statistics,
    Interval,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Independent search runs with consecutive seeds.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record file (overrides the config's `records`).
    #[arg(long)]
    records: Option<PathBuf>,
    /// Model checkpoint (defaults to `<out>/model.ckpt`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            profile: self.profile.map(|p| match p {
                ProfileArg::Nb101 => Profile::Nb101,
                ProfileArg::Nb201 => Profile::Nb201,
                ProfileArg::Synth => Profile::Synth,
            }),
            seed: self.seed,
            mode: self.mode.map(|m| match m {
                ModeArg::Random => SearchMode::Random,
                ModeArg::Statistics => SearchMode::Statistics,
                ModeArg::Interval => SearchMode::Interval,
            }),
            repeats: self.repeats,
            out: self.out.clone(),
            records: self.records.clone(),
            checkpoint: self.checkpoint.clone(),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (args, cmd): (&Common, fn(&commands::Context) -> Result<(), Failure>) = match &cli.command {
        Command::Synth(a) => (a, commands::synth),
        Command::Train(a) => (a, commands::train),
        Command::Search(a) => (a, commands::search),
        Command::Eval(a) => (a, commands::eval),
    };
    let seed_flag = args.seed;
    let (config, original) = config::resolve(args.config.as_deref(), &args.overrides())?;
    cmd(&commands::Context {
        config,
        original,
        seed_flag,
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
