//! `vqdraw`: train, encode, decode, sample, reconstruct and inspect models.
//!
//! Exit status: 0 success, 1 usage error, 2 data or format error,
//! 3 numerical failure.

mod commands;
mod flags;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flags::Flags;

#[derive(Debug, Parser)]
#[command(name = "vqdraw", version, about = "Sequential discrete auto-encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct RunArgs {
    /// TOML file setting any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model, writing checkpoints, metrics and grids.
    Train(RunArgs),
    /// Encode images into code files.
    Encode(RunArgs),
    /// Decode code files into images.
    Decode(RunArgs),
    /// Draw random codes and decode them into a grid.
    Sample(RunArgs),
    /// Encode and decode images, tiling targets next to reconstructions.
    Reconstruct(RunArgs),
    /// Tile every stage of encoding, target left-most.
    Stages(RunArgs),
    /// Compare analytic and numerical loss gradients on a small model.
    GradCheck(RunArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Decode(_) => "decode",
            Command::Sample(_) => "sample",
            Command::Reconstruct(_) => "reconstruct",
            Command::Stages(_) => "stages",
            Command::GradCheck(_) => "grad-check",
        }
    }

    fn args(&self) -> &RunArgs {
        match self {
            Command::Train(a)
            | Command::Encode(a)
            | Command::Decode(a)
            | Command::Sample(a)
            | Command::Reconstruct(a)
            | Command::Stages(a)
            | Command::GradCheck(a) => a,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(vqdraw::Error),
    Numerical(String),
}

impl From<vqdraw::Error> for CliError {
    fn from(e: vqdraw::Error) -> Self {
        CliError::Lib(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use vqdraw::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 3,
            CliError::Lib(e) => match e {
                E::InvalidArgument(_) | E::Config(_) => 1,
                E::NonFinite(_) => 3,
                E::Shape { .. } | E::ConfigMismatch(_) | E::Format(_) | E::Io { .. } => 2,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    let flags = match &args.config {
        Some(path) => args.flags.over(&Flags::from_file(path)?)?,
        None => args.flags.clone(),
    };
    let ctx = commands::Context::new(cli.command.name(), flags)?;
    match cli.command {
        Command::Train(_) => commands::train(&ctx),
        Command::Encode(_) => commands::encode_cmd(&ctx),
        Command::Decode(_) => commands::decode_cmd(&ctx),
        Command::Sample(_) => commands::sample(&ctx),
        Command::Reconstruct(_) => commands::reconstruct(&ctx),
        Command::Stages(_) => commands::stages(&ctx),
        Command::GradCheck(_) => commands::grad_check(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
