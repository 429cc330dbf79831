//! Operator surface for the engine: cohort generation, pretraining,
//! fine-tuning, evaluation and gradient verification.
//!
//! Exit codes: 0 ok, 1 usage or configuration, 2 data, 3 verification.

pub mod commands;
pub mod gradcheck;
pub mod run_config;

use std::ffi::OsString;
use std::fmt;

use clap::{Parser, Subcommand};

pub use commands::{cmd_eval, cmd_finetune, cmd_gen, cmd_gradcheck, cmd_pretrain};
pub use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "alter", version, about = "Tri-modal pretraining on slides, gene expression and reports")]
pub struct Cli {
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic cohort with planted cross-modal structure.
    Gen(commands::GenArgs),
    /// Pretrain encoders and fusion with masked modeling, contrastive and triplet losses.
    Pretrain(commands::PretrainArgs),
    /// Train a task head on a pretrained checkpoint.
    Finetune(commands::FinetuneArgs),
    /// Evaluate a task checkpoint on one split.
    Eval(commands::EvalArgs),
    /// Compare tape gradients of every component with central differences.
    Gradcheck(commands::GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Usage,
    Data,
    Verification,
}

impl Failure {
    pub fn exit_code(self) -> u8 {
        match self {
            Failure::Usage => 1,
            Failure::Data => 2,
            Failure::Verification => 3,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Failure,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<alter_core::Error> for CliError {
    fn from(e: alter_core::Error) -> Self {
        use alter_core::Error as E;
        let kind = match &e {
            E::Config(_) => Failure::Usage,
            E::Verification(_) => Failure::Verification,
            _ => Failure::Data,
        };
        CliError { kind, message: e.to_string() }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Gen(a) => {
            let out = cmd_gen(a)?;
            println!("cohort written to {}", out.display());
        }
        Command::Pretrain(a) => {
            let o = cmd_pretrain(a)?;
            if let Some(last) = o.rows.last() {
                println!("pretraining done: {} steps, last total loss {:.6}", o.rows.len(), last.total);
            }
            println!("checkpoint written to {}", o.out_dir.display());
        }
        Command::Finetune(a) => {
            let r = cmd_finetune(a)?;
            print!("{}", r.metrics.to_text());
            println!("task checkpoint written to {}", r.out_dir.display());
        }
        Command::Eval(a) => {
            let m = cmd_eval(a)?;
            print!("{}", m.to_text());
        }
        Command::Gradcheck(a) => {
            cmd_gradcheck(a)?;
        }
    }
    Ok(())
}

/// Parses `args` (program name first) and runs. Help and version requests
/// succeed; any other parse failure is a usage error.
pub fn run_from<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            Ok(())
        }
        Err(e) => Err(CliError { kind: Failure::Usage, message: e.render().to_string() }),
    }
}
