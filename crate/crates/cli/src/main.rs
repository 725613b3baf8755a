mod args;
mod commands;
mod output;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;
use distflash_core::Error as CoreError;

use args::{Cli, Command};

/// Bad flags or an inconsistent configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[macro_export]
macro_rules! usage {
    ($($t:tt)*) => {
        anyhow::Error::new($crate::UsageError(format!($($t)*)))
    };
}

pub enum Outcome {
    Passed,
    Failed,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_) | CoreError::Shape(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Verify => commands::verify::run(&cli.common),
        Command::Schedule(a) => commands::schedule::run(&cli.common, a),
        Command::Analyze(a) => commands::analyze::run(&cli.common, a),
        Command::Ckpt(a) => commands::ckpt::run(&cli.common, a),
    };
    match result {
        Ok(Outcome::Passed) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
