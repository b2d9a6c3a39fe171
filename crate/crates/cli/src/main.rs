mod commands;
mod files;

use std::process::ExitCode;

use clap::Parser;

use commands::{Cli, Command};

/// Exit status categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Usage = 2,
    Io = 3,
    Oracle = 4,
    Budget = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Usage,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Io,
            message: message.into(),
        }
    }

    pub fn oracle(message: impl Into<String>) -> Self {
        CliError {
            category: Category::Oracle,
            message: message.into(),
        }
    }
}

impl From<holdup_core::Error> for CliError {
    fn from(e: holdup_core::Error) -> Self {
        use holdup_core::Error as E;
        let category = match &e {
            E::Io { .. } | E::Parse { .. } | E::EmptyDataset(_) | E::DuplicateId { .. } => Category::Io,
            E::Oracle(_) | E::UnknownModel(_) => Category::Oracle,
            E::BudgetInfeasible { .. } => Category::Budget,
            E::InvalidTask(_) | E::InvalidInput(_) | E::IdMismatch(_) => Category::Usage,
        };
        CliError {
            category,
            message: e.to_string(),
        }
    }
}

impl From<holdup_core::OracleError> for CliError {
    fn from(e: holdup_core::OracleError) -> Self {
        CliError::oracle(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Category::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Run(args) => commands::run(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.category as u8)
        }
    }
}
