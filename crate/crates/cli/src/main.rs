mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Exit codes: 0 success, 1 verification failure, 2 input or usage error.
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<litedet::Error> for Failure {
    fn from(e: litedet::Error) -> Self {
        Failure::usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Forward(a) => commands::forward(a),
        Command::Loss(a) => commands::loss(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Prune(a) => commands::prune(a),
        Command::Compare(a) => commands::compare(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
