//! `dmil`: generate synthetic bag datasets, train the dual-branch model,
//! evaluate classification and localization, check gradients, and sweep
//! annotation ratios.

mod commands;
mod config;

use std::process::ExitCode;

/// Error carrying the process exit code: 1 usage, 2 data, 3 failed check.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    CheckFailed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::CheckFailed(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::CheckFailed(m) => m,
        }
    }
}

impl From<dmil_core::Error> for CliError {
    fn from(e: dmil_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

const USAGE: &str = "usage: dmil <generate|train|eval|gradcheck|sweep> [--flag value ...]
shared flags: --config PATH (key=value file, flags override)
              --dump-config PATH (write the effective configuration)
run `dmil <subcommand> --help` for the full flag list";

fn main() -> ExitCode {
    // die quietly on a closed pipe instead of panicking mid-report
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprintln!("{USAGE}");
        return ExitCode::from(1);
    };
    let rest = &argv[1..];
    let result = match cmd.as_str() {
        "generate" => commands::generate::run(rest),
        "train" => commands::train::run(rest),
        "eval" => commands::eval::run(rest),
        "gradcheck" => commands::gradcheck::run(rest),
        "sweep" => commands::sweep::run(rest),
        "--help" | "-h" | "help" => {
            println!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => Err(CliError::Usage(format!(
            "unknown subcommand {other}\n{USAGE}"
        ))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
