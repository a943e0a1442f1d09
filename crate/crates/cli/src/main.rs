mod cli;
mod commands;
mod config;
mod io;

use std::process::ExitCode;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::Parser;
use drrq::ErrorClass;

use crate::cli::Cli;
use crate::commands::Env;
use crate::config::PipelineConfig;

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn class_name(class: ErrorClass) -> &'static str {
    match class {
        ErrorClass::Usage => "usage",
        ErrorClass::Data => "data",
        ErrorClass::Numerical => "numerical",
    }
}

/// The first library error in the chain decides; anything else (I/O, CSV,
/// JSON) is a data problem.
fn classify(err: &anyhow::Error) -> ErrorClass {
    err.chain()
        .find_map(|c| c.downcast_ref::<drrq::Error>())
        .map(drrq::Error::class)
        .unwrap_or(ErrorClass::Data)
}

fn report(json: bool, class: ErrorClass, message: &str) -> ExitCode {
    let code = exit_code(class);
    if json {
        let v = serde_json::json!({
            "error": {
                "class": class_name(class),
                "exit_code": code,
                "message": message,
            }
        });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(drrq::Error::Usage("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let env = Env {
        cfg,
        seed: cli.seed,
    };
    commands::run(cli.command, &env)
}

fn main() -> ExitCode {
    let json = std::env::args().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if json {
                return report(true, ErrorClass::Usage, e.to_string().trim());
            }
            let _ = e.print();
            return ExitCode::from(exit_code(ErrorClass::Usage));
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(json, classify(&e), &format!("{e:#}")),
    }
}
