//! `civic-evidence`: the pipeline from evidence records to reports.
//!
//! Exit status: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::fmt;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use evidence_core::Error;

mod args;
mod commands;
mod config;
mod files;
mod manifest;

use args::Cli;
use config::Config;

/// Bad flag values or combinations that clap cannot catch.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return USAGE;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidArgument(_) => USAGE,
                Error::Divergence { .. } | Error::NonFiniteGradient(_) | Error::NoMaskedPositions => NUMERIC,
                _ => DATA,
            };
        }
    }
    DATA
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    let result = Config::load(cli.config.as_deref()).and_then(|cfg| commands::run(&cfg, &cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn exit_codes_by_error_kind() {
        let usage: anyhow::Error = Usage("x".into()).into();
        assert_eq!(exit_code(&usage), USAGE);
        let diverged: anyhow::Error = Error::Divergence { step: 3, loss: f64::NAN, trace: vec![] }.into();
        assert_eq!(exit_code(&diverged), NUMERIC);
        let data = Err::<(), _>(Error::Data("empty".into())).context("loading").unwrap_err();
        assert_eq!(exit_code(&data), DATA);
        let io: anyhow::Error = std::io::Error::other("gone").into();
        assert_eq!(exit_code(&io), DATA);
    }
}
