//! Command-line driver: data generation, pre-training, training, evaluation,
//! parameter accounting and experiment orchestration.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod manifest;

use std::ffi::OsString;

use clap::Parser;

use crate::cli::{Cli, Command};
use crate::error::{CliError, Result};

/// Executes one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(a).map(drop),
        Command::Pretrain(a) => commands::pretrain_cmd(a).map(drop),
        Command::Train(a) => commands::train_cmd(a).map(drop),
        Command::Eval(a) => commands::eval_cmd(a).map(drop),
        Command::ParamsReport(a) => commands::params_report(a).map(drop),
        Command::ScaleSweep(a) => commands::scale_sweep(a).map(drop),
        Command::Experiment(a) => experiment::run_experiment(a).map(drop),
    }
}

/// Parses an argument vector (program name first) and runs it.
pub fn run_from<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| CliError::usage(e.to_string()))?;
    run(cli)
}
