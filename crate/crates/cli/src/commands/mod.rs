mod gradcheck;
mod metrics;
mod synth;
mod train;

use std::path::{Path, PathBuf};

use featprobe_core::featio::write_new_file;
use serde::Serialize;

use crate::args::{Cli, Command};
use crate::{CliError, CliResult, CommandOutput};

pub use train::{cell_dir, run_dir, SweepCell};

pub fn dispatch(cli: &Cli) -> CliResult<CommandOutput> {
    match &cli.command {
        Command::Synth(c) => synth::run(cli, c),
        Command::Metrics(a) => metrics::run_metrics(cli, a),
        Command::Mi(a) => metrics::run_mi(cli, a),
        Command::Train(a) => train::run_train(cli, a),
        Command::Cross(a) => train::run_cross(cli, a),
        Command::Sweep(a) => train::run_sweep(cli, a),
        Command::Gradcheck(a) => gradcheck::run(cli, a),
    }
}

fn required_out(cli: &Cli, command: &str) -> CliResult<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::config(format!("`{command}` needs --out DIR")))
}

fn write_json<T: Serialize>(path: &Path, value: &T, overwrite: bool) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(featprobe_core::Error::from)?;
    text.push('\n');
    write_new_file(path, text.as_bytes(), overwrite)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}
