use std::fmt::Write as _;

use featprobe_core::autodiff::{OpKind, ALL_OPS};
use featprobe_core::featio::write_new_file;
use featprobe_core::gradcheck::{run_gradcheck, GradcheckOptions};

use super::to_value;
use crate::args::{Cli, GradcheckArgs};
use crate::{CliError, CliResult, CommandOutput, EXIT_CHECK_FAILED};

/// `attention` names the attention-weight op (row softmax).
fn parse_fault(name: &str) -> CliResult<OpKind> {
    if name == "attention" {
        return Ok(OpKind::SoftmaxRows);
    }
    OpKind::from_name(name).ok_or_else(|| {
        let valid: Vec<&str> = ALL_OPS.iter().map(|k| k.name()).collect();
        CliError::config(format!("unknown op `{name}` (valid: attention, {})", valid.join(", ")))
    })
}

pub fn run(cli: &Cli, a: &GradcheckArgs) -> CliResult<CommandOutput> {
    let fault = a.inject_fault.as_deref().map(parse_fault).transpose()?;
    if a.seeds == 0 {
        return Err(CliError::config("--seeds must be >= 1"));
    }
    let report = run_gradcheck(&GradcheckOptions {
        seeds: a.seeds,
        base_seed: cli.seed.unwrap_or(0),
        fault,
    });
    let value = to_value(&report);
    if let Some(path) = &cli.out {
        let mut text = serde_json::to_string_pretty(&value).expect("json");
        text.push('\n');
        write_new_file(path, text.as_bytes(), cli.force)?;
    }
    let mut human = String::new();
    let _ = writeln!(human, "{:<26} {:>12}  status", "check", "max rel err");
    for c in &report.checks {
        let status = if c.passed { "ok" } else { "FAIL" };
        let _ = writeln!(human, "{:<26} {:>12.3e}  {status}", c.name, c.max_rel_err);
    }
    let _ = writeln!(
        human,
        "{} ({} seeds, tolerance {:e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.seeds,
        report.tolerance
    );
    if !report.failing().is_empty() {
        let _ = writeln!(human, "failing: {}", report.failing().join(", "));
    }
    let mut out = CommandOutput::ok(value, human);
    if !report.passed {
        out.code = EXIT_CHECK_FAILED;
    }
    Ok(out)
}
