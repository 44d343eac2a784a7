use std::fmt::Write as _;

use featprobe_core::featio::{write_new_file, FeatureSet, Manifest, TokenPooling};
use featprobe_core::report::{entry_class, evaluate_metrics, MetricName, MetricOptions, MetricReport, Status};

use super::to_value;
use crate::args::{Cli, MetricsArgs, MiArgs, PairArgs, PoolingArg};
use crate::config::load_file;
use crate::{exit_code, CliError, CliResult, CommandOutput, EXIT_ESTIMATION};

struct Pair {
    experiment: String,
    x: FeatureSet,
    y: FeatureSet,
    opts: MetricOptions,
}

fn load_pair(a: &PairArgs) -> CliResult<Pair> {
    let manifest = Manifest::load(&a.manifest)?;
    let x = manifest.load_role(&a.x_role)?;
    let y = manifest.load_role(&a.y_role)?;
    let mut opts: MetricOptions = match &a.config {
        Some(p) => load_file(p)?,
        None => MetricOptions::default(),
    };
    if let Some(p) = a.pooling {
        opts.pooling = match p {
            PoolingArg::Mean => TokenPooling::Mean,
            PoolingArg::Flatten => TokenPooling::Flatten,
        };
    }
    Ok(Pair {
        experiment: manifest.experiment.clone(),
        x,
        y,
        opts,
    })
}

fn human_report(report: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (config {})", report.experiment, &report.config_hash[..12]);
    for m in &report.metrics {
        match (m.status, m.value) {
            (Status::Ok, Some(v)) => {
                let spread = m.std.map(|sd| format!(" ± {sd:.6}")).unwrap_or_default();
                let _ = writeln!(s, "  {:<8} {v:>14.6}{spread}  {}", m.name.as_str(), m.units);
            }
            _ => {
                let err = m.diagnostics.get("error").and_then(|e| e.as_str()).unwrap_or("failed");
                let _ = writeln!(s, "  {:<8} FAILED  {err}", m.name.as_str());
            }
        }
    }
    s
}

/// Writes the report if requested; all-failed reports exit non-zero but are
/// still emitted.
fn finish(cli: &Cli, report: MetricReport) -> CliResult<CommandOutput> {
    if let Some(path) = &cli.out {
        write_new_file(path, report.to_json_pretty().as_bytes(), cli.force)?;
    }
    let out = CommandOutput::ok(to_value(&report), human_report(&report));
    if report.all_failed() {
        let code = report
            .metrics
            .iter()
            .filter_map(entry_class)
            .map(exit_code)
            .min()
            .unwrap_or(EXIT_ESTIMATION);
        return Err(CliError {
            code,
            message: "every requested metric failed".into(),
            output: Some(Box::new(out)),
        });
    }
    Ok(out)
}

pub fn run_metrics(cli: &Cli, a: &MetricsArgs) -> CliResult<CommandOutput> {
    let names = MetricName::parse_list(&a.metrics)?;
    let mut pair = load_pair(&a.pair)?;
    pair.opts.seeds = vec![cli.seed.unwrap_or(0)];
    let report = evaluate_metrics(&pair.experiment, &pair.x, &pair.y, &names, &pair.opts);
    finish(cli, report)
}

fn parse_widths(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| CliError::config(format!("invalid hidden width `{p}`")))
        })
        .collect()
}

pub fn run_mi(cli: &Cli, a: &MiArgs) -> CliResult<CommandOutput> {
    let names = MetricName::parse_list(&a.estimator)?;
    if let Some(bad) = names.iter().find(|n| !MetricName::ESTIMATORS.contains(n)) {
        return Err(CliError::config(format!(
            "`{bad}` is not an MI estimator (valid: mine, lmi, ksg)"
        )));
    }
    let mut pair = load_pair(&a.pair)?;
    let opts = &mut pair.opts;
    let base = cli.seed.unwrap_or(opts.seeds.first().copied().unwrap_or(0));
    let count = a.seeds.unwrap_or(opts.seeds.len().max(1));
    if count == 0 {
        return Err(CliError::config("--seeds must be >= 1"));
    }
    opts.seeds = (0..count as u64).map(|i| base + i).collect();
    if let Some(s) = a.steps {
        opts.mine.steps = s;
        opts.lmi.steps = s;
    }
    if let Some(lr) = a.lr {
        opts.mine.lr = lr;
        opts.lmi.lr = lr;
    }
    if let Some(b) = a.batch_size {
        opts.mine.batch_size = b;
        opts.lmi.batch_size = b;
    }
    if let Some(h) = &a.hidden {
        let w = parse_widths(h)?;
        opts.mine.hidden = w.clone();
        opts.lmi.critic = w;
    }
    if let Some(k) = a.projection_dim {
        opts.lmi.projection_dim = k;
    }
    if let Some(k) = a.neighbors {
        opts.ksg.neighbors = k;
        opts.lmi.ksg_neighbors = k;
    }
    let report = evaluate_metrics(&pair.experiment, &pair.x, &pair.y, &names, &pair.opts);
    finish(cli, report)
}
