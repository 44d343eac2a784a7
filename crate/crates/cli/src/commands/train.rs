use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use featprobe_core::neck::{load_checkpoint, save_checkpoint, Neck};
use featprobe_core::report::CurveTable;
use featprobe_core::train::{train_cross_neck, train_neck, RunRecord, TrainOutcome};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::{to_value, write_json};
use crate::args::{Cli, CrossArgs, SweepArgs, TrainArgs, TrainOverrides};
use crate::config::{apply_overrides, load_data, load_experiment, Loaded};
use crate::{CliError, CliResult, CommandOutput};

pub const RECORD_FILE: &str = "record.json";
pub const CHECKPOINT_FILE: &str = "neck.ckpt";
pub const CURVE_FILE: &str = "curve.csv";
pub const DEFAULT_RUNS_DIR: &str = "runs";

/// `<out>/<experiment>/<seed>`.
pub fn run_dir(out: &Path, experiment: &str, seed: u64) -> PathBuf {
    out.join(experiment).join(seed.to_string())
}

/// `<out>/<experiment>/L<layers>/<seed>`.
pub fn cell_dir(out: &Path, experiment: &str, layers: usize, seed: u64) -> PathBuf {
    out.join(experiment).join(format!("L{layers}")).join(seed.to_string())
}

fn runs_root(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS_DIR))
}

fn load(cli: &Cli, o: &TrainOverrides) -> CliResult<Loaded> {
    let mut loaded = load_experiment(&o.config)?;
    apply_overrides(&mut loaded.config, o, cli.seed);
    Ok(loaded)
}

/// Writes checkpoint and record (checkpoint path stored relative to the record).
fn persist(dir: &Path, outcome: &mut TrainOutcome, force: bool) -> CliResult<()> {
    save_checkpoint(&outcome.neck, &dir.join(CHECKPOINT_FILE), force)?;
    outcome.record.checkpoint = Some(CHECKPOINT_FILE.to_string());
    write_json(&dir.join(RECORD_FILE), &outcome.record, force)
}

fn summary(dir: &Path, record: &RunRecord) -> (serde_json::Value, String) {
    let fe = &record.final_eval;
    let value = json!({
        "experiment": record.experiment,
        "seed": record.seed,
        "neck_sequence": record.neck_sequence,
        "record": dir.join(RECORD_FILE),
        "checkpoint": dir.join(CHECKPOINT_FILE),
        "record_hash": record.record_hash(),
        "final_eval": to_value(fe),
        "final_loss": record.final_train_loss().map(to_value),
        "metrics": record.metrics.as_ref().map(to_value),
    });
    let mut human = String::new();
    let _ = writeln!(human, "{} [{}] seed {}", record.experiment, record.sequence_label(), record.seed);
    let _ = writeln!(
        human,
        "  held-out task MSE {:.6e}  distill MSE {:.6e}  train task MSE {:.6e}",
        fe.heldout_task, fe.heldout_distill, fe.train_task
    );
    let _ = writeln!(human, "  record {}", dir.join(RECORD_FILE).display());
    (value, human)
}

pub fn run_train(cli: &Cli, a: &TrainArgs) -> CliResult<CommandOutput> {
    let mut loaded = load(cli, &a.overrides)?;
    if let Some(l) = a.layers {
        loaded.config.neck.layers = l;
    }
    let data = load_data(&loaded)?;
    let cfg = &loaded.config;
    let neck_cfg = cfg.neck.resolve(
        data.encoder.dim(),
        data.expert.dim(),
        data.encoder.tokens().unwrap_or(1),
        cfg.train.seed,
    )?;
    let mut outcome = train_neck(&cfg.train, &neck_cfg, &data, &cfg.task)?;
    let dir = run_dir(&runs_root(cli), loaded.experiment(), cfg.train.seed);
    persist(&dir, &mut outcome, cli.force)?;
    let (value, human) = summary(&dir, &outcome.record);
    Ok(CommandOutput::ok(value, human))
}

pub fn run_cross(cli: &Cli, a: &CrossArgs) -> CliResult<CommandOutput> {
    let mut loaded = load(cli, &a.overrides)?;
    if let Some(l) = a.layers {
        loaded.config.neck.layers = l;
    }
    let cross = loaded.config.cross.clone().unwrap_or(crate::config::CrossSection {
        neck1: None,
        upstream_task: "task1".into(),
    });
    let neck1_path = match (&a.neck1, &cross.neck1) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => loaded.resolve(p),
        (None, None) => return Err(CliError::config("cross needs a neck1 checkpoint (--neck1 or cross.neck1)")),
    };
    let neck1: Neck = load_checkpoint(&neck1_path)?;
    let data = load_data(&loaded)?;
    let cfg = &loaded.config;
    let c1 = neck1.config();
    let neck2_cfg = cfg
        .neck
        .resolve(c1.d_out, data.expert.dim(), c1.tokens, cfg.train.seed)
        .map_err(|e| CliError::config(format!("neck2 does not fit neck1: {}", e.message)))?;
    let mut outcome = train_cross_neck(&neck1, &cross.upstream_task, &cfg.train, &neck2_cfg, &data, &cfg.task)?;
    let dir = run_dir(&runs_root(cli), loaded.experiment(), cfg.train.seed);
    persist(&dir, &mut outcome, cli.force)?;
    let (value, human) = summary(&dir, &outcome.record);
    Ok(CommandOutput::ok(value, human))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub layers: usize,
    pub seed: u64,
    pub status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    code: i32,
}

fn parse_layers(s: &str) -> CliResult<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&l| l > 0)
                .ok_or_else(|| CliError::config(format!("invalid layer count `{p}`")))
        })
        .collect::<CliResult<_>>()?;
    if v.is_empty() {
        return Err(CliError::config("--layers needs at least one value"));
    }
    Ok(v)
}

fn run_cell(cli: &Cli, loaded: &Loaded, data: &featprobe_core::train::TrainData, layers: usize, seed: u64) -> CliResult<(PathBuf, RunRecord)> {
    let mut cfg = loaded.config.clone();
    cfg.neck.layers = layers;
    cfg.neck.heads = None;
    cfg.neck.seed = None;
    cfg.train.seed = seed;
    let neck_cfg = cfg.neck.resolve(
        data.encoder.dim(),
        data.expert.dim(),
        data.encoder.tokens().unwrap_or(1),
        seed,
    )?;
    let mut outcome = train_neck(&cfg.train, &neck_cfg, data, &cfg.task)?;
    let dir = cell_dir(&runs_root(cli), loaded.experiment(), layers, seed);
    persist(&dir, &mut outcome, cli.force)?;
    // Relative to the experiment directory so sweep.json is location-independent.
    let rel = cell_dir(Path::new(""), "", layers, seed).join(RECORD_FILE);
    Ok((rel, outcome.record))
}

pub fn run_sweep(cli: &Cli, a: &SweepArgs) -> CliResult<CommandOutput> {
    let layers = parse_layers(&a.layers)?;
    if a.seeds == 0 {
        return Err(CliError::config("--seeds must be >= 1"));
    }
    let loaded = load(cli, &a.overrides)?;
    let data = load_data(&loaded)?;
    let base = loaded.config.train.seed;
    let grid: Vec<(usize, u64)> = layers
        .iter()
        .flat_map(|&l| (0..a.seeds as u64).map(move |s| (l, base + s)))
        .collect();

    let cells: Vec<SweepCell> = grid
        .par_iter()
        .map(|&(l, s)| match run_cell(cli, &loaded, &data, l, s) {
            Ok((path, record)) => SweepCell {
                layers: l,
                seed: s,
                status: "ok",
                final_loss: Some(record.final_eval.heldout_task),
                train_loss: Some(record.final_eval.train_task),
                record: Some(path),
                error: None,
                code: 0,
            },
            Err(e) => SweepCell {
                layers: l,
                seed: s,
                status: "failed",
                final_loss: None,
                train_loss: None,
                record: None,
                error: Some(e.message),
                code: e.code,
            },
        })
        .collect();

    let mut table = CurveTable::new("layers");
    for &l in &layers {
        let done: Vec<&SweepCell> = cells.iter().filter(|c| c.layers == l && c.status == "ok").collect();
        let final_losses: Vec<f64> = done.iter().filter_map(|c| c.final_loss).collect();
        let train_losses: Vec<f64> = done.iter().filter_map(|c| c.train_loss).collect();
        table.push_samples(l as f64, "final_loss", &final_losses);
        table.push_samples(l as f64, "train_loss", &train_losses);
    }
    let root = runs_root(cli).join(loaded.experiment());
    let completed = cells.iter().filter(|c| c.status == "ok").count();
    let mut human = String::new();
    for c in &cells {
        match c.final_loss {
            Some(v) => {
                let _ = writeln!(human, "L{} seed {}: held-out loss {v:.6e}", c.layers, c.seed);
            }
            None => {
                let _ = writeln!(human, "L{} seed {}: FAILED {}", c.layers, c.seed, c.error.as_deref().unwrap_or(""));
            }
        }
    }
    if completed == 0 {
        let code = cells.iter().map(|c| c.code).min().unwrap_or(crate::EXIT_TRAINING);
        return Err(CliError {
            code,
            message: "no sweep cell completed".into(),
            output: Some(Box::new(CommandOutput::ok(json!({"cells": cells}), human))),
        });
    }
    let csv_path = root.join(CURVE_FILE);
    table.save(&csv_path, cli.force)?;
    let summary = json!({
        "experiment": loaded.experiment(),
        "sweep_variable": "layers",
        "curve": CURVE_FILE,
        "rows": table.rows(),
        "cells": cells,
    });
    write_json(&root.join("sweep.json"), &summary, cli.force)?;
    let _ = write!(human, "{}", table.to_csv());
    let _ = writeln!(human, "curve {}", csv_path.display());
    Ok(CommandOutput::ok(summary, human))
}
