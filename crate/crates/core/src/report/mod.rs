//! Metric reports and sweep curve tables.

mod curve;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::autodiff::Tensor;
use crate::digest::config_hash;
use crate::error::{Error, ErrorClass, Result};
use crate::featio::{FeatureSet, TokenPooling};
use crate::metrics::{
    cosine_similarity_paired, frechet_distance, kernel_distance_matrix, mi_1d_gauss,
    summarize_matrix, KernelConfig,
};
use crate::mi::{ksg, lmi_estimate, mine_estimate, KsgConfig, LmiConfig, MiEstimate, MineConfig};
use crate::rng::GAUSSIAN_SAMPLER;

pub use curve::{CurveRow, CurveTable, CURVE_HEADER};

pub const SCHEMA_VERSION: u32 = 1;
pub const METRIC_REPORT_SCHEMA: &str = include_str!("../../schema/metric_report.schema.json");
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Fd,
    KdRbf,
    KdPoly,
    Cos,
    Mi1d,
    Mine,
    Lmi,
    Ksg,
}

impl MetricName {
    pub const ALL: [MetricName; 8] = [
        MetricName::Fd,
        MetricName::KdRbf,
        MetricName::KdPoly,
        MetricName::Cos,
        MetricName::Mi1d,
        MetricName::Mine,
        MetricName::Lmi,
        MetricName::Ksg,
    ];
    /// Closed-form and kernel metrics.
    pub const DISTRIBUTIONAL: [MetricName; 5] = [
        MetricName::Fd,
        MetricName::KdRbf,
        MetricName::KdPoly,
        MetricName::Cos,
        MetricName::Mi1d,
    ];
    pub const ESTIMATORS: [MetricName; 3] = [MetricName::Mine, MetricName::Lmi, MetricName::Ksg];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricName::Fd => "fd",
            MetricName::KdRbf => "kd_rbf",
            MetricName::KdPoly => "kd_poly",
            MetricName::Cos => "cos",
            MetricName::Mi1d => "mi1d",
            MetricName::Mine => "mine",
            MetricName::Lmi => "lmi",
            MetricName::Ksg => "ksg",
        }
    }

    pub fn units(self) -> &'static str {
        match self {
            MetricName::Fd => "squared feature units",
            MetricName::KdRbf | MetricName::KdPoly => "squared MMD",
            MetricName::Cos => "cosine",
            MetricName::Mi1d | MetricName::Mine | MetricName::Lmi | MetricName::Ksg => "nats",
        }
    }

    fn uses_seeds(self) -> bool {
        matches!(self, MetricName::Mine | MetricName::Lmi)
    }

    pub fn valid_names() -> String {
        MetricName::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", ")
    }

    /// Parses a comma-separated list, rejecting unknown and repeated names.
    pub fn parse_list(list: &str) -> Result<Vec<MetricName>> {
        let mut out = Vec::new();
        for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: MetricName = part.parse()?;
            if out.contains(&m) {
                return Err(Error::Config(format!("metric `{part}` requested twice")));
            }
            out.push(m);
        }
        if out.is_empty() {
            return Err(Error::Config(format!(
                "no metrics requested (valid: {})",
                MetricName::valid_names()
            )));
        }
        Ok(out)
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricName::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown metric `{s}` (valid: {})",
                    MetricName::valid_names()
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub name: MetricName,
    pub status: Status,
    /// Mean over seeds for seeded estimators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    /// Sample standard deviation, present only with two or more seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_seed: Vec<f64>,
    pub units: String,
    pub diagnostics: Map<String, Value>,
}

impl MetricEntry {
    pub fn ok(name: MetricName, value: f64, diagnostics: Map<String, Value>) -> Self {
        MetricEntry {
            name,
            status: Status::Ok,
            value: Some(value),
            std: None,
            per_seed: Vec::new(),
            units: name.units().to_string(),
            diagnostics,
        }
    }

    pub fn failed(name: MetricName, err: &Error) -> Self {
        let mut diagnostics = Map::new();
        diagnostics.insert("error".into(), json!(err.to_string()));
        diagnostics.insert("class".into(), json!(format!("{:?}", err.class()).to_lowercase()));
        if let Error::Estimation { curve, .. } = err {
            diagnostics.insert("curve".into(), json!(curve));
        }
        MetricEntry {
            name,
            status: Status::Failed,
            value: None,
            std: None,
            per_seed: Vec::new(),
            units: name.units().to_string(),
            diagnostics,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub metrics: Vec<MetricEntry>,
    pub config_hash: String,
    pub toolkit_version: String,
    pub gaussian_sampler: String,
    /// Recorded only on request so that reports stay bit-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
}

impl MetricReport {
    pub fn get(&self, name: MetricName) -> Option<&MetricEntry> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn value(&self, name: MetricName) -> Option<f64> {
        self.get(name).and_then(|m| m.value)
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn all_failed(&self) -> bool {
        !self.metrics.is_empty() && self.metrics.iter().all(|m| !m.is_ok())
    }

    /// Structural checks that mirror the shipped schema.
    pub fn check_invariants(&self, requested: &[MetricName]) -> Result<()> {
        for name in requested {
            let count = self.metrics.iter().filter(|m| m.name == *name).count();
            if count != 1 {
                return Err(Error::Invariant(format!("metric `{name}` appears {count} times")));
            }
        }
        for m in &self.metrics {
            match m.status {
                Status::Ok if m.value.is_none() => {
                    return Err(Error::Invariant(format!("ok metric `{}` has no value", m.name)))
                }
                Status::Failed if !m.diagnostics.contains_key("error") => {
                    return Err(Error::Invariant(format!("failed metric `{}` has no diagnostics", m.name)))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Everything the metric suite needs besides the two feature sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub pooling: TokenPooling,
    pub kd_rbf: KernelConfig,
    pub kd_poly: KernelConfig,
    pub mine: MineConfig,
    pub lmi: LmiConfig,
    pub ksg: KsgConfig,
    /// Seeds for the neural estimators; each seed is one independent run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            pooling: TokenPooling::default(),
            kd_rbf: KernelConfig::rbf_median(),
            kd_poly: KernelConfig::poly_default(),
            mine: MineConfig::default(),
            lmi: LmiConfig::default(),
            ksg: KsgConfig::default(),
            seeds: default_seeds(),
        }
    }
}

fn estimate_diagnostics(e: &MiEstimate) -> Value {
    json!({"raw": e.raw, "seed": e.seed, "config_hash": e.config_hash, "curve": e.curve})
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() >= 2)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

fn paired(x: &FeatureSet, y: &FeatureSet) -> Result<()> {
    x.check_paired(y)?;
    if x.dim() != y.dim() {
        return Err(Error::Shape {
            op: "paired metric",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

fn compute_single(name: MetricName, x: &FeatureSet, y: &FeatureSet, xm: &Tensor, ym: &Tensor, opts: &MetricOptions) -> Result<MetricEntry> {
    let mut diag = Map::new();
    let value = match name {
        MetricName::Fd => {
            let (a, b) = (summarize_matrix(xm)?, summarize_matrix(ym)?);
            frechet_distance(&a, &b)?
        }
        MetricName::KdRbf => kernel_distance_matrix(xm, ym, &opts.kd_rbf)?,
        MetricName::KdPoly => kernel_distance_matrix(xm, ym, &opts.kd_poly)?,
        MetricName::Cos => {
            paired(x, y)?;
            let r = cosine_similarity_paired(xm, ym)?;
            diag.insert("zero_rows".into(), json!(r.zero_rows));
            r.value
        }
        MetricName::Mi1d => {
            paired(x, y)?;
            let r = mi_1d_gauss(xm, ym)?;
            diag.insert("per_dim".into(), json!(r.per_dim));
            diag.insert("zero_variance_dims".into(), json!(r.zero_variance_dims));
            r.total
        }
        MetricName::Ksg => {
            x.check_paired(y)?;
            let e = ksg(xm, ym, &opts.ksg)?;
            diag.insert("raw".into(), json!(e.raw));
            diag.insert("config_hash".into(), json!(e.config_hash));
            e.value
        }
        MetricName::Mine | MetricName::Lmi => unreachable!("seeded estimators handled separately"),
    };
    Ok(MetricEntry::ok(name, value, diag))
}

fn compute_seeded(name: MetricName, x: &FeatureSet, y: &FeatureSet, xm: &Tensor, ym: &Tensor, opts: &MetricOptions) -> Result<MetricEntry> {
    x.check_paired(y)?;
    let mut runs = Vec::with_capacity(opts.seeds.len());
    for &seed in &opts.seeds {
        let e = match name {
            MetricName::Mine => mine_estimate(xm, ym, &MineConfig { seed, ..opts.mine.clone() })?,
            _ => lmi_estimate(xm, ym, &LmiConfig { seed, ..opts.lmi.clone() })?,
        };
        runs.push(e);
    }
    let values: Vec<f64> = runs.iter().map(|e| e.value).collect();
    let (mean, std) = mean_std(&values);
    let mut diag = Map::new();
    diag.insert("runs".into(), Value::Array(runs.iter().map(estimate_diagnostics).collect()));
    let mut entry = MetricEntry::ok(name, mean, diag);
    if values.len() >= 2 {
        entry.std = std;
        entry.per_seed = values;
    }
    Ok(entry)
}

/// One entry per requested metric; failures are recorded, never propagated.
pub fn compute_metric(name: MetricName, x: &FeatureSet, y: &FeatureSet, opts: &MetricOptions) -> MetricEntry {
    let (xm, ym) = (x.matrix(opts.pooling), y.matrix(opts.pooling));
    let result = if name.uses_seeds() {
        if opts.seeds.is_empty() {
            Err(Error::Config("at least one seed is required".into()))
        } else {
            compute_seeded(name, x, y, &xm, &ym, opts)
        }
    } else {
        compute_single(name, x, y, &xm, &ym, opts)
    };
    result.unwrap_or_else(|e| MetricEntry::failed(name, &e))
}

pub fn evaluate_metrics(
    experiment: &str,
    x: &FeatureSet,
    y: &FeatureSet,
    names: &[MetricName],
    opts: &MetricOptions,
) -> MetricReport {
    let metrics = names.iter().map(|&n| compute_metric(n, x, y, opts)).collect();
    MetricReport {
        schema_version: SCHEMA_VERSION,
        experiment: experiment.to_string(),
        seeds: opts.seeds.clone(),
        metrics,
        config_hash: config_hash(&(names, opts)),
        toolkit_version: TOOLKIT_VERSION.to_string(),
        gaussian_sampler: GAUSSIAN_SAMPLER.to_string(),
        wall_clock_secs: None,
    }
}

/// Exit-code class of a failed report entry, if any.
pub fn entry_class(entry: &MetricEntry) -> Option<ErrorClass> {
    let class = entry.diagnostics.get("class")?.as_str()?;
    Some(match class {
        "config" => ErrorClass::Config,
        "io" => ErrorClass::Io,
        "training" => ErrorClass::Training,
        _ => ErrorClass::Estimation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::Role;
    use crate::rng;

    fn features(n: usize, d: usize, seed: u64) -> FeatureSet {
        let mut r = rng::seeded(seed);
        FeatureSet::from_matrix(n, d, rng::normal_vec(&mut r, n * d), Role::Adapted, "x").unwrap()
    }

    #[test]
    fn names_round_trip() {
        for m in MetricName::ALL {
            assert_eq!(m.as_str().parse::<MetricName>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), json!(m.as_str()));
        }
        let err = "fid".parse::<MetricName>().unwrap_err();
        assert!(err.to_string().contains("kd_rbf"));
        assert!(MetricName::parse_list("fd,fd").is_err());
        assert_eq!(MetricName::parse_list("fd, cos").unwrap(), vec![MetricName::Fd, MetricName::Cos]);
    }

    #[test]
    fn identical_inputs() {
        let x = features(200, 3, 1);
        let r = evaluate_metrics("e", &x, &x.clone(), &MetricName::DISTRIBUTIONAL, &MetricOptions::default());
        r.check_invariants(&MetricName::DISTRIBUTIONAL).unwrap();
        assert_eq!(r.value(MetricName::Fd), Some(0.0));
        assert!((r.value(MetricName::Cos).unwrap() - 1.0).abs() < 1e-12);
        assert!(r.value(MetricName::KdRbf).unwrap().abs() < 1e-2);
    }

    #[test]
    fn failures_are_recorded_not_raised() {
        let x = features(200, 3, 1);
        let y = features(150, 3, 2);
        let r = evaluate_metrics("e", &x, &y, &[MetricName::Fd, MetricName::Cos, MetricName::Ksg], &MetricOptions::default());
        r.check_invariants(&[MetricName::Fd, MetricName::Cos, MetricName::Ksg]).unwrap();
        assert!(r.get(MetricName::Fd).unwrap().is_ok());
        let cos = r.get(MetricName::Cos).unwrap();
        assert_eq!(cos.status, Status::Failed);
        assert!(cos.value.is_none());
        assert!(!r.all_failed());
    }

    #[test]
    fn failed_entry_carries_curve() {
        let e = Error::Estimation { message: "diverged".into(), curve: vec![1.0, 60.0] };
        let m = MetricEntry::failed(MetricName::Mine, &e);
        assert_eq!(m.diagnostics["curve"], json!([1.0, 60.0]));
        assert_eq!(entry_class(&m), Some(ErrorClass::Estimation));
    }

    #[test]
    fn mean_std_contract() {
        assert_eq!(mean_std(&[2.0]), (2.0, None));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn report_is_deterministic() {
        let x = features(100, 2, 3);
        let y = features(100, 2, 4);
        let a = evaluate_metrics("e", &x, &y, &MetricName::DISTRIBUTIONAL, &MetricOptions::default());
        let b = evaluate_metrics("e", &x, &y, &MetricName::DISTRIBUTIONAL, &MetricOptions::default());
        assert_eq!(a.to_json_pretty(), b.to_json_pretty());
    }
}
