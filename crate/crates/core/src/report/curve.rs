use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featio::write_new_file;

pub const CURVE_HEADER: [&str; 4] = ["sweep_value", "metric", "mean", "std"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub sweep_value: f64,
    pub metric: String,
    pub mean: f64,
    /// Present only when at least two seeds contributed.
    pub std: Option<f64>,
}

/// Aggregated sweep results, e.g. final loss against neck depth.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub sweep_variable: String,
    rows: Vec<CurveRow>,
}

impl CurveTable {
    pub fn new(sweep_variable: impl Into<String>) -> Self {
        CurveTable {
            sweep_variable: sweep_variable.into(),
            rows: Vec::new(),
        }
    }

    /// Adds one cell from its per-seed values; empty inputs are skipped.
    pub fn push_samples(&mut self, sweep_value: f64, metric: &str, samples: &[f64]) {
        if samples.is_empty() {
            return;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let std = (samples.len() >= 2)
            .then(|| (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        self.rows.push(CurveRow {
            sweep_value,
            metric: metric.to_string(),
            mean,
            std,
        });
        self.rows.sort_by(|a, b| {
            a.sweep_value
                .total_cmp(&b.sweep_value)
                .then_with(|| a.metric.cmp(&b.metric))
        });
    }

    pub fn rows(&self) -> &[CurveRow] {
        &self.rows
    }

    pub fn mean_of(&self, sweep_value: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.sweep_value == sweep_value && r.metric == metric)
            .map(|r| r.mean)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CURVE_HEADER).expect("in-memory write");
        for r in &self.rows {
            let std = r.std.map(|s| s.to_string()).unwrap_or_default();
            w.write_record([r.sweep_value.to_string(), r.metric.clone(), r.mean.to_string(), std])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != CURVE_HEADER {
            return Err(Error::Format {
                field: "header".into(),
                message: format!("expected `{}`, got `{}`", CURVE_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let mut table = CurveTable::new("");
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse().map_err(|_| Error::Format {
                    field: CURVE_HEADER[i].into(),
                    message: format!("not a number: `{}`", &rec[i]),
                })
            };
            table.rows.push(CurveRow {
                sweep_value: num(0)?,
                metric: rec[1].to_string(),
                mean: num(2)?,
                std: if rec[3].is_empty() { None } else { Some(num(3)?) },
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        write_new_file(path, self.to_csv().as_bytes(), overwrite)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        field: "csv".into(),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_with_optional_std() {
        let mut t = CurveTable::new("layers");
        t.push_samples(6.0, "final_loss", &[0.5, 0.7]);
        t.push_samples(2.0, "final_loss", &[1.0]);
        t.push_samples(4.0, "final_loss", &[]);
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sweep_value,metric,mean,std");
        assert_eq!(lines[1], "2,final_loss,1,");
        assert!(lines[2].starts_with("6,final_loss,0.6"));
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn csv_round_trip() {
        let mut t = CurveTable::new("layers");
        t.push_samples(2.0, "a", &[0.1, 0.2, 0.4]);
        t.push_samples(4.0, "a", &[1.0 / 3.0]);
        let back = CurveTable::from_csv(&t.to_csv()).unwrap();
        assert_eq!(back.rows(), t.rows());
        assert!(CurveTable::from_csv("x,metric,mean,std\n").is_err());
    }
}
