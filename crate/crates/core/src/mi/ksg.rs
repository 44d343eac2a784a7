use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::MiEstimate;
use crate::autodiff::Tensor;
use crate::digest::config_hash;
use crate::error::{Error, Result};

/// Largest combined `D_X + D_Y` accepted; neighbor counts degrade beyond it.
pub const KSG_MAX_DIM: usize = 16;
pub const KSG_MIN_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsgConfig {
    pub neighbors: usize,
}

impl Default for KsgConfig {
    fn default() -> Self {
        KsgConfig { neighbors: 5 }
    }
}

/// `psi(1..=n)` via `psi(m + 1) = psi(m) + 1/m`.
fn digamma_table(n: usize) -> Vec<f64> {
    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    let mut t = vec![0.0; n + 1];
    if n >= 1 {
        t[1] = -EULER_GAMMA;
    }
    for m in 1..n {
        t[m + 1] = t[m] + 1.0 / m as f64;
    }
    t
}

fn chebyshev(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (p, q)| acc.max((p - q).abs()))
}

/// Kraskov estimator, first variant: max-norm joint neighborhoods, strict
/// marginal counts. Returns the unclamped value in nats.
pub fn ksg_estimate(x: &Tensor, y: &Tensor, neighbors: usize) -> Result<f64> {
    let (n, dx, dy) = (x.rows(), x.cols(), y.cols());
    if y.rows() != n {
        return Err(Error::Shape {
            op: "ksg_estimate",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if dx + dy > KSG_MAX_DIM {
        return Err(Error::Usage(format!(
            "KSG is limited to combined dimension <= {KSG_MAX_DIM}, got {}",
            dx + dy
        )));
    }
    if n < KSG_MIN_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "KSG needs N >= {KSG_MIN_SAMPLES}, got {n}"
        )));
    }
    if neighbors == 0 || neighbors >= n {
        return Err(Error::Config(format!(
            "KSG neighbor count must be in 1..{n}, got {neighbors}"
        )));
    }
    let psi = digamma_table(n);
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (xi, yi) = (x.row(i), y.row(i));
            let mut dist_x = Vec::with_capacity(n - 1);
            let mut dist_y = Vec::with_capacity(n - 1);
            let mut joint: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
            for j in (0..n).filter(|&j| j != i) {
                let (ax, ay) = (chebyshev(xi, x.row(j)), chebyshev(yi, y.row(j)));
                dist_x.push(ax);
                dist_y.push(ay);
                joint.push((ax.max(ay), j));
            }
            let kth = neighbors - 1;
            joint.select_nth_unstable_by(kth, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let eps = joint[kth].0;
            let nx = dist_x.iter().filter(|&&d| d < eps).count();
            let ny = dist_y.iter().filter(|&&d| d < eps).count();
            psi[nx + 1] + psi[ny + 1]
        })
        .collect();
    let mean = terms.iter().sum::<f64>() / n as f64;
    Ok(psi[neighbors] + psi[n] - mean)
}

pub fn ksg(x: &Tensor, y: &Tensor, cfg: &KsgConfig) -> Result<MiEstimate> {
    let raw = ksg_estimate(x, y, cfg.neighbors)?;
    Ok(MiEstimate::from_raw("ksg", raw, Vec::new(), config_hash(cfg), 0))
}
