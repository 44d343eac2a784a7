//! Mutual-information estimators: MINE (Donsker–Varadhan), LMI (learned
//! low-dimensional projections followed by a latent estimator) and KSG.
//!
//! All values are in nats. Neural estimators standardize each input
//! dimension with training-split statistics, train on 80% of the rows and
//! report on the held-out 20%.

mod dv;
mod ksg;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::metrics::summarize_matrix;
use crate::digest::config_hash;
use crate::error::{Error, Result};
use crate::rng;

pub use dv::DV_DIVERGENCE;
pub use ksg::{ksg, ksg_estimate, KsgConfig, KSG_MAX_DIM, KSG_MIN_SAMPLES};

use dv::{train_dv, Critic, DvSettings};

/// Fraction of rows held out for evaluation.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub estimator: String,
    /// `max(0, raw)`.
    pub value: f64,
    pub raw: f64,
    /// Held-out DV values, one per evaluation.
    pub curve: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl MiEstimate {
    pub fn from_raw(estimator: &str, raw: f64, curve: Vec<f64>, config_hash: String, seed: u64) -> Self {
        MiEstimate {
            estimator: estimator.to_string(),
            value: raw.max(0.0),
            raw,
            curve,
            config_hash,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_rate: f64,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: vec![128, 128],
            lr: 5e-4,
            batch_size: 256,
            steps: 2000,
            ema_rate: 0.99,
            eval_interval: 100,
            eval_batches: 10,
            seed: 0,
        }
    }
}

impl MineConfig {
    fn settings(&self) -> DvSettings {
        DvSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            ema_rate: self.ema_rate,
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentEstimator {
    Ksg,
    Dv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmiConfig {
    pub projection_dim: usize,
    pub projection: ProjectionKind,
    pub critic: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_rate: f64,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub latent_estimator: LatentEstimator,
    pub ksg_neighbors: usize,
    pub seed: u64,
}

impl Default for LmiConfig {
    fn default() -> Self {
        LmiConfig {
            projection_dim: 8,
            projection: ProjectionKind::Linear,
            critic: vec![64, 64],
            lr: 1e-3,
            batch_size: 256,
            steps: 2000,
            ema_rate: 0.99,
            eval_interval: 100,
            eval_batches: 10,
            latent_estimator: LatentEstimator::Ksg,
            ksg_neighbors: 5,
            seed: 0,
        }
    }
}

impl LmiConfig {
    fn settings(&self) -> DvSettings {
        DvSettings {
            lr: self.lr,
            batch_size: self.batch_size,
            steps: self.steps,
            ema_rate: self.ema_rate,
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
            seed: self.seed,
        }
    }
}

/// Per-dimension z-scoring; zero-variance dimensions are only centered.
#[derive(Clone, Debug)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Tensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / (n.max(2) - 1) as f64).sqrt();
                if sd > 0.0 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let d = x.cols();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) * self.scale[j];
        }
        out
    }
}

/// Relative eigenvalue floor below which a projected direction counts as null.
const WHITEN_RANK_TOL: f64 = 1e-8;

/// Projects centered rows onto the principal axes with non-null variance and
/// scales each axis to unit variance. Invertible on the data's span, so MI is
/// unchanged while the latent estimator sees only the non-degenerate axes.
pub fn whiten(x: &Tensor) -> Result<Tensor> {
    let s = summarize_matrix(x)?;
    let eig = SymmetricEigen::new(s.cov.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let mut axes: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| max > 0.0 && eig.eigenvalues[i] > WHITEN_RANK_TOL * max)
        .collect();
    axes.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let (n, d, r) = (x.rows(), x.cols(), axes.len());
    if r == 0 {
        return Err(Error::numeric("whiten", "projected data has zero variance"));
    }
    let mut out = Vec::with_capacity(n * r);
    for row in 0..n {
        let v = x.row(row);
        for &a in &axes {
            let scale = 1.0 / eig.eigenvalues[a].sqrt();
            let dot: f64 = (0..d).map(|j| (v[j] - s.mean[j]) * eig.eigenvectors[(j, a)]).sum();
            out.push(dot * scale);
        }
    }
    Tensor::new(vec![n, r], out)
}

/// Seeded 80/20 row split.
pub fn holdout_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = rng::permutation(&mut rng::seeded(rng::derive_seed(seed, "holdout")), n);
    let eval = ((n as f64) * HOLDOUT_FRACTION).round() as usize;
    let (a, b) = perm.split_at(n - eval);
    (a.to_vec(), b.to_vec())
}

struct Prepared {
    train: (Tensor, Tensor),
    eval: (Tensor, Tensor),
}

fn prepare(x: &Tensor, y: &Tensor, seed: u64, op: &'static str) -> Result<Prepared> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (tr, ev) = holdout_split(x.rows(), seed);
    let (xt, yt) = (x.select_rows(&tr), y.select_rows(&tr));
    let (sx, sy) = (Standardizer::fit(&xt), Standardizer::fit(&yt));
    Ok(Prepared {
        train: (sx.apply(&xt), sy.apply(&yt)),
        eval: (sx.apply(&x.select_rows(&ev)), sy.apply(&y.select_rows(&ev))),
    })
}

/// MINE: an MLP statistics network trained on the DV bound.
pub fn mine_estimate(x: &Tensor, y: &Tensor, cfg: &MineConfig) -> Result<MiEstimate> {
    if x.rows() < 4 * cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "MINE needs N >= 4 * batch ({}), got {}",
            4 * cfg.batch_size,
            x.rows()
        )));
    }
    let data = prepare(x, y, cfg.seed, "mine_estimate")?;
    let critic = Critic::new(x.cols(), y.cols(), None, &cfg.hidden, cfg.seed)?;
    let out = train_dv(
        critic,
        (&data.train.0, &data.train.1),
        (&data.eval.0, &data.eval.1),
        &cfg.settings(),
    )?;
    Ok(MiEstimate::from_raw("mine", out.final_dv, out.curve, config_hash(cfg), cfg.seed))
}

/// LMI: linear projections to `projection_dim` trained jointly with a DV
/// critic, then the latent estimator on the projected held-out rows.
pub fn lmi_estimate(x: &Tensor, y: &Tensor, cfg: &LmiConfig) -> Result<MiEstimate> {
    let k = cfg.projection_dim;
    if k == 0 || k > x.cols().min(y.cols()) {
        return Err(Error::Config(format!(
            "projection dim must be in 1..={}, got {k}",
            x.cols().min(y.cols())
        )));
    }
    if cfg.latent_estimator == LatentEstimator::Ksg && 2 * k > KSG_MAX_DIM {
        return Err(Error::Config(format!(
            "KSG latent stage needs 2 * projection dim <= {KSG_MAX_DIM}, got {}",
            2 * k
        )));
    }
    if x.rows() < 4 * cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "LMI needs N >= 4 * batch ({}), got {}",
            4 * cfg.batch_size,
            x.rows()
        )));
    }
    let data = prepare(x, y, cfg.seed, "lmi_estimate")?;
    let critic = Critic::new(x.cols(), y.cols(), Some(k), &cfg.critic, cfg.seed)?;
    let out = train_dv(
        critic,
        (&data.train.0, &data.train.1),
        (&data.eval.0, &data.eval.1),
        &cfg.settings(),
    )?;
    let raw = match cfg.latent_estimator {
        LatentEstimator::Dv => out.final_dv,
        LatentEstimator::Ksg => {
            let (px, py) = out.critic.project(&data.eval.0, &data.eval.1)?;
            ksg_estimate(&whiten(&px)?, &whiten(&py)?, cfg.ksg_neighbors)?
        }
    };
    Ok(MiEstimate::from_raw("lmi", raw, out.curve, config_hash(cfg), cfg.seed))
}
