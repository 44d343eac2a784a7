//! Synthetic pipelines with analytically known statistics.
//!
//! * Gaussian pairs: joint samples from `N(0, Sigma)` split into X and Y
//!   blocks, with `I(X;Y) = 1/2 ln(det Sxx det Syy / det S)`.
//! * Task pipelines: latent `z ~ N(0, I_m)`, encoder tokens
//!   `tanh(gain * A_t z)`, and two expert targets `B_i z + noise` whose row
//!   spaces share `ceil(overlap * rank)` orthonormal directions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Dtype, FeatureSet, Role};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Joint covariance of an `(X, Y)` pair, `(dx + dy)^2` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointCovariance {
    pub x_dim: usize,
    pub y_dim: usize,
    pub matrix: Vec<f64>,
}

impl JointCovariance {
    pub fn new(x_dim: usize, y_dim: usize, matrix: Vec<f64>) -> Result<Self> {
        let d = x_dim + y_dim;
        if x_dim == 0 || y_dim == 0 || matrix.len() != d * d {
            return Err(Error::Spec(format!(
                "joint covariance for dims ({x_dim}, {y_dim}) needs {} entries, got {}",
                d * d,
                matrix.len()
            )));
        }
        for i in 0..d {
            for j in 0..i {
                if (matrix[i * d + j] - matrix[j * d + i]).abs() > 1e-12 {
                    return Err(Error::Spec(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(JointCovariance {
            x_dim,
            y_dim,
            matrix,
        })
    }

    pub fn independent(x_dim: usize, y_dim: usize) -> Self {
        let d = x_dim + y_dim;
        let m = DMatrix::<f64>::identity(d, d);
        JointCovariance {
            x_dim,
            y_dim,
            matrix: row_major(&m),
        }
    }

    /// Unit-variance 1-D pair with correlation `rho`.
    pub fn correlated(rho: f64) -> Result<Self> {
        JointCovariance::new(1, 1, vec![1.0, rho, rho, 1.0])
    }

    /// Unit marginals with `min(dx, dy)` equal canonical correlations chosen
    /// so that the pair carries exactly `mi` nats.
    pub fn with_target_mi(x_dim: usize, y_dim: usize, mi: f64) -> Result<Self> {
        if mi < 0.0 || !mi.is_finite() {
            return Err(Error::Spec(format!("target MI must be finite and >= 0, got {mi}")));
        }
        let k = x_dim.min(y_dim);
        let rho = (1.0 - (-2.0 * mi / k as f64).exp()).sqrt();
        let mut c = JointCovariance::independent(x_dim, y_dim);
        let d = x_dim + y_dim;
        for i in 0..k {
            c.matrix[i * d + x_dim + i] = rho;
            c.matrix[(x_dim + i) * d + i] = rho;
        }
        Ok(c)
    }

    fn dim(&self) -> usize {
        self.x_dim + self.y_dim
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.matrix)
    }

    fn cholesky(m: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
        m.cholesky()
            .ok_or_else(|| Error::Spec(format!("{what} is not positive definite (Cholesky failed)")))
    }

    /// `1/2 ln(det Sxx det Syy / det S)` in nats.
    pub fn true_mi(&self) -> Result<f64> {
        let full = self.to_matrix();
        let (dx, dy) = (self.x_dim, self.y_dim);
        let log_det = |m: DMatrix<f64>, what: &str| -> Result<f64> {
            let l = Self::cholesky(m, what)?;
            Ok(2.0 * l.l().diagonal().iter().map(|v| v.ln()).sum::<f64>())
        };
        let sxx = full.view((0, 0), (dx, dx)).into_owned();
        let syy = full.view((dx, dx), (dy, dy)).into_owned();
        let mi = 0.5 * (log_det(sxx, "Sigma_XX")? + log_det(syy, "Sigma_YY")? - log_det(full, "Sigma")?);
        Ok(mi.max(0.0))
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
    out
}

fn default_gain() -> f64 {
    1.0
}

/// Generator description shared by the Gaussian-pair and task-pipeline
/// generators. Pair generation only reads `joint_covariance` and `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub latent_dim: usize,
    pub tokens: usize,
    pub encoder_dim: usize,
    pub expert_dim: usize,
    /// Rank of each task basis `B_i`.
    pub task_rank: usize,
    /// Fraction of `B_2`'s row space shared with `B_1`, in `[0, 1]`.
    pub overlap: f64,
    pub noise: f64,
    /// Pre-activation scale of the encoder; larger values saturate `tanh`.
    #[serde(default = "default_gain")]
    pub encoder_gain: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_covariance: Option<JointCovariance>,
    pub seed: u64,
}

impl SynthSpec {
    pub fn gaussian_pair(cov: JointCovariance, seed: u64) -> Self {
        SynthSpec {
            latent_dim: cov.x_dim + cov.y_dim,
            tokens: 1,
            encoder_dim: cov.x_dim,
            expert_dim: cov.y_dim,
            task_rank: 1,
            overlap: 0.0,
            noise: 0.0,
            encoder_gain: 1.0,
            joint_covariance: Some(cov),
            seed,
        }
    }

    pub fn pipeline(
        latent_dim: usize,
        tokens: usize,
        encoder_dim: usize,
        expert_dim: usize,
        task_rank: usize,
        overlap: f64,
        noise: f64,
        seed: u64,
    ) -> Self {
        SynthSpec {
            latent_dim,
            tokens,
            encoder_dim,
            expert_dim,
            task_rank,
            overlap,
            noise,
            encoder_gain: 1.0,
            joint_covariance: None,
            seed,
        }
    }

    /// Number of basis directions the two tasks share.
    pub fn shared_rank(&self) -> usize {
        (self.overlap * self.task_rank as f64 - 1e-12).ceil().max(0.0) as usize
    }

    pub fn validate_pipeline(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Spec(format!("overlap must lie in [0, 1], got {}", self.overlap)));
        }
        let dims = [
            self.latent_dim,
            self.tokens,
            self.encoder_dim,
            self.expert_dim,
            self.task_rank,
        ];
        if dims.contains(&0) {
            return Err(Error::Spec("all synthetic dimensions must be >= 1".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() || !self.encoder_gain.is_finite() {
            return Err(Error::Spec("noise must be finite and >= 0".into()));
        }
        let needed = 2 * self.task_rank - self.shared_rank();
        if self.latent_dim < needed {
            return Err(Error::Spec(format!(
                "latent_dim {} cannot host two rank-{} tasks sharing {} directions (needs {needed})",
                self.latent_dim,
                self.task_rank,
                self.shared_rank()
            )));
        }
        if self.expert_dim < self.task_rank {
            return Err(Error::Spec(format!(
                "expert_dim {} is below task rank {}",
                self.expert_dim, self.task_rank
            )));
        }
        Ok(())
    }
}

pub struct GaussianPair {
    pub x: FeatureSet,
    pub y: FeatureSet,
    pub true_mi: f64,
}

pub fn synth_gaussian_pair(spec: &SynthSpec, n: usize) -> Result<GaussianPair> {
    let cov = spec
        .joint_covariance
        .as_ref()
        .ok_or_else(|| Error::Spec("gaussian pair needs a joint covariance".into()))?;
    let true_mi = cov.true_mi()?;
    let chol = JointCovariance::cholesky(cov.to_matrix(), "Sigma")?;
    let l = chol.l();
    let d = cov.dim();
    let mut r = rng::seeded(rng::derive_seed(spec.seed, "gaussian-pair"));
    let mut xs = Vec::with_capacity(n * cov.x_dim);
    let mut ys = Vec::with_capacity(n * cov.y_dim);
    let mut z = vec![0.0; d];
    for _ in 0..n {
        z.iter_mut().for_each(|v| *v = rng::standard_normal(&mut r));
        for i in 0..d {
            let v: f64 = (0..=i).map(|j| l[(i, j)] * z[j]).sum();
            if i < cov.x_dim {
                xs.push(v);
            } else {
                ys.push(v);
            }
        }
    }
    let source = format!("synth:gaussian-pair:seed={}", spec.seed);
    Ok(GaussianPair {
        x: FeatureSet::new(Tensor::new(vec![n, cov.x_dim], xs)?, Dtype::F64, Role::Adapted, "x", source.clone())?,
        y: FeatureSet::new(Tensor::new(vec![n, cov.y_dim], ys)?, Dtype::F64, Role::Expert, "y", source)?,
        true_mi,
    })
}

pub struct TaskPipeline {
    pub encoder: FeatureSet,
    pub expert1: FeatureSet,
    pub expert2: FeatureSet,
    pub latent: FeatureSet,
    /// `B_1`, `expert_dim x latent_dim`.
    pub basis1: Tensor,
    /// `B_2`, `expert_dim x latent_dim`.
    pub basis2: Tensor,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng::seeded(seed);
    DMatrix::from_row_iterator(rows, cols, (0..rows * cols).map(|_| scale * rng::standard_normal(&mut r)))
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::new(vec![m.nrows(), m.ncols()], row_major(m)).expect("matrix shape")
}

/// Task bases `B_1`, `B_2` (`expert_dim x latent_dim`).
fn task_bases(spec: &SynthSpec) -> (DMatrix<f64>, DMatrix<f64>) {
    let (m, r, s) = (spec.latent_dim, spec.task_rank, spec.shared_rank());
    let q = gaussian_matrix(m, m, 1.0, rng::derive_seed(spec.seed, "basis")).qr().q();
    // Columns of q are orthonormal directions in latent space.
    let u1 = DMatrix::from_fn(r, m, |i, j| q[(j, i)]);
    let u2 = DMatrix::from_fn(r, m, |i, j| {
        let col = if i < s { i } else { r + (i - s) };
        q[(j, col)]
    });
    let scale = 1.0 / (r as f64).sqrt();
    let c1 = gaussian_matrix(spec.expert_dim, r, scale, rng::derive_seed(spec.seed, "mix1"));
    let c2 = gaussian_matrix(spec.expert_dim, r, scale, rng::derive_seed(spec.seed, "mix2"));
    (c1 * u1, c2 * u2)
}

pub fn synth_task_pipeline(spec: &SynthSpec, n: usize) -> Result<TaskPipeline> {
    spec.validate_pipeline()?;
    let (m, t, de, dx) = (spec.latent_dim, spec.tokens, spec.encoder_dim, spec.expert_dim);
    let (b1, b2) = task_bases(spec);
    let enc_maps: Vec<DMatrix<f64>> = (0..t)
        .map(|tok| {
            gaussian_matrix(
                de,
                m,
                spec.encoder_gain / (m as f64).sqrt(),
                rng::derive_seed(spec.seed, &format!("encoder-{tok}")),
            )
        })
        .collect();

    let mut zr = rng::seeded(rng::derive_seed(spec.seed, "latent"));
    let mut nr = rng::seeded(rng::derive_seed(spec.seed, "noise"));
    let mut latent = Vec::with_capacity(n * m);
    let mut enc = Vec::with_capacity(n * t * de);
    let mut f1 = Vec::with_capacity(n * t * dx);
    let mut f2 = Vec::with_capacity(n * t * dx);
    for _ in 0..n {
        let z = DVector::from_iterator(m, (0..m).map(|_| rng::standard_normal(&mut zr)));
        latent.extend(z.iter());
        for a in &enc_maps {
            enc.extend((a * &z).iter().map(|v| v.tanh()));
        }
        let (y1, y2) = (&b1 * &z, &b2 * &z);
        for _ in 0..t {
            f1.extend(y1.iter().map(|v| v + spec.noise * rng::standard_normal(&mut nr)));
            f2.extend(y2.iter().map(|v| v + spec.noise * rng::standard_normal(&mut nr)));
        }
    }

    let source = format!("synth:pipeline:seed={}", spec.seed);
    let fs = |data: Vec<f64>, shape: Vec<usize>, role, name: &str| {
        FeatureSet::new(Tensor::new(shape, data)?, Dtype::F64, role, name, source.clone())
    };
    Ok(TaskPipeline {
        encoder: fs(enc, vec![n, t, de], Role::Encoder, "encoder")?,
        expert1: fs(f1, vec![n, t, dx], Role::Expert, "expert1")?,
        expert2: fs(f2, vec![n, t, dx], Role::Expert, "expert2")?,
        latent: fs(latent, vec![n, m], Role::Latent, "latent")?,
        basis1: to_tensor(&b1),
        basis2: to_tensor(&b2),
    })
}

/// Multiplies a `N x d` feature set by a fixed seeded `d x out_dim` Gaussian
/// matrix, keeping all of its information in a higher-dimensional embedding.
pub fn random_lift(fs: &FeatureSet, out_dim: usize, seed: u64) -> Result<FeatureSet> {
    let x = fs.matrix(Default::default());
    let (n, d) = (x.rows(), x.cols());
    let lift = gaussian_matrix(d, out_dim, 1.0 / (d as f64).sqrt(), rng::derive_seed(seed, "lift"));
    let lift_t = to_tensor(&lift);
    let data = crate::autodiff::matmul_raw(x.data(), lift_t.data(), n, d, out_dim);
    FeatureSet::new(
        Tensor::new(vec![n, out_dim], data)?,
        fs.dtype,
        fs.role,
        format!("{}-lift{out_dim}", fs.name),
        format!("{}+lift:seed={seed}", fs.source),
    )
}
