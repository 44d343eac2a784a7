use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::featio::{FeatureSet, TokenPooling};

/// Eigenvalues below this fraction of the largest are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-8;

/// Mean and unbiased covariance of a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianSummary {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Builds a summary directly from distribution parameters.
    pub fn from_parts(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(Error::Shape {
                op: "gaussian_summary",
                lhs: vec![d],
                rhs: vec![cov.len()],
            });
        }
        let cov = DMatrix::from_row_slice(d, d, &cov);
        Ok(GaussianSummary {
            mean: DVector::from_vec(mean),
            cov: symmetrize(&cov),
            count: 0,
        })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn summarize_matrix(x: &Tensor) -> Result<GaussianSummary> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs N >= 2 samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for ((c, v), m) in centered.iter_mut().zip(x.row(r)).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[i * d + j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Ok(GaussianSummary {
        mean: DVector::from_vec(mean),
        cov: DMatrix::from_row_slice(d, d, &cov),
        count: n,
    })
}

pub fn summarize(fs: &FeatureSet, pooling: TokenPooling) -> Result<GaussianSummary> {
    summarize_matrix(&fs.matrix(pooling))
}

/// Eigenvalues of a symmetric matrix with the relative clamp applied.
fn clamped_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().copied().fold(0.0f64, f64::max);
    let floor = EIGEN_CLAMP * max;
    eig.eigenvalues.iter_mut().for_each(|v| {
        if *v < floor {
            *v = 0.0;
        }
    });
    eig
}

/// PSD square root via symmetric eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = clamped_eigen(m);
    let roots = eig.eigenvalues.map(f64::sqrt);
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)`, clamped to `>= 0`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape {
            op: "frechet_distance",
            lhs: vec![a.dim()],
            rhs: vec![b.dim()],
        });
    }
    if a.mean == b.mean && a.cov == b.cov {
        return Ok(0.0);
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrtm_psd(&a.cov);
    let inner = &root_a * &b.cov * &root_a;
    let cross: f64 = clamped_eigen(&inner).eigenvalues.iter().map(|v| v.sqrt()).sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}
