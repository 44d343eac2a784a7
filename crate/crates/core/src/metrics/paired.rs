use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Correlations are clamped to this magnitude before taking the log.
pub const RHO_CLAMP: f64 = 1.0 - 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineResult {
    pub value: f64,
    /// Row pairs where either side is the zero vector; they contribute 0.
    pub zero_rows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mi1dResult {
    pub per_dim: Vec<f64>,
    pub total: f64,
    /// Dimensions with zero sample variance on either side; reported as 0.
    pub zero_variance_dims: Vec<usize>,
}

fn same_shape(op: &'static str, x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape {
            op,
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over rows of `x.y / (|x| |y|)`.
pub fn cosine_similarity_paired(x: &Tensor, y: &Tensor) -> Result<CosineResult> {
    same_shape("cosine_similarity_paired", x, y)?;
    let n = x.rows();
    if n == 0 {
        return Err(Error::InsufficientData("cosine similarity of empty sets".into()));
    }
    let mut total = 0.0;
    let mut zero_rows = 0;
    for r in 0..n {
        let (a, b) = (x.row(r), y.row(r));
        let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            zero_rows += 1;
            continue;
        }
        total += (dot / (na * nb)).clamp(-1.0, 1.0);
    }
    Ok(CosineResult {
        value: total / n as f64,
        zero_rows,
    })
}

/// Per-dimension Gaussian MI `-1/2 ln(1 - rho_i^2)`, summed over dimensions.
pub fn mi_1d_gauss(x: &Tensor, y: &Tensor) -> Result<Mi1dResult> {
    same_shape("mi_1d_gauss", x, y)?;
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::InsufficientData(format!("MI-1D-Gauss needs N >= 2, got {n}")));
    }
    let mut per_dim = Vec::with_capacity(d);
    let mut zero_variance_dims = Vec::new();
    for j in 0..d {
        let xs: Vec<f64> = (0..n).map(|r| x.data()[r * d + j]).collect();
        let ys: Vec<f64> = (0..n).map(|r| y.data()[r * d + j]).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (a, b) in xs.iter().zip(&ys) {
            let (da, db) = (a - mx, b - my);
            sxy += da * db;
            sxx += da * da;
            syy += db * db;
        }
        if sxx == 0.0 || syy == 0.0 {
            zero_variance_dims.push(j);
            per_dim.push(0.0);
            continue;
        }
        let rho = (sxy / (sxx * syy).sqrt()).clamp(-RHO_CLAMP, RHO_CLAMP);
        per_dim.push((-0.5 * (1.0 - rho * rho).ln()).max(0.0));
    }
    Ok(Mi1dResult {
        total: per_dim.iter().sum(),
        per_dim,
        zero_variance_dims,
    })
}
