use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::featio::{FeatureSet, TokenPooling};
use crate::rng;

/// Pooled samples used by the median heuristic.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

fn default_degree() -> u32 {
    3
}

fn default_offset() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelConfig {
    /// `exp(-gamma |x - y|^2)`; `gamma = None` selects the median heuristic
    /// `1 / (2 median^2)`.
    Rbf {
        #[serde(default)]
        gamma: Option<f64>,
        #[serde(default)]
        heuristic_seed: u64,
    },
    /// `(scale * x.y + offset)^degree`; `scale = None` means `1 / D`.
    Poly {
        #[serde(default)]
        scale: Option<f64>,
        #[serde(default = "default_offset")]
        offset: f64,
        #[serde(default = "default_degree")]
        degree: u32,
    },
}

impl KernelConfig {
    pub fn rbf_median() -> Self {
        KernelConfig::Rbf {
            gamma: None,
            heuristic_seed: 0,
        }
    }

    pub fn rbf(gamma: f64) -> Self {
        KernelConfig::Rbf {
            gamma: Some(gamma),
            heuristic_seed: 0,
        }
    }

    /// The `(x.y / D + 1)^3` default.
    pub fn poly_default() -> Self {
        KernelConfig::Poly {
            scale: None,
            offset: 1.0,
            degree: 3,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            KernelConfig::Rbf { gamma: Some(g), .. } if !(*g > 0.0) || !g.is_finite() => Err(
                Error::numeric("kernel_distance", format!("RBF gamma must be > 0, got {g}")),
            ),
            KernelConfig::Poly { degree: 0, .. } => {
                Err(Error::Config("polynomial degree must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kernel {
    Rbf { gamma: f64 },
    Poly { scale: f64, offset: f64, degree: i32 },
}

impl Kernel {
    #[inline]
    fn eval(self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Kernel::Rbf { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Poly {
                scale,
                offset,
                degree,
            } => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (scale * dot + offset).powi(degree)
            }
        }
    }
}

fn euclid(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

/// Median pairwise Euclidean distance over a seeded pooled subsample.
pub fn median_heuristic_distance(x: &Tensor, y: &Tensor, seed: u64) -> f64 {
    let mut pooled: Vec<&[f64]> = (0..x.rows()).map(|r| x.row(r)).chain((0..y.rows()).map(|r| y.row(r))).collect();
    if pooled.len() > MEDIAN_SUBSAMPLE {
        let perm = rng::permutation(&mut rng::seeded(rng::derive_seed(seed, "median")), pooled.len());
        pooled = perm[..MEDIAN_SUBSAMPLE].iter().map(|&i| pooled[i]).collect();
    }
    let mut dists: Vec<f64> = (0..pooled.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let p = &pooled;
            (i + 1..p.len()).map(move |j| euclid(p[i], p[j]))
        })
        .collect();
    if dists.is_empty() {
        return 0.0;
    }
    let mid = dists.len() / 2;
    dists.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = dists[mid];
    if dists.len() % 2 == 1 {
        upper
    } else {
        let lower = dists[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Sum of `k(a_i, b_j)` over all pairs, excluding `i == j` when `same`.
fn gram_sum(a: &Tensor, b: &Tensor, kernel: Kernel, same: bool) -> f64 {
    let rows: Vec<f64> = (0..a.rows())
        .into_par_iter()
        .map(|i| {
            let ai = a.row(i);
            if same {
                // Strict upper triangle, doubled below.
                (i + 1..b.rows()).map(|j| kernel.eval(ai, b.row(j))).sum::<f64>()
            } else {
                (0..b.rows()).map(|j| kernel.eval(ai, b.row(j))).sum::<f64>()
            }
        })
        .collect();
    let total: f64 = rows.iter().sum();
    if same {
        2.0 * total
    } else {
        total
    }
}

/// Unbiased squared MMD between the rows of `x` and `y`.
pub fn kernel_distance_matrix(x: &Tensor, y: &Tensor, cfg: &KernelConfig) -> Result<f64> {
    cfg.validate()?;
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "kernel_distance",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (n, m) = (x.rows(), y.rows());
    if n < 2 || m < 2 {
        return Err(Error::InsufficientData(format!(
            "kernel distance needs >= 2 samples per side, got {n} and {m}"
        )));
    }
    let kernel = match *cfg {
        KernelConfig::Rbf { gamma, heuristic_seed } => {
            let gamma = match gamma {
                Some(g) => g,
                None => {
                    let med = median_heuristic_distance(x, y, heuristic_seed);
                    1.0 / (2.0 * med * med)
                }
            };
            if !(gamma > 0.0) || !gamma.is_finite() {
                return Err(Error::numeric(
                    "kernel_distance",
                    format!("degenerate RBF bandwidth (gamma = {gamma})"),
                ));
            }
            Kernel::Rbf { gamma }
        }
        KernelConfig::Poly {
            scale,
            offset,
            degree,
        } => Kernel::Poly {
            scale: scale.unwrap_or(1.0 / x.cols() as f64),
            offset,
            degree: degree as i32,
        },
    };
    let kxx = gram_sum(x, x, kernel, true) / (n * (n - 1)) as f64;
    let kyy = gram_sum(y, y, kernel, true) / (m * (m - 1)) as f64;
    let kxy = gram_sum(x, y, kernel, false) / (n * m) as f64;
    Ok(kxx + kyy - 2.0 * kxy)
}

pub fn kernel_distance(
    x: &FeatureSet,
    y: &FeatureSet,
    cfg: &KernelConfig,
    pooling: TokenPooling,
) -> Result<f64> {
    kernel_distance_matrix(&x.matrix(pooling), &y.matrix(pooling), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(
            vec![n, d],
            rng::normal_vec(&mut r, n * d).into_iter().map(|v| v + shift).collect(),
        )
        .unwrap()
    }

    #[test]
    fn rbf_self_similarity_is_one() {
        let x = [0.3, -1.2, 4.0];
        assert_eq!(Kernel::Rbf { gamma: 0.7 }.eval(&x, &x), 1.0);
    }

    #[test]
    fn symmetric_and_order_invariant() {
        let x = sample(40, 3, 0.0, 1);
        let y = sample(30, 3, 0.5, 2);
        for cfg in [KernelConfig::rbf_median(), KernelConfig::poly_default()] {
            let xy = kernel_distance_matrix(&x, &y, &cfg).unwrap();
            let yx = kernel_distance_matrix(&y, &x, &cfg).unwrap();
            assert!((xy - yx).abs() < 1e-12);
            let perm = rng::permutation(&mut rng::seeded(5), 40);
            let xp = x.select_rows(&perm);
            let p = kernel_distance_matrix(&xp, &y, &cfg).unwrap();
            assert!((xy - p).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_is_detected() {
        let x = sample(200, 2, 0.0, 3);
        let y = sample(200, 2, 2.0, 4);
        assert!(kernel_distance_matrix(&x, &y, &KernelConfig::rbf_median()).unwrap() > 0.1);
    }

    #[test]
    fn degenerate_bandwidth_errors() {
        let x = Tensor::filled(&[5, 2], 1.0);
        let err = kernel_distance_matrix(&x, &x, &KernelConfig::rbf_median()).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
        assert!(kernel_distance_matrix(&x, &x, &KernelConfig::rbf(-1.0)).is_err());
    }

    #[test]
    fn median_of_known_distances() {
        let x = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let y = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        // Distances 1, 3, 2.
        assert_eq!(median_heuristic_distance(&x, &y, 0), 2.0);
    }

    #[test]
    fn unbiased_matches_brute_force_definition() {
        let x = sample(7, 2, 0.0, 8);
        let y = sample(5, 2, 0.3, 9);
        let k = |a: &[f64], b: &[f64]| (-0.4 * euclid(a, b).powi(2)).exp();
        let mut kxx = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                if i != j {
                    kxx += k(x.row(i), x.row(j));
                }
            }
        }
        let mut kyy = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    kyy += k(y.row(i), y.row(j));
                }
            }
        }
        let mut kxy = 0.0;
        for i in 0..7 {
            for j in 0..5 {
                kxy += k(x.row(i), y.row(j));
            }
        }
        let oracle = kxx / 42.0 + kyy / 20.0 - 2.0 * kxy / 35.0;
        let got = kernel_distance_matrix(&x, &y, &KernelConfig::rbf(0.4)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }
}
