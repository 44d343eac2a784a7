use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_raw, Graph, Tensor, Var};
use crate::digest::tensor_hash;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    Identity,
    /// Fixed Gaussian map `D_out -> out_dim`, entries scaled by `1/sqrt(D_out)`.
    Linear { out_dim: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub head: HeadSpec,
    /// Manifest role whose features, passed through the head, form the target.
    pub target_role: String,
    #[serde(default)]
    pub loss: LossKind,
}

impl TaskSpec {
    pub fn new(id: &str, head: HeadSpec, target_role: &str) -> Self {
        TaskSpec {
            id: id.to_string(),
            head,
            target_role: target_role.to_string(),
            loss: LossKind::Mse,
        }
    }
}

/// Frozen task decoder. The weights are never exposed mutably.
#[derive(Clone, Debug)]
pub struct Head {
    weight: Option<Tensor>,
}

impl Head {
    pub fn build(spec: &HeadSpec, in_dim: usize) -> Result<Head> {
        match *spec {
            HeadSpec::Identity => Ok(Head { weight: None }),
            HeadSpec::Linear { out_dim, seed } => {
                if out_dim == 0 || in_dim == 0 {
                    return Err(Error::Config("linear head dims must be >= 1".into()));
                }
                let mut r = rng::seeded(rng::derive_seed(seed, "head"));
                let scale = 1.0 / (in_dim as f64).sqrt();
                let data = rng::normal_vec(&mut r, in_dim * out_dim)
                    .into_iter()
                    .map(|v| v * scale)
                    .collect();
                Ok(Head {
                    weight: Some(Tensor::new(vec![in_dim, out_dim], data)?),
                })
            }
        }
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.weight.as_ref().map_or(in_dim, |w| w.cols())
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    /// `x[rows, D] -> [rows, out_dim]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.weight {
            None => Ok(x.clone()),
            Some(w) => {
                if x.cols() != w.rows() {
                    return Err(Error::Shape {
                        op: "head",
                        lhs: x.shape().to_vec(),
                        rhs: w.shape().to_vec(),
                    });
                }
                Tensor::new(
                    vec![x.rows(), w.cols()],
                    matmul_raw(x.data(), w.data(), x.rows(), w.rows(), w.cols()),
                )
            }
        }
    }

    /// Applies the head on a graph as a constant (never a parameter).
    pub fn apply_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match &self.weight {
            None => Ok(x),
            Some(w) => {
                let wv = g.input(w.clone());
                g.matmul(x, wv)
            }
        }
    }

    pub fn fingerprint(&self) -> String {
        match &self.weight {
            None => "identity".into(),
            Some(w) => tensor_hash(w),
        }
    }
}
