//! Transformer neck adapter.
//!
//! `embed -> +positional -> L x (pre-norm MHSA + residual, pre-norm MLP +
//! residual) -> linear projection`. Tokens are processed as an `[N, T, D]`
//! grid; linear layers run on the flattened `[N*T, D]` view.
//!
//! Trainable scalar count, with `d = d_model` and `r = mlp_ratio`:
//!
//! ```text
//! D_in*d + d                      embedding
//! + T*d                           positional table
//! + L * ((4 + 2r)*d^2 + (9 + r)*d) transformer layers
//! + d*D_out + D_out               output projection
//! ```
//!
//! Each layer holds Q/K/V/O projections with biases (`4d^2 + 4d`), two
//! layer norms (`4d`) and the MLP (`2r*d^2 + r*d + d`).

mod checkpoint;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

pub const DEFAULT_D_MODEL: usize = 48;
pub const DEFAULT_MLP_RATIO: usize = 4;
pub const INIT_STD: f64 = 0.02;

fn default_d_model() -> usize {
    DEFAULT_D_MODEL
}

fn default_mlp_ratio() -> usize {
    DEFAULT_MLP_RATIO
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NeckConfig {
    pub layers: usize,
    /// Attention heads; defaults to `layers`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub tokens: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub seed: u64,
}

impl NeckConfig {
    pub fn new(layers: usize, d_in: usize, d_out: usize, tokens: usize) -> Self {
        NeckConfig {
            layers,
            heads: None,
            d_model: DEFAULT_D_MODEL,
            d_in,
            d_out,
            tokens,
            mlp_ratio: DEFAULT_MLP_RATIO,
            seed: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(self.layers)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.heads();
        if self.layers == 0 || h == 0 {
            return Err(Error::Config("neck needs at least one layer and one head".into()));
        }
        if !self.d_model.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {h} heads",
                self.d_model
            )));
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if self.tokens == 0 || self.d_in == 0 || self.d_out == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "tokens, d_in, d_out and mlp_ratio must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable scalar count (see module docs).
    pub fn param_count(&self) -> usize {
        let (d, r) = (self.d_model, self.mlp_ratio);
        let per_layer = (4 + 2 * r) * d * d + (9 + r) * d;
        self.d_in * d + d + self.tokens * d + self.layers * per_layer + d * self.d_out + self.d_out
    }

    /// Ordered `(name, shape)` layout of every parameter tensor.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, hidden) = (self.d_model, self.d_model * self.mlp_ratio);
        let mut out = vec![
            ("embed.weight".to_string(), vec![self.d_in, d]),
            ("embed.bias".to_string(), vec![d]),
            ("pos".to_string(), vec![self.tokens, d]),
        ];
        for l in 0..self.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.push((p("ln1.gain"), vec![d]));
            out.push((p("ln1.bias"), vec![d]));
            for proj in ["q", "k", "v", "o"] {
                out.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                out.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            out.push((p("ln2.gain"), vec![d]));
            out.push((p("ln2.bias"), vec![d]));
            out.push((p("mlp.fc1.weight"), vec![d, hidden]));
            out.push((p("mlp.fc1.bias"), vec![hidden]));
            out.push((p("mlp.fc2.weight"), vec![hidden, d]));
            out.push((p("mlp.fc2.bias"), vec![d]));
        }
        out.push(("proj.weight".to_string(), vec![d, self.d_out]));
        out.push(("proj.bias".to_string(), vec![self.d_out]));
        out
    }
}

/// Parameters of one neck, laid out per [`NeckConfig::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Neck {
    config: NeckConfig,
    params: ParamStore,
}

/// Graph handles for a bound [`Neck`], parallel to its parameter store.
#[derive(Clone, Debug)]
pub struct NeckVars {
    vars: Vec<Var>,
}

impl NeckVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Neck {
    /// Truncated-normal weights, zero biases, zero positional table,
    /// unit layer-norm gains.
    pub fn init(config: NeckConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(rng::derive_seed(config.seed, "neck-init"));
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                (0..len).map(|_| rng::truncated_normal(&mut rng, INIT_STD)).collect()
            } else if name.ends_with(".gain") {
                vec![1.0; len]
            } else {
                vec![0.0; len]
            };
            params.push(name, Tensor::new(shape, data)?);
        }
        Ok(Neck { config, params })
    }

    pub fn from_parts(config: NeckConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter store has {} tensors, config expects {}",
                params.len(),
                layout.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.names().iter().zip(params.tensors())) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter `{pname}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Neck { config, params })
    }

    pub fn config(&self) -> &NeckConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> NeckVars {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        NeckVars { vars }
    }

    /// `x: [N, T, D_in] -> [N, T, D_out]`.
    pub fn forward_graph(&self, g: &mut Graph, vars: &NeckVars, x: Var) -> Result<Var> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.tokens || shape[2] != cfg.d_in {
            return Err(Error::Shape {
                op: "neck_forward",
                lhs: shape,
                rhs: vec![0, cfg.tokens, cfg.d_in],
            });
        }
        let n = shape[0];
        let rows = n * cfg.tokens;
        let d = cfg.d_model;
        let v = &vars.vars;
        let mut at = 0usize;
        let mut next = || {
            at += 1;
            v[at - 1]
        };

        let flat = g.reshape(x, &[rows, cfg.d_in])?;
        let (ew, eb, pos) = (next(), next(), next());
        let emb = g.linear(flat, ew, eb)?;
        let emb = g.reshape(emb, &[n, cfg.tokens * d])?;
        let pos_flat = g.reshape(pos, &[cfg.tokens * d])?;
        let mut h = g.add_row_vector(emb, pos_flat)?;
        h = g.reshape(h, &[rows, d])?;

        let (split, merge) = head_permutations(n, cfg.tokens, cfg.heads(), cfg.head_dim());
        let attn_shape = [n * cfg.heads(), cfg.tokens, cfg.head_dim()];
        let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

        for layer in 0..cfg.layers {
            let (g1, b1) = (next(), next());
            let (wq, bq, wk, bk, wv, bv, wo, bo) =
                (next(), next(), next(), next(), next(), next(), next(), next());
            let (g2, b2) = (next(), next());
            let (w1, c1, w2, c2) = (next(), next(), next(), next());

            let normed = g.layer_norm(h, g1, b1)?;
            let q = g.linear(normed, wq, bq)?;
            let k = g.linear(normed, wk, bk)?;
            let val = g.linear(normed, wv, bv)?;
            let q = g.gather(q, split.clone(), &attn_shape)?;
            let k = g.gather(k, split.clone(), &attn_shape)?;
            let val = g.gather(val, split.clone(), &attn_shape)?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores)?;
            let ctx = g.batch_matmul(weights, val, false)?;
            let ctx = g.gather(ctx, merge.clone(), &[rows, d])?;
            let attn = g.linear(ctx, wo, bo)?;
            h = g.add(h, attn)?;

            let normed = g.layer_norm(h, g2, b2)?;
            let hidden = g.linear(normed, w1, c1)?;
            let hidden = g.gelu(hidden);
            let mlp = g.linear(hidden, w2, c2)?;
            h = g.add(h, mlp)?;

            if let Some(i) = g.value(h).first_non_finite() {
                return Err(Error::numeric(
                    format!("neck layer {layer}"),
                    format!("non-finite activation at flat index {i}"),
                ));
            }
        }

        let (pw, pb) = (next(), next());
        let out = g.linear(h, pw, pb)?;
        g.reshape(out, &[n, cfg.tokens, cfg.d_out])
    }

    /// Inference-only forward.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let xin = g.input(x.clone());
        let out = self.forward_graph(&mut g, &vars, xin)?;
        Ok(g.value(out).clone())
    }

    /// Inference in chunks of `chunk` samples to bound tape memory.
    pub fn forward_batched(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut data = Vec::with_capacity(n * self.config.tokens * self.config.d_out);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            data.extend_from_slice(self.forward(&x.select_rows(&idx))?.data());
            start = end;
        }
        Tensor::new(vec![n, self.config.tokens, self.config.d_out], data)
    }

    /// SHA-256 over config and parameter bits.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for t in self.params.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gather indices mapping `[N*T, H*dh]` to `[N*H, T, dh]` and back.
fn head_permutations(n: usize, t: usize, heads: usize, dh: usize) -> (Vec<usize>, Vec<usize>) {
    let d = heads * dh;
    let total = n * t * d;
    let mut split = vec![0; total];
    let mut merge = vec![0; total];
    for s in 0..n {
        for tok in 0..t {
            for h in 0..heads {
                for j in 0..dh {
                    let flat = (s * t + tok) * d + h * dh + j;
                    let headed = ((s * heads + h) * t + tok) * dh + j;
                    split[headed] = flat;
                    merge[flat] = headed;
                }
            }
        }
    }
    (split, merge)
}
