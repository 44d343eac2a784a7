//! Donsker–Varadhan critic training shared by MINE and LMI.

use crate::autodiff::{log_mean_exp, AdamConfig, AdamState, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Held-out DV values above this are treated as divergence.
pub const DV_DIVERGENCE: f64 = 50.0;

/// Statistics network `T(x, y)`: optional linear projections, then an MLP
/// whose first layer splits as `x W_x + y W_y + b`.
#[derive(Clone, Debug)]
pub(crate) struct Critic {
    params: ParamStore,
    projected: bool,
    depth: usize,
}

fn gaussian(rng: &mut rng::SeededRng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = rng::normal_vec(rng, rows * cols).into_iter().map(|v| v * std).collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

impl Critic {
    pub fn new(dx: usize, dy: usize, projection: Option<usize>, hidden: &[usize], seed: u64) -> Result<Self> {
        if hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!("critic widths must be non-empty and positive, got {hidden:?}")));
        }
        let mut r = rng::seeded(rng::derive_seed(seed, "critic"));
        let mut params = ParamStore::new();
        let (ix, iy) = match projection {
            Some(k) => {
                params.push("proj_x", gaussian(&mut r, dx, k, 1.0 / (dx as f64).sqrt()));
                params.push("proj_y", gaussian(&mut r, dy, k, 1.0 / (dy as f64).sqrt()));
                (k, k)
            }
            None => (dx, dy),
        };
        let he = (2.0 / (ix + iy) as f64).sqrt();
        params.push("in_x", gaussian(&mut r, ix, hidden[0], he));
        params.push("in_y", gaussian(&mut r, iy, hidden[0], he));
        params.push("in_b", Tensor::zeros(&[hidden[0]]));
        for (l, w) in hidden.windows(2).enumerate() {
            params.push(format!("h{l}.w"), gaussian(&mut r, w[0], w[1], (2.0 / w[0] as f64).sqrt()));
            params.push(format!("h{l}.b"), Tensor::zeros(&[w[1]]));
        }
        let last = *hidden.last().expect("non-empty");
        params.push("out.w", gaussian(&mut r, last, 1, (1.0 / last as f64).sqrt()));
        params.push("out.b", Tensor::zeros(&[1]));
        Ok(Critic {
            params,
            projected: projection.is_some(),
            depth: hidden.len(),
        })
    }

    fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.param(t.clone())).collect()
    }

    /// `T` values as an `[N, 1]` node.
    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var, y: Var) -> Result<Var> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("critic layout");
        let (x, y) = if self.projected {
            let (px, py) = (next(), next());
            (g.matmul(x, px)?, g.matmul(y, py)?)
        } else {
            (x, y)
        };
        let (wx, wy, b) = (next(), next(), next());
        let hx = g.matmul(x, wx)?;
        let hy = g.matmul(y, wy)?;
        let h = g.add(hx, hy)?;
        let h = g.add_row_vector(h, b)?;
        let mut h = g.relu(h);
        for _ in 1..self.depth {
            let (w, b) = (next(), next());
            let z = g.linear(h, w, b)?;
            h = g.relu(z);
        }
        let (w, b) = (next(), next());
        g.linear(h, w, b)
    }

    pub fn scores(&self, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let t = self.forward(&mut g, &vars, xv, yv)?;
        Ok(g.value(t).data().to_vec())
    }

    /// Applies the learned projections; identity for unprojected critics.
    pub fn project(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, Tensor)> {
        if !self.projected {
            return Ok((x.clone(), y.clone()));
        }
        let mut g = Graph::new();
        let (px, py) = (g.input(self.params.get(0).clone()), g.input(self.params.get(1).clone()));
        let (xv, yv) = (g.input(x.clone()), g.input(y.clone()));
        let a = g.matmul(xv, px)?;
        let b = g.matmul(yv, py)?;
        Ok((g.value(a).clone(), g.value(b).clone()))
    }

    /// `mean T(x, y) - ln mean exp T(x, y[perm])`.
    pub fn dv_value(&self, x: &Tensor, y: &Tensor, perm: &[usize]) -> Result<f64> {
        let joint = self.scores(x, y)?;
        let marg = self.scores(x, &y.select_rows(perm))?;
        Ok(joint.iter().sum::<f64>() / joint.len() as f64 - log_mean_exp(&marg))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DvSettings {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub ema_rate: f64,
    pub eval_interval: usize,
    pub eval_batches: usize,
    pub seed: u64,
}

impl DvSettings {
    pub fn validate(&self, train_rows: usize) -> Result<()> {
        if !(self.ema_rate > 0.0 && self.ema_rate < 1.0) {
            return Err(Error::Config(format!("EMA rate must be in (0, 1), got {}", self.ema_rate)));
        }
        if self.steps == 0 || self.steps < self.eval_batches {
            return Err(Error::Config(format!(
                "steps ({}) must be >= 1 and >= eval batches ({})",
                self.steps, self.eval_batches
            )));
        }
        if self.eval_batches == 0 || self.eval_interval == 0 || self.batch_size < 2 {
            return Err(Error::Config(
                "eval batches and eval interval must be >= 1, batch size >= 2".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if train_rows < self.batch_size {
            return Err(Error::InsufficientData(format!(
                "training split has {train_rows} rows, fewer than one batch of {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

pub(crate) struct DvOutcome {
    pub critic: Critic,
    pub curve: Vec<f64>,
    /// Mean held-out DV over `eval_batches` marginal permutations.
    pub final_dv: f64,
}

fn check_dv(value: f64, curve: &[f64], what: &str) -> Result<()> {
    if value.is_nan() || value > DV_DIVERGENCE {
        return Err(Error::Estimation {
            message: format!("{what}: DV value {value} (divergence threshold {DV_DIVERGENCE} nats)"),
            curve: curve.to_vec(),
        });
    }
    Ok(())
}

/// Maximizes the DV bound with an EMA-corrected denominator gradient.
pub(crate) fn train_dv(
    mut critic: Critic,
    train: (&Tensor, &Tensor),
    eval: (&Tensor, &Tensor),
    s: &DvSettings,
) -> Result<DvOutcome> {
    let (xt, yt) = train;
    let n = xt.rows();
    s.validate(n)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(s.lr), &critic.params)?;
    let mut batch_rng = rng::seeded(rng::derive_seed(s.seed, "batches"));
    let mut eval_rng = rng::seeded(rng::derive_seed(s.seed, "eval"));
    let mut order = rng::permutation(&mut batch_rng, n);
    let mut cursor = 0;
    let mut ema: Option<f64> = None;
    let mut curve = Vec::new();

    for step in 0..s.steps {
        if cursor + s.batch_size > n {
            order = rng::permutation(&mut batch_rng, n);
            cursor = 0;
        }
        let rows = &order[cursor..cursor + s.batch_size];
        cursor += s.batch_size;
        let shuffle = rng::permutation(&mut batch_rng, s.batch_size);
        let marg_rows: Vec<usize> = shuffle.iter().map(|&j| rows[j]).collect();

        let mut g = Graph::new();
        let vars = critic.bind(&mut g);
        let xb = g.input(xt.select_rows(rows));
        let yb = g.input(yt.select_rows(rows));
        let ym = g.input(yt.select_rows(&marg_rows));
        let t_joint = critic.forward(&mut g, &vars, xb, yb)?;
        let t_marg = critic.forward(&mut g, &vars, xb, ym)?;
        let mean_joint = g.mean(t_joint);
        let e = g.exp(t_marg);
        let mean_exp = g.mean(e);

        let current = g.value(mean_exp).item();
        let avg = match ema {
            Some(prev) => s.ema_rate * prev + (1.0 - s.ema_rate) * current,
            None => current,
        };
        ema = Some(avg);
        if !avg.is_finite() || avg <= 0.0 {
            return Err(Error::Estimation {
                message: format!("step {step}: marginal exponent average is {avg}"),
                curve,
            });
        }
        let corrected = g.scale(mean_exp, 1.0 / avg);
        let gain = g.sub(mean_joint, corrected)?;
        let loss = g.scale(gain, -1.0);
        if !g.value(loss).item().is_finite() {
            return Err(Error::Estimation {
                message: format!("step {step}: non-finite training objective"),
                curve,
            });
        }
        let grads = g.backward(loss)?;
        let grads: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut critic.params, &grads).map_err(|e| Error::Estimation {
            message: e.to_string(),
            curve: curve.clone(),
        })?;

        if (step + 1) % s.eval_interval == 0 || step + 1 == s.steps {
            let perm = rng::permutation(&mut eval_rng, eval.0.rows());
            let dv = critic.dv_value(eval.0, eval.1, &perm)?;
            curve.push(dv);
            check_dv(dv, &curve, &format!("step {}", step + 1))?;
        }
    }

    let mut total = 0.0;
    for _ in 0..s.eval_batches {
        let perm = rng::permutation(&mut eval_rng, eval.0.rows());
        let dv = critic.dv_value(eval.0, eval.1, &perm)?;
        check_dv(dv, &curve, "final evaluation")?;
        total += dv;
    }
    Ok(DvOutcome {
        critic,
        curve,
        final_dv: total / s.eval_batches as f64,
    })
}
