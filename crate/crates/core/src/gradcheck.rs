//! Central finite-difference checks for every differentiable tape op and for
//! a full two-layer neck under an MSE loss.
//!
//! Each check draws random inputs and a random cotangent `R`, then compares
//! the tape's vector-Jacobian product with central differences of
//! `sum(op(x) * R)`. The error is norm-wise relative:
//! `|g_tape - g_fd| / max(|g_tape|, |g_fd|)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, OpKind, ParamStore, Tensor, Var, ALL_OPS};
use crate::error::Result;
use crate::neck::{Neck, NeckConfig};
use crate::rng;

pub const FD_STEP: f64 = 1e-4;
pub const REL_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
/// Minimum distance of ReLU inputs from the kink.
const RELU_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub name: String,
    /// Tape op exercised; `None` for composite checks.
    pub op: Option<String>,
    pub max_rel_err: f64,
    pub seeds: usize,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub seeds: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injected_fault: Option<String>,
    pub checks: Vec<OpCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn max_rel_err(&self, name: &str) -> Option<f64> {
        self.checks.iter().find(|c| c.name == name).map(|c| c.max_rel_err)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seeds: usize,
    pub base_seed: u64,
    /// Sign-flips the backward pass of one op kind (sensitivity fixture).
    pub fault: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seeds: DEFAULT_SEEDS,
            base_seed: 0,
            fault: None,
        }
    }
}

/// Builds the checked function from input tensors; returns the output and
/// the vars whose gradients are compared (in input order).
type Build = dyn Fn(&mut Graph, &[Tensor]) -> Result<(Var, Vec<Var>)> + Sync;

struct Case {
    name: &'static str,
    op: Option<OpKind>,
    inputs: fn(&mut rng::SeededRng) -> Vec<Tensor>,
    build: Box<Build>,
}

fn normal(r: &mut rng::SeededRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng::normal_vec(r, n)).expect("shape")
}

fn params(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.param(t.clone())).collect()
}

fn unary(name: &'static str, op: OpKind, f: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    binaryish(name, op, |r| vec![normal(r, &[3, 4])], move |g, v| f(g, v[0]))
}

fn binaryish(
    name: &'static str,
    op: OpKind,
    inputs: fn(&mut rng::SeededRng) -> Vec<Tensor>,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + Sync + 'static,
) -> Case {
    Case {
        name,
        op: Some(op),
        inputs,
        build: Box::new(move |g, ts| {
            let vars = params(g, ts);
            let out = f(g, &vars)?;
            Ok((out, vars))
        }),
    }
}

fn gradcheck_neck_config() -> NeckConfig {
    NeckConfig {
        d_model: 8,
        ..NeckConfig::new(2, 4, 3, 3)
    }
}

fn neck_inputs(r: &mut rng::SeededRng) -> Vec<Tensor> {
    let cfg = gradcheck_neck_config();
    let mut ts: Vec<Tensor> = cfg
        .layout()
        .iter()
        .map(|(_, shape)| {
            let t = normal(r, shape);
            let data = t.data().iter().map(|v| 0.5 * v).collect();
            Tensor::new(shape.clone(), data).expect("shape")
        })
        .collect();
    ts.push(normal(r, &[2, cfg.tokens, cfg.d_in]));
    ts.push(normal(r, &[2, cfg.tokens, cfg.d_out]));
    ts
}

fn neck_case() -> Case {
    Case {
        name: "neck_2layer_mse",
        op: None,
        inputs: neck_inputs,
        build: Box::new(|g, ts| {
            let cfg = gradcheck_neck_config();
            let k = ts.len() - 2;
            let mut store = ParamStore::new();
            for ((name, _), t) in cfg.layout().into_iter().zip(&ts[..k]) {
                store.push(name, t.clone());
            }
            let neck = Neck::from_parts(cfg, store)?;
            let vars = neck.bind(g, true);
            let x = g.param(ts[k].clone());
            let target = g.input(ts[k + 1].clone());
            let out = neck.forward_graph(g, &vars, x)?;
            let loss = g.mse(out, target)?;
            let mut checked = vars.vars().to_vec();
            checked.push(x);
            Ok((loss, checked))
        }),
    }
}

fn cases() -> Vec<Case> {
    vec![
        binaryish("matmul", OpKind::MatMul, |r| vec![normal(r, &[3, 4]), normal(r, &[4, 2])], |g, v| {
            g.matmul(v[0], v[1])
        }),
        binaryish(
            "batch_matmul",
            OpKind::BatchMatMul,
            |r| vec![normal(r, &[2, 3, 4]), normal(r, &[2, 4, 2])],
            |g, v| g.batch_matmul(v[0], v[1], false),
        ),
        binaryish(
            "batch_matmul_transposed",
            OpKind::BatchMatMul,
            |r| vec![normal(r, &[2, 3, 4]), normal(r, &[2, 5, 4])],
            |g, v| g.batch_matmul(v[0], v[1], true),
        ),
        binaryish("add", OpKind::Add, |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])], |g, v| {
            g.add(v[0], v[1])
        }),
        binaryish("sub", OpKind::Sub, |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])], |g, v| {
            g.sub(v[0], v[1])
        }),
        binaryish("mul", OpKind::Mul, |r| vec![normal(r, &[3, 4]), normal(r, &[3, 4])], |g, v| {
            g.mul(v[0], v[1])
        }),
        unary("scale", OpKind::Scale, |g, v| Ok(g.scale(v, -1.7))),
        unary("add_scalar", OpKind::AddScalar, |g, v| Ok(g.add_scalar(v, 0.3))),
        binaryish(
            "add_row_vector",
            OpKind::AddRowVector,
            |r| vec![normal(r, &[3, 4]), normal(r, &[4])],
            |g, v| g.add_row_vector(v[0], v[1]),
        ),
        binaryish(
            "relu",
            OpKind::Relu,
            |r| {
                let t = normal(r, &[3, 4]);
                let data = t.data().iter().map(|v| v.signum() * (RELU_MARGIN + v.abs())).collect();
                vec![Tensor::new(vec![3, 4], data).expect("shape")]
            },
            |g, v| Ok(g.relu(v[0])),
        ),
        unary("gelu", OpKind::Gelu, |g, v| Ok(g.gelu(v))),
        unary("tanh", OpKind::Tanh, |g, v| Ok(g.tanh(v))),
        unary("exp", OpKind::Exp, |g, v| Ok(g.exp(v))),
        binaryish(
            "log",
            OpKind::Log,
            |r| {
                let t = normal(r, &[3, 4]);
                let data = t.data().iter().map(|v| 0.5 + v.abs()).collect();
                vec![Tensor::new(vec![3, 4], data).expect("shape")]
            },
            |g, v| Ok(g.log(v[0])),
        ),
        binaryish("softmax_rows", OpKind::SoftmaxRows, |r| vec![normal(r, &[3, 5])], |g, v| {
            g.softmax_rows(v[0])
        }),
        binaryish(
            "layer_norm",
            OpKind::LayerNorm,
            |r| vec![normal(r, &[3, 6]), normal(r, &[6]), normal(r, &[6])],
            |g, v| g.layer_norm(v[0], v[1], v[2]),
        ),
        binaryish("gather", OpKind::Gather, |r| vec![normal(r, &[3, 4])], |g, v| {
            g.gather(v[0], vec![0, 5, 5, 11, 2, 7, 0, 3, 9, 1], &[5, 2])
        }),
        binaryish("reshape", OpKind::Reshape, |r| vec![normal(r, &[3, 4])], |g, v| {
            g.reshape(v[0], &[2, 6])
        }),
        unary("sum", OpKind::Sum, |g, v| Ok(g.sum(v))),
        unary("mean", OpKind::Mean, |g, v| Ok(g.mean(v))),
        unary("log_mean_exp", OpKind::LogMeanExp, |g, v| Ok(g.log_mean_exp(v))),
        Case {
            name: "linear_mse",
            op: None,
            inputs: |r| vec![normal(r, &[4, 3]), normal(r, &[3, 2]), normal(r, &[2]), normal(r, &[4, 2])],
            build: Box::new(|g, ts| {
                let vars = params(g, ts);
                let y = g.linear(vars[0], vars[1], vars[2])?;
                let loss = g.mse(y, vars[3])?;
                Ok((loss, vars))
            }),
        },
        neck_case(),
    ]
}

fn forward_value(case: &Case, inputs: &[Tensor], cotangent: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let (out, _) = (case.build)(&mut g, inputs)?;
    Ok(g.value(out)
        .data()
        .iter()
        .zip(cotangent.data())
        .map(|(a, b)| a * b)
        .sum())
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-300 {
        diff
    } else {
        diff / scale
    }
}

fn check_once(case: &Case, seed: u64, fault: Option<OpKind>) -> Result<f64> {
    let mut r = rng::seeded(rng::derive_seed(seed, case.name));
    let mut inputs = (case.inputs)(&mut r);
    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_backward_fault(kind);
    }
    let (out, vars) = (case.build)(&mut g, &inputs)?;
    let cotangent = normal(&mut r, g.shape(out));
    let grads = g.backward_from(out, &cotangent)?;
    let analytic: Vec<f64> = vars.iter().flat_map(|&v| grads.get(v).into_data()).collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let up = forward_value(case, &inputs, &cotangent)?;
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let down = forward_value(case, &inputs, &cotangent)?;
            inputs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn run_case(case: &Case, opts: &GradcheckOptions) -> OpCheck {
    let mut max_err: f64 = 0.0;
    let mut error = None;
    for s in 0..opts.seeds {
        match check_once(case, opts.base_seed.wrapping_add(s as u64), opts.fault) {
            Ok(e) => max_err = if e.is_nan() { f64::NAN } else { max_err.max(e) },
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
        if max_err.is_nan() {
            break;
        }
    }
    OpCheck {
        name: case.name.to_string(),
        op: case.op.map(|k| k.name().to_string()),
        max_rel_err: max_err,
        seeds: opts.seeds,
        passed: error.is_none() && max_err < REL_TOLERANCE,
        error,
    }
}

/// Runs every check; each op and the composite cases over `opts.seeds` seeds.
pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let cases = cases();
    let checks: Vec<OpCheck> = cases.par_iter().map(|c| run_case(c, opts)).collect();
    let passed = opts.seeds > 0 && checks.iter().all(|c| c.passed);
    GradcheckReport {
        step: FD_STEP,
        tolerance: REL_TOLERANCE,
        seeds: opts.seeds,
        injected_fault: opts.fault.map(|k| k.name().to_string()),
        checks,
        passed,
    }
}

/// Op kinds covered by at least one check.
pub fn covered_ops() -> Vec<OpKind> {
    let cases = cases();
    ALL_OPS
        .iter()
        .copied()
        .filter(|k| cases.iter().any(|c| c.op == Some(*k)))
        .collect()
}
