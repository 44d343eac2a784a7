//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its forward value; node ids only ever
//! point backwards, so insertion order is a topological order and the
//! backward sweep is a single reverse pass.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    BatchMatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRowVector,
    Relu,
    Gelu,
    Tanh,
    Exp,
    Log,
    SoftmaxRows,
    LayerNorm,
    Gather,
    Reshape,
    Sum,
    Mean,
    LogMeanExp,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::BatchMatMul => "batch_matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::AddRowVector => "add_row_vector",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::LogMeanExp => "log_mean_exp",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const ALL_OPS: [OpKind; 21] = [
    OpKind::Leaf,
    OpKind::MatMul,
    OpKind::BatchMatMul,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::AddRowVector,
    OpKind::Relu,
    OpKind::Gelu,
    OpKind::Tanh,
    OpKind::Exp,
    OpKind::Log,
    OpKind::SoftmaxRows,
    OpKind::LayerNorm,
    OpKind::Gather,
    OpKind::Reshape,
    OpKind::Sum,
    OpKind::Mean,
    OpKind::LogMeanExp,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddScalar { a: Var },
    AddRowVector { a: Var, v: Var },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Log { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { a: Var, index: Vec<usize> },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    LogMeanExp { a: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::AddRowVector { .. } => OpKind::AddRowVector,
            Op::Relu { .. } => OpKind::Relu,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Exp { .. } => OpKind::Exp,
            Op::Log { .. } => OpKind::Log,
            Op::SoftmaxRows { .. } => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::LogMeanExp { .. } => OpKind::LogMeanExp,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-forward operation record.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<Var>,
    fault: Option<OpKind>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn is_reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    std_normal_cdf(x) + x * std_normal_pdf(x)
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, contrib: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    contrib(buf);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test fixture: flips the sign of every gradient contribution emitted
    /// by ops of `kind` during backward.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push(v);
        v
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let value = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// Batched product over the leading axis: `a[B x M x K] * b[B x K x N]`,
    /// or `a * b^T` with `b[B x N x K]` when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::Shape {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for bi in 0..batch {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            if transpose_b {
                out.extend(matmul_bt_raw(ab, bb, m, k, n));
            } else {
                out.extend(matmul_raw(ab, bb, m, k, n));
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::BatchMatMul { a, b, transpose_b }, rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect()
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect()
        } else {
            return Err(Error::Shape {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let shape = if ta.len() == 1 && tb.len() != 1 {
            tb.shape().to_vec()
        } else {
            ta.shape().to_vec()
        };
        Tensor::new(shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Addition of a constant.
    pub fn add_scalar(&mut self, a: Var, value: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x + value).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::AddScalar { a }, rg)
    }

    /// Adds `v` to every contiguous run of `v.len()` elements of `a`
    /// (bias add for `[rows x C]`, positional add for `[N x T x D]`).
    pub fn add_row_vector(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        let c = tv.len();
        if c == 0 || ta.len() % c != 0 {
            return Err(Error::Shape {
                op: "add_row_vector",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let vd = tv.data();
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(vd).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(value, Op::AddRowVector { a, v }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.unary(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.unary(a, gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu { a }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.unary(a, f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh { a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.unary(a, f64::exp);
        let rg = self.rg(a);
        self.push(value, Op::Exp { a }, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.unary(a, f64::ln);
        let rg = self.rg(a);
        self.push(value, Op::Log { a }, rg)
    }

    /// Dispatches one of the named elementwise ops. `relu`/`gelu` ignore `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Usage(format!("{op:?} needs two operands")));
        match op {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Gelu => Ok(self.gelu(a)),
        }
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(i) = t.data().iter().position(|v| v.is_nan()) {
            return Err(Error::numeric("softmax_rows", format!("NaN input at index {i}")));
        }
        let c = t.cols();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v /= total;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SoftmaxRows { a }, rg))
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape {
                op: "gather",
                lhs: vec![index.len()],
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Usage(format!(
                "gather index {bad} out of range for {} elements",
                t.len()
            )));
        }
        let data = index.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { a, index }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }

    /// `ln(mean(exp(a)))` over all elements, computed stably.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let v = log_mean_exp(self.value(a).data());
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), Op::LogMeanExp { a }, rg)
    }

    /// `x * w + b` for `x[rows x in]`, `w[in x out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_vector(y, b)
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(loss, &Tensor::filled(self.shape(loss), 1.0))
    }

    /// Vector-Jacobian product: reverse sweep from `out` seeded with `cotangent`.
    pub fn backward_from(&self, out: Var, cotangent: &Tensor) -> Result<Gradients> {
        if cotangent.shape() != self.shape(out) {
            return Err(Error::Shape {
                op: "backward_from",
                lhs: self.shape(out).to_vec(),
                rhs: cotangent.shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[out.0] = Some(cotangent.data().to_vec());

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.fault == Some(node.op.kind()) {
                let flipped: Vec<f64> = g.iter().map(|v| -v).collect();
                self.propagate(node, &flipped, &mut grads);
            } else {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let ga = matmul_bt_raw(g, tb.data(), n, m, k);
                    accumulate(&mut grads[a.0], n * k, |buf| add_into(buf, &ga));
                }
                if wants(*b) {
                    let gb = matmul_at_raw(ta.data(), g, n, k, m);
                    accumulate(&mut grads[b.0], k * m, |buf| add_into(buf, &gb));
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (batch, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                let n = if *transpose_b { tb.shape()[1] } else { tb.shape()[2] };
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let ab = &ta.data()[bi * m * k..(bi + 1) * m * k];
                    let bb = &tb.data()[bi * k * n..(bi + 1) * k * n];
                    let gblk = &g[bi * m * n..(bi + 1) * m * n];
                    if *transpose_b {
                        // out = a b^T: ga = g b, gb = g^T a
                        ga[bi * m * k..(bi + 1) * m * k]
                            .copy_from_slice(&matmul_raw(gblk, bb, m, n, k));
                        gb[bi * k * n..(bi + 1) * k * n]
                            .copy_from_slice(&matmul_at_raw(gblk, ab, m, n, k));
                    } else {
                        ga[bi * m * k..(bi + 1) * m * k]
                            .copy_from_slice(&matmul_bt_raw(gblk, bb, m, n, k));
                        gb[bi * k * n..(bi + 1) * k * n]
                            .copy_from_slice(&matmul_at_raw(ab, gblk, m, k, n));
                    }
                }
                if wants(*a) {
                    accumulate(&mut grads[a.0], ga.len(), |buf| add_into(buf, &ga));
                }
                if wants(*b) {
                    accumulate(&mut grads[b.0], gb.len(), |buf| add_into(buf, &gb));
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(v) {
                        let len = val(v).len();
                        accumulate(&mut grads[v.0], len, |buf| {
                            if len == g.len() {
                                buf.iter_mut().zip(g).for_each(|(o, &x)| *o += s * x);
                            } else {
                                buf[0] += s * g.iter().sum::<f64>();
                            }
                        });
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let (tv, to) = (val(v), val(other));
                    let len = tv.len();
                    accumulate(&mut grads[v.0], len, |buf| {
                        if len == g.len() {
                            if to.len() == g.len() {
                                for ((o, &x), &y) in buf.iter_mut().zip(g).zip(to.data()) {
                                    *o += x * y;
                                }
                            } else {
                                let y = to.data()[0];
                                buf.iter_mut().zip(g).for_each(|(o, &x)| *o += x * y);
                            }
                        } else {
                            buf[0] += g.iter().zip(to.data()).map(|(x, y)| x * y).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        buf.iter_mut().zip(g).for_each(|(o, &x)| *o += factor * x)
                    });
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| add_into(buf, g));
                }
            }
            Op::AddRowVector { a, v } => {
                if wants(*a) {
                    accumulate(&mut grads[a.0], g.len(), |buf| add_into(buf, g));
                }
                if wants(*v) {
                    let c = val(*v).len();
                    accumulate(&mut grads[v.0], c, |buf| {
                        for row in g.chunks(c) {
                            add_into(buf, row);
                        }
                    });
                }
            }
            Op::Relu { a } => self.unary_back(*a, out, g, grads, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu { a } => self.unary_back(*a, out, g, grads, |x, _| gelu_grad(x)),
            Op::Tanh { a } => self.unary_back(*a, out, g, grads, |_, y| 1.0 - y * y),
            Op::Exp { a } => self.unary_back(*a, out, g, grads, |_, y| y),
            Op::Log { a } => self.unary_back(*a, out, g, grads, |x, _| 1.0 / x),
            Op::SoftmaxRows { a } => {
                if wants(*a) {
                    let c = node.value.cols();
                    accumulate(&mut grads[a.0], g.len(), |buf| {
                        for ((gr, yr), br) in g.chunks(c).zip(out.chunks(c)).zip(buf.chunks_mut(c)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for ((o, &gx), &y) in br.iter_mut().zip(gr).zip(yr) {
                                *o += y * (gx - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gn = val(*gain).data();
                if wants(*gain) {
                    accumulate(&mut grads[gain.0], d, |buf| {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, &gx), &h) in buf.iter_mut().zip(gr).zip(hr) {
                                *o += gx * h;
                            }
                        }
                    });
                }
                if wants(*bias) {
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for gr in g.chunks(d) {
                            add_into(buf, gr);
                        }
                    });
                }
                if wants(*x) {
                    accumulate(&mut grads[x.0], g.len(), |buf| {
                        for (((gr, hr), br), &is) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(buf.chunks_mut(d))
                            .zip(inv_std)
                        {
                            let dh: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dhh =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for ((o, &dhj), &hj) in br.iter_mut().zip(&dh).zip(hr) {
                                *o += is * (dhj - mean_dh - hj * mean_dhh);
                            }
                        }
                    });
                }
            }
            Op::Gather { a, index } => {
                if wants(*a) {
                    let len = val(*a).len();
                    accumulate(&mut grads[a.0], len, |buf| {
                        for (&i, &gx) in index.iter().zip(g) {
                            buf[i] += gx;
                        }
                    });
                }
            }
            Op::Sum { a } | Op::Mean { a } => {
                if wants(*a) {
                    let len = val(*a).len();
                    let scale = if matches!(node.op, Op::Mean { .. }) {
                        g[0] / len as f64
                    } else {
                        g[0]
                    };
                    accumulate(&mut grads[a.0], len, |buf| {
                        buf.iter_mut().for_each(|o| *o += scale)
                    });
                }
            }
            Op::LogMeanExp { a } => {
                if wants(*a) {
                    let xs = val(*a).data();
                    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
                    let total: f64 = w.iter().sum();
                    accumulate(&mut grads[a.0], xs.len(), |buf| {
                        for (o, wi) in buf.iter_mut().zip(&w) {
                            *o += g[0] * wi / total;
                        }
                    });
                }
            }
        }
    }

    fn unary_back(
        &self,
        a: Var,
        out: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        deriv: impl Fn(f64, f64) -> f64,
    ) {
        if !self.nodes[a.0].requires_grad {
            return;
        }
        let xs = self.nodes[a.0].value.data();
        accumulate(&mut grads[a.0], xs.len(), |buf| {
            for (((o, &gx), &x), &y) in buf.iter_mut().zip(g).zip(xs).zip(out) {
                *o += gx * deriv(x, y);
            }
        });
    }
}

fn add_into(buf: &mut [f64], src: &[f64]) {
    buf.iter_mut().zip(src).for_each(|(o, &x)| *o += x);
}

/// Stable `ln(mean(exp(xs)))`.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + (s / xs.len() as f64).ln()
}
