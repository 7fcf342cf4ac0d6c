//! Define-then-run computation graph with reverse-mode gradients.
//!
//! Nodes are appended in construction order, which is a topological order, so
//! `forward` walks the node list once and `backward` walks it once in reverse.
//! Leaves are named: parameters receive gradients, inputs (data, dropout masks,
//! latent noise) are treated as constants.

use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use crate::coupling::{coupled_nll_derivative, coupled_nll_unchecked};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum LeafShape {
    Fixed(Vec<usize>),
    /// 2-D with any number of rows.
    Rows(usize),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf {
        name: String,
        shape: LeafShape,
        trainable: bool,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    BernoulliLogLik { pred: Var, target: Var },
    CoupledNll(Var, f64),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::RowSum(..) => "row_sum",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::BernoulliLogLik { .. } => "bernoulli_log_lik",
            Op::CoupledNll(..) => "coupled_nll",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf { .. } => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::BernoulliLogLik { pred: a, target: b } => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Clamp(a, _, _)
            | Op::RowSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::CoupledNll(a, _) => vec![a],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    label: String,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every trainable leaf, by leaf name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { trainable, .. } => *trainable,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let label = format!("{}#{}", op.kind(), self.nodes.len());
        self.nodes.push(Node {
            op,
            label,
            needs_grad,
        });
        self.values.push(None);
        self.evaluated = false;
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf with a fixed shape.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Var {
        let v = self.push(Op::Leaf {
            name: name.to_string(),
            shape: LeafShape::Fixed(shape.to_vec()),
            trainable: true,
        });
        self.nodes[v.0].label = name.to_string();
        v
    }

    /// Constant 2-D leaf with `cols` columns and any number of rows.
    pub fn input(&mut self, name: &str, cols: usize) -> Var {
        let v = self.push(Op::Leaf {
            name: name.to_string(),
            shape: LeafShape::Rows(cols),
            trainable: false,
        });
        self.nodes[v.0].label = name.to_string();
        v
    }

    /// Attach a human-readable name used in error messages.
    pub fn label(&mut self, v: Var, label: &str) -> Var {
        self.nodes[v.0].label = label.to_string();
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    /// `[n, m] + [m]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        self.push(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::AddScalar(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.push(Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.push(Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.push(Op::Square(x))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.push(Op::Clamp(x, lo, hi))
    }

    /// `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        self.push(Op::RowSum(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.push(Op::Mean(x))
    }

    /// Elementwise `t·ln p + (1−t)·ln(1−p)`; `p` must lie strictly inside (0, 1).
    pub fn bernoulli_log_lik(&mut self, pred: Var, target: Var) -> Var {
        self.push(Op::BernoulliLogLik { pred, target })
    }

    /// Elementwise coupled negative log-likelihood of a log-likelihood tensor.
    pub fn coupled_nll(&mut self, log_p: Var, kappa: f64) -> Var {
        self.push(Op::CoupledNll(log_p, kappa))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        self.values[v.0].as_ref().ok_or_else(|| {
            Error::Graph(format!("node {} has not been evaluated", self.nodes[v.0].label))
        })
    }

    /// Evaluate every node. Each leaf must be fed exactly once by name.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<()> {
        self.evaluated = false;
        let mut used = vec![false; feeds.len()];
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf { name, shape, .. } => {
                    let pos = feeds.iter().position(|(n, _)| n == name).ok_or_else(|| {
                        Error::Graph(format!("missing feed for leaf {name}"))
                    })?;
                    used[pos] = true;
                    let t = feeds[pos].1;
                    let ok = match shape {
                        LeafShape::Fixed(s) => t.shape() == s.as_slice(),
                        LeafShape::Rows(c) => t.shape().len() == 2 && t.shape()[1] == *c,
                    };
                    if !ok {
                        return Err(Error::Shape {
                            node: name.clone(),
                            detail: format!("declared {shape:?}, fed {:?}", t.shape()),
                        });
                    }
                    t.clone()
                }
                _ => self.eval_node(i)?,
            };
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: self.nodes[i].label.clone(),
                });
            }
            self.values[i] = Some(value);
        }
        if let Some(pos) = used.iter().position(|u| !u) {
            return Err(Error::Graph(format!("feed {} matches no leaf", feeds[pos].0)));
        }
        self.evaluated = true;
        Ok(())
    }

    fn shape_err(&self, i: usize, detail: String) -> Error {
        Error::Shape {
            node: self.nodes[i].label.clone(),
            detail,
        }
    }

    fn val(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("inputs precede their consumers")
    }

    fn same_shape(&self, i: usize, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(self.shape_err(i, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok(())
    }

    fn zip_with(&self, i: usize, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (a, b) = (self.val(a), self.val(b));
        self.same_shape(i, a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape(), data)
    }

    fn eval_node(&self, i: usize) -> Result<Tensor> {
        Ok(match self.nodes[i].op {
            Op::Leaf { .. } => unreachable!("leaves are fed"),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(a), self.val(b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(self.shape_err(i, format!("{:?} x {:?}", a.shape(), b.shape())));
                }
                let (n, k, m) = (a.rows(), a.cols(), b.cols());
                let mut out = Tensor::zeros(&[n, m]);
                gemm(n, k, m, a.data(), (k as isize, 1), b.data(), (m as isize, 1), 0.0, out.data_mut());
                out
            }
            Op::AddBias(x, bias) => {
                let (x, bias) = (self.val(x), self.val(bias));
                if x.shape().len() != 2 || bias.shape() != [x.cols()] {
                    return Err(self.shape_err(i, format!("{:?} + bias {:?}", x.shape(), bias.shape())));
                }
                let mut out = x.clone();
                for row in out.data_mut().chunks_exact_mut(bias.len()) {
                    for (o, b) in row.iter_mut().zip(bias.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Add(a, b) => self.zip_with(i, a, b, |x, y| x + y)?,
            Op::Sub(a, b) => self.zip_with(i, a, b, |x, y| x - y)?,
            Op::Mul(a, b) => self.zip_with(i, a, b, |x, y| x * y)?,
            Op::Div(a, b) => self.zip_with(i, a, b, |x, y| x / y)?,
            Op::Scale(x, c) => self.val(x).map(|v| v * c),
            Op::AddScalar(x, c) => self.val(x).map(|v| v + c),
            Op::Relu(x) => self.val(x).map(|v| v.max(0.0)),
            Op::Sigmoid(x) => self.val(x).map(sigmoid),
            Op::Exp(x) => self.val(x).map(f64::exp),
            Op::Log(x) => self.val(x).map(f64::ln),
            Op::Square(x) => self.val(x).map(|v| v * v),
            Op::Clamp(x, lo, hi) => self.val(x).map(|v| v.clamp(lo, hi)),
            Op::RowSum(x) => {
                let x = self.val(x);
                if x.shape().len() != 2 {
                    return Err(self.shape_err(i, format!("row_sum of {:?}", x.shape())));
                }
                let data = x.data().chunks_exact(x.cols().max(1)).map(|r| r.iter().sum()).collect();
                Tensor::from_vec(&[x.rows(), 1], data)?
            }
            Op::Sum(x) => Tensor::scalar(self.val(x).data().iter().sum()),
            Op::Mean(x) => {
                let x = self.val(x);
                if x.is_empty() {
                    return Err(self.shape_err(i, "mean of empty tensor".into()));
                }
                Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
            }
            Op::BernoulliLogLik { pred, target } => {
                self.zip_with(i, pred, target, |p, t| t * p.ln() + (1.0 - t) * (-p).ln_1p())?
            }
            Op::CoupledNll(x, kappa) => self.val(x).map(|l| coupled_nll_unchecked(l, kappa)),
        })
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.evaluated {
            return Err(Error::Graph("backward called before forward".into()));
        }
        let loss_value = self.val(loss);
        if loss_value.len() != 1 {
            return Err(Error::Graph(format!(
                "loss {} is not a scalar (shape {:?})",
                self.nodes[loss.0].label,
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    node: format!("grad of {}", self.nodes[i].label),
                });
            }
            if let Op::Leaf { name, trainable, .. } = &self.nodes[i].op {
                if *trainable {
                    out.by_name.insert(name.clone(), g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        // Parameters not reached from the loss get zero gradients.
        for node in &self.nodes {
            if let Op::Leaf { name, trainable: true, .. } = &node.op {
                if !out.by_name.contains_key(name) {
                    let shape = match &node.shape_hint() {
                        Some(s) => s.clone(),
                        None => continue,
                    };
                    out.by_name.insert(name.clone(), Tensor::zeros(&shape));
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn unary(&self, g: &Tensor, x: Var, f: impl Fn(f64, f64, f64) -> f64, y: &Tensor) -> Tensor {
        // f(upstream, input, output)
        let xv = self.val(x);
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .zip(y.data())
            .map(|((&g, &x), &y)| f(g, x, y))
            .collect();
        Tensor::from_vec(g.shape(), data).expect("unary gradient keeps shape")
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = self.values[i].as_ref().expect("forward ran");
        match self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(a), self.val(b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if self.wants(a) {
                    let mut da = Tensor::zeros(&[n, k]);
                    gemm(n, m, k, g.data(), (m as isize, 1), bv.data(), (1, m as isize), 0.0, da.data_mut());
                    Self::accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let mut db = Tensor::zeros(&[k, m]);
                    gemm(k, n, m, av.data(), (1, k as isize), g.data(), (m as isize, 1), 0.0, db.data_mut());
                    Self::accumulate(grads, b, db);
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(bias) {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks_exact(cols.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    Self::accumulate(grads, bias, Tensor::from_vec(&[cols], db).expect("bias shape"));
                }
                if self.wants(x) {
                    Self::accumulate(grads, x, g.clone());
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, g.clone());
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    Self::accumulate(grads, a, elementwise(g, self.val(b), |g, b| g * b));
                }
                if self.wants(b) {
                    Self::accumulate(grads, b, elementwise(g, self.val(a), |g, a| g * a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.val(b);
                if self.wants(a) {
                    Self::accumulate(grads, a, elementwise(g, bv, |g, b| g / b));
                }
                if self.wants(b) {
                    // d(a/b)/db = −(a/b)/b = −y/b
                    let gy = elementwise(g, y, |g, y| g * y);
                    Self::accumulate(grads, b, elementwise(&gy, bv, |gy, b| -gy / b));
                }
            }
            Op::Scale(x, c) => Self::accumulate(grads, x, g.map(|v| v * c)),
            Op::AddScalar(x, _) => Self::accumulate(grads, x, g.clone()),
            Op::Relu(x) => {
                let d = self.unary(g, x, |g, x, _| if x > 0.0 { g } else { 0.0 }, y);
                Self::accumulate(grads, x, d);
            }
            Op::Sigmoid(x) => {
                let d = self.unary(g, x, |g, _, y| g * y * (1.0 - y), y);
                Self::accumulate(grads, x, d);
            }
            Op::Exp(x) => {
                let d = self.unary(g, x, |g, _, y| g * y, y);
                Self::accumulate(grads, x, d);
            }
            Op::Log(x) => {
                let d = self.unary(g, x, |g, x, _| g / x, y);
                Self::accumulate(grads, x, d);
            }
            Op::Square(x) => {
                let d = self.unary(g, x, |g, x, _| 2.0 * x * g, y);
                Self::accumulate(grads, x, d);
            }
            Op::Clamp(x, lo, hi) => {
                let d = self.unary(g, x, |g, x, _| if x >= lo && x <= hi { g } else { 0.0 }, y);
                Self::accumulate(grads, x, d);
            }
            Op::RowSum(x) => {
                let xv = self.val(x);
                let cols = xv.cols();
                let mut data = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    data.extend(std::iter::repeat_n(gi, cols));
                }
                Self::accumulate(grads, x, Tensor::from_vec(xv.shape(), data).expect("row_sum grad"));
            }
            Op::Sum(x) => {
                let shape = self.val(x).shape().to_vec();
                Self::accumulate(grads, x, Tensor::filled(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.val(x);
                let shape = xv.shape().to_vec();
                Self::accumulate(grads, x, Tensor::filled(&shape, g.item() / xv.len() as f64));
            }
            Op::BernoulliLogLik { pred, target } => {
                let (pv, tv) = (self.val(pred), self.val(target));
                if self.wants(pred) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .zip(g.data())
                        .map(|((&p, &t), &g)| g * (t / p - (1.0 - t) / (1.0 - p)))
                        .collect();
                    Self::accumulate(grads, pred, Tensor::from_vec(pv.shape(), d).expect("shape"));
                }
                if self.wants(target) {
                    let d = pv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&p, &g)| g * (p.ln() - (-p).ln_1p()))
                        .collect();
                    Self::accumulate(grads, target, Tensor::from_vec(pv.shape(), d).expect("shape"));
                }
            }
            Op::CoupledNll(x, kappa) => {
                let d = self.unary(g, x, |g, l, _| g * coupled_nll_derivative(l, kappa), y);
                Self::accumulate(grads, x, d);
            }
        }
    }
}

impl Node {
    fn shape_hint(&self) -> Option<Vec<usize>> {
        match &self.op {
            Op::Leaf {
                shape: LeafShape::Fixed(s),
                ..
            } => Some(s.clone()),
            _ => None,
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape(), data).expect("elementwise keeps shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
