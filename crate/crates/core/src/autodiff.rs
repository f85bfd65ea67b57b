//! Define-by-run reverse-mode differentiation over [`Tensor2`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the node vector is already a topological order and
//! [`Graph::backward`] just walks it in reverse.

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive that produced a node.
#[derive(Debug, Clone)]
pub enum Op {
    /// Trainable parameter.
    Leaf,
    /// Value that never receives gradient.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `n x c` plus a broadcast `1 x c` row.
    AddRow(Var, Var),
    /// Any tensor times a `1 x 1` node.
    MulScalar(Var, Var),
    /// Multiplication by a fixed constant.
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Mean over rows of the cross-entropy of each logit row against its label.
    CrossEntropy { logits: Var, labels: Vec<usize> },
    Sum(Var),
    /// Row-wise scalar function `out[n] = f(x[n, :])` with its gradient rows
    /// cached at forward time.
    RowScalar { input: Var, jacobian: Tensor2 },
}

impl Op {
    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::MulScalar(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Sum(a) => vec![*a],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::RowScalar { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor2,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// `d loss / d var`; all zeros when `var` does not influence the loss.
    pub fn get(&self, var: Var) -> Tensor2 {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor2::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor2 {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[var.0];
                Tensor2::zeros(r, c)
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    fn push(&mut self, value: Tensor2, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => other.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if !x.same_shape(y) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let v = x.zip_map(y, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(row));
        if b.rows() != 1 || b.cols() != x.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} plus row {:?}", x.shape(), b.shape()),
            ));
        }
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, bias) in v.row_mut(r).iter_mut().zip(b.as_slice()) {
                *o += bias;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Affine map `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).shape() != (1, 1) {
            return Err(Error::dim(
                "mul_scalar",
                format!("scalar operand is {:?}", self.value(s).shape()),
            ));
        }
        let k = self.value(s).item();
        let v = self.value(a).scale(k);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// Mean cross-entropy over the rows of `logits`, row `n` scored
    /// against `labels[n]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.rows() || x.rows() == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} labels for {} logit rows", labels.len(), x.rows()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= x.cols()) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {} classes",
                x.cols()
            )));
        }
        let ls = log_softmax_rows(x);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &y)| -ls[(n, y)])
            .sum();
        let v = Tensor2::scalar(total / labels.len() as f64);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor2::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Appends a row-wise scalar function whose value and per-row gradient
    /// were computed by the caller. `values` is `n x 1` and `jacobian` has the
    /// shape of `input`.
    pub fn row_scalar(&mut self, input: Var, values: Tensor2, jacobian: Tensor2) -> Result<Var> {
        let x = self.value(input);
        if values.shape() != (x.rows(), 1) || !jacobian.same_shape(x) {
            return Err(Error::dim(
                "row_scalar",
                format!(
                    "input {:?}, values {:?}, jacobian {:?}",
                    x.shape(),
                    values.shape(),
                    jacobian.shape()
                ),
            ));
        }
        Ok(self.push(values, Op::RowScalar { input, jacobian }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, shapes });
        }
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_t(self.value(*b))?;
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t_matmul(&g)?;
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.sum_rows());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::MulScalar(a, s) => {
                    let k = self.value(*s).item();
                    if self.needs(*s) {
                        let ds: f64 = g
                            .as_slice()
                            .iter()
                            .zip(self.value(*a).as_slice())
                            .map(|(p, q)| p * q)
                            .sum();
                        accumulate(&mut grads, *s, Tensor2::scalar(ds));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.scale(k));
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.scale(*c));
                    }
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - inner);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = gi - yi.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy { logits, labels } => {
                    let scale = g.item() / labels.len() as f64;
                    let mut ga = softmax_rows(self.value(*logits));
                    for (r, &y) in labels.iter().enumerate() {
                        ga[(r, y)] -= 1.0;
                    }
                    accumulate(&mut grads, *logits, ga.scale(scale));
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, Tensor2::filled(r, c, g.item()));
                }
                Op::RowScalar { input, jacobian } => {
                    let mut ga = jacobian.clone();
                    for r in 0..ga.rows() {
                        let gr = g[(r, 0)];
                        for v in ga.row_mut(r) {
                            *v *= gr;
                        }
                    }
                    accumulate(&mut grads, *input, ga);
                }
            }
            // Leaves keep their gradient; interior nodes are consumed above.
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], v: Var, g: Tensor2) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let lse = log_sum_exp(row);
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}
