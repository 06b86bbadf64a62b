//! Minimal reverse-mode automatic differentiation over dense f64 matrices.
//!
//! Every [`Tensor`] is a two-dimensional row-major array bound into an acyclic
//! operation graph via reference counting. Graphs are cheap and short-lived:
//! callers build one per loss evaluation, call [`Tensor::backward`], read
//! gradients off the leaves, and drop the whole thing. A tensor whose inputs
//! all have `requires_grad == false` records no parents, so forward passes on
//! detached data cost no graph bookkeeping.
//!
//! Gradient accumulation order is fixed by construction order (depth-first
//! post-order over parents), and every reduction sums in ascending index
//! order, so repeated backward passes are bitwise deterministic.
//!
//! Graphs are thread-confined (`Rc` is intentionally not `Send`); independent
//! graphs may live on different threads.

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Natural log of 2*pi, shared by the Gaussian density code.
pub const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Matmul(Tensor, Tensor),
    /// Row-broadcast add: (r x c) + (1 x c), the only broadcast form allowed.
    AddRow(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Tanh(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    Softplus(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Clamp(Tensor, f64, f64),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    MeanAll(Tensor),
    MeanAxis(Tensor, usize),
    LogsumexpAxis(Tensor, usize),
    Concat(Vec<Tensor>, usize),
    Slice {
        x: Tensor,
        r0: usize,
        c0: usize,
    },
    Reshape(Tensor),
    /// Stack the whole block k times vertically.
    TileRows(Tensor, usize),
    /// Repeat each row k times consecutively.
    RepeatRows(Tensor, usize),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Matmul(a, b)
            | Op::AddRow(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Clamp(a, _, _)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::MeanAll(a)
            | Op::MeanAxis(a, _)
            | Op::LogsumexpAxis(a, _)
            | Op::Slice { x: a, .. }
            | Op::Reshape(a)
            | Op::TileRows(a, _)
            | Op::RepeatRows(a, _) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus(x) = max(x, 0) + ln(1 + exp(-|x|)), safe against overflow.
fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor {
            node: Rc::new(node),
        }
    }

    /// A graph leaf with explicit data. Gradients accumulate here when
    /// `requires_grad` is set.
    pub fn leaf(rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Domain {
                op: "leaf",
                detail: format!(
                    "data length {} does not match shape {}x{}",
                    data.len(),
                    rows,
                    cols
                ),
            });
        }
        Ok(Tensor::from_node(Node {
            rows,
            cols,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        }))
    }

    /// A constant leaf (no gradient).
    pub fn constant(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::leaf(rows, cols, data, false)
    }

    pub fn scalar(value: f64, requires_grad: bool) -> Tensor {
        Tensor::leaf(1, 1, vec![value], requires_grad).expect("1x1 shape is always valid")
    }

    fn new_op(rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Tensor {
        let requires_grad = op.parents().iter().any(|p| p.node.requires_grad);
        // Constant subgraphs keep no history: drop the parents entirely.
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor::from_node(Node {
            rows,
            cols,
            data,
            grad: RefCell::new(None),
            requires_grad,
            op,
        })
    }

    pub fn rows(&self) -> usize {
        self.node.rows
    }

    pub fn cols(&self) -> usize {
        self.node.cols
    }

    pub fn len(&self) -> usize {
        self.node.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Value of a 1x1 tensor.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.node.data.len(), 1, "value() expects a 1x1 tensor");
        self.node.data[0]
    }

    /// Accumulated gradient, if backward has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same data, no graph, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.rows, self.node.cols, self.node.data.clone(), false)
            .expect("shape of an existing tensor is valid")
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.node.rows != other.node.rows || self.node.cols != other.node.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs_rows: self.node.rows,
                lhs_cols: self.node.cols,
                rhs_rows: other.node.rows,
                rhs_cols: other.node.cols,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "div")?;
        if other.data().iter().any(|&b| b == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".to_string(),
            });
        }
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Ok(Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Div(self.clone(), other.clone()),
        ))
    }

    /// Matrix product with a fixed i-k-j loop: per output element the sum runs
    /// in ascending k, bitwise identical to a naive i-j-k triple loop.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs_rows: self.rows(),
                lhs_cols: self.cols(),
                rhs_rows: other.rows(),
                rhs_cols: other.cols(),
            });
        }
        let data = mm_nn(
            self.data(),
            self.rows(),
            self.cols(),
            other.data(),
            other.cols(),
        );
        Ok(Tensor::new_op(
            self.rows(),
            other.cols(),
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Add a 1 x c row vector to every row of an r x c matrix.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs_rows: self.rows(),
                lhs_cols: self.cols(),
                rhs_rows: row.rows(),
                rhs_cols: row.cols(),
            });
        }
        let cols = self.cols();
        let mut data = self.to_vec();
        let r = row.data();
        for (i, v) in data.iter_mut().enumerate() {
            *v += r[i % cols];
        }
        Ok(Tensor::new_op(
            self.rows(),
            cols,
            data,
            Op::AddRow(self.clone(), row.clone()),
        ))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * s).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Scale(self.clone(), s))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + s).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::AddScalar(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.tanh()).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.max(0.0)).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self.data().iter().map(|&a| stable_sigmoid(a)).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Sigmoid(self.clone()))
    }

    pub fn softplus(&self) -> Tensor {
        let data = self.data().iter().map(|&a| stable_softplus(a)).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Softplus(self.clone()))
    }

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|a| a.exp()).collect();
        Tensor::new_op(self.rows(), self.cols(), data, Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Result<Tensor> {
        if let Some(&bad) = self.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log of non-positive value {bad}"),
            });
        }
        let data = self.data().iter().map(|a| a.ln()).collect();
        Ok(Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Log(self.clone()),
        ))
    }

    /// Clamp values to [lo, hi]. The gradient passes through inside the bounds
    /// and is zero where the input was clamped.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data().iter().map(|a| a.clamp(lo, hi)).collect();
        Tensor::new_op(
            self.rows(),
            self.cols(),
            data,
            Op::Clamp(self.clone(), lo, hi),
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::new_op(1, 1, vec![s], Op::SumAll(self.clone()))
    }

    /// Reduce along `axis`: 0 collapses rows (result 1 x c), 1 collapses
    /// columns (result r x 1).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = (self.rows(), self.cols());
        let data = self.data();
        match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] += data[i * cols + j];
                    }
                }
                Ok(Tensor::new_op(1, cols, out, Op::SumAxis(self.clone(), 0)))
            }
            1 => {
                let mut out = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        out[i] += data[i * cols + j];
                    }
                }
                Ok(Tensor::new_op(rows, 1, out, Op::SumAxis(self.clone(), 1)))
            }
            _ => Err(Error::Domain {
                op: "sum_axis",
                detail: format!("axis must be 0 or 1, got {axis}"),
            }),
        }
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        let s: f64 = self.data().iter().sum();
        Tensor::new_op(1, 1, vec![s / n], Op::MeanAll(self.clone()))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = (self.rows(), self.cols());
        let data = self.data();
        match axis {
            0 => {
                let mut out = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        out[j] += data[i * cols + j];
                    }
                }
                for v in &mut out {
                    *v /= rows as f64;
                }
                Ok(Tensor::new_op(1, cols, out, Op::MeanAxis(self.clone(), 0)))
            }
            1 => {
                let mut out = vec![0.0; rows];
                for i in 0..rows {
                    for j in 0..cols {
                        out[i] += data[i * cols + j];
                    }
                }
                for v in &mut out {
                    *v /= cols as f64;
                }
                Ok(Tensor::new_op(rows, 1, out, Op::MeanAxis(self.clone(), 1)))
            }
            _ => Err(Error::Domain {
                op: "mean_axis",
                detail: format!("axis must be 0 or 1, got {axis}"),
            }),
        }
    }

    /// Numerically stable log-sum-exp along `axis` via max-shift.
    pub fn logsumexp_axis(&self, axis: usize) -> Result<Tensor> {
        let (rows, cols) = (self.rows(), self.cols());
        let data = self.data();
        let reduce = |vals: &mut dyn Iterator<Item = f64>| -> f64 {
            let vals: Vec<f64> = vals.collect();
            let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = vals.iter().map(|v| (v - m).exp()).sum();
            m + s.ln()
        };
        match axis {
            0 => {
                let out: Vec<f64> = (0..cols)
                    .map(|j| reduce(&mut (0..rows).map(|i| data[i * cols + j])))
                    .collect();
                Ok(Tensor::new_op(
                    1,
                    cols,
                    out,
                    Op::LogsumexpAxis(self.clone(), 0),
                ))
            }
            1 => {
                let out: Vec<f64> = (0..rows)
                    .map(|i| reduce(&mut (0..cols).map(|j| data[i * cols + j])))
                    .collect();
                Ok(Tensor::new_op(
                    rows,
                    1,
                    out,
                    Op::LogsumexpAxis(self.clone(), 1),
                ))
            }
            _ => Err(Error::Domain {
                op: "logsumexp_axis",
                detail: format!("axis must be 0 or 1, got {axis}"),
            }),
        }
    }

    /// Concatenate along `axis` (0 stacks vertically, 1 side by side).
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptySet {
                what: "concat parts",
            });
        }
        match axis {
            0 => {
                let cols = parts[0].cols();
                for p in parts {
                    if p.cols() != cols {
                        return Err(Error::ShapeMismatch {
                            op: "concat axis 0",
                            lhs_rows: parts[0].rows(),
                            lhs_cols: cols,
                            rhs_rows: p.rows(),
                            rhs_cols: p.cols(),
                        });
                    }
                }
                let rows = parts.iter().map(|p| p.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in parts {
                    data.extend_from_slice(p.data());
                }
                Ok(Tensor::new_op(
                    rows,
                    cols,
                    data,
                    Op::Concat(parts.to_vec(), 0),
                ))
            }
            1 => {
                let rows = parts[0].rows();
                for p in parts {
                    if p.rows() != rows {
                        return Err(Error::ShapeMismatch {
                            op: "concat axis 1",
                            lhs_rows: rows,
                            lhs_cols: parts[0].cols(),
                            rhs_rows: p.rows(),
                            rhs_cols: p.cols(),
                        });
                    }
                }
                let cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for p in parts {
                        let pc = p.cols();
                        data.extend_from_slice(&p.data()[i * pc..(i + 1) * pc]);
                    }
                }
                Ok(Tensor::new_op(
                    rows,
                    cols,
                    data,
                    Op::Concat(parts.to_vec(), 1),
                ))
            }
            _ => Err(Error::Domain {
                op: "concat",
                detail: format!("axis must be 0 or 1, got {axis}"),
            }),
        }
    }

    /// Rectangular sub-block `[r0..r1) x [c0..c1)`.
    pub fn slice(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Tensor> {
        if r1 > self.rows() || c1 > self.cols() || r0 >= r1 || c0 >= c1 {
            return Err(Error::Domain {
                op: "slice",
                detail: format!(
                    "range [{r0}..{r1}) x [{c0}..{c1}) out of bounds for {}x{}",
                    self.rows(),
                    self.cols()
                ),
            });
        }
        let (rows, cols) = (r1 - r0, c1 - c0);
        let mut data = Vec::with_capacity(rows * cols);
        for i in r0..r1 {
            let base = i * self.cols();
            data.extend_from_slice(&self.data()[base + c0..base + c1]);
        }
        Ok(Tensor::new_op(
            rows,
            cols,
            data,
            Op::Slice {
                x: self.clone(),
                r0,
                c0,
            },
        ))
    }

    /// Reinterpret the row-major buffer under a new shape of equal length.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows * cols != self.len() {
            return Err(Error::Domain {
                op: "reshape",
                detail: format!(
                    "cannot view {}x{} as {rows}x{cols}",
                    self.rows(),
                    self.cols()
                ),
            });
        }
        Ok(Tensor::new_op(
            rows,
            cols,
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Stack this block k times vertically: (r x c) -> (k*r x c).
    pub fn tile_rows(&self, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::Domain {
                op: "tile_rows",
                detail: "k must be positive".to_string(),
            });
        }
        let mut data = Vec::with_capacity(self.len() * k);
        for _ in 0..k {
            data.extend_from_slice(self.data());
        }
        Ok(Tensor::new_op(
            self.rows() * k,
            self.cols(),
            data,
            Op::TileRows(self.clone(), k),
        ))
    }

    /// Repeat each row k times consecutively: (r x c) -> (r*k x c).
    pub fn repeat_rows(&self, k: usize) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::Domain {
                op: "repeat_rows",
                detail: "k must be positive".to_string(),
            });
        }
        let cols = self.cols();
        let mut data = Vec::with_capacity(self.len() * k);
        for i in 0..self.rows() {
            for _ in 0..k {
                data.extend_from_slice(&self.data()[i * cols..(i + 1) * cols]);
            }
        }
        Ok(Tensor::new_op(
            self.rows() * k,
            cols,
            data,
            Op::RepeatRows(self.clone(), k),
        ))
    }

    /// Reverse-mode pass from a scalar loss. Gradients accumulate into every
    /// reachable tensor with `requires_grad`; call repeatedly to add, zero via
    /// [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.rows() != 1 || self.cols() != 1 {
            return Err(Error::NonScalarLoss {
                rows: self.rows(),
                cols: self.cols(),
            });
        }
        if !self.node.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        accumulate(self, &[1.0]);
        for t in order.iter().rev() {
            let g = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            propagate(t, &g);
            // Only leaves accumulate across passes; op nodes are scratch
            // space and must not leak gradient into a later backward call.
            if !matches!(t.node.op, Op::Leaf) {
                *t.node.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("rows", &self.node.rows)
            .field("cols", &self.node.cols)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

/// Depth-first post-order over the requires_grad subgraph, iterative to keep
/// deep chains off the call stack.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    enum Phase {
        Enter(Tensor),
        Exit(Tensor),
    }
    let mut order = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack = vec![Phase::Enter(root.clone())];
    while let Some(phase) = stack.pop() {
        match phase {
            Phase::Enter(t) => {
                if !t.node.requires_grad {
                    continue;
                }
                let ptr = Rc::as_ptr(&t.node);
                if !visited.insert(ptr) {
                    continue;
                }
                let parents: Vec<Tensor> = t.node.op.parents().into_iter().cloned().collect();
                stack.push(Phase::Exit(t));
                // Reversed so parents are visited in declaration order.
                for p in parents.into_iter().rev() {
                    stack.push(Phase::Enter(p));
                }
            }
            Phase::Exit(t) => order.push(t),
        }
    }
    order
}

fn accumulate(t: &Tensor, contrib: &[f64]) {
    if !t.node.requires_grad {
        return;
    }
    let mut slot = t.node.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn accumulate_with(t: &Tensor, f: impl FnOnce(&mut [f64])) {
    if !t.node.requires_grad {
        return;
    }
    let mut slot = t.node.grad.borrow_mut();
    if slot.is_none() {
        *slot = Some(vec![0.0; t.node.data.len()]);
    }
    f(slot.as_mut().expect("just initialized"));
}

/// Push the output gradient `g` of node `t` into its parents.
fn propagate(t: &Tensor, g: &[f64]) {
    let (rows, cols) = (t.node.rows, t.node.cols);
    match &t.node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(a, g);
            accumulate(b, g);
        }
        Op::Sub(a, b) => {
            accumulate(a, g);
            accumulate_with(b, |gb| {
                for (bi, gi) in gb.iter_mut().zip(g) {
                    *bi -= gi;
                }
            });
        }
        Op::Mul(a, b) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), bi) in ga.iter_mut().zip(g).zip(b.data()) {
                    *ai += gi * bi;
                }
            });
            accumulate_with(b, |gb| {
                for ((bi, gi), ai) in gb.iter_mut().zip(g).zip(a.data()) {
                    *bi += gi * ai;
                }
            });
        }
        Op::Div(a, b) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), bi) in ga.iter_mut().zip(g).zip(b.data()) {
                    *ai += gi / bi;
                }
            });
            accumulate_with(b, |gb| {
                for (i, gbi) in gb.iter_mut().enumerate() {
                    let bi = b.data()[i];
                    *gbi -= g[i] * a.data()[i] / (bi * bi);
                }
            });
        }
        Op::Matmul(a, b) => {
            // dA = g . B^T, dB = A^T . g
            accumulate_with(a, |ga| {
                mm_nt_into(g, rows, cols, b.data(), b.node.rows, ga);
            });
            accumulate_with(b, |gb| {
                mm_tn_into(a.data(), a.node.rows, a.node.cols, g, cols, gb);
            });
        }
        Op::AddRow(a, b) => {
            accumulate(a, g);
            accumulate_with(b, |gb| {
                for i in 0..rows {
                    for j in 0..cols {
                        gb[j] += g[i * cols + j];
                    }
                }
            });
        }
        Op::Scale(a, s) => {
            accumulate_with(a, |ga| {
                for (ai, gi) in ga.iter_mut().zip(g) {
                    *ai += gi * s;
                }
            });
        }
        Op::AddScalar(a) => accumulate(a, g),
        Op::Tanh(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), yi) in ga.iter_mut().zip(g).zip(t.node.data.iter()) {
                    *ai += gi * (1.0 - yi * yi);
                }
            });
        }
        Op::Relu(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), xi) in ga.iter_mut().zip(g).zip(a.data()) {
                    if *xi > 0.0 {
                        *ai += gi;
                    }
                }
            });
        }
        Op::Sigmoid(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), yi) in ga.iter_mut().zip(g).zip(t.node.data.iter()) {
                    *ai += gi * yi * (1.0 - yi);
                }
            });
        }
        Op::Softplus(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), xi) in ga.iter_mut().zip(g).zip(a.data()) {
                    *ai += gi * stable_sigmoid(*xi);
                }
            });
        }
        Op::Exp(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), yi) in ga.iter_mut().zip(g).zip(t.node.data.iter()) {
                    *ai += gi * yi;
                }
            });
        }
        Op::Log(a) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), xi) in ga.iter_mut().zip(g).zip(a.data()) {
                    *ai += gi / xi;
                }
            });
        }
        Op::Clamp(a, lo, hi) => {
            accumulate_with(a, |ga| {
                for ((ai, gi), xi) in ga.iter_mut().zip(g).zip(a.data()) {
                    if *xi >= *lo && *xi <= *hi {
                        *ai += gi;
                    }
                }
            });
        }
        Op::SumAll(a) => {
            accumulate_with(a, |ga| {
                for ai in ga.iter_mut() {
                    *ai += g[0];
                }
            });
        }
        Op::SumAxis(a, axis) => {
            let (ar, ac) = (a.node.rows, a.node.cols);
            accumulate_with(a, |ga| {
                for i in 0..ar {
                    for j in 0..ac {
                        ga[i * ac + j] += if *axis == 0 { g[j] } else { g[i] };
                    }
                }
            });
        }
        Op::MeanAll(a) => {
            let n = a.node.data.len() as f64;
            accumulate_with(a, |ga| {
                for ai in ga.iter_mut() {
                    *ai += g[0] / n;
                }
            });
        }
        Op::MeanAxis(a, axis) => {
            let (ar, ac) = (a.node.rows, a.node.cols);
            let denom = if *axis == 0 { ar as f64 } else { ac as f64 };
            accumulate_with(a, |ga| {
                for i in 0..ar {
                    for j in 0..ac {
                        ga[i * ac + j] += (if *axis == 0 { g[j] } else { g[i] }) / denom;
                    }
                }
            });
        }
        Op::LogsumexpAxis(a, axis) => {
            // d lse / d x_i = exp(x_i - lse)
            let (ar, ac) = (a.node.rows, a.node.cols);
            let out = &t.node.data;
            accumulate_with(a, |ga| {
                for i in 0..ar {
                    for j in 0..ac {
                        let (gi, oi) = if *axis == 0 {
                            (g[j], out[j])
                        } else {
                            (g[i], out[i])
                        };
                        ga[i * ac + j] += gi * (a.data()[i * ac + j] - oi).exp();
                    }
                }
            });
        }
        Op::Concat(parts, axis) => {
            if *axis == 0 {
                let mut row0 = 0;
                for p in parts {
                    let (pr, pc) = (p.node.rows, p.node.cols);
                    accumulate_with(p, |gp| {
                        let start = row0 * cols;
                        for (gpi, gi) in gp.iter_mut().zip(&g[start..start + pr * pc]) {
                            *gpi += gi;
                        }
                    });
                    row0 += pr;
                }
            } else {
                let mut col0 = 0;
                for p in parts {
                    let pc = p.node.cols;
                    accumulate_with(p, |gp| {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + col0 + j];
                            }
                        }
                    });
                    col0 += pc;
                }
            }
        }
        Op::Slice { x, r0, c0 } => {
            let xc = x.node.cols;
            accumulate_with(x, |gx| {
                for i in 0..rows {
                    for j in 0..cols {
                        gx[(r0 + i) * xc + (c0 + j)] += g[i * cols + j];
                    }
                }
            });
        }
        Op::Reshape(a) => accumulate(a, g),
        Op::TileRows(a, k) => {
            let (ar, ac) = (a.node.rows, a.node.cols);
            accumulate_with(a, |ga| {
                for rep in 0..*k {
                    let base = rep * ar * ac;
                    for (gai, gi) in ga.iter_mut().zip(&g[base..base + ar * ac]) {
                        *gai += gi;
                    }
                }
            });
        }
        Op::RepeatRows(a, k) => {
            let (ar, ac) = (a.node.rows, a.node.cols);
            accumulate_with(a, |ga| {
                for i in 0..ar {
                    for rep in 0..*k {
                        let base = (i * k + rep) * ac;
                        for j in 0..ac {
                            ga[i * ac + j] += g[base + j];
                        }
                    }
                }
            });
        }
    }
}

/// C = A (ar x ac) . B (ac x bc), row-major, ascending-k accumulation.
fn mm_nn(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize) -> Vec<f64> {
    let mut c = vec![0.0; ar * bc];
    for i in 0..ar {
        for k in 0..ac {
            let aik = a[i * ac + k];
            let crow = i * bc;
            let brow = k * bc;
            for j in 0..bc {
                c[crow + j] += aik * b[brow + j];
            }
        }
    }
    c
}

/// C += G (gr x gc) . B^T where B is (br x gc); C is (gr x br).
fn mm_nt_into(g: &[f64], gr: usize, gc: usize, b: &[f64], br: usize, c: &mut [f64]) {
    for i in 0..gr {
        for k in 0..br {
            let mut acc = 0.0;
            let grow = i * gc;
            let brow = k * gc;
            for j in 0..gc {
                acc += g[grow + j] * b[brow + j];
            }
            c[i * br + k] += acc;
        }
    }
}

/// C += A^T . G where A is (ar x ac) and G is (ar x gc); C is (ac x gc).
fn mm_tn_into(a: &[f64], ar: usize, ac: usize, g: &[f64], gc: usize, c: &mut [f64]) {
    for i in 0..ar {
        let arow = i * ac;
        let grow = i * gc;
        for k in 0..ac {
            let aik = a[arow + k];
            let crow = k * gc;
            for j in 0..gc {
                c[crow + j] += aik * g[grow + j];
            }
        }
    }
}

/// Result of comparing analytic gradients against central finite differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Check the analytic gradient of a scalar-valued graph builder `f` against
/// central finite differences at `x`. Relative error uses the denominator
/// max(|analytic|, |numeric|, 1e-8).
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> Result<GradReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let leaf = Tensor::leaf(1, x.len(), x.to_vec(), true)?;
    let out = f(&leaf)?;
    if out.rows() != 1 || out.cols() != 1 {
        return Err(Error::NonScalarLoss {
            rows: out.rows(),
            cols: out.cols(),
        });
    }
    if !out.value().is_finite() {
        return Err(Error::Domain {
            op: "grad_check",
            detail: format!("non-finite function value {}", out.value()),
        });
    }
    out.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = GradReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: analytic.first().copied().unwrap_or(0.0),
        numeric: 0.0,
    };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let fp = f(&Tensor::leaf(1, x.len(), probe.clone(), false)?)?.value();
        probe[i] = x[i] - eps;
        let fm = f(&Tensor::leaf(1, x.len(), probe.clone(), false)?)?.value();
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Domain {
                op: "grad_check",
                detail: format!("non-finite perturbed value at coordinate {i}"),
            });
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf_grad(t: &Tensor) -> Vec<f64> {
        t.grad().expect("leaf should have received a gradient")
    }

    #[test]
    fn grad_check_is_near_exact_for_a_quadratic() {
        let report = grad_check(|t| Ok(t.mul(t)?.sum_all()), &[3.0], 1e-5)
            .expect("quadratic grad check should run");
        assert!(
            report.max_rel_error < 1e-8,
            "central differences are exact for quadratics up to roundoff, got {}",
            report.max_rel_error
        );
        assert!(
            (report.analytic - 6.0).abs() < 1e-12,
            "d/dx x^2 at 3 should be 6, got {}",
            report.analytic
        );
    }

    #[test]
    fn grad_check_matches_gaussian_score_in_mu() {
        // f(mu) = ln N(x=1; mu, 1); d/dmu = (x - mu) = 1 at mu = 0.
        let f = |mu: &Tensor| -> Result<Tensor> {
            let x = Tensor::constant(1, 1, vec![1.0])?;
            let diff = x.sub(mu)?;
            Ok(diff.mul(&diff)?.scale(-0.5).add_scalar(-0.5 * LN_2PI))
        };
        let report = grad_check(f, &[0.0], 1e-5).expect("gaussian grad check should run");
        assert!(
            report.max_rel_error < 1e-6,
            "score function mismatch: analytic {} numeric {}",
            report.analytic,
            report.numeric
        );
        assert_eq!(report.analytic, 1.0, "(x - mu)/sigma^2 is exactly 1 here");
    }

    #[test]
    fn grad_check_rejects_nonpositive_eps_and_nonscalar_outputs() {
        let err = grad_check(|t| Ok(t.clone()), &[1.0, 2.0], 0.0).unwrap_err();
        assert!(
            err.to_string().contains("eps"),
            "zero eps should be rejected, got: {err}"
        );
        let err = grad_check(|t| Ok(t.clone()), &[1.0, 2.0], 1e-5).unwrap_err();
        assert!(
            matches!(err, Error::NonScalarLoss { rows: 1, cols: 2 }),
            "non-scalar outputs should be rejected, got: {err}"
        );
    }

    #[test]
    fn detached_coefficients_receive_no_gradient() {
        let w = Tensor::leaf(1, 3, vec![0.5, -1.0, 2.0], true).unwrap();
        let x = Tensor::leaf(1, 3, vec![1.0, 2.0, 3.0], true).unwrap();
        let loss = w.detach().mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(
            leaf_grad(&x),
            vec![0.5, -1.0, 2.0],
            "grad of sum(detach(w) * x) w.r.t. x must equal w exactly"
        );
        assert!(
            w.grad().is_none(),
            "the detached branch must contribute no gradient to w"
        );
    }

    #[test]
    fn repeated_backward_accumulates_exactly_on_leaves() {
        let x = Tensor::leaf(1, 4, vec![0.3, -0.7, 1.1, 0.2], true).unwrap();
        let loss = x.tanh().mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let once = leaf_grad(&x);
        loss.backward().unwrap();
        let twice = leaf_grad(&x);
        let doubled: Vec<f64> = once.iter().map(|g| 2.0 * g).collect();
        assert_eq!(
            twice, doubled,
            "a second backward pass must add exactly one more copy of the gradient"
        );
    }

    #[test]
    fn fresh_graphs_after_zeroing_reproduce_gradients_bitwise() {
        let x = Tensor::leaf(1, 5, vec![0.1, -0.4, 0.9, -1.5, 2.0], true).unwrap();
        let build = |x: &Tensor| {
            let m = x.reshape(5, 1).unwrap();
            let w = Tensor::constant(1, 3, vec![0.2, -0.3, 0.7]).unwrap();
            m.matmul(&w).unwrap().tanh().sum_all()
        };
        build(&x).backward().unwrap();
        let first = leaf_grad(&x);
        x.zero_grad();
        build(&x).backward().unwrap();
        let second = leaf_grad(&x);
        assert_eq!(first, second, "identical graphs must produce bitwise identical gradients");
    }

    #[test]
    fn matmul_matches_a_naive_triple_loop_bitwise() {
        let mut state = 0x1234_5678_u64;
        let mut next = || {
            // xorshift, plenty for test data
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        let (r, k, c) = (4, 5, 3);
        let a: Vec<f64> = (0..r * k).map(|_| next()).collect();
        let b: Vec<f64> = (0..k * c).map(|_| next()).collect();
        let mut oracle = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                // ascending-k accumulation, the order the contract pins down
                for t in 0..k {
                    oracle[i * c + j] += a[i * k + t] * b[t * c + j];
                }
            }
        }
        let at = Tensor::constant(r, k, a).unwrap();
        let bt = Tensor::constant(k, c, b).unwrap();
        let product = at.matmul(&bt).unwrap();
        assert_eq!(
            product.data(),
            &oracle[..],
            "matmul must equal the ascending-k triple loop bitwise"
        );
    }

    #[test]
    fn shape_and_domain_errors_are_reported() {
        let a = Tensor::constant(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { op: "matmul", .. })));
        assert!(Tensor::leaf(2, 2, vec![1.0], false).is_err(), "leaf length must match shape");
        assert!(a.slice(0, 3, 0, 2).is_err(), "slice beyond rows must fail");
        assert!(a.reshape(4, 2).is_err(), "reshape must preserve length");
        assert!(a.sum_axis(2).is_err(), "axis must be 0 or 1");
        assert!(matches!(
            Tensor::concat(&[], 0),
            Err(Error::EmptySet { what: "concat parts" })
        ));
        let zero = Tensor::constant(1, 1, vec![0.0]).unwrap();
        assert!(a.div(&b).is_err(), "division by zero is a domain error");
        assert!(zero.log().is_err(), "log of zero is a domain error");
        assert!(
            matches!(a.backward(), Err(Error::NonScalarLoss { rows: 2, cols: 3 })),
            "backward requires a scalar"
        );
    }

    /// Run grad_check over a builder and panic with the op name on failure.
    fn assert_op_gradient(name: &str, x: &[f64], f: impl Fn(&Tensor) -> Result<Tensor>) {
        let report = grad_check(f, x, 1e-5)
            .unwrap_or_else(|e| panic!("grad check for {name} failed to run: {e}"));
        assert!(
            report.max_rel_error < 1e-4,
            "{name}: gradient mismatch at coordinate {}: analytic {} vs numeric {} (rel {})",
            report.worst_index,
            report.analytic,
            report.numeric,
            report.max_rel_error
        );
    }

    proptest! {
        /// Smooth primitive ops: analytic gradients match central finite
        /// differences on random inputs in [-2, 2].
        #[test]
        fn smooth_op_gradients_match_finite_differences(
            xs in proptest::collection::vec(-2.0f64..2.0, 12)
        ) {
            // Weighted reduction so per-coordinate gradients are distinct.
            let spread = |t: &Tensor| -> Result<Tensor> {
                let w: Vec<f64> = (0..t.len()).map(|i| 0.3 + 0.1 * i as f64).collect();
                t.reshape(1, t.len())?
                    .mul(&Tensor::constant(1, t.len(), w)?)?
                    .sum_all()
                    .reshape(1, 1)
            };
            assert_op_gradient("add", &xs, |t| {
                spread(&t.slice(0, 1, 0, 6)?.add(&t.slice(0, 1, 6, 12)?)?)
            });
            assert_op_gradient("sub", &xs, |t| {
                spread(&t.slice(0, 1, 0, 6)?.sub(&t.slice(0, 1, 6, 12)?)?)
            });
            assert_op_gradient("mul", &xs, |t| {
                spread(&t.slice(0, 1, 0, 6)?.mul(&t.slice(0, 1, 6, 12)?)?)
            });
            assert_op_gradient("matmul", &xs, |t| {
                let a = t.slice(0, 1, 0, 6)?.reshape(2, 3)?;
                let b = t.slice(0, 1, 6, 12)?.reshape(3, 2)?;
                spread(&a.matmul(&b)?)
            });
            assert_op_gradient("add_row", &xs, |t| {
                let m = t.slice(0, 1, 0, 8)?.reshape(2, 4)?;
                let row = t.slice(0, 1, 8, 12)?;
                spread(&m.add_row(&row)?)
            });
            assert_op_gradient("scale", &xs, |t| spread(&t.scale(-1.7)));
            assert_op_gradient("add_scalar", &xs, |t| spread(&t.add_scalar(0.9)));
            assert_op_gradient("tanh", &xs, |t| spread(&t.tanh()));
            assert_op_gradient("sigmoid", &xs, |t| spread(&t.sigmoid()));
            assert_op_gradient("softplus", &xs, |t| spread(&t.softplus()));
            assert_op_gradient("exp", &xs, |t| spread(&t.exp()));
            assert_op_gradient("sum_all", &xs, |t| Ok(t.tanh().sum_all()));
            assert_op_gradient("sum_axis_0", &xs, |t| {
                spread(&t.reshape(3, 4)?.tanh().sum_axis(0)?)
            });
            assert_op_gradient("sum_axis_1", &xs, |t| {
                spread(&t.reshape(3, 4)?.tanh().sum_axis(1)?)
            });
            assert_op_gradient("mean_all", &xs, |t| Ok(t.tanh().mean_all()));
            assert_op_gradient("mean_axis_0", &xs, |t| {
                spread(&t.reshape(4, 3)?.tanh().mean_axis(0)?)
            });
            assert_op_gradient("mean_axis_1", &xs, |t| {
                spread(&t.reshape(4, 3)?.tanh().mean_axis(1)?)
            });
            assert_op_gradient("logsumexp_axis_0", &xs, |t| {
                spread(&t.reshape(4, 3)?.logsumexp_axis(0)?)
            });
            assert_op_gradient("logsumexp_axis_1", &xs, |t| {
                spread(&t.reshape(4, 3)?.logsumexp_axis(1)?)
            });
            assert_op_gradient("concat_axis_0", &xs, |t| {
                let a = t.slice(0, 1, 0, 6)?.reshape(2, 3)?;
                let b = t.slice(0, 1, 6, 12)?.reshape(2, 3)?;
                spread(&Tensor::concat(&[a, b], 0)?)
            });
            assert_op_gradient("concat_axis_1", &xs, |t| {
                let a = t.slice(0, 1, 0, 6)?.reshape(3, 2)?;
                let b = t.slice(0, 1, 6, 12)?.reshape(3, 2)?;
                spread(&Tensor::concat(&[a, b], 1)?)
            });
            assert_op_gradient("slice", &xs, |t| {
                spread(&t.reshape(3, 4)?.slice(1, 3, 1, 4)?.tanh())
            });
            assert_op_gradient("reshape", &xs, |t| {
                spread(&t.reshape(4, 3)?.tanh().reshape(2, 6)?)
            });
            assert_op_gradient("tile_rows", &xs, |t| {
                spread(&t.reshape(2, 6)?.tile_rows(3)?.tanh())
            });
            assert_op_gradient("repeat_rows", &xs, |t| {
                spread(&t.reshape(2, 6)?.repeat_rows(3)?.tanh())
            });
        }

        /// Division and log need inputs bounded away from their singularities.
        #[test]
        fn positive_domain_op_gradients_match_finite_differences(
            num in proptest::collection::vec(-2.0f64..2.0, 5),
            den in proptest::collection::vec(0.3f64..2.0, 5),
        ) {
            let joined: Vec<f64> = num.iter().chain(&den).copied().collect();
            assert_op_gradient("div", &joined, |t| {
                t.slice(0, 1, 0, 5)?.div(&t.slice(0, 1, 5, 10)?)?.tanh().sum_all().reshape(1, 1)
            });
            assert_op_gradient("log", &den, |t| Ok(t.log()?.sum_all()));
        }

        /// Piecewise-linear ops, with inputs kept away from their kinks so the
        /// finite-difference probe stays on one side.
        #[test]
        fn kinked_op_gradients_match_away_from_kinks(
            xs in proptest::collection::vec(-2.0f64..2.0, 8)
        ) {
            prop_assume!(xs.iter().all(|x| x.abs() > 1e-3));
            assert_op_gradient("relu", &xs, |t| Ok(t.relu().sum_all()));
            prop_assume!(xs.iter().all(|x| (x - 1.0).abs() > 1e-3 && (x + 1.0).abs() > 1e-3));
            assert_op_gradient("clamp", &xs, |t| Ok(t.clamp(-1.0, 1.0).tanh().sum_all()));
        }

        /// logsumexp(x + c) = logsumexp(x) + c.
        #[test]
        fn logsumexp_is_shift_invariant(
            xs in proptest::collection::vec(-4.0f64..4.0, 6),
            c in -5.0f64..5.0,
        ) {
            let t = Tensor::constant(1, 6, xs.clone()).unwrap();
            let base = t.logsumexp_axis(1).unwrap().value();
            let shifted = t.add_scalar(c).logsumexp_axis(1).unwrap().value();
            prop_assert!(
                (shifted - (base + c)).abs() < 1e-12,
                "logsumexp shift invariance violated: {} vs {}",
                shifted,
                base + c
            );
        }

        /// Clamp passes gradient inside the bounds and blocks it outside.
        #[test]
        fn clamp_gradient_is_an_indicator(xs in proptest::collection::vec(-3.0f64..3.0, 6)) {
            prop_assume!(xs.iter().all(|x| (x.abs() - 1.0).abs() > 1e-9));
            let t = Tensor::leaf(1, 6, xs.clone(), true).unwrap();
            t.clamp(-1.0, 1.0).sum_all().backward().unwrap();
            let grads = leaf_grad(&t);
            for (x, g) in xs.iter().zip(&grads) {
                let expected = if x.abs() < 1.0 { 1.0 } else { 0.0 };
                prop_assert!(
                    *g == expected,
                    "clamp gradient at {} should be exactly {}, got {}",
                    x,
                    expected,
                    g
                );
            }
        }
    }
}
