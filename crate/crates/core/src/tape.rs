//! Reverse-mode automatic differentiation over a replayable op tape.
//!
//! A [`Tape`] records every primitive applied to its [`Var`] handles;
//! [`Tape::backward`] replays the record once in reverse, accumulating
//! gradients per node. Graphs are rebuilt per step (dynamic control flow is
//! plain Rust `if`), and a tape refuses to replay twice. All accumulation
//! runs in a fixed order, so identical graphs produce bitwise identical
//! gradients.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::rng::CounterRng;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    /// Adds a single row (or 1-d vector) to every row of a matrix.
    AddRow(usize, usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Abs(usize),
    EMin(usize, usize),
    EMax(usize, usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows { x: usize, gamma: usize, beta: usize, eps: f64 },
    SumAll(usize),
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, r0: usize },
    SliceCols { x: usize, c0: usize, c1: usize },
    ConcatCols(Vec<usize>),
    SelectRows { x: usize, ids: Vec<usize> },
    Dropout { x: usize, mask: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    replayed: bool,
}

/// Shared handle to one recording. Cheap to clone; single-threaded by design.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node of a tape.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape { inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), grads: Vec::new(), replayed: false })) }
    }

    fn push(&self, value: Tensor, op: Op, trainable: bool) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op, trainable });
        inner.grads.push(None);
        Var { tape: self.clone(), id: inner.nodes.len() - 1 }
    }

    /// Constant input; gradients still accumulate but nothing marks it for updates.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input marked as a trainable parameter.
    pub fn trainable(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Accumulated gradient of a node, if the last replay reached it.
    pub fn grad(&self, v: &Var) -> Option<Tensor> {
        let inner = self.inner.borrow();
        inner.grads[v.id]
            .as_ref()
            .map(|g| Tensor::new(inner.nodes[v.id].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Replays the tape in reverse from a scalar objective, filling gradients.
    /// A second replay on the same tape is an error: the record is spent.
    pub fn backward(&self, loss: &Var) -> Result<()> {
        if !self.same_tape(&loss.tape) {
            return Err(Error::Tape("objective lives on a different tape".into()));
        }
        let mut inner = self.inner.borrow_mut();
        if inner.replayed {
            return Err(Error::Tape("tape already replayed; record a fresh graph".into()));
        }
        inner.replayed = true;
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(Error::Tape(format!(
                "objective must be scalar, got shape {:?}",
                inner.nodes[loss.id].value.shape()
            )));
        }
        if !inner.nodes[loss.id].value.data()[0].is_finite() {
            return Err(Error::Tape("objective is not finite".into()));
        }
        inner.grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match inner.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let op = inner.nodes[id].op.clone();
            apply_vjp(&mut inner, id, &g, &op);
            inner.grads[id] = Some(g);
        }
        Ok(())
    }
}

fn accumulate(inner: &mut TapeInner, id: usize, delta: &[f64]) {
    let len = inner.nodes[id].value.len();
    debug_assert_eq!(len, delta.len());
    let slot = inner.grads[id].get_or_insert_with(|| vec![0.0; len]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += d;
    }
}

fn apply_vjp(inner: &mut TapeInner, id: usize, g: &[f64], op: &Op) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(inner, *a, g);
            accumulate(inner, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(inner, *a, g);
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            accumulate(inner, *b, &neg);
        }
        Op::Mul(a, b) => {
            let da: Vec<f64> = g.iter().zip(inner.nodes[*b].value.data()).map(|(g, b)| g * b).collect();
            let db: Vec<f64> = g.iter().zip(inner.nodes[*a].value.data()).map(|(g, a)| g * a).collect();
            accumulate(inner, *a, &da);
            accumulate(inner, *b, &db);
        }
        Op::Div(a, b) => {
            let av = inner.nodes[*a].value.data();
            let bv = inner.nodes[*b].value.data();
            let da: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g / b).collect();
            let db: Vec<f64> = g.iter().zip(av.iter().zip(bv)).map(|(g, (a, b))| -g * a / (b * b)).collect();
            accumulate(inner, *a, &da);
            accumulate(inner, *b, &db);
        }
        Op::Neg(a) => {
            let da: Vec<f64> = g.iter().map(|x| -x).collect();
            accumulate(inner, *a, &da);
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = g.iter().map(|x| x * c).collect();
            accumulate(inner, *a, &da);
        }
        Op::Matmul(a, b) => {
            let gt = Tensor::new(inner.nodes[id].value.shape().to_vec(), g.to_vec()).expect("grad shape");
            let av = inner.nodes[*a].value.clone();
            let bv = inner.nodes[*b].value.clone();
            let da = tensor::matmul(&gt, &bv.transpose().expect("2-d")).expect("vjp");
            let db = tensor::matmul(&av.transpose().expect("2-d"), &gt).expect("vjp");
            accumulate(inner, *a, da.data());
            accumulate(inner, *b, db.data());
        }
        Op::Transpose(a) => {
            let gt = Tensor::new(inner.nodes[id].value.shape().to_vec(), g.to_vec()).expect("grad shape");
            let da = gt.transpose().expect("2-d");
            accumulate(inner, *a, da.data());
        }
        Op::AddRow(a, b) => {
            accumulate(inner, *a, g);
            let cols = inner.nodes[*b].value.len();
            let mut db = vec![0.0; cols];
            for (i, gv) in g.iter().enumerate() {
                db[i % cols] += gv;
            }
            accumulate(inner, *b, &db);
        }
        Op::Relu(a) => {
            let da: Vec<f64> =
                g.iter().zip(inner.nodes[*a].value.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(inner, *a, &da);
        }
        Op::Sigmoid(a) => {
            let da: Vec<f64> =
                g.iter().zip(inner.nodes[id].value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
            accumulate(inner, *a, &da);
        }
        Op::Tanh(a) => {
            let da: Vec<f64> =
                g.iter().zip(inner.nodes[id].value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
            accumulate(inner, *a, &da);
        }
        Op::Softplus(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(inner.nodes[*a].value.data())
                .map(|(g, x)| g * (1.0 / (1.0 + (-x).exp())))
                .collect();
            accumulate(inner, *a, &da);
        }
        Op::Abs(a) => {
            let da: Vec<f64> = g
                .iter()
                .zip(inner.nodes[*a].value.data())
                .map(|(g, x)| g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 })
                .collect();
            accumulate(inner, *a, &da);
        }
        Op::EMin(a, b) | Op::EMax(a, b) => {
            let take_a_wins = matches!(op, Op::EMin(..));
            let av = inner.nodes[*a].value.data().to_vec();
            let bv = inner.nodes[*b].value.data().to_vec();
            let mut da = vec![0.0; g.len()];
            let mut db = vec![0.0; g.len()];
            for i in 0..g.len() {
                // Ties route to the left operand, deterministically.
                let a_wins = if take_a_wins { av[i] <= bv[i] } else { av[i] >= bv[i] };
                if a_wins {
                    da[i] = g[i];
                } else {
                    db[i] = g[i];
                }
            }
            accumulate(inner, *a, &da);
            accumulate(inner, *b, &db);
        }
        Op::SoftmaxRows(a) => {
            let y = inner.nodes[id].value.clone();
            let c = y.cols();
            let mut da = vec![0.0; g.len()];
            for r in 0..y.rows() {
                let yr = &y.data()[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut dot = 0.0;
                for j in 0..c {
                    dot += yr[j] * gr[j];
                }
                for j in 0..c {
                    da[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(inner, *a, &da);
        }
        Op::LogSoftmaxRows(a) => {
            let x = inner.nodes[*a].value.clone();
            let p = tensor::softmax_rows(&x);
            let c = p.cols();
            let mut da = vec![0.0; g.len()];
            for r in 0..p.rows() {
                let pr = &p.data()[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let gsum: f64 = gr.iter().sum();
                for j in 0..c {
                    da[r * c + j] = gr[j] - pr[j] * gsum;
                }
            }
            accumulate(inner, *a, &da);
        }
        Op::LayerNormRows { x, gamma, beta, eps } => {
            let xv = inner.nodes[*x].value.clone();
            let gv = inner.nodes[*gamma].value.clone();
            let c = xv.cols();
            let rows = xv.rows();
            let mut dx = vec![0.0; xv.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for r in 0..rows {
                let xr = &xv.data()[r * c..(r + 1) * c];
                let gr = &g[r * c..(r + 1) * c];
                let mut mean = 0.0;
                for &v in xr {
                    mean += v;
                }
                mean /= c as f64;
                let mut var = 0.0;
                for &v in xr {
                    var += (v - mean) * (v - mean);
                }
                var /= c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                let dy_g: Vec<f64> = (0..c).map(|j| gr[j] * gv.data()[j]).collect();
                let mean_dyg: f64 = dy_g.iter().sum::<f64>() / c as f64;
                let mean_dyg_x: f64 = dy_g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for j in 0..c {
                    dx[r * c + j] = inv * (dy_g[j] - mean_dyg - xhat[j] * mean_dyg_x);
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
            }
            accumulate(inner, *x, &dx);
            accumulate(inner, *gamma, &dgamma);
            accumulate(inner, *beta, &dbeta);
        }
        Op::SumAll(a) => {
            let da = vec![g[0]; inner.nodes[*a].value.len()];
            accumulate(inner, *a, &da);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = inner.nodes[p].value.len();
                let slice = g[offset..offset + n].to_vec();
                accumulate(inner, p, &slice);
                offset += n;
            }
        }
        Op::SliceRows { x, r0 } => {
            let cols = inner.nodes[*x].value.cols();
            let mut dx = vec![0.0; inner.nodes[*x].value.len()];
            dx[r0 * cols..r0 * cols + g.len()].copy_from_slice(g);
            accumulate(inner, *x, &dx);
        }
        Op::SliceCols { x, c0, c1 } => {
            let xc = inner.nodes[*x].value.cols();
            let rows = inner.nodes[*x].value.rows();
            let w = c1 - c0;
            let mut dx = vec![0.0; inner.nodes[*x].value.len()];
            for r in 0..rows {
                for j in 0..w {
                    dx[r * xc + c0 + j] = g[r * w + j];
                }
            }
            accumulate(inner, *x, &dx);
        }
        Op::ConcatCols(parts) => {
            let rows = inner.nodes[id].value.rows();
            let total = inner.nodes[id].value.cols();
            let mut offset = 0;
            for &p in parts {
                let w = inner.nodes[p].value.cols();
                let mut dp = vec![0.0; rows * w];
                for r in 0..rows {
                    for j in 0..w {
                        dp[r * w + j] = g[r * total + offset + j];
                    }
                }
                accumulate(inner, p, &dp);
                offset += w;
            }
        }
        Op::SelectRows { x, ids } => {
            let cols = inner.nodes[*x].value.cols();
            let mut dx = vec![0.0; inner.nodes[*x].value.len()];
            for (out_r, &src_r) in ids.iter().enumerate() {
                for j in 0..cols {
                    dx[src_r * cols + j] += g[out_r * cols + j];
                }
            }
            accumulate(inner, *x, &dx);
        }
        Op::Dropout { x, mask } => {
            let da: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
            accumulate(inner, *x, &da);
        }
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn is_trainable(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].trainable
    }

    pub fn scalar(&self) -> Result<f64> {
        let v = self.value();
        if v.len() != 1 {
            return Err(Error::Tape(format!("expected scalar, got shape {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    fn check_mate(&self, other: &Var) -> Result<()> {
        if !self.tape.same_tape(&other.tape) {
            return Err(Error::Tape("operands live on different tapes".into()));
        }
        Ok(())
    }

    fn same_shape(&self, other: &Var, what: &str) -> Result<()> {
        self.check_mate(other)?;
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "add")?;
        let v = self.value().zip(&other.value(), |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), false))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "sub")?;
        let v = self.value().zip(&other.value(), |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), false))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "mul")?;
        let v = self.value().zip(&other.value(), |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), false))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "div")?;
        let v = self.value().zip(&other.value(), |a, b| a / b)?;
        Ok(self.tape.push(v, Op::Div(self.id, other.id), false))
    }

    pub fn neg(&self) -> Var {
        let v = self.value().map(|x| -x);
        self.tape.push(v, Op::Neg(self.id), false)
    }

    pub fn scale(&self, c: f64) -> Var {
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::Scale(self.id, c), false)
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.check_mate(other)?;
        let v = tensor::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(v, Op::Matmul(self.id, other.id), false))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.id), false))
    }

    /// Adds `row` (shape [c] or [1, c]) to every row of `self` (shape [r, c]).
    pub fn add_row(&self, row: &Var) -> Result<Var> {
        self.check_mate(row)?;
        let m = self.value();
        let r = row.value();
        if m.cols() != r.len() {
            return Err(Error::Shape(format!("add_row: {:?} vs {:?}", m.shape(), r.shape())));
        }
        let cols = m.cols();
        let data: Vec<f64> = m.data().iter().enumerate().map(|(i, &x)| x + r.data()[i % cols]).collect();
        let v = Tensor::new(m.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::AddRow(self.id, row.id), false))
    }

    pub fn relu(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id), false)
    }

    pub fn sigmoid(&self) -> Var {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape.push(v, Op::Sigmoid(self.id), false)
    }

    pub fn tanh(&self) -> Var {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id), false)
    }

    /// ln(1 + e^x), computed in the overflow-safe form.
    pub fn softplus(&self) -> Var {
        let v = self.value().map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.tape.push(v, Op::Softplus(self.id), false)
    }

    pub fn abs(&self) -> Var {
        let v = self.value().map(f64::abs);
        self.tape.push(v, Op::Abs(self.id), false)
    }

    /// Elementwise minimum; on exact ties the gradient routes left.
    pub fn emin(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "emin")?;
        let v = self.value().zip(&other.value(), f64::min)?;
        Ok(self.tape.push(v, Op::EMin(self.id, other.id), false))
    }

    /// Elementwise maximum; on exact ties the gradient routes left.
    pub fn emax(&self, other: &Var) -> Result<Var> {
        self.same_shape(other, "emax")?;
        let v = self.value().zip(&other.value(), f64::max)?;
        Ok(self.tape.push(v, Op::EMax(self.id, other.id), false))
    }

    pub fn softmax_rows(&self) -> Var {
        let v = tensor::softmax_rows(&self.value());
        self.tape.push(v, Op::SoftmaxRows(self.id), false)
    }

    pub fn log_softmax_rows(&self) -> Var {
        let v = tensor::log_softmax_rows(&self.value());
        self.tape.push(v, Op::LogSoftmaxRows(self.id), false)
    }

    /// Per-row layer normalization with learnable scale and shift.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
        self.check_mate(gamma)?;
        self.check_mate(beta)?;
        let v = tensor::layer_norm_rows(&self.value(), gamma.value().data(), beta.value().data(), eps)?;
        Ok(self
            .tape
            .push(v, Op::LayerNormRows { x: self.id, gamma: gamma.id, beta: beta.id, eps }, false))
    }

    pub fn sum_all(&self) -> Var {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id), false)
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Sum of elementwise products; the standard inner product as a scalar node.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        Ok(self.mul(other)?.sum_all())
    }

    /// Stacks 2-d parts with equal column counts on top of each other.
    pub fn concat_rows(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Tape("concat_rows of nothing".into()))?;
        let cols = first.value().cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            first.check_mate(p)?;
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::Shape(format!("concat_rows column mismatch: {} vs {cols}", v.cols())));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(first.tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), false))
    }

    /// Rows [r0, r1) of a 2-d tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Var> {
        let v = self.value();
        if r1 > v.rows() || r0 >= r1 {
            return Err(Error::Shape(format!("slice_rows {r0}..{r1} of {} rows", v.rows())));
        }
        let cols = v.cols();
        let out = Tensor::new(vec![r1 - r0, cols], v.data()[r0 * cols..r1 * cols].to_vec())?;
        Ok(self.tape.push(out, Op::SliceRows { x: self.id, r0 }, false))
    }

    /// Columns [c0, c1) of a 2-d tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Var> {
        let v = self.value();
        if c1 > v.cols() || c0 >= c1 {
            return Err(Error::Shape(format!("slice_cols {c0}..{c1} of {} cols", v.cols())));
        }
        let (rows, cols, w) = (v.rows(), v.cols(), c1 - c0);
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.data()[r * cols + c0..r * cols + c1]);
        }
        let out = Tensor::new(vec![rows, w], data)?;
        Ok(self.tape.push(out, Op::SliceCols { x: self.id, c0, c1 }, false))
    }

    /// Concatenates 2-d parts with equal row counts side by side.
    pub fn concat_cols(parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Tape("concat_cols of nothing".into()))?;
        let rows = first.value().rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            first.check_mate(p)?;
            let v = p.value();
            if v.rows() != rows {
                return Err(Error::Shape(format!("concat_cols row mismatch: {} vs {rows}", v.rows())));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let v = p.value();
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(first.tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), false))
    }

    /// Gathers rows by index (duplicates allowed); gradients scatter-add back.
    pub fn select_rows(&self, ids: &[usize]) -> Result<Var> {
        let v = self.value();
        let cols = v.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &r in ids {
            if r >= v.rows() {
                return Err(Error::Shape(format!("select_rows: row {r} of {}", v.rows())));
            }
            data.extend_from_slice(v.row_slice(r));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.tape.push(out, Op::SelectRows { x: self.id, ids: ids.to_vec() }, false))
    }

    /// Inverted dropout: kept entries scale by 1/(1-p). The mask comes from
    /// the caller's counter RNG, so a given (seed, layer, step) key always
    /// yields the same mask. `p = 0` is the identity and records nothing.
    pub fn dropout(&self, p: f64, rng: &mut CounterRng) -> Var {
        if p <= 0.0 {
            return self.clone();
        }
        let keep = 1.0 - p;
        let v = self.value();
        let mask: Vec<f64> = (0..v.len()).map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 }).collect();
        let data: Vec<f64> = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("dropout shape");
        self.tape.push(out, Op::Dropout { x: self.id, mask }, false)
    }
}

// ── Gradient checking ────────────────────────────────────────────────────

/// Central-difference check of reverse-mode gradients.
///
/// `f` rebuilds the scalar objective from scratch on the given tape; it must
/// be deterministic. Per coordinate the reported error is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`, and the maximum
/// over coordinates comes back. Non-finite objectives are an error.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let tape = Tape::new();
    let vx = tape.trainable(x.clone());
    let loss = f(&tape, &vx)?;
    tape.backward(&loss)?;
    let analytic = tape.grad(&vx).unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf(probe.clone());
        let out = f(&t, &v)?.scalar()?;
        if !out.is_finite() {
            return Err(Error::Tape("objective is not finite during grad check".into()));
        }
        Ok(out)
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_tensor(shape: Vec<usize>, rng: &mut CounterRng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.5, 1.5))
    }

    #[test]
    fn matmul_sum_gradient_matches_central_differences() {
        let mut rng = CounterRng::keyed(&[11, 0]);
        let b = rand_tensor(vec![3, 2], &mut rng);
        let a = rand_tensor(vec![2, 3], &mut rng);
        let err = grad_check(
            |t, x| {
                let vb = t.leaf(b.clone());
                Ok(x.matmul(&vb)?.sum_all())
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn every_unary_op_passes_grad_check() {
        let mut rng = CounterRng::keyed(&[12, 0]);
        // Offset away from relu/abs kinks.
        let x = Tensor::from_fn(vec![2, 3], |_| rng.uniform(0.2, 1.8));
        type BuildFn = fn(&Var) -> Var;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("relu", |v: &Var| v.relu()),
            ("sigmoid", |v: &Var| v.sigmoid()),
            ("tanh", |v: &Var| v.tanh()),
            ("softplus", |v: &Var| v.softplus()),
            ("abs", |v: &Var| v.abs()),
            ("neg", |v: &Var| v.neg()),
            ("scale", |v: &Var| v.scale(-2.5)),
            ("softmax", |v: &Var| v.softmax_rows()),
            ("log_softmax", |v: &Var| v.log_softmax_rows()),
        ];
        for (name, build) in cases {
            let err = grad_check(|_, v| Ok(build(v).mul(&build(v))?.sum_all()), &x, 1e-5).unwrap();
            assert!(err < 1e-5, "{name}: error {err}");
        }
    }

    #[test]
    fn binary_ops_pass_grad_check_on_both_sides() {
        let mut rng = CounterRng::keyed(&[13, 0]);
        let a = Tensor::from_fn(vec![2, 2], |_| rng.uniform(0.5, 2.0));
        let b = Tensor::from_fn(vec![2, 2], |_| rng.uniform(0.5, 2.0));
        type BuildFn = fn(&Var, &Var) -> Result<Var>;
        let cases: Vec<(&str, BuildFn)> = vec![
            ("add", |x: &Var, y: &Var| x.add(y)),
            ("sub", |x: &Var, y: &Var| x.sub(y)),
            ("mul", |x: &Var, y: &Var| x.mul(y)),
            ("div", |x: &Var, y: &Var| x.div(y)),
            ("emin", |x: &Var, y: &Var| x.emin(y)),
            ("emax", |x: &Var, y: &Var| x.emax(y)),
            ("matmul", |x: &Var, y: &Var| x.matmul(y)),
        ];
        for (name, build) in cases {
            let err_lhs = grad_check(
                |t, x| {
                    let vb = t.leaf(b.clone());
                    Ok(build(x, &vb)?.sum_all())
                },
                &a,
                1e-5,
            )
            .unwrap();
            let err_rhs = grad_check(
                |t, y| {
                    let va = t.leaf(a.clone());
                    Ok(build(&va, y)?.sum_all())
                },
                &b,
                1e-5,
            )
            .unwrap();
            assert!(err_lhs < 1e-5 && err_rhs < 1e-5, "{name}: {err_lhs} / {err_rhs}");
        }
    }

    #[test]
    fn structural_ops_pass_grad_check() {
        let mut rng = CounterRng::keyed(&[14, 0]);
        let x = rand_tensor(vec![3, 4], &mut rng);
        let err = grad_check(
            |_, v| {
                let top = v.slice_rows(0, 2)?;
                let bottom = v.slice_rows(2, 3)?;
                let merged = Var::concat_rows(&[bottom, top.clone()])?;
                let left = merged.slice_cols(0, 2)?;
                let right = merged.slice_cols(2, 4)?;
                let wide = Var::concat_cols(&[right, left])?;
                let picked = wide.select_rows(&[0, 2, 2])?;
                Ok(picked.mul(&picked)?.sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn layer_norm_passes_grad_check_for_all_inputs() {
        let mut rng = CounterRng::keyed(&[15, 0]);
        let x = rand_tensor(vec![3, 5], &mut rng);
        let gamma = rand_tensor(vec![5], &mut rng);
        let beta = rand_tensor(vec![5], &mut rng);
        let err_x = grad_check(
            |t, v| {
                let g = t.leaf(gamma.clone());
                let b = t.leaf(beta.clone());
                Ok(v.layer_norm(&g, &b, 1e-5)?.mul(&v.layer_norm(&g, &b, 1e-5)?)?.sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        let err_gamma = grad_check(
            |t, g| {
                let v = t.leaf(x.clone());
                let b = t.leaf(beta.clone());
                Ok(v.layer_norm(g, &b, 1e-5)?.abs().sum_all())
            },
            &gamma,
            1e-5,
        )
        .unwrap();
        assert!(err_x < 1e-5, "x error {err_x}");
        assert!(err_gamma < 1e-5, "gamma error {err_gamma}");
    }

    #[test]
    fn transpose_and_add_row_pass_grad_check() {
        let mut rng = CounterRng::keyed(&[16, 0]);
        let x = rand_tensor(vec![2, 3], &mut rng);
        let row = rand_tensor(vec![3], &mut rng);
        let err = grad_check(
            |t, v| {
                let r = t.leaf(row.clone());
                Ok(v.add_row(&r)?.transpose()?.sum_all())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn dropout_mask_is_deterministic_and_scales() {
        let x = Tensor::row(vec![1.0; 64]);
        let run = || {
            let t = Tape::new();
            let v = t.leaf(x.clone());
            let mut rng = CounterRng::keyed(&[5, crate::rng::hash_name("drop.test"), 3]);
            v.dropout(0.5, &mut rng).value()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(a.data().iter().any(|&v| v == 0.0));
        assert!(a.data().iter().any(|&v| v == 2.0));
    }

    #[test]
    fn softmax_nll_gradient_is_probs_minus_onehot() {
        let logits = Tensor::row(vec![0.3, -1.2, 2.0, 0.5]);
        let target = 2usize;
        let t = Tape::new();
        let v = t.trainable(logits.clone());
        // -log p[target] via a one-hot pick.
        let onehot = t.leaf(Tensor::row(vec![0.0, 0.0, 1.0, 0.0]));
        let loss = v.log_softmax_rows().mul(&onehot).unwrap().sum_all().neg();
        t.backward(&loss).unwrap();
        let g = t.grad(&v).unwrap();
        let p = tensor::softmax_rows(&logits);
        for j in 0..4 {
            let want = p.data()[j] - if j == target { 1.0 } else { 0.0 };
            assert!((g.data()[j] - want).abs() < 1e-12, "coord {j}");
        }
    }

    #[test]
    fn replaying_twice_is_an_error() {
        let t = Tape::new();
        let v = t.trainable(Tensor::scalar(2.0));
        let loss = v.mul(&v).unwrap().sum_all();
        t.backward(&loss).unwrap();
        assert!(matches!(t.backward(&loss), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_objective() {
        let t = Tape::new();
        let v = t.trainable(Tensor::row(vec![1.0, 2.0]));
        assert!(t.backward(&v).is_err());
    }

    #[test]
    fn mixing_tapes_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(1.0));
        assert!(matches!(a.add(&b), Err(Error::Tape(_))));
    }

    #[test]
    fn identical_graphs_give_bitwise_identical_gradients() {
        let run = || {
            let mut rng = CounterRng::keyed(&[77, 1]);
            let x = rand_tensor(vec![4, 4], &mut rng);
            let w = rand_tensor(vec![4, 4], &mut rng);
            let t = Tape::new();
            let vx = t.trainable(x);
            let vw = t.trainable(w);
            let y = vx.matmul(&vw).unwrap().softmax_rows().sum_all();
            t.backward(&y).unwrap();
            (t.grad(&vx).unwrap(), t.grad(&vw).unwrap())
        };
        let (a1, a2) = run();
        let (b1, b2) = run();
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn gradients_accumulate_across_shared_use() {
        let t = Tape::new();
        let v = t.trainable(Tensor::scalar(3.0));
        // f = x*x + x, f' = 2x + 1 = 7.
        let loss = v.mul(&v).unwrap().add(&v).unwrap().sum_all();
        t.backward(&loss).unwrap();
        assert_eq!(t.grad(&v).unwrap().data()[0], 7.0);
    }

    #[test]
    fn grad_check_rejects_non_finite_objective() {
        let x = Tensor::scalar(0.0);
        let out = grad_check(|_, v| Ok(v.log_softmax_rows().div(v)?.sum_all()), &x, 1e-5);
        assert!(out.is_err());
    }
}
