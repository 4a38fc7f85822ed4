//! Dense row-major f64 tensors.
//!
//! Everything numeric in this crate flows through [`Tensor`]: a shape vector
//! plus a flat value buffer. Reductions run in a fixed left-to-right order so
//! repeated runs are bitwise identical.

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the buffer length matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return shape_err(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                want,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// 1-row matrix; handy for single-token sequences.
    pub fn row(data: Vec<f64>) -> Self {
        Tensor { shape: vec![1, data.len()], data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// 2-D constructor from a row-major buffer.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on {}-d tensor", self.shape.len()),
        }
    }

    /// Column count of a 1-D or 2-D tensor.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on {}-d tensor", self.shape.len()),
        }
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(format!("zip {:?} vs {:?}", self.shape, other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Left-to-right sum of all entries.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Euclidean norm, fixed accumulation order.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for &x in &self.data {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.shape.len() != 2 {
            return shape_err(format!("transpose wants 2-d, got {:?}", self.shape));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }
}

/// Row-major matrix product. `a` is (n, m), `b` is (m, p); inner extents must
/// agree or a dimension error comes back.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 {
        return shape_err(format!("matmul wants 2-d operands, got {:?} x {:?}", a.shape, b.shape));
    }
    let (n, m) = (a.shape[0], a.shape[1]);
    let (m2, p) = (b.shape[0], b.shape[1]);
    if m != m2 {
        return shape_err(format!("matmul inner extents differ: {:?} x {:?}", a.shape, b.shape));
    }
    let mut out = vec![0.0; n * p];
    // i-k-j order keeps the b rows contiguous in the inner loop.
    for i in 0..n {
        let arow = &a.data[i * m..(i + 1) * m];
        let orow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor::new(vec![n, p], out)
}

/// Numerically stable softmax over the last axis of a 1-D or 2-D tensor.
/// Each row of the result sums to 1.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let r = x.rows();
    let mut out = vec![0.0; x.data.len()];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - hi).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// Log-softmax over the last axis; stable via the log-sum-exp shift.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let r = x.rows();
    let mut out = vec![0.0; x.data.len()];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - hi).exp();
        }
        let lse = hi + z.ln();
        for (j, &v) in row.iter().enumerate() {
            out[i * c + j] = v - lse;
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// Per-row layer normalization over the last axis.
/// `gamma`/`beta` have one entry per column.
pub fn layer_norm_rows(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return shape_err(format!(
            "layer_norm scale/shift want {} entries, got {}/{}",
            c,
            gamma.len(),
            beta.len()
        ));
    }
    let r = x.rows();
    let mut out = vec![0.0; x.data.len()];
    for i in 0..r {
        let row = &x.data[i * c..(i + 1) * c];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= c as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[i * c + j] = (v - mean) * inv * gamma[j] + beta[j];
        }
    }
    Tensor::new(x.shape.clone(), out)
}
