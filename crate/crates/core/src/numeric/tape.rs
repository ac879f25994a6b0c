//! Reverse-mode gradient tape over [`Matrix`] values.
//!
//! Every op computes its value eagerly, checks it for non-finite entries and
//! records enough to run the backward pass. Leaves created with
//! [`Tape::param`] receive gradients; [`Tape::constant`] values do not.

use std::sync::Arc;

use super::matrix::{Matrix, SparseMatrix};
use crate::error::{Error, Result};

/// Handle to a value on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    RowL2Norms(Var),
    NormalizeRows(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SparseMatMul(Arc<SparseMatrix>, Var),
    Transpose(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        self.grads[v.0].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.0];
            Matrix::zeros(r, c)
        })
    }
}

fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn require_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(name.to_string()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, m: Matrix) -> Result<Var> {
        self.push(m, Op::Leaf, true, "param")
    }

    pub fn constant(&mut self, m: Matrix) -> Result<Var> {
        self.push(m, Op::Leaf, false, "constant")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same("add", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same("sub", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        require_same("mul", self.value(a), self.value(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng, "mul")
    }

    /// Adds the `1 x m` row vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape("add_row", format!("{:?} plus bias {:?}", av.shape(), bv.shape())));
        }
        let mut v = av.clone();
        for r in 0..v.rows() {
            for (x, b) in v.row_mut(r).iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow(a, bias), ng, "add_row")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng, "scale")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::new(rows, cols, data)?, Op::ConcatCols(parts.to_vec()), ng, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Matrix::new(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), ng, "concat_rows")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng, "log")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(v, Op::Square(a), ng, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.is_empty() {
            return Err(Error::shape("mean", "empty matrix"));
        }
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng, "mean")
    }

    /// Frobenius norm as a 1x1 value.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let v = Matrix::scalar(self.value(a).frobenius());
        let ng = self.ng(a);
        self.push(v, Op::L2Norm(a), ng, "l2_norm")
    }

    /// Per-row L2 norms as an `n x 1` column.
    pub fn row_l2_norms(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let data = (0..m.rows())
            .map(|r| m.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Matrix::new(m.rows(), 1, data)?;
        let ng = self.ng(a);
        self.push(v, Op::RowL2Norms(a), ng, "row_l2_norms")
    }

    /// Each row divided by its L2 norm (floored at a tiny epsilon).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
            for x in row {
                *x /= n;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::NormalizeRows(a), ng, "normalize_rows")
    }

    pub fn softmax_row(&mut self, a: Var) -> Result<Var> {
        let v = row_softmax(self.value(a));
        let ng = self.ng(a);
        self.push(v, Op::SoftmaxRow(a), ng, "softmax_row")
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row {
                *x -= lse;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::LogSoftmaxRow(a), ng, "log_softmax_row")
    }

    /// `out[i] = a[idx[i]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if idx.iter().any(|&i| i >= src.rows()) {
            return Err(Error::shape("gather_rows", "row index out of range"));
        }
        let mut data = Vec::with_capacity(idx.len() * src.cols());
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let v = Matrix::new(idx.len(), src.cols(), data)?;
        let ng = self.ng(a);
        self.push(v, Op::GatherRows(a, idx.to_vec()), ng, "gather_rows")
    }

    /// `out[idx[i]] += a[i]` into a matrix with `n_rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let src = self.value(a);
        if idx.len() != src.rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::shape("scatter_add_rows", "index list does not match rows"));
        }
        let mut v = Matrix::zeros(n_rows, src.cols());
        for (i, &d) in idx.iter().enumerate() {
            for (x, y) in v.row_mut(d).iter_mut().zip(src.row(i)) {
                *x += y;
            }
        }
        let ng = self.ng(a);
        self.push(v, Op::ScatterAddRows(a, idx.to_vec()), ng, "scatter_add_rows")
    }

    /// Constant sparse matrix times `a`.
    pub fn sparse_matmul(&mut self, s: Arc<SparseMatrix>, a: Var) -> Result<Var> {
        let v = s.matmul(self.value(a))?;
        let ng = self.ng(a);
        self.push(v, Op::SparseMatMul(s, a), ng, "sparse_matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng, "transpose")
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let v = self.value(a).reshape(rows, cols)?;
        let ng = self.ng(a);
        self.push(v, Op::Reshape(a), ng, "reshape")
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::NotScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut send = |v: Var, d: Matrix| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => *slot = Some(d),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(*a, g.matmul(&val(*b).transpose())?);
                    }
                    if self.ng(*b) {
                        send(*b, val(*a).transpose().matmul(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|x| -x));
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, g.zip_map(val(*b), |x, y| x * y));
                    send(*b, g.zip_map(val(*a), |x, y| x * y));
                }
                Op::AddRow(a, b) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    send(*b, db);
                    send(*a, g);
                }
                Op::Scale(a, s) => send(*a, g.map(|x| x * s)),
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let mut d = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        off += w;
                        send(p, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = val(p).rows();
                        let d = Matrix::new(h, g.cols(), g.data()[off * g.cols()..(off + h) * g.cols()].to_vec())?;
                        off += h;
                        send(p, d);
                    }
                }
                Op::Relu(a) => send(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
                Op::Exp(a) => send(*a, g.zip_map(&node.value, |x, y| x * y)),
                Op::Log(a) => send(*a, g.zip_map(val(*a), |x, y| x / y)),
                Op::Square(a) => send(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::L2Norm(a) => {
                    let norm = node.value.item();
                    let s = if norm > 0.0 { g.item() / norm } else { 0.0 };
                    send(*a, val(*a).map(|x| x * s));
                }
                Op::RowL2Norms(a) => {
                    let x = val(*a);
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = node.value.get(r, 0);
                        if n > 0.0 {
                            let s = g.get(r, 0) / n;
                            for (o, xv) in d.row_mut(r).iter_mut().zip(x.row(r)) {
                                *o = xv * s;
                            }
                        }
                    }
                    send(*a, d);
                }
                Op::NormalizeRows(a) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if n < NORM_EPS {
                            for (o, gv) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o = gv / NORM_EPS;
                            }
                            continue;
                        }
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = (gv - yv * dot) / n;
                        }
                    }
                    send(*a, d);
                }
                Op::SoftmaxRow(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    send(*a, d);
                }
                Op::LogSoftmaxRow(a) => {
                    let p = row_softmax(val(*a));
                    let mut d = Matrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let s: f64 = g.row(r).iter().sum();
                        for ((o, gv), pv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(p.row(r)) {
                            *o = gv - pv * s;
                        }
                    }
                    send(*a, d);
                }
                Op::GatherRows(a, idx) => {
                    let mut d = Matrix::zeros(val(*a).rows(), g.cols());
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, gv) in d.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    send(*a, d);
                }
                Op::ScatterAddRows(a, idx) => {
                    let mut d = Matrix::zeros(idx.len(), g.cols());
                    for (i, &dst) in idx.iter().enumerate() {
                        d.row_mut(i).copy_from_slice(g.row(dst));
                    }
                    send(*a, d);
                }
                Op::SparseMatMul(s, a) => send(*a, s.t_matmul(&g)),
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::Reshape(a) => {
                    let (r, c) = val(*a).shape();
                    send(*a, g.reshape(r, c)?);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}
