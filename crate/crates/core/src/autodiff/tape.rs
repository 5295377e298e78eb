// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D array; vectors are `1 x n` rows. Building an
//! expression appends nodes to the [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse once and returns the gradients. Nodes whose inputs are
//! all constants are marked as not requiring gradients and skipped.

use ndarray::{s, Array2, Axis, Zip};

use super::linalg;
use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        probs: Matrix,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ReplaceRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Solve(Var, Var),
    Rope {
        x: Var,
        cos: Matrix,
        sin: Matrix,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    finished: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros((r, c))
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros((r, c))
            }
        }
    }
}

fn shape_err(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::Shape(format!("{op}: {:?} vs {:?}", a.dim(), b.dim()))
}

fn erf(x: f64) -> f64 {
    libm::erf(x)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

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

    /// Drop all nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.finished = false;
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.nrows() {
            return Err(shape_err("matmul", x, y));
        }
        let v = x.dot(y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ncols() != y.ncols() {
            return Err(shape_err("matmul_nt", x, y));
        }
        let v = x.dot(&y.t());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    fn row_shape(&self, op: &str, a: Var, row: Var) -> Result<()> {
        let (ra, ca) = self.shape(a);
        let _ = ra;
        if self.shape(row) != (1, ca) {
            return Err(shape_err(op, self.value(a), self.value(row)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Add a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_shape("add_row", a, row)?;
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Multiply every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_shape("mul_row", a, row)?;
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(v, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Exact GELU, `x Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let v = softmax_rows(self.value(a), causal);
        let rg = self.rg(a);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Row-wise layer norm with affine `1 x n` gain and bias, eps 1e-5.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.row_shape("layer_norm", x, gamma)?;
        self.row_shape("layer_norm", x, beta)?;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (var + 1e-5).sqrt();
            row.mapv_inplace(|v| v * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean cross-entropy over rows with a target; `None` rows are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: {} rows vs {} targets",
                lv.nrows(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= lv.ncols()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                dim: lv.ncols(),
            });
        }
        let probs = softmax_rows(lv, false);
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lv.row(i);
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let cols = self.shape(a).1;
        if start > end || end > cols {
            return Err(Error::IndexOutOfRange {
                index: end,
                dim: cols,
            });
        }
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::Shape("concat_rows: column counts differ".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let rows = self.shape(a).0;
        if start > end || end > rows {
            return Err(Error::IndexOutOfRange {
                index: end,
                dim: rows,
            });
        }
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let rg = self.rg(a);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }

    /// Rows `idx` of `a`, in order; used for embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.nrows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                dim: av.nrows(),
            });
        }
        let v = av.select(Axis(0), idx);
        let rg = self.rg(a);
        Ok(self.push(v, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Copy of `base` with row `idx[k]` replaced by row `k` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if bv.ncols() != sv.ncols() || sv.nrows() != idx.len() {
            return Err(shape_err("replace_rows", bv, sv));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= bv.nrows()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                dim: bv.nrows(),
            });
        }
        let mut v = bv.clone();
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(i).assign(&sv.row(k));
        }
        let rg = self.rg(base) || self.rg(src);
        Ok(self.push(
            v,
            Op::ReplaceRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// `x⁻¹ b` by LU with partial pivoting.
    pub fn solve(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = linalg::solve(self.value(x), self.value(b))?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::Solve(x, b), rg))
    }

    /// Rotary position encoding applied to each row, with
    /// `positions[r]` the sequence position of row `r`.
    pub fn rope(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        let (rows, d) = self.shape(x);
        if positions.len() != rows {
            return Err(Error::Shape(format!(
                "rope: {rows} rows vs {} positions",
                positions.len()
            )));
        }
        let (cos, sin) = rope_tables(positions, d);
        let v = apply_rope(self.value(x), &cos, &sin, false);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Rope { x, cos, sin }, rg))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.finished {
            return Err(Error::BackwardTwice);
        }
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.finished = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::ones((1, 1)));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    /// Accumulate into `v`'s gradient in place, creating a zero slot first.
    fn acc_in_place(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce(&mut Matrix)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Matrix::zeros(self.nodes[v.0].value.raw_dim()));
        f(slot);
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g.dot(val(*b)));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*row) {
                    self.acc(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.rg(*b) {
                    self.acc(grads, *b, -g);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*b));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g * val(*a));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.acc(grads, *a, g * val(*row));
                }
                if self.rg(*row) {
                    let prod = g * val(*a);
                    self.acc(grads, *row, prod.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| *d *= y * (1.0 - y));
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                self.acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut d = g * y;
                let dots = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(y.rows())
                    .and(&dots)
                    .for_each(|mut drow, yrow, &dot| {
                        Zip::from(&mut drow).and(&yrow).for_each(|dv, &yv| *dv -= yv * dot);
                    });
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.rg(*gamma) {
                    let dg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gamma, dg);
                }
                if self.rg(*beta) {
                    self.acc(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let n = xhat.ncols() as f64;
                    let dxhat = g * val(*gamma);
                    let mut dx = Matrix::zeros(xhat.raw_dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let k = rstd[r] / n;
                        Zip::from(dx.row_mut(r))
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = k * (n * a - s1 - b * s2));
                    }
                    self.acc(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                count,
            } => {
                let mut d = Matrix::zeros(probs.raw_dim());
                if *count > 0 {
                    let scale = g[[0, 0]] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let mut row = d.row_mut(r);
                            row.assign(&probs.row(r));
                            row[t] -= 1.0;
                            row.mapv_inplace(|v| v * scale);
                        }
                    }
                }
                self.acc(grads, *logits, d);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                self.acc_in_place(grads, *a, |d| {
                    let mut view = d.slice_mut(s![.., *start..*start + g.ncols()]);
                    view += g;
                });
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = val(*p).nrows();
                    if self.rg(*p) {
                        self.acc(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                self.acc_in_place(grads, *a, |d| {
                    let mut view = d.slice_mut(s![*start..*start + g.nrows(), ..]);
                    view += g;
                });
            }
            Op::GatherRows(a, idx) => {
                self.acc_in_place(grads, *a, |d| {
                    for (k, &r) in idx.iter().enumerate() {
                        let mut row = d.row_mut(r);
                        row += &g.row(k);
                    }
                });
            }
            Op::ReplaceRows { base, src, idx } => {
                if self.rg(*src) {
                    self.acc(grads, *src, g.select(Axis(0), idx));
                }
                if self.rg(*base) {
                    let mut d = g.clone();
                    for &r in idx {
                        d.row_mut(r).fill(0.0);
                    }
                    self.acc(grads, *base, d);
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.t().to_owned()),
            Op::Sum(a) => {
                let d = Matrix::from_elem(val(*a).raw_dim(), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::Solve(x, b) => {
                // y = x⁻¹b: db = x⁻ᵀ g, dx = -db yᵀ
                let xt = val(*x).t().to_owned();
                let db = linalg::solve(&xt, g).expect("matrix was invertible in the forward pass");
                if self.rg(*x) {
                    self.acc(grads, *x, -db.dot(&node.value.t()));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, db);
                }
            }
            Op::Rope { x, cos, sin } => {
                self.acc(grads, *x, apply_rope(g, cos, sin, true));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Numerically stable row softmax; `causal` zeroes entries above the diagonal.
pub fn softmax_rows(a: &Matrix, causal: bool) -> Matrix {
    let mut out = a.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let lim = if causal { (i + 1).min(row.len()) } else { row.len() };
        let m = row
            .iter()
            .take(lim)
            .fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < lim {
                *v = (*v - m).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Per-row cos/sin tables for interleaved rotary pairs `(2i, 2i+1)` with
/// frequency `10000^(-2i/d)`.
pub fn rope_tables(positions: &[usize], d: usize) -> (Matrix, Matrix) {
    let pairs = d / 2;
    let mut cos = Matrix::zeros((positions.len(), pairs));
    let mut sin = Matrix::zeros((positions.len(), pairs));
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..pairs {
            let theta = 10000f64.powf(-2.0 * i as f64 / d as f64);
            let ang = p as f64 * theta;
            cos[[r, i]] = ang.cos();
            sin[[r, i]] = ang.sin();
        }
    }
    (cos, sin)
}

/// Rotate each pair; `inverse` applies the transpose rotation.
pub fn apply_rope(x: &Matrix, cos: &Matrix, sin: &Matrix, inverse: bool) -> Matrix {
    let mut out = x.clone();
    let sign = if inverse { -1.0 } else { 1.0 };
    for r in 0..x.nrows() {
        for i in 0..cos.ncols() {
            let (c, s) = (cos[[r, i]], sign * sin[[r, i]]);
            let (a, b) = (x[[r, 2 * i]], x[[r, 2 * i + 1]]);
            out[[r, 2 * i]] = a * c - b * s;
            out[[r, 2 * i + 1]] = a * s + b * c;
        }
    }
    out
}
