// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra: LU solves, determinants, random orthogonal
//! matrices, and the skew-symmetric matrix exponential.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Matrix, Tape, Var};
use crate::error::{Error, Result};

pub fn to_na(a: &Matrix) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_na(a: &DMatrix<f64>) -> Matrix {
    Matrix::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// `x⁻¹ b` for square `x`, partial-pivot LU.
pub fn solve(x: &Matrix, b: &Matrix) -> Result<Matrix> {
    let (n, m) = x.dim();
    if n != m || b.nrows() != n {
        return Err(Error::Shape(format!("solve: {:?} vs {:?}", x.dim(), b.dim())));
    }
    let lu = to_na(x).lu();
    let u = lu.u();
    let diag: Vec<f64> = (0..n).map(|i| u[(i, i)].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max.is_finite() && min > max * 1e-14) {
        return Err(Error::Singular);
    }
    let y = lu.solve(&to_na(b)).ok_or(Error::Singular)?;
    Ok(from_na(&y))
}

pub fn determinant(x: &Matrix) -> f64 {
    to_na(x).lu().determinant()
}

pub fn identity(n: usize) -> Matrix {
    Matrix::eye(n)
}

/// Haar-distributed random orthogonal matrix (QR of a Gaussian matrix with
/// the signs of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_na(&q)
}

/// Strictly-lower-triangular mask, `1` below the diagonal.
pub fn tril_strict_mask(n: usize) -> Matrix {
    Matrix::from_shape_fn((n, n), |(i, j)| if i > j { 1.0 } else { 0.0 })
}

/// Induced 1-norm (max column sum).
pub fn norm_1(a: &Matrix) -> f64 {
    a.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(a: &Matrix) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Squarings and Taylor degree for `exp(a)` with `‖a / 2^s‖₁ ≤ 1/2` and a
/// series remainder below `1e-17`. One extra term keeps the derivative of
/// the truncated series equally accurate, which matters at `a = 0`.
fn expm_plan(norm: f64) -> (u32, usize) {
    let mut s = 0u32;
    let mut b = norm;
    while b > 0.5 {
        b /= 2.0;
        s += 1;
    }
    let mut k = 0usize;
    let mut term = b;
    while term > 1e-17 && k < 30 {
        k += 1;
        term *= b / (k as f64 + 1.0);
    }
    (s, k + 1)
}

/// Skew-symmetric `L - Lᵀ` from the strictly lower triangle of `params`.
pub fn skew_from_params(params: &Matrix) -> Matrix {
    let l = params * &tril_strict_mask(params.nrows());
    &l - &l.t()
}

/// `exp(a)` by scaling and squaring around a Horner-form Taylor series.
pub fn expm(a: &Matrix) -> Matrix {
    let n = a.nrows();
    let (s, k) = expm_plan(norm_1(a));
    let b = a / 2f64.powi(s as i32);
    let eye = identity(n);
    let mut t = eye.clone();
    for j in (1..=k).rev() {
        t = &eye + &(b.dot(&t) / j as f64);
    }
    for _ in 0..s {
        t = t.dot(&t);
    }
    t
}

/// Orthogonal `exp(L - Lᵀ)` on the tape, differentiable in `params`.
pub fn matrix_exp_skew(tape: &mut Tape, params: Var) -> Result<Var> {
    let (n, m) = tape.shape(params);
    if n != m || n == 0 {
        return Err(Error::Shape(format!("matrix_exp_skew: {n}x{m}")));
    }
    let mask = tape.constant(tril_strict_mask(n));
    let l = tape.mul(params, mask)?;
    let lt = tape.transpose(l);
    let a = tape.sub(l, lt)?;
    let (s, k) = expm_plan(norm_1(tape.value(a)));
    let b = tape.scale(a, 1.0 / 2f64.powi(s as i32));
    let eye = tape.constant(identity(n));
    let mut t = eye;
    for j in (1..=k).rev() {
        let bt = tape.matmul(b, t)?;
        let bt = tape.scale(bt, 1.0 / j as f64);
        t = tape.add(eye, bt)?;
    }
    for _ in 0..s {
        t = tape.matmul(t, t)?;
    }
    Ok(t)
}
