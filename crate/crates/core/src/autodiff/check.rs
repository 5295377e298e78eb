// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference gradient checks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::{identity, matrix_exp_skew};
use super::tape::{Matrix, Tape, Var};
use crate::error::Result;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Largest relative error between analytic and finite-difference
/// gradients of `sum(f(inputs) ∘ w)` for a random weighting `w`, taken
/// input by input with `‖a - n‖ / max(‖a‖, ‖n‖, 1e-10)`.
pub fn gradcheck<R: Rng + ?Sized>(inputs: &[Matrix], f: &Build, h: f64, rng: &mut R) -> Result<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let w = Matrix::from_shape_fn(tape.value(out).raw_dim(), |_| normal.sample(rng));
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv)?;
    let loss = tape.sum(prod);
    let grads = tape.backward(loss)?;

    let eval = |xs: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.constant(m.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok((t.value(o) * &w).sum())
    };

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        let mut numeric = Matrix::zeros(analytic.raw_dim());
        for idx in 0..xs[k].len() {
            let (r, c) = (idx / xs[k].ncols(), idx % xs[k].ncols());
            let orig = xs[k][[r, c]];
            xs[k][[r, c]] = orig + h;
            let fp = eval(&xs)?;
            xs[k][[r, c]] = orig - h;
            let fm = eval(&xs)?;
            xs[k][[r, c]] = orig;
            numeric[[r, c]] = (fp - fm) / (2.0 * h);
        }
        let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
        let na = analytic.mapv(|v| v * v).sum().sqrt();
        let nn = numeric.mapv(|v| v * v).sum().sqrt();
        worst = worst.max(diff / na.max(nn).max(1e-10));
    }
    Ok(worst)
}

/// Every differentiable op the models and alignments use.
pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "add",
    "add_row",
    "sub",
    "mul",
    "mul_row",
    "scale",
    "tanh",
    "sigmoid",
    "gelu",
    "softmax",
    "softmax_causal",
    "layer_norm",
    "cross_entropy",
    "concat_cols",
    "slice_cols",
    "concat_rows",
    "slice_rows",
    "gather_rows",
    "replace_rows",
    "transpose",
    "sum",
    "solve",
    "rope",
    "matrix_exp_skew",
];

fn randn<R: Rng + ?Sized>(r: usize, c: usize, rng: &mut R) -> Matrix {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Matrix::from_shape_fn((r, c), |_| normal.sample(rng))
}

/// Random inputs (dimensions 3 to 8) and an expression for one op.
pub fn op_case<R: Rng + ?Sized>(name: &str, rng: &mut R) -> Option<(Vec<Matrix>, Box<Build>)> {
    let mut dim = || rng.random_range(3..=8usize);
    let (a, b, c) = (dim(), dim(), dim());
    let case: (Vec<Matrix>, Box<Build>) = match name {
        "matmul" => (
            vec![randn(a, b, rng), randn(b, c, rng)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "matmul_nt" => (
            vec![randn(a, b, rng), randn(c, b, rng)],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        ),
        "add" => (vec![randn(a, b, rng), randn(a, b, rng)], Box::new(|t, v| t.add(v[0], v[1]))),
        "add_row" => (vec![randn(a, b, rng), randn(1, b, rng)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        "sub" => (vec![randn(a, b, rng), randn(a, b, rng)], Box::new(|t, v| t.sub(v[0], v[1]))),
        "mul" => (vec![randn(a, b, rng), randn(a, b, rng)], Box::new(|t, v| t.mul(v[0], v[1]))),
        "mul_row" => (vec![randn(a, b, rng), randn(1, b, rng)], Box::new(|t, v| t.mul_row(v[0], v[1]))),
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            (vec![randn(a, b, rng)], Box::new(move |t, v| Ok(t.scale(v[0], k))))
        }
        "tanh" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        "sigmoid" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        "gelu" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.gelu(v[0])))),
        "softmax" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.softmax_rows(v[0], false)))),
        "softmax_causal" => (vec![randn(a, a, rng)], Box::new(|t, v| Ok(t.softmax_rows(v[0], true)))),
        "layer_norm" => (
            vec![randn(a, b, rng), randn(1, b, rng), randn(1, b, rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
        ),
        "cross_entropy" => {
            let targets: Vec<Option<usize>> = (0..a)
                .map(|i| (i % 3 != 2).then(|| rng.random_range(0..b)))
                .collect();
            (
                vec![randn(a, b, rng)],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets)),
            )
        }
        "concat_cols" => (
            vec![randn(a, b, rng), randn(a, c, rng)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1], v[0]])),
        ),
        "slice_cols" => {
            let lo = rng.random_range(0..b - 1);
            let hi = rng.random_range(lo + 1..=b);
            (vec![randn(a, b, rng)], Box::new(move |t, v| t.slice_cols(v[0], lo, hi)))
        }
        "concat_rows" => (
            vec![randn(a, b, rng), randn(c, b, rng)],
            Box::new(|t, v| t.concat_rows(&[v[1], v[0], v[1]])),
        ),
        "slice_rows" => {
            let lo = rng.random_range(0..a - 1);
            let hi = rng.random_range(lo + 1..=a);
            (vec![randn(a, b, rng)], Box::new(move |t, v| t.slice_rows(v[0], lo, hi)))
        }
        "gather_rows" => {
            let idx: Vec<usize> = (0..c).map(|_| rng.random_range(0..a)).collect();
            (vec![randn(a, b, rng)], Box::new(move |t, v| t.gather_rows(v[0], &idx)))
        }
        "replace_rows" => {
            let mut idx: Vec<usize> = (0..a).collect();
            idx.truncate(rng.random_range(1..=a));
            let n = idx.len();
            (
                vec![randn(a, b, rng), randn(n, b, rng)],
                Box::new(move |t, v| t.replace_rows(v[0], v[1], &idx)),
            )
        }
        "transpose" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        "sum" => (vec![randn(a, b, rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
        "solve" => {
            let x = randn(a, a, rng) + identity(a) * (a as f64);
            (vec![x, randn(a, b, rng)], Box::new(|t, v| t.solve(v[0], v[1])))
        }
        "rope" => {
            let pos: Vec<usize> = (0..a).map(|_| rng.random_range(0..40)).collect();
            (vec![randn(a, b, rng)], Box::new(move |t, v| t.rope(v[0], &pos)))
        }
        "matrix_exp_skew" => (vec![randn(4, 4, rng)], Box::new(|t, v| matrix_exp_skew(t, v[0]))),
        _ => return None,
    };
    Some(case)
}

/// Worst relative error over `trials` random cases of `name`.
pub fn check_op<R: Rng + ?Sized>(name: &str, trials: usize, rng: &mut R) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (inputs, f) = op_case(name, rng)
            .ok_or_else(|| crate::Error::Invalid(format!("unknown op `{name}`")))?;
        worst = worst.max(gradcheck(&inputs, f.as_ref(), 1e-5, rng)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn every_op_passes_gradcheck() {
        let mut rng = seeded(123);
        for op in OPS {
            let err = check_op(op, 10, &mut rng).unwrap();
            assert!(err < 1e-6, "{op}: {err}");
        }
    }
}
