// SPDX-License-Identifier: MIT OR Apache-2.0

//! Invertible alignment functions between a model's state space and an
//! aligned space, and the interchange intervention built on them.
//!
//! States are row vectors. The orthogonal alignment maps `h` to `z = Q h`
//! (rows: `h Qᵀ`); the linear one maps it to `z = X (h + b)` with
//! `X = (M Mᵀ + εI) S`.

mod checkpoint;
pub mod das;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::linalg::{expm, random_orthogonal, skew_from_params, solve};
use crate::autodiff::{matrix_exp_skew, Matrix, Tape, Var};
use crate::error::{Error, Result};

pub use checkpoint::{read_alignment, write_alignment, AlignmentRecord, ALIGNMENT_SCHEMA, ALIGNMENT_VERSION};
pub use das::{dvar_sweep, iia, train_das, DasConfig, DasOutcome, IiaReport, InterventionSet};

/// LAF regulariser keeping `X` away from singular.
pub const LAF_EPSILON: f64 = 0.1;

/// `d_var` contiguous selected coordinates starting at `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub d_m: usize,
    pub d_var: usize,
    #[serde(default)]
    pub offset: usize,
}

impl Partition {
    pub fn new(d_m: usize, d_var: usize) -> Result<Self> {
        Self::at(d_m, d_var, 0)
    }

    pub fn at(d_m: usize, d_var: usize, offset: usize) -> Result<Self> {
        let p = Partition { d_m, d_var, offset };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_var > self.d_m || self.offset + self.d_var > self.d_m || self.d_m == 0 {
            return Err(Error::Invalid(format!(
                "partition of {} coordinates at {} does not fit in {}",
                self.d_var, self.offset, self.d_m
            )));
        }
        Ok(())
    }

    pub fn contains(&self, i: usize) -> bool {
        (self.offset..self.offset + self.d_var).contains(&i)
    }

    /// Diagonal of `D` as a `1 x d_m` row.
    pub fn mask(&self) -> Matrix {
        Matrix::from_shape_fn((1, self.d_m), |(_, j)| if self.contains(j) { 1.0 } else { 0.0 })
    }

    pub fn complement_mask(&self) -> Matrix {
        self.mask().mapv(|v| 1.0 - v)
    }

    pub fn selector(&self) -> Matrix {
        Matrix::from_diag(&self.mask().row(0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentKind {
    /// `z = Q h` with `Q` orthogonal.
    #[serde(alias = "oaf")]
    Orthogonal,
    /// `z = X (h + b)` with `X` invertible.
    #[serde(alias = "laf")]
    Linear,
    /// `z = h`: substitutions of individual neurons.
    Identity,
}

impl std::fmt::Display for AlignmentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AlignmentKind::Orthogonal => "oaf",
            AlignmentKind::Linear => "laf",
            AlignmentKind::Identity => "identity",
        })
    }
}

impl std::str::FromStr for AlignmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oaf" | "orthogonal" => Ok(AlignmentKind::Orthogonal),
            "laf" | "linear" => Ok(AlignmentKind::Linear),
            "identity" => Ok(AlignmentKind::Identity),
            _ => Err(Error::Invalid(format!("unknown alignment kind `{s}`"))),
        }
    }
}

/// Parameters of an alignment function.
#[derive(Clone, Debug, PartialEq)]
pub enum Alignment {
    /// `Q = Q0 exp(L - Lᵀ)` with `Q0` a fixed random orthogonal base.
    Orthogonal { base: Matrix, skew: Matrix },
    Linear { m: Matrix, a: Matrix, b: Matrix },
    Identity { d: usize },
}

/// `tanh(a) + ε sign(tanh(a))`, with `sign(0) = 1`.
fn signs(a: &Matrix) -> Matrix {
    a.mapv(|v| {
        let t = v.tanh();
        t + if t >= 0.0 { LAF_EPSILON } else { -LAF_EPSILON }
    })
}

impl Alignment {
    pub fn kind(&self) -> AlignmentKind {
        match self {
            Alignment::Orthogonal { .. } => AlignmentKind::Orthogonal,
            Alignment::Linear { .. } => AlignmentKind::Linear,
            Alignment::Identity { .. } => AlignmentKind::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Alignment::Orthogonal { base, .. } => base.nrows(),
            Alignment::Linear { m, .. } => m.nrows(),
            Alignment::Identity { d } => *d,
        }
    }

    /// Freshly initialised alignment: a random orthogonal base with zero
    /// skew parameters, or `M ~ N(0, 1/d²)`, `a ~ N(0, 1)`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(kind: AlignmentKind, d: usize, rng: &mut R) -> Self {
        match kind {
            AlignmentKind::Orthogonal => Alignment::Orthogonal {
                base: random_orthogonal(d, rng),
                skew: Matrix::zeros((d, d)),
            },
            AlignmentKind::Linear => {
                let nm = Normal::new(0.0, 1.0 / d as f64).expect("positive std");
                let na = Normal::new(0.0, 1.0).expect("unit std");
                Alignment::Linear {
                    m: Matrix::from_shape_fn((d, d), |_| nm.sample(rng)),
                    a: Matrix::from_shape_fn((1, d), |_| na.sample(rng)),
                    b: Matrix::zeros((1, d)),
                }
            }
            AlignmentKind::Identity => Alignment::Identity { d },
        }
    }

    /// Random orthogonal alignment with Gaussian skew parameters.
    pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, std: f64, rng: &mut R) -> Self {
        let n = Normal::new(0.0, std).expect("non-negative std");
        Alignment::Orthogonal {
            base: random_orthogonal(d, rng),
            skew: Matrix::from_shape_fn((d, d), |_| n.sample(rng)),
        }
    }

    /// The matrix applied to `h`: `Q`, `X` or `I`.
    pub fn matrix(&self) -> Matrix {
        match self {
            Alignment::Orthogonal { base, skew } => base.dot(&expm(&skew_from_params(skew))),
            Alignment::Linear { m, a, .. } => {
                let d = m.nrows();
                let p = m.dot(&m.t()) + Matrix::eye(d) * LAF_EPSILON;
                p * &signs(a)
            }
            Alignment::Identity { d } => Matrix::eye(*d),
        }
    }

    fn bias(&self) -> Option<&Matrix> {
        match self {
            Alignment::Linear { b, .. } => Some(b),
            _ => None,
        }
    }

    /// `z` for each row of `h`.
    pub fn forward(&self, h: &Matrix) -> Result<Matrix> {
        self.check(h)?;
        let x = self.matrix();
        Ok(match self.bias() {
            Some(b) => (h + b).dot(&x.t()),
            None => h.dot(&x.t()),
        })
    }

    /// `h` for each row of `z`.
    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        self.check(z)?;
        match self {
            Alignment::Orthogonal { .. } => Ok(z.dot(&self.matrix())),
            Alignment::Linear { b, .. } => Ok(solve(&self.matrix(), &z.t().to_owned())?.t().to_owned() - b),
            Alignment::Identity { .. } => Ok(z.clone()),
        }
    }

    fn check(&self, h: &Matrix) -> Result<()> {
        if h.ncols() != self.dim() {
            return Err(Error::Shape(format!("state width {} vs alignment {}", h.ncols(), self.dim())));
        }
        Ok(())
    }

    /// `f⁻¹((1 - D) f(h_trg) + D f(h_src))`, row by row.
    pub fn interchange(&self, h_trg: &Matrix, h_src: &Matrix, partition: &Partition) -> Result<Matrix> {
        if h_trg.dim() != h_src.dim() || partition.d_m != self.dim() {
            return Err(Error::Shape(format!(
                "interchange: {:?} vs {:?} with d_m {}",
                h_trg.dim(),
                h_src.dim(),
                partition.d_m
            )));
        }
        let zt = self.forward(h_trg)?;
        let zs = self.forward(h_src)?;
        let zv = zt * &partition.complement_mask() + zs * &partition.mask();
        self.inverse(&zv)
    }

    /// Columns `u_i` of `f`'s inverse matrix and the bias, so that
    /// `h = Σ z_i u_i - b`.
    pub fn components(&self) -> Result<Components> {
        let d = self.dim();
        let x = self.matrix();
        let u = match self {
            Alignment::Orthogonal { .. } => x.t().to_owned(),
            Alignment::Linear { .. } => solve(&x, &Matrix::eye(d))?,
            Alignment::Identity { .. } => x,
        };
        let bias = self.bias().cloned().unwrap_or_else(|| Matrix::zeros((1, d)));
        Ok(Components { u, bias })
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Alignment::Orthogonal { skew, .. } => vec![skew],
            Alignment::Linear { m, a, b } => vec![m, a, b],
            Alignment::Identity { .. } => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Alignment::Orthogonal { skew, .. } => vec![skew],
            Alignment::Linear { m, a, b } => vec![m, a, b],
            Alignment::Identity { .. } => vec![],
        }
    }

    /// Put the alignment on `tape`; parameters are trainable leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BoundAlignment> {
        let leaf = |tape: &mut Tape, m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        Ok(match self {
            Alignment::Orthogonal { base, skew } => {
                let s = leaf(tape, skew);
                let e = matrix_exp_skew(tape, s)?;
                let b = tape.constant(base.clone());
                let q = tape.matmul(b, e)?;
                BoundAlignment { params: vec![s], matrix: Some(q), bias: None, kind: AlignmentKind::Orthogonal }
            }
            Alignment::Linear { m, a, b } => {
                let d = m.nrows();
                let mv = leaf(tape, m);
                let av = leaf(tape, a);
                let bv = leaf(tape, b);
                let mm = tape.matmul_nt(mv, mv)?;
                let eps = tape.constant(Matrix::eye(d) * LAF_EPSILON);
                let p = tape.add(mm, eps)?;
                let t = tape.tanh(av);
                let shift = tape.constant(tape.value(t).mapv(|v| if v >= 0.0 { LAF_EPSILON } else { -LAF_EPSILON }));
                let s = tape.add(t, shift)?;
                let x = tape.mul_row(p, s)?;
                BoundAlignment { params: vec![mv, av, bv], matrix: Some(x), bias: Some(bv), kind: AlignmentKind::Linear }
            }
            Alignment::Identity { .. } => BoundAlignment {
                params: vec![],
                matrix: None,
                bias: None,
                kind: AlignmentKind::Identity,
            },
        })
    }
}

/// `U = f⁻¹`'s matrix (columns `u_i`) and bias `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Components {
    pub u: Matrix,
    pub bias: Matrix,
}

impl Components {
    /// `-b + Σ z_i u_i` for each row of `z`.
    pub fn reconstruct(&self, z: &Matrix) -> Matrix {
        z.dot(&self.u.t()) - &self.bias
    }

    /// Component-exchange form of the interchange: for each row,
    /// `-b + Σ_{i in var} z_src_i u_i + Σ_{i not in var} z_trg_i u_i`.
    pub fn exchange(&self, z_trg: &Matrix, z_src: &Matrix, partition: &Partition) -> Matrix {
        let mut out = Matrix::zeros(z_trg.raw_dim());
        for r in 0..z_trg.nrows() {
            let mut row = out.row_mut(r);
            for i in 0..partition.d_m {
                let zi = if partition.contains(i) { z_src[[r, i]] } else { z_trg[[r, i]] };
                row.scaled_add(zi, &self.u.column(i));
            }
            row -= &self.bias.row(0);
        }
        out
    }
}

/// Tape handles of a bound alignment.
pub struct BoundAlignment {
    pub params: Vec<Var>,
    matrix: Option<Var>,
    bias: Option<Var>,
    kind: AlignmentKind,
}

impl BoundAlignment {
    pub fn forward(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let Some(x) = self.matrix else { return Ok(h) };
        let h = match self.bias {
            Some(b) => tape.add_row(h, b)?,
            None => h,
        };
        tape.matmul_nt(h, x)
    }

    pub fn inverse(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let Some(x) = self.matrix else { return Ok(z) };
        match self.kind {
            AlignmentKind::Orthogonal => tape.matmul(z, x),
            _ => {
                let zt = tape.transpose(z);
                let y = tape.solve(x, zt)?;
                let h = tape.transpose(y);
                match self.bias {
                    Some(b) => {
                        let nb = tape.scale(b, -1.0);
                        tape.add_row(h, nb)
                    }
                    None => Ok(h),
                }
            }
        }
    }

    pub fn interchange(&self, tape: &mut Tape, h_trg: Var, h_src: Var, partition: &Partition) -> Result<Var> {
        let zt = self.forward(tape, h_trg)?;
        let zs = self.forward(tape, h_src)?;
        let keep = tape.constant(partition.complement_mask());
        let swap = tape.constant(partition.mask());
        let a = tape.mul_row(zt, keep)?;
        let b = tape.mul_row(zs, swap)?;
        let zv = tape.add(a, b)?;
        self.inverse(tape, zv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::linalg::max_abs;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn randn(r: usize, c: usize, seed: u64) -> Matrix {
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut rng = seeded(seed);
        Matrix::from_shape_fn((r, c), |_| n.sample(&mut rng))
    }

    fn trained_like(kind: AlignmentKind, d: usize, seed: u64) -> Alignment {
        let mut rng = seeded(seed);
        match kind {
            AlignmentKind::Orthogonal => Alignment::random_orthogonal(d, 0.3, &mut rng),
            AlignmentKind::Linear => {
                let mut a = Alignment::init(kind, d, &mut rng);
                if let Alignment::Linear { m, b, .. } = &mut a {
                    *m = randn(d, d, seed + 1) * 0.5;
                    *b = randn(1, d, seed + 2);
                }
                a
            }
            AlignmentKind::Identity => Alignment::Identity { d },
        }
    }

    #[test]
    fn degenerate_partitions() {
        for kind in [AlignmentKind::Orthogonal, AlignmentKind::Linear, AlignmentKind::Identity] {
            let f = trained_like(kind, 6, 1);
            let (ht, hs) = (randn(4, 6, 2), randn(4, 6, 3));
            let none = f.interchange(&ht, &hs, &Partition::new(6, 0).unwrap()).unwrap();
            let all = f.interchange(&ht, &hs, &Partition::new(6, 6).unwrap()).unwrap();
            assert!(max_abs(&(none - &ht)) < 1e-12, "{kind}");
            assert!(max_abs(&(all - &hs)) < 1e-12, "{kind}");
        }
        let id = Alignment::Identity { d: 3 };
        let (ht, hs) = (randn(2, 3, 4), randn(2, 3, 5));
        assert_eq!(id.interchange(&ht, &hs, &Partition::new(3, 0).unwrap()).unwrap(), ht);
        assert_eq!(id.interchange(&ht, &hs, &Partition::new(3, 3).unwrap()).unwrap(), hs);
    }

    #[test]
    fn orthogonal_interchange_splits_the_norm() {
        let f = Alignment::random_orthogonal(10, 1.0, &mut seeded(7));
        let p = Partition::at(10, 4, 3).unwrap();
        let (ht, hs) = (randn(5, 10, 8), randn(5, 10, 9));
        let hv = f.interchange(&ht, &hs, &p).unwrap();
        let q = f.matrix();
        let keep = ht.dot(&q.t()) * &p.complement_mask();
        let swap = hs.dot(&q.t()) * &p.mask();
        for r in 0..5 {
            let lhs = hv.row(r).dot(&hv.row(r));
            let rhs = keep.row(r).dot(&keep.row(r)) + swap.row(r).dot(&swap.row(r));
            assert!((lhs - rhs).abs() < 1e-10 * rhs.max(1.0));
        }
        // the complement of the aligned subspace is untouched
        let kept = hv.dot(&q.t()) * &p.complement_mask();
        assert!(max_abs(&(kept - keep)) < 1e-12);
    }

    #[test]
    fn orthogonal_components_are_orthonormal() {
        let f = Alignment::random_orthogonal(8, 0.5, &mut seeded(2));
        let c = f.components().unwrap();
        let gram = c.u.t().dot(&c.u);
        assert!(max_abs(&(gram - Matrix::eye(8))) < 1e-12);
    }

    #[test]
    fn tape_and_plain_alignments_agree() {
        for kind in [AlignmentKind::Orthogonal, AlignmentKind::Linear] {
            let f = trained_like(kind, 5, 3);
            let p = Partition::at(5, 2, 1).unwrap();
            let (ht, hs) = (randn(3, 5, 1), randn(3, 5, 2));
            let mut tape = Tape::new();
            let bound = f.bind(&mut tape, true).unwrap();
            let (a, b) = (tape.constant(ht.clone()), tape.constant(hs.clone()));
            let v = bound.interchange(&mut tape, a, b, &p).unwrap();
            let plain = f.interchange(&ht, &hs, &p).unwrap();
            assert!(max_abs(&(tape.value(v) - &plain)) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn linear_alignment_gradients_match_finite_differences() {
        use crate::autodiff::check::gradcheck;
        let p = Partition::at(4, 2, 1).unwrap();
        let (ht, hs) = (randn(3, 4, 11), randn(3, 4, 12));
        let build = move |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let mm = tape.matmul_nt(v[0], v[0])?;
            let eps = tape.constant(Matrix::eye(4) * LAF_EPSILON);
            let pm = tape.add(mm, eps)?;
            let t = tape.tanh(v[1]);
            let shift = tape.constant(tape.value(t).mapv(|x| if x >= 0.0 { LAF_EPSILON } else { -LAF_EPSILON }));
            let s = tape.add(t, shift)?;
            let x = tape.mul_row(pm, s)?;
            let bias = tape.constant(Matrix::from_elem((1, 4), 0.3));
            let bound = BoundAlignment { params: v.to_vec(), matrix: Some(x), bias: Some(bias), kind: AlignmentKind::Linear };
            let a = tape.constant(ht.clone());
            let b = tape.constant(hs.clone());
            bound.interchange(tape, a, b, &p)
        };
        let inputs = vec![randn(4, 4, 13) + Matrix::eye(4), randn(1, 4, 14)];
        let err = gradcheck(&inputs, &build, 1e-5, &mut seeded(0)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_bias_cancels_in_interchange() {
        let p = Partition::at(4, 2, 1).unwrap();
        let (ht, hs) = (randn(3, 4, 11), randn(3, 4, 12));
        let f = trained_like(AlignmentKind::Linear, 4, 5);
        let mut g = f.clone();
        if let Alignment::Linear { b, .. } = &mut g {
            b.fill(2.5);
        }
        let d = max_abs(&(f.interchange(&ht, &hs, &p).unwrap() - g.interchange(&ht, &hs, &p).unwrap()));
        assert!(d < 1e-10, "{d}");
    }

    #[test]
    fn laf_matrix_is_never_singular() {
        // a = 0 everywhere and M = 0: X = εI · ε
        let f = Alignment::Linear { m: Matrix::zeros((3, 3)), a: Matrix::zeros((1, 3)), b: Matrix::zeros((1, 3)) };
        let x = f.matrix();
        assert!(max_abs(&(x - Matrix::eye(3) * (LAF_EPSILON * LAF_EPSILON))) < 1e-15);
        let h = randn(2, 3, 1);
        assert!(max_abs(&(f.inverse(&f.forward(&h).unwrap()).unwrap() - &h)) < 1e-10);
    }

    #[test]
    fn partition_validation() {
        assert!(Partition::new(4, 5).is_err());
        assert!(Partition::at(4, 2, 3).is_err());
        let p = Partition::at(6, 2, 4).unwrap();
        let d = p.selector();
        assert_eq!(d.dot(&d), d);
        assert_eq!(p.mask().sum(), 2.0);
        assert!(p.contains(5) && !p.contains(3));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn inverse_undoes_forward(seed in 0u64..10_000, d in 2usize..12, kind in 0usize..3) {
            let kind = [AlignmentKind::Orthogonal, AlignmentKind::Linear, AlignmentKind::Identity][kind];
            let f = trained_like(kind, d, seed);
            let h = randn(4, d, seed ^ 0xabc);
            let back = f.inverse(&f.forward(&h).unwrap()).unwrap();
            prop_assert!(max_abs(&(back - &h)) < 1e-8);
            let z = randn(4, d, seed ^ 0xdef);
            let fwd = f.forward(&f.inverse(&z).unwrap()).unwrap();
            prop_assert!(max_abs(&(fwd - &z)) < 1e-8);
        }

        #[test]
        fn component_exchange_equals_interchange(seed in 0u64..10_000, d in 2usize..10, frac in 0.0f64..1.0, kind in 0usize..2) {
            let kind = [AlignmentKind::Orthogonal, AlignmentKind::Linear][kind];
            let f = trained_like(kind, d, seed);
            let d_var = ((d as f64) * frac) as usize;
            let p = Partition::new(d, d_var).unwrap();
            let (ht, hs) = (randn(3, d, seed + 1), randn(3, d, seed + 2));
            let direct = f.interchange(&ht, &hs, &p).unwrap();
            let c = f.components().unwrap();
            let ex = c.exchange(&f.forward(&ht).unwrap(), &f.forward(&hs).unwrap(), &p);
            prop_assert!(max_abs(&(direct - ex)) < 1e-8);
            let rec = c.reconstruct(&f.forward(&ht).unwrap());
            prop_assert!(max_abs(&(rec - &ht)) < 1e-8);
        }
    }
}
