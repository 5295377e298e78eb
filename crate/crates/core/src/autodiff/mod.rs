// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense reverse-mode autodiff, optimiser and the structured
//! parametrisations alignment training needs.

pub mod check;
pub mod linalg;
pub mod optim;
pub mod tape;

pub use linalg::{matrix_exp_skew, solve};
pub use optim::{Adam, LrSchedule};
pub use tape::{Gradients, Matrix, Tape, Var};
