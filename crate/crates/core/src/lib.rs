// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training small sequence models on numeric-equivalence tasks and aligning
//! their hidden states with symbolic counting programs.

pub mod alignment;
pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod models;
pub mod probes;
pub mod rng;
pub mod symbolic;

pub use error::{Error, Result};
