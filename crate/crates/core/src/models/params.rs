// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use crate::autodiff::{Gradients, Matrix, Tape, Var};
use crate::error::{Error, Result};

/// Ordered named weight matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub values: Vec<Matrix>,
}

impl Params {
    pub fn push(&mut self, name: &str, value: Matrix) {
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.values[i])
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(|m| m.dim()).collect()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|m| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let index = self.names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
        Bound { vars, index }
    }
}

/// Tape handles for a [`Params`] set.
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Schema(format!("missing parameter `{name}`")))
    }

    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Matrix> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
