// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam and the warmup / inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::tape::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Matrix::zeros(s)).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam: {} moment buffers, {} params, {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.dim() != g.dim() || m.dim() != g.dim() {
                return Err(Error::Shape(format!("adam: {:?} vs {:?}", p.dim(), g.dim())));
            }
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Linear warmup to `lr_max`, then `lr_max · sqrt(warmup / step)`, floored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl LrSchedule {
    pub fn new(lr_max: f64) -> Self {
        Self {
            warmup_steps: 100,
            lr_max,
            lr_min: 1e-7,
        }
    }

    pub fn constant(lr: f64) -> Self {
        Self {
            warmup_steps: 0,
            lr_max: lr,
            lr_min: lr,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        let lr = if step < w {
            self.lr_max * (step + 1) as f64 / w as f64
        } else if w == 0 {
            self.lr_max
        } else {
            self.lr_max * (w as f64 / step as f64).sqrt()
        };
        lr.max(self.lr_min)
    }
}
