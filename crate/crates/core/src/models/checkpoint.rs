// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! reload reproduces the weights bit for bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{AccuracyTable, Model, ModelConfig, Params};
use crate::autodiff::Matrix;
use crate::corpus::TaskSpec;
use crate::error::{Error, Result};

pub const CHECKPOINT_SCHEMA: &str = "numalign.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epoch: usize,
    pub accuracy: Option<AccuracyTable>,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ArrayRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ArrayRecord {
    pub fn from_matrix(name: &str, m: &Matrix) -> Self {
        ArrayRecord {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.rows.checked_mul(self.cols) != Some(self.data.len()) {
            return Err(Error::Schema(format!(
                "array `{}`: {}x{} but {} values",
                self.name,
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("array `{}` has non-finite values", self.name)));
        }
        Matrix::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|e| Error::Schema(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    schema: String,
    version: u32,
    config: ModelConfig,
    task: TaskSpec,
    seed: u64,
    epoch: usize,
    accuracy: Option<AccuracyTable>,
    params: Vec<ArrayRecord>,
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, out: W) -> Result<()> {
    let p = &ckpt.model.params;
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.into(),
        version: CHECKPOINT_VERSION,
        config: ckpt.model.config.clone(),
        task: ckpt.model.task.clone(),
        seed: ckpt.seed,
        epoch: ckpt.epoch,
        accuracy: ckpt.accuracy.clone(),
        params: p.names.iter().zip(&p.values).map(|(n, m)| ArrayRecord::from_matrix(n, m)).collect(),
    };
    serde_json::to_writer(out, &file)?;
    Ok(())
}

/// Parse a checkpoint and check that its arrays match the architecture.
pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let file: CheckpointFile = serde_json::from_reader(input)?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Schema(format!("expected schema `{CHECKPOINT_SCHEMA}`, found `{}`", file.schema)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Schema(format!("unsupported checkpoint version {}", file.version)));
    }
    let reference = Model::init(file.config.clone(), file.task.clone(), &mut crate::rng::seeded(0))?;
    if reference.params.names.len() != file.params.len() {
        return Err(Error::Schema(format!(
            "expected {} arrays, found {}",
            reference.params.names.len(),
            file.params.len()
        )));
    }
    let mut params = Params::default();
    for ((name, shape), rec) in reference.params.names.iter().zip(reference.params.shapes()).zip(&file.params) {
        if &rec.name != name || (rec.rows, rec.cols) != shape {
            return Err(Error::Schema(format!(
                "array `{}` ({}x{}) where `{name}` {shape:?} was expected",
                rec.name, rec.rows, rec.cols
            )));
        }
        params.push(name, rec.to_matrix()?);
    }
    Ok(Checkpoint {
        model: Model {
            config: file.config,
            task: file.task,
            params,
        },
        seed: file.seed,
        epoch: file.epoch,
        accuracy: file.accuracy,
    })
}
