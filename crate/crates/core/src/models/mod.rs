// SPDX-License-Identifier: MIT OR Apache-2.0

//! GRU, LSTM and shallow single-head transformer sequence models with a
//! shared MLP readout.

mod checkpoint;
mod params;
pub mod recurrent;
pub mod train;
pub mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::corpus::{TaskSpec, TokenId};
use crate::error::{Error, Result};

pub(crate) use checkpoint::ArrayRecord;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION};
pub use params::{Bound, Params};
pub use train::{evaluate, train, AccuracyTable, CurvePoint, TrainConfig, TrainOutcome};
pub use transformer::{AttentionEdit, ForwardOptions, HiddenRecord, Patch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gru,
    Lstm,
    Transformer,
}

impl Family {
    pub fn is_recurrent(self) -> bool {
        !matches!(self, Family::Transformer)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gru => "gru",
            Family::Lstm => "lstm",
            Family::Transformer => "transformer",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(Family::Gru),
            "lstm" => Ok(Family::Lstm),
            "transformer" => Ok(Family::Transformer),
            _ => Err(Error::Invalid(format!("unknown model family `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Nope,
    Rope,
}

impl FromStr for PosEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nope" => Ok(PosEncoding::Nope),
            "rope" => Ok(PosEncoding::Rope),
            _ => Err(Error::Invalid(format!("unknown positional encoding `{s}`"))),
        }
    }
}

fn default_d_model() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    1
}
fn default_pos() -> PosEncoding {
    PosEncoding::Rope
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_dropout() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    /// Transformer blocks; ignored by the recurrent families.
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_pos")]
    pub pos_encoding: PosEncoding,
    /// Readout hidden width as a multiple of `d_model`.
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_dropout")]
    pub mlp_dropout: f64,
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn new(family: Family, vocab_size: usize) -> Self {
        ModelConfig {
            family,
            d_model: default_d_model(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            pos_encoding: default_pos(),
            mlp_ratio: default_mlp_ratio(),
            mlp_dropout: default_dropout(),
            vocab_size,
        }
    }

    pub fn with_d_model(mut self, d: usize) -> Self {
        self.d_model = d;
        self
    }

    pub fn with_layers(mut self, n: usize) -> Self {
        self.n_layers = n;
        self
    }

    pub fn with_pos(mut self, p: PosEncoding) -> Self {
        self.pos_encoding = p;
        self
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    /// Width of the vector an alignment acts on: `[h, c]` for LSTMs.
    pub fn state_dim(&self) -> usize {
        match self.family {
            Family::Lstm => 2 * self.d_model,
            _ => self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model < 2 {
            return Err(Error::Invalid("d_model must be at least 2".into()));
        }
        if self.n_heads != 1 {
            return Err(Error::Invalid("only single-head attention is supported".into()));
        }
        if self.family == Family::Transformer && self.n_layers == 0 {
            return Err(Error::Invalid("transformer needs at least one layer".into()));
        }
        if self.family == Family::Transformer && self.pos_encoding == PosEncoding::Rope && self.d_model % 2 == 1 {
            return Err(Error::Invalid("rotary encoding needs an even d_model".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Invalid("vocabulary too small".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Invalid("mlp_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mlp_dropout) {
            return Err(Error::Invalid("mlp_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Train-time randomness for one forward pass.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

/// A model configuration, the task it was built for, and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub task: TaskSpec,
    pub params: Params,
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Matrix {
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_shape_fn((rows, cols), |_| u.sample(rng))
}

fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
}

impl Model {
    /// Fresh weights: unit-Gaussian embeddings, and everything else
    /// uniform in `±1/sqrt(fan_in)`. LayerNorm gains start at 1.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, task: TaskSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        task.validate()?;
        let vocab = task.vocabulary().len();
        if vocab != config.vocab_size {
            return Err(Error::Invalid(format!(
                "vocab_size {} does not match task vocabulary {vocab}",
                config.vocab_size
            )));
        }
        let d = config.d_model;
        let hidden = config.mlp_hidden();
        let v = config.vocab_size;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = Params::default();
        p.push("embed", gaussian(v, d, 1.0, rng));
        match config.family {
            Family::Gru | Family::Lstm => {
                let gates = if config.family == Family::Gru { 3 } else { 4 };
                p.push("cell.w_ih", uniform(d, gates * d, inv(d), rng));
                p.push("cell.w_hh", uniform(d, gates * d, inv(d), rng));
                p.push("cell.b_ih", uniform(1, gates * d, inv(d), rng));
                p.push("cell.b_hh", uniform(1, gates * d, inv(d), rng));
            }
            Family::Transformer => {
                for l in 0..config.n_layers {
                    p.push(&format!("layer{l}.ln1.gain"), Matrix::ones((1, d)));
                    p.push(&format!("layer{l}.ln1.bias"), Matrix::zeros((1, d)));
                    for w in ["wq", "wk", "wv", "wo"] {
                        p.push(&format!("layer{l}.attn.{w}"), uniform(d, d, inv(d), rng));
                    }
                    p.push(&format!("layer{l}.attn.bo"), Matrix::zeros((1, d)));
                    p.push(&format!("layer{l}.ln2.gain"), Matrix::ones((1, d)));
                    p.push(&format!("layer{l}.ln2.bias"), Matrix::zeros((1, d)));
                    p.push(&format!("layer{l}.mlp.w1"), uniform(d, hidden, inv(d), rng));
                    p.push(&format!("layer{l}.mlp.b1"), uniform(1, hidden, inv(d), rng));
                    p.push(&format!("layer{l}.mlp.w2"), uniform(hidden, d, inv(hidden), rng));
                    p.push(&format!("layer{l}.mlp.b2"), uniform(1, d, inv(hidden), rng));
                }
                p.push("final_ln.gain", Matrix::ones((1, d)));
                p.push("final_ln.bias", Matrix::zeros((1, d)));
            }
        }
        p.push("readout.w1", uniform(d, hidden, inv(d), rng));
        p.push("readout.b1", uniform(1, hidden, inv(d), rng));
        p.push("readout.w2", uniform(hidden, v, inv(hidden), rng));
        p.push("readout.b2", uniform(1, v, inv(hidden), rng));
        Ok(Model {
            config,
            task,
            params: p,
        })
    }

    /// Put the weights on `tape`, as trainable parameters or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Readout MLP: `W2 · dropout(gelu(W1 h + b1)) + b2`.
    pub fn readout(&self, tape: &mut Tape, b: &Bound, h: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let z = tape.matmul(h, b.get("readout.w1")?)?;
        let z = tape.add_row(z, b.get("readout.b1")?)?;
        let mut z = tape.gelu(z);
        if let Mode::Train(rng) = mode {
            let p = self.config.mlp_dropout;
            if p > 0.0 {
                let keep = 1.0 / (1.0 - p);
                let (r, c) = tape.shape(z);
                let mask = Matrix::from_shape_fn((r, c), |_| if rng.random_bool(p) { 0.0 } else { keep });
                let m = tape.constant(mask);
                z = tape.mul(z, m)?;
            }
        }
        let out = tape.matmul(z, b.get("readout.w2")?)?;
        tape.add_row(out, b.get("readout.b2")?)
    }

    /// Logits for every position of each sequence (rows follow positions).
    pub fn logits_batch(&self, sequences: &[&[TokenId]]) -> Result<Vec<Matrix>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        self.logits_on(&mut tape, &b, sequences, &mut Mode::Eval)
    }

    pub fn logits(&self, tokens: &[TokenId]) -> Result<Matrix> {
        Ok(self.logits_batch(&[tokens])?.remove(0))
    }

    fn logits_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        sequences: &[&[TokenId]],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<Matrix>> {
        let (out, rows) = self.forward_rows(tape, b, sequences, mode)?;
        let v = tape.value(out);
        Ok(rows
            .iter()
            .map(|r| v.select(ndarray::Axis(0), r))
            .collect())
    }

    /// Logits for all positions in one matrix, plus the row of each
    /// `(sequence, position)`.
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        b: &Bound,
        sequences: &[&[TokenId]],
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Vec<Vec<usize>>)> {
        if sequences.iter().any(|s| s.is_empty()) {
            return Err(Error::Shape("empty sequence".into()));
        }
        let vocab = self.config.vocab_size as TokenId;
        if let Some(&bad) = sequences.iter().flat_map(|s| s.iter()).find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken(bad));
        }
        match self.config.family {
            Family::Gru | Family::Lstm => {
                let (hidden, rows) = recurrent::hidden_rows(self, tape, b, sequences)?;
                let out = self.readout(tape, b, hidden, mode)?;
                Ok((out, rows))
            }
            Family::Transformer => {
                let opts = ForwardOptions::default();
                let fwd = transformer::forward(self, tape, b, sequences, &opts)?;
                let out = self.readout(tape, b, fwd.output, mode)?;
                Ok((out, fwd.rows))
            }
        }
    }
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
