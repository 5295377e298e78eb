// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token-prediction training and trial-level evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, Mode, Model, ModelConfig};
use crate::autodiff::{Adam, LrSchedule, Matrix, Tape};
use crate::corpus::{evaluation_grid, Dataset, TokenSequence};
use crate::error::{Error, Result};
use crate::rng::derive;

fn default_batch() -> usize {
    128
}
fn default_steps() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_lr_min() -> f64 {
    1e-7
}
fn default_warmup() -> u64 {
    100
}
fn default_epochs() -> usize {
    1000
}
fn default_target() -> f64 {
    0.99
}
fn default_eval_every() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps_per_epoch: usize,
    #[serde(default = "default_lr")]
    pub lr_max: f64,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: u64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Stop once trained-quantity trial accuracy on the grid reaches this.
    #[serde(default = "default_target")]
    pub target_acc: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: default_batch(),
            steps_per_epoch: default_steps(),
            lr_max: default_lr(),
            lr_min: default_lr_min(),
            warmup_steps: default_warmup(),
            max_epochs: default_epochs(),
            target_acc: default_target(),
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.eval_every == 0 {
            return Err(Error::Invalid("batch size, steps and eval interval must be positive".into()));
        }
        if !(self.lr_max > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Invalid("need 0 <= lr_min <= lr_max and lr_max > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantityAccuracy {
    pub quantity: usize,
    pub held_out: bool,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub per_quantity: Vec<QuantityAccuracy>,
    pub trained: f64,
    pub held_out: f64,
    pub overall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub task_acc: f64,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curves: Vec<CurvePoint>,
}

/// Whether every determined token after the trigger is the argmax
/// prediction of the position before it.
pub fn trial_correct(logits: &Matrix, seq: &TokenSequence) -> bool {
    (seq.trigger_index + 1..seq.len()).all(|j| super::argmax(logits.row(j - 1)) == seq.tokens[j] as usize)
}

const EVAL_CHUNK: usize = 128;

pub fn evaluate(model: &Model, grid: &[TokenSequence]) -> Result<AccuracyTable> {
    let mut counts = vec![(0usize, 0usize); model.task.max_count + 1];
    for chunk in grid.chunks(EVAL_CHUNK) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let logits = model.logits_batch(&seqs)?;
        for (seq, l) in chunk.iter().zip(&logits) {
            let c = counts
                .get_mut(seq.object_quantity)
                .ok_or(Error::QuantityOutOfRange { quantity: seq.object_quantity, max: model.task.max_count })?;
            c.1 += 1;
            if trial_correct(l, seq) {
                c.0 += 1;
            }
        }
    }
    let mut per_quantity = Vec::new();
    let (mut tr, mut ho) = ((0, 0), (0, 0));
    for (q, &(correct, total)) in counts.iter().enumerate() {
        if total == 0 {
            continue;
        }
        let held_out = model.task.holdout.contains(&q);
        let acc = if held_out { &mut ho } else { &mut tr };
        acc.0 += correct;
        acc.1 += total;
        per_quantity.push(QuantityAccuracy { quantity: q, held_out, correct, total });
    }
    let frac = |(c, t): (usize, usize)| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    Ok(AccuracyTable {
        per_quantity,
        trained: frac(tr),
        held_out: frac(ho),
        overall: frac((tr.0 + ho.0, tr.1 + ho.1)),
    })
}

/// Teacher-forced targets: each real position predicts the next token.
fn targets_for(rows: &[Vec<usize>], seqs: &[&[u32]], n_rows: usize) -> Vec<Option<usize>> {
    let mut t = vec![None; n_rows];
    for (r, s) in rows.iter().zip(seqs) {
        for i in 0..s.len().saturating_sub(1) {
            t[r[i]] = Some(s[i + 1] as usize);
        }
    }
    t
}

/// Mean next-token loss of `model` on `seqs`, without dropout.
pub fn ntp_loss(model: &Model, seqs: &[&[u32]]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let (logits, rows) = model.forward_rows(&mut tape, &b, seqs, &mut Mode::Eval)?;
    let targets = targets_for(&rows, seqs, tape.shape(logits).0);
    let loss = tape.cross_entropy(logits, &targets)?;
    Ok(tape.scalar(loss))
}

pub fn train(config: &ModelConfig, dataset: &Dataset, hyper: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    train_with(config, dataset, hyper, seed, |_| {})
}

/// [`train`] with a callback after every evaluation.
pub fn train_with(
    config: &ModelConfig,
    dataset: &Dataset,
    hyper: &TrainConfig,
    seed: u64,
    mut on_eval: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if dataset.is_empty() {
        return Err(Error::Insufficient("empty training set".into()));
    }
    let mut model = Model::init(config.clone(), dataset.spec.clone(), &mut derive(seed, "init"))?;
    let grid = evaluation_grid(&dataset.spec, &mut derive(seed, "grid"))?;
    let mut batch_rng = derive(seed, "batches");
    let mut dropout_rng = derive(seed, "dropout");
    let schedule = hyper.schedule();
    let mut adam = Adam::new(&model.params.shapes());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut batch_rng);
    let mut cursor = 0;
    let mut step = 0u64;
    let mut curves = Vec::new();
    let mut table = None;
    let mut epoch = 0;

    while epoch < hyper.max_epochs {
        epoch += 1;
        let mut loss_sum = 0.0;
        let mut lr = schedule.lr_at(step);
        for _ in 0..hyper.steps_per_epoch {
            let mut idx = Vec::with_capacity(hyper.batch_size);
            while idx.len() < hyper.batch_size.min(dataset.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut batch_rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let seqs: Vec<&[u32]> = idx.iter().map(|&i| dataset.sequences[i].tokens.as_slice()).collect();
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, true);
            let (logits, rows) = model.forward_rows(&mut tape, &b, &seqs, &mut Mode::Train(&mut dropout_rng))?;
            let targets = targets_for(&rows, &seqs, tape.shape(logits).0);
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { step: step as usize });
            }
            loss_sum += value;
            let mut grads = tape.backward(loss)?;
            let g = b.gradients(&mut grads);
            lr = schedule.lr_at(step);
            let mut refs: Vec<&mut Matrix> = model.params.values.iter_mut().collect();
            adam.step(&mut refs, &g, lr)?;
            step += 1;
        }
        if epoch % hyper.eval_every == 0 || epoch == hyper.max_epochs {
            let t = evaluate(&model, &grid)?;
            let point = CurvePoint {
                epoch,
                task_acc: t.trained,
                loss: loss_sum / hyper.steps_per_epoch as f64,
                lr,
            };
            on_eval(&point);
            curves.push(point);
            let done = t.trained >= hyper.target_acc;
            table = Some(t);
            if done {
                break;
            }
        }
    }
    let accuracy = match table {
        Some(t) => t,
        None => evaluate(&model, &grid)?,
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            seed,
            epoch,
            accuracy: Some(accuracy),
        },
        curves,
    })
}
