// SPDX-License-Identifier: MIT OR Apache-2.0

//! Distributed alignment search: train an alignment so that interchange
//! interventions on a frozen model reproduce the symbolic program's
//! counterfactual behaviour.

use std::collections::HashSet;

use ndarray::Axis;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Alignment, AlignmentKind, Partition};
use crate::autodiff::{Adam, Matrix, Tape, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::models::transformer::{self, ForwardOptions, Patch};
use crate::models::{argmax, recurrent, Bound, Checkpoint, Family, Mode, Model};
use crate::rng::derive;
use crate::symbolic::{sample_interventions, InterventionSample, Sites};
use crate::symbolic::{Program, Variable};

fn default_train() -> usize {
    10_000
}
fn default_val() -> usize {
    1_000
}
fn default_test() -> usize {
    1_000
}
fn default_batch() -> usize {
    512
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_layer() -> usize {
    1
}
fn default_gate() -> f64 {
    0.99
}
fn default_sites() -> Sites {
    Sites::DemoOrResp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DasConfig {
    pub program: Program,
    pub variable: Variable,
    pub kind: AlignmentKind,
    /// Defaults to half the state width.
    #[serde(default)]
    pub d_var: Option<usize>,
    #[serde(default)]
    pub offset: usize,
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_val")]
    pub n_val: usize,
    #[serde(default = "default_test")]
    pub n_test: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_sites")]
    pub sites: Sites,
    /// Transformer residual stream to intervene on (0 is the embeddings).
    #[serde(default = "default_layer")]
    pub layer: usize,
    /// Minimum trained-quantity accuracy of the frozen model.
    #[serde(default = "default_gate")]
    pub gate: f64,
}

impl DasConfig {
    pub fn new(program: Program, variable: Variable, kind: AlignmentKind) -> Self {
        DasConfig {
            program,
            variable,
            kind,
            d_var: None,
            offset: 0,
            n_train: default_train(),
            n_val: default_val(),
            n_test: default_test(),
            batch_size: default_batch(),
            lr: default_lr(),
            epochs: default_epochs(),
            sites: default_sites(),
            layer: default_layer(),
            gate: default_gate(),
        }
    }

    pub fn partition(&self, model: &Model) -> Result<Partition> {
        let d_m = model.config.state_dim();
        Partition::at(d_m, self.d_var.unwrap_or(d_m / 2), self.offset)
    }
}

/// Which label sequence an evaluation scores against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Labels {
    Counterfactual,
    Original,
}

/// Intervention samples with the frozen model's target and source states.
#[derive(Clone)]
pub struct InterventionSet {
    pub samples: Vec<InterventionSample>,
    pub target_states: Matrix,
    pub source_states: Matrix,
    pub layer: usize,
}

const CHUNK: usize = 512;

/// States the model holds after reading `prefix[..=at]`, one row each.
pub fn states_after(model: &Model, prefixes: &[&[TokenId]], at: &[usize], layer: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros((prefixes.len(), model.config.state_dim()));
    for (k, (ps, ats)) in prefixes.chunks(CHUNK).zip(at.chunks(CHUNK)).enumerate() {
        let block = match model.config.family {
            Family::Gru | Family::Lstm => recurrent::states_at(model, ps, ats)?,
            Family::Transformer => {
                if layer > model.config.n_layers {
                    return Err(Error::Invalid(format!("no residual stream {layer}")));
                }
                let (_, rec) = transformer::run(model, ps, &ForwardOptions::default())?;
                let mut m = Matrix::zeros((ps.len(), model.config.d_model));
                for (i, &t) in ats.iter().enumerate() {
                    m.row_mut(i).assign(&rec.residual(layer, i, t));
                }
                m
            }
        };
        let lo = k * CHUNK;
        out.slice_mut(ndarray::s![lo..lo + block.nrows(), ..]).assign(&block);
    }
    Ok(out)
}

impl InterventionSet {
    pub fn build(model: &Model, samples: Vec<InterventionSample>, layer: usize) -> Result<Self> {
        let trg: Vec<&[TokenId]> = samples.iter().map(|s| &s.target_tokens[..=s.t]).collect();
        let src: Vec<&[TokenId]> = samples.iter().map(|s| s.source_prefix()).collect();
        let ts: Vec<usize> = samples.iter().map(|s| s.t).collect();
        let us: Vec<usize> = samples.iter().map(|s| s.u).collect();
        let target_states = states_after(model, &trg, &ts, layer)?;
        let source_states = states_after(model, &src, &us, layer)?;
        Ok(InterventionSet {
            samples,
            target_states,
            source_states,
            layer,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same samples with the source state replaced by the target's own.
    pub fn self_interventions(&self) -> InterventionSet {
        InterventionSet {
            samples: self.samples.clone(),
            target_states: self.target_states.clone(),
            source_states: self.target_states.clone(),
            layer: self.layer,
        }
    }
}

fn labels_of(s: &InterventionSample, which: Labels) -> (&[TokenId], &[bool]) {
    match which {
        Labels::Counterfactual => (&s.counterfactual_labels, &s.counterfactual_scored),
        Labels::Original => (&s.original_labels, &s.original_scored),
    }
}

/// Logits at every scored label position of a batch whose states at `t`
/// are `hv`, with their targets and owning sample.
pub fn continuation_logits(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    hv: Var,
    batch: &[&InterventionSample],
    which: Labels,
    layer: usize,
) -> Result<(Var, Vec<Option<usize>>, Vec<usize>)> {
    let mut targets = Vec::new();
    let mut owner = Vec::new();
    let out = match model.config.family {
        Family::Gru | Family::Lstm => {
            let pad = model.task.vocabulary().pad();
            let max_n = batch.iter().map(|s| labels_of(s, which).0.len()).max().unwrap_or(0);
            let steps: Vec<Vec<TokenId>> = (1..max_n)
                .map(|j| {
                    batch
                        .iter()
                        .map(|s| labels_of(s, which).0.get(j - 1).copied().unwrap_or(pad))
                        .collect()
                })
                .collect();
            let mut states = vec![hv];
            states.extend(recurrent::unroll(model, tape, b, hv, &steps)?);
            let mut parts = Vec::new();
            for (j, &st) in states.iter().enumerate() {
                let mut idx = Vec::new();
                for (k, s) in batch.iter().enumerate() {
                    let (labels, scored) = labels_of(s, which);
                    if j < labels.len() && scored.get(j).copied().unwrap_or(true) {
                        idx.push(k);
                        targets.push(Some(labels[j] as usize));
                        owner.push(k);
                    }
                }
                if !idx.is_empty() {
                    let h = recurrent::output_part(model, tape, st)?;
                    parts.push(tape.gather_rows(h, &idx)?);
                }
            }
            if parts.is_empty() {
                return Err(Error::Insufficient("no scored labels in batch".into()));
            }
            tape.concat_rows(&parts)?
        }
        Family::Transformer => {
            let inputs: Vec<Vec<TokenId>> = batch
                .iter()
                .map(|s| {
                    let (labels, _) = labels_of(s, which);
                    let mut v = s.target_tokens[..=s.t].to_vec();
                    v.extend_from_slice(&labels[..labels.len().saturating_sub(1)]);
                    v
                })
                .collect();
            let refs: Vec<&[TokenId]> = inputs.iter().map(|v| v.as_slice()).collect();
            let mut offsets = Vec::with_capacity(refs.len());
            let mut acc = 0;
            for r in &refs {
                offsets.push(acc);
                acc += r.len();
            }
            let rows: Vec<usize> = batch.iter().zip(&offsets).map(|(s, o)| o + s.t).collect();
            let opts = ForwardOptions {
                patch: Some(Patch { residual: layer, rows, values: hv }),
                edits: Vec::new(),
            };
            let fwd = transformer::forward(model, tape, b, &refs, &opts)?;
            let mut pick = Vec::new();
            for (k, s) in batch.iter().enumerate() {
                let (labels, scored) = labels_of(s, which);
                for (j, &l) in labels.iter().enumerate() {
                    if scored.get(j).copied().unwrap_or(true) {
                        pick.push(fwd.rows[k][s.t + j]);
                        targets.push(Some(l as usize));
                        owner.push(k);
                    }
                }
            }
            tape.gather_rows(fwd.output, &pick)?
        }
    };
    let logits = model.readout(tape, b, out, &mut Mode::Eval)?;
    Ok((logits, targets, owner))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IiaReport {
    pub program: Program,
    pub variable: Variable,
    pub kind: AlignmentKind,
    pub d_var: usize,
    pub correct: usize,
    pub total: usize,
    pub iia: f64,
}

/// Per-sample correctness of interventions through `alignment`.
pub fn intervention_outcomes(
    model: &Model,
    alignment: &Alignment,
    partition: &Partition,
    set: &InterventionSet,
    which: Labels,
) -> Result<Vec<bool>> {
    if partition.d_m != model.config.state_dim() || alignment.dim() != partition.d_m {
        return Err(Error::Shape(format!(
            "alignment width {} / partition {} vs state width {}",
            alignment.dim(),
            partition.d_m,
            model.config.state_dim()
        )));
    }
    let hv = alignment.interchange(&set.target_states, &set.source_states, partition)?;
    outcomes_from_states(model, set, &hv, which)
}

/// Per-sample correctness when the model's state at `t` is set to the
/// rows of `hv`.
pub fn outcomes_from_states(model: &Model, set: &InterventionSet, hv: &Matrix, which: Labels) -> Result<Vec<bool>> {
    if hv.dim() != set.target_states.dim() {
        return Err(Error::Shape(format!("{:?} intervened states for {:?}", hv.dim(), set.target_states.dim())));
    }
    let mut ok = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let batch: Vec<&InterventionSample> = chunk.iter().map(|&i| &set.samples[i]).collect();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape, false);
        let hv = tape.constant(hv.select(Axis(0), chunk));
        let (logits, targets, owner) = continuation_logits(model, &mut tape, &b, hv, &batch, which, set.layer)?;
        let mut good = vec![true; chunk.len()];
        for (r, (t, &o)) in targets.iter().zip(&owner).enumerate() {
            if Some(argmax(tape.value(logits).row(r))) != *t {
                good[o] = false;
            }
        }
        ok.extend(good);
    }
    Ok(ok)
}

pub fn iia(
    model: &Model,
    alignment: &Alignment,
    partition: &Partition,
    set: &InterventionSet,
    program: Program,
    variable: Variable,
) -> Result<IiaReport> {
    let ok = intervention_outcomes(model, alignment, partition, set, Labels::Counterfactual)?;
    let correct = ok.iter().filter(|&&b| b).count();
    Ok(IiaReport {
        program,
        variable,
        kind: alignment.kind(),
        d_var: partition.d_var,
        correct,
        total: ok.len(),
        iia: if ok.is_empty() { 0.0 } else { correct as f64 / ok.len() as f64 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DasCurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub val_iia: f64,
}

pub struct DasOutcome {
    pub alignment: Alignment,
    pub partition: Partition,
    pub val_iia: f64,
    pub test: IiaReport,
    pub curve: Vec<DasCurvePoint>,
}

fn key(s: &InterventionSample) -> (Vec<TokenId>, Vec<TokenId>, Vec<TokenId>) {
    (s.target_tokens.clone(), s.source_prefix().to_vec(), s.counterfactual_labels.clone())
}

/// Train, validation and test samples from independent streams; test and
/// validation samples that duplicate a training sample are redrawn.
pub fn sample_splits(model: &Model, cfg: &DasConfig, seed: u64) -> Result<[Vec<InterventionSample>; 3]> {
    let spec = &model.task;
    let train = sample_interventions(cfg.program, cfg.variable, spec, cfg.sites, cfg.n_train, &mut derive(seed, "das-train"))?;
    let seen: HashSet<_> = train.iter().map(key).collect();
    let held = |label: &str, n: usize| -> Result<Vec<InterventionSample>> {
        let mut rng = derive(seed, label);
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n {
            let s = sample_interventions(cfg.program, cfg.variable, spec, cfg.sites, 1, &mut rng)?.remove(0);
            attempts += 1;
            if !seen.contains(&key(&s)) || attempts > 20 * n {
                out.push(s);
            }
        }
        Ok(out)
    };
    let val = held("das-val", cfg.n_val)?;
    let test = held("das-test", cfg.n_test)?;
    Ok([train, val, test])
}

pub fn check_gate(ckpt: &Checkpoint, gate: f64) -> Result<()> {
    let accuracy = ckpt.accuracy.as_ref().map(|a| a.trained).unwrap_or(0.0);
    if accuracy < gate {
        return Err(Error::Gate {
            accuracy,
            required: gate,
        });
    }
    Ok(())
}

pub fn train_das(ckpt: &Checkpoint, cfg: &DasConfig, seed: u64) -> Result<DasOutcome> {
    train_das_with(ckpt, cfg, seed, |_| {})
}

pub fn train_das_with(
    ckpt: &Checkpoint,
    cfg: &DasConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&DasCurvePoint),
) -> Result<DasOutcome> {
    check_gate(ckpt, cfg.gate)?;
    let model = &ckpt.model;
    let partition = cfg.partition(model)?;
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("DAS batch size must be positive".into()));
    }
    let [train, val, test] = sample_splits(model, cfg, seed)?;
    let train = InterventionSet::build(model, train, cfg.layer)?;
    let val = InterventionSet::build(model, val, cfg.layer)?;
    let test = InterventionSet::build(model, test, cfg.layer)?;
    train_on_sets(model, cfg, &partition, &train, &val, &test, seed, &mut on_epoch)
}

#[allow(clippy::too_many_arguments)]
pub fn train_on_sets(
    model: &Model,
    cfg: &DasConfig,
    partition: &Partition,
    train: &InterventionSet,
    val: &InterventionSet,
    test: &InterventionSet,
    seed: u64,
    on_epoch: &mut dyn FnMut(&DasCurvePoint),
) -> Result<DasOutcome> {
    let mut align = Alignment::init(cfg.kind, partition.d_m, &mut derive(seed, "das-init"));
    let mut order_rng = derive(seed, "das-order");
    let shapes: Vec<(usize, usize)> = align.params().iter().map(|m| m.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let score = |a: &Alignment, set: &InterventionSet| -> Result<f64> {
        Ok(iia(model, a, partition, set, cfg.program, cfg.variable)?.iia)
    };
    let mut best = (score(&align, val)?, align.clone());
    let mut curve = vec![DasCurvePoint { epoch: 0, loss: f64::NAN, val_iia: best.0 }];
    on_epoch(&curve[0]);
    let epochs = if shapes.is_empty() { 0 } else { cfg.epochs };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, false);
            let bound = align.bind(&mut tape, true)?;
            let ht = tape.constant(train.target_states.select(Axis(0), chunk));
            let hs = tape.constant(train.source_states.select(Axis(0), chunk));
            let hv = bound.interchange(&mut tape, ht, hs, partition)?;
            let batch: Vec<&InterventionSample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (logits, targets, _) =
                continuation_logits(model, &mut tape, &b, hv, &batch, Labels::Counterfactual, train.layer)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Divergence { step });
            }
            loss_sum += value;
            batches += 1;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Matrix> = bound.params.iter().map(|&v| grads.take(v)).collect();
            let mut refs = align.params_mut();
            adam.step(&mut refs, &g, cfg.lr)?;
            step += 1;
        }
        let v = score(&align, val)?;
        let point = DasCurvePoint {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            val_iia: v,
        };
        on_epoch(&point);
        curve.push(point);
        if v > best.0 {
            best = (v, align.clone());
        }
    }
    let (val_iia, alignment) = best;
    let test = iia(model, &alignment, partition, test, cfg.program, cfg.variable)?;
    Ok(DasOutcome {
        alignment,
        partition: *partition,
        val_iia,
        test,
        curve,
    })
}

/// One alignment per `d_var`; returns all outcomes and the index of the
/// best by validation IIA.
pub fn dvar_sweep(ckpt: &Checkpoint, cfg: &DasConfig, d_vars: &[usize], seed: u64) -> Result<(Vec<DasOutcome>, usize)> {
    check_gate(ckpt, cfg.gate)?;
    let model = &ckpt.model;
    let [train, val, test] = sample_splits(model, cfg, seed)?;
    let train = InterventionSet::build(model, train, cfg.layer)?;
    let val = InterventionSet::build(model, val, cfg.layer)?;
    let test = InterventionSet::build(model, test, cfg.layer)?;
    let mut outs = Vec::with_capacity(d_vars.len());
    for &d in d_vars {
        let mut c = cfg.clone();
        c.d_var = Some(d);
        let p = c.partition(model)?;
        outs.push(train_on_sets(model, &c, &p, &train, &val, &test, seed, &mut |_| {})?);
    }
    let best = outs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.val_iia.total_cmp(&b.1.val_iia))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Invalid("empty d_var list".into()))?;
    Ok((outs, best))
}
