// SPDX-License-Identifier: MIT OR Apache-2.0

//! Causal probes that need no alignment training: neuron substitutions,
//! whole-state substitutions, strength-value attention edits, and the
//! gradience grid for a trained alignment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::das::{intervention_outcomes, outcomes_from_states, InterventionSet, Labels};
use crate::alignment::{Alignment, Partition};
use crate::autodiff::Matrix;
use crate::corpus::{TokenId, TokenSequence};
use crate::error::{Error, Result};
use crate::models::transformer::{self, AttentionEdit, ForwardOptions};
use crate::models::{argmax, Family, Model};
use crate::symbolic::{counterfactual_with, continuation_range, intervened_states, random_demos, run, Continuation, Program, Variable};
use crate::symbolic::InterventionSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronResult {
    pub neurons: Vec<usize>,
    pub correct: usize,
    pub total: usize,
    pub iia: f64,
}

fn fraction(ok: &[bool]) -> (usize, f64) {
    let c = ok.iter().filter(|&&b| b).count();
    (c, if ok.is_empty() { 0.0 } else { c as f64 / ok.len() as f64 })
}

/// Copy the listed state coordinates from source to target and score the
/// counterfactual continuation.
pub fn neuron_substitution(model: &Model, set: &InterventionSet, neurons: &[usize]) -> Result<NeuronResult> {
    let d = model.config.state_dim();
    if let Some(&bad) = neurons.iter().find(|&&n| n >= d) {
        return Err(Error::IndexOutOfRange { index: bad, dim: d });
    }
    if !model.config.family.is_recurrent() {
        return Err(Error::Invalid("neuron substitution needs a recurrent model".into()));
    }
    let mut hv = set.target_states.clone();
    for &n in neurons {
        hv.column_mut(n).assign(&set.source_states.column(n));
    }
    let ok = outcomes_from_states(model, set, &hv, Labels::Counterfactual)?;
    let (correct, iia) = fraction(&ok);
    Ok(NeuronResult {
        neurons: neurons.to_vec(),
        correct,
        total: ok.len(),
        iia,
    })
}

/// Every single-coordinate substitution.
pub fn neuron_sweep(model: &Model, set: &InterventionSet) -> Result<Vec<NeuronResult>> {
    (0..model.config.state_dim())
        .map(|n| neuron_substitution(model, set, &[n]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSwapReport {
    pub total: usize,
    /// Trials whose behaviour after the site matches the unintervened
    /// continuation.
    pub iia_vs_original: f64,
    /// Trials whose behaviour after the site matches the transferred state.
    pub iia_vs_source: f64,
    /// Trials where the two label sequences agree after the site.
    pub coincide: f64,
}

fn after_site(scored: &[bool], n: usize) -> Vec<bool> {
    (0..n).map(|j| j > 0 && scored.get(j).copied().unwrap_or(true)).collect()
}

/// Replace the whole state at `t` with the source state at `u` and score
/// the positions that did not receive the intervention. The prediction at
/// `t` itself reads the swapped vector directly, so it is left out; sites
/// must therefore be non-terminal responses ([`Sites::ContinuingResp`]).
/// For a transformer the set's residual stream is patched for all later
/// reads.
///
/// [`Sites::ContinuingResp`]: crate::symbolic::Sites::ContinuingResp
pub fn hidden_state_substitution(model: &Model, set: &InterventionSet) -> Result<StateSwapReport> {
    if let Some(s) = set.samples.iter().find(|s| s.original_labels.len() < 2 || s.counterfactual_labels.len() < 2) {
        return Err(Error::Invalid(format!(
            "state swap at t={} u={} leaves no later position to score",
            s.t, s.u
        )));
    }
    let mut scored = set.clone();
    for s in &mut scored.samples {
        s.original_scored = after_site(&s.original_scored, s.original_labels.len());
        s.counterfactual_scored = after_site(&s.counterfactual_scored, s.counterfactual_labels.len());
    }
    let hv = &set.source_states;
    let orig = outcomes_from_states(model, &scored, hv, Labels::Original)?;
    let src = outcomes_from_states(model, &scored, hv, Labels::Counterfactual)?;
    let same = set
        .samples
        .iter()
        .filter(|s| s.original_labels[1..] == s.counterfactual_labels[1..])
        .count();
    let n = set.len().max(1) as f64;
    Ok(StateSwapReport {
        total: set.len(),
        iia_vs_original: fraction(&orig).1,
        iia_vs_source: fraction(&src).1,
        coincide: same as f64 / n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub quantity: usize,
    pub shift: i64,
    /// Position where EOS should appear after the edit.
    pub expected_eos: usize,
    /// Where greedy decoding put EOS, if it did within the length cap.
    pub predicted_eos: Option<usize>,
    pub correct: bool,
}

/// Edits adding `|k|` strength-value terms at every response query of
/// `tokens` from `first_resp` on: each response's own key and value when
/// `k > 0` (one more response counted), the first demo token's when `k < 0`.
pub fn strength_value_edits(tokens_len: usize, first_resp: usize, demo_pos: usize, k: i64, layer: usize) -> Vec<AttentionEdit> {
    if k == 0 {
        return Vec::new();
    }
    (first_resp..tokens_len)
        .map(|q| AttentionEdit {
            layer,
            sequence: 0,
            query: q,
            key: if k > 0 { q } else { demo_pos },
            copies: k.unsigned_abs() as f64,
        })
        .collect()
}

/// Greedy continuation of `seq[..=trigger_index]` under `k` strength-value
/// increments at `layer`; correct iff it reproduces the trial with
/// `quantity - k` responses.
pub fn strength_value_increment(model: &Model, seq: &TokenSequence, k: i64, layer: usize) -> Result<ShiftOutcome> {
    if model.config.family != Family::Transformer {
        return Err(Error::Invalid("strength-value edits need a transformer".into()));
    }
    let vocab = model.task.vocabulary();
    let q = seq.object_quantity as i64;
    let want = q - k;
    if want < 1 || want > model.task.max_count as i64 {
        return Err(Error::QuantityOutOfRange {
            quantity: want.max(0) as usize,
            max: model.task.max_count,
        });
    }
    let first_resp = seq.tokens[..=seq.trigger_index]
        .iter()
        .rposition(|&t| t == vocab.resp())
        .unwrap_or(seq.trigger_index + 1);
    let demo_pos = seq
        .tokens
        .iter()
        .position(|&t| vocab.is_demo(t))
        .ok_or_else(|| Error::Grammar("no demo token".into()))?;
    let mut tokens: Vec<TokenId> = seq.tokens[..=seq.trigger_index].to_vec();
    let cap = seq.trigger_index + 2 * model.task.max_count + 2;
    let mut predicted = None;
    while tokens.len() < cap {
        let opts = ForwardOptions {
            patch: None,
            edits: strength_value_edits(tokens.len(), first_resp.min(tokens.len()), demo_pos, k, layer),
        };
        let (logits, _) = transformer::run(model, &[&tokens], &opts)?;
        let next = argmax(logits[0].row(tokens.len() - 1)) as TokenId;
        tokens.push(next);
        if next == vocab.eos() {
            predicted = Some(tokens.len() - 1);
            break;
        }
    }
    // expected: the prefix, then responses up to `want` in total, then EOS
    let prefix_resps = seq.tokens[..=seq.trigger_index].iter().filter(|&&t| t == vocab.resp()).count() as i64;
    let expected_eos = seq.trigger_index + 1 + (want - prefix_resps).max(0) as usize;
    let mut expected: Vec<TokenId> = seq.tokens[..=seq.trigger_index].to_vec();
    expected.resize(expected_eos, vocab.resp());
    expected.push(vocab.eos());
    Ok(ShiftOutcome {
        quantity: seq.object_quantity,
        shift: k,
        expected_eos,
        predicted_eos: predicted,
        correct: tokens == expected,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradienceCell {
    pub target_count: i64,
    pub source_count: i64,
    pub target_phase: u8,
    pub source_phase: u8,
    /// Further demo steps before the trigger.
    pub setting: usize,
    pub correct: usize,
    pub total: usize,
}

impl GradienceCell {
    pub fn diff(&self) -> i64 {
        (self.target_count - self.source_count).abs()
    }

    pub fn iia(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradienceGrid {
    pub cells: Vec<GradienceCell>,
}

impl GradienceGrid {
    /// Pooled IIA over cells matching `keep`.
    pub fn pooled(&self, keep: impl Fn(&GradienceCell) -> bool) -> Option<f64> {
        let (c, t) = self
            .cells
            .iter()
            .filter(|c| keep(c))
            .fold((0, 0), |(c, t), x| (c + x.correct, t + x.total));
        (t > 0).then(|| c as f64 / t as f64)
    }

    /// Pooled IIA by `|target - source|`.
    pub fn by_difference(&self) -> Vec<(i64, f64, usize)> {
        let max = self.cells.iter().map(|c| c.diff()).max().unwrap_or(-1);
        (0..=max)
            .filter_map(|d| {
                let total: usize = self.cells.iter().filter(|c| c.diff() == d).map(|c| c.total).sum();
                self.pooled(|c| c.diff() == d).map(|v| (d, v, total))
            })
            .collect()
    }
}

pub const GRADIENCE_SETTINGS: [usize; 3] = [1, 4, 12];
pub const GRADIENCE_SOURCE_STEP: usize = 4;

/// Up-Down Count interventions for every site pair of one target trial per
/// quantity and source trials with quantities `1, 5, 9, ...`, once per
/// demo-continuation setting. Pairs whose continuation cannot honour the
/// setting are skipped.
pub fn gradience_samples<R: Rng + ?Sized>(model: &Model, settings: &[usize], rng: &mut R) -> Result<Vec<(InterventionSample, usize)>> {
    let spec = &model.task;
    let vocab = spec.vocabulary();
    let targets: Vec<TokenSequence> = (1..=spec.max_count)
        .map(|q| crate::corpus::sample_sequence(spec, q, rng))
        .collect::<Result<_>>()?;
    let sources: Vec<TokenSequence> = (1..=spec.max_count)
        .step_by(GRADIENCE_SOURCE_STEP)
        .map(|q| crate::corpus::sample_sequence(spec, q, rng))
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for &setting in settings {
        for tgt in &targets {
            for src in &sources {
                for t in tgt.demo_or_resp_positions(&vocab) {
                    for u in src.demo_or_resp_positions(&vocab) {
                        let (orig, cf) = match intervened_states(Program::UpDown, Variable::Count, spec, &tgt.tokens, t, &src.tokens, u) {
                            Ok(x) => x,
                            Err(Error::Filtered(_)) => continue,
                            Err(e) => return Err(e),
                        };
                        let Some(range) = continuation_range(&[&orig, &cf], spec.max_count) else { continue };
                        let n_more = if *range.end() == 0 { 0 } else { setting };
                        if !range.contains(&n_more) {
                            continue;
                        }
                        let cont = Continuation {
                            n_more,
                            demos: random_demos(&vocab, n_more, rng),
                        };
                        match counterfactual_with(Program::UpDown, Variable::Count, spec, &tgt.tokens[..=t], t, &src.tokens[..=u], u, &cont) {
                            Ok(s) => out.push((s, setting)),
                            Err(Error::Filtered(_)) => continue,
                            Err(e) => return Err(e),
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// IIA of a Count alignment over the gradience samples, cell by cell.
pub fn gradience_grid<R: Rng + ?Sized>(model: &Model, alignment: &Alignment, partition: &Partition, rng: &mut R) -> Result<GradienceGrid> {
    gradience_grid_with(model, alignment, partition, &GRADIENCE_SETTINGS, rng)
}

pub fn gradience_grid_with<R: Rng + ?Sized>(
    model: &Model,
    alignment: &Alignment,
    partition: &Partition,
    settings: &[usize],
    rng: &mut R,
) -> Result<GradienceGrid> {
    let tagged = gradience_samples(model, settings, rng)?;
    let vocab = model.task.vocabulary();
    let mut keys = Vec::with_capacity(tagged.len());
    for (s, setting) in &tagged {
        let tr = run(Program::UpDown, &vocab, &s.target_tokens[..=s.t], model.task.max_count)?;
        let sr = run(Program::UpDown, &vocab, s.source_prefix(), model.task.max_count)?;
        let (ts, ss) = (&tr.steps[s.t].state, &sr.steps[s.u].state);
        let count = |st: &crate::symbolic::SymbolicState| -> Result<i64> { Ok(*st.get(Variable::Count)?.numer()) };
        keys.push((count(ts)?, count(ss)?, ts.phase(), ss.phase(), *setting));
    }
    let samples: Vec<InterventionSample> = tagged.into_iter().map(|(s, _)| s).collect();
    let set = InterventionSet::build(model, samples, 1)?;
    let ok = intervention_outcomes(model, alignment, partition, &set, Labels::Counterfactual)?;
    let mut cells: Vec<GradienceCell> = Vec::new();
    for (key, good) in keys.into_iter().zip(ok) {
        let (tc, sc, tp, sp, setting) = key;
        let pos = cells.iter().position(|c| {
            (c.target_count, c.source_count, c.target_phase, c.source_phase, c.setting) == (tc, sc, tp, sp, setting)
        });
        let cell = match pos {
            Some(i) => &mut cells[i],
            None => {
                cells.push(GradienceCell {
                    target_count: tc,
                    source_count: sc,
                    target_phase: tp,
                    source_phase: sp,
                    setting,
                    correct: 0,
                    total: 0,
                });
                cells.last_mut().expect("just pushed")
            }
        };
        cell.total += 1;
        if good {
            cell.correct += 1;
        }
    }
    cells.sort_by_key(|c| (c.setting, c.target_count, c.source_count, c.target_phase, c.source_phase));
    Ok(GradienceGrid { cells })
}

/// Attention weights of every layer for one sequence.
pub fn attention_for(model: &Model, tokens: &[TokenId]) -> Result<Vec<Matrix>> {
    let (_, rec) = transformer::run(model, &[tokens], &ForwardOptions::default())?;
    Ok(rec.attention.into_iter().map(|mut l| l.remove(0)).collect())
}
