// SPDX-License-Identifier: MIT OR Apache-2.0

//! Counterfactual oracle and intervention datasets.
//!
//! An intervention sample pairs a target prefix (ending at position `t`)
//! with a source prefix (ending at `u`). The named variable is copied from
//! the source state into the target state and the program is rolled
//! forward to EOS. Labels start at position `t`: label `j` is the token the
//! model should predict after reading `target[..=t]` followed by the first
//! `j` labels.
//!
//! When a continuation is still in the demo phase, the number of further
//! demo tokens before `T` is drawn uniformly so the count stays within
//! `max_count`. The same draw (and the same demo instances) is shared by
//! the original and the counterfactual continuation.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{readout, run, step, Emit, Program, SymbolicState, Variable};
use crate::corpus::{Role, TaskSpec, TokenId, TokenSequence, Vocabulary, sample_sequence};
use crate::error::{Error, Result};

pub const INTERVENTION_SCHEMA: &str = "numalign.interventions";
pub const INTERVENTION_VERSION: u32 = 1;

const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSample {
    pub program: Program,
    pub variable: Variable,
    pub target_tokens: Vec<TokenId>,
    pub source_tokens: Vec<TokenId>,
    pub t: usize,
    pub u: usize,
    pub counterfactual_labels: Vec<TokenId>,
    pub original_labels: Vec<TokenId>,
    /// Which counterfactual labels are deterministic (response or EOS).
    #[serde(default)]
    pub counterfactual_scored: Vec<bool>,
    #[serde(default)]
    pub original_scored: Vec<bool>,
}

impl InterventionSample {
    /// Teacher-forced model input for the counterfactual continuation.
    pub fn counterfactual_input(&self) -> Vec<TokenId> {
        teacher_forced(&self.target_tokens[..=self.t], &self.counterfactual_labels)
    }

    pub fn original_input(&self) -> Vec<TokenId> {
        teacher_forced(&self.target_tokens[..=self.t], &self.original_labels)
    }

    pub fn source_prefix(&self) -> &[TokenId] {
        &self.source_tokens[..=self.u]
    }
}

fn teacher_forced(prefix: &[TokenId], labels: &[TokenId]) -> Vec<TokenId> {
    let mut out = prefix.to_vec();
    out.extend_from_slice(&labels[..labels.len().saturating_sub(1)]);
    out
}

/// Demo-phase continuation choices shared by original and counterfactual.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Continuation {
    /// Number of further demo tokens before `T`.
    pub n_more: usize,
    /// The demo instances to emit, at least `n_more` long.
    pub demos: Vec<TokenId>,
}

impl Continuation {
    pub fn none() -> Self {
        Self {
            n_more: 0,
            demos: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rollout {
    pub labels: Vec<TokenId>,
    pub scored: Vec<bool>,
}

/// Roll a post-step state forward until the program emits EOS.
pub fn roll_out(
    state: &SymbolicState,
    vocab: &Vocabulary,
    cont: &Continuation,
    max_steps: usize,
) -> Result<Rollout> {
    let mut state = state.clone();
    let mut emit = readout(&state);
    let mut labels = Vec::new();
    let mut scored = Vec::new();
    let mut fed = 0usize;
    loop {
        let token = match emit {
            Emit::AnyDemo if fed < cont.n_more => {
                fed += 1;
                cont.demos[fed - 1]
            }
            Emit::AnyDemo => vocab
                .trigger()
                .ok_or_else(|| Error::Invalid("vocabulary has no trigger".into()))?,
            other => other.token(vocab).expect("deterministic output"),
        };
        labels.push(token);
        scored.push(emit.is_scored());
        if emit == Emit::Eos {
            return Ok(Rollout { labels, scored });
        }
        if labels.len() >= max_steps {
            return Err(Error::Filtered("continuation does not terminate"));
        }
        let (next, e) = step(&state, vocab, token)?;
        state = next;
        emit = e;
    }
}

/// Role of the token at `t`, resolving the Same-Object token by position.
pub fn position_role(vocab: &Vocabulary, tokens: &[TokenId], t: usize) -> Result<Role> {
    let tok = *tokens.get(t).ok_or(Error::IndexOutOfRange {
        index: t,
        dim: tokens.len(),
    })?;
    let trigger = vocab.trigger();
    let after_trigger = tokens[..t].iter().any(|&x| Some(x) == trigger);
    vocab.role(tok, after_trigger)
}

fn check_site(vocab: &Vocabulary, tokens: &[TokenId], t: usize) -> Result<Role> {
    let role = position_role(vocab, tokens, t)?;
    match role {
        Role::Demo | Role::Resp => Ok(role),
        _ => Err(Error::Invalid(format!(
            "intervention site {t} holds `{}`, not a demo or response token",
            vocab.name(tokens[t])
        ))),
    }
}

/// States of the target at `t` before and after the transfer, with filters applied.
pub fn intervened_states(
    program: Program,
    variable: Variable,
    spec: &TaskSpec,
    target: &[TokenId],
    t: usize,
    source: &[TokenId],
    u: usize,
) -> Result<(SymbolicState, SymbolicState)> {
    if !program.variables().contains(&variable) {
        return Err(Error::Invalid(format!("{program} has no variable {variable}")));
    }
    let vocab = spec.vocabulary();
    let t_role = check_site(&vocab, target, t)?;
    check_site(&vocab, source, u)?;
    let tgt = run(program, &vocab, &target[..=t], spec.max_count)?;
    let src = run(program, &vocab, &source[..=u], spec.max_count)?;
    let original = tgt.steps[t].state.clone();
    let mut cf = original.clone();
    cf.transfer(&src.steps[u].state, variable)?;

    match (&cf, variable) {
        (SymbolicState::UpUp(s), Variable::DemoCount) if s.demo_count < s.resp_count => {
            return Err(Error::Filtered("demo count below resp count"));
        }
        (SymbolicState::UpUp(s), Variable::RespCount) if s.phase == 1 && s.resp_count > s.demo_count => {
            return Err(Error::Filtered("resp count above demo count in resp phase"));
        }
        (SymbolicState::CtxDistr(_), Variable::InputValue) if t_role == Role::Demo => {
            let demos = target[..=t].iter().filter(|&&x| vocab.is_demo(x)).count();
            if demos < 2 {
                return Err(Error::Filtered("fewer than 2 demo tokens at a demo-phase site"));
            }
        }
        _ => {}
    }
    Ok((original, cf))
}

/// Admissible range for the number of further demo tokens.
pub fn continuation_range(
    states: &[&SymbolicState],
    max_count: usize,
) -> Option<std::ops::RangeInclusive<usize>> {
    let levels: Vec<i64> = states
        .iter()
        .filter(|s| readout(s) == Emit::AnyDemo)
        .map(|s| s.demo_level())
        .collect();
    if levels.is_empty() {
        return Some(0..=0);
    }
    let lo = levels.iter().map(|&c| (1 - c).max(0)).max().unwrap_or(0);
    let hi = max_count as i64 - levels.iter().copied().max().unwrap_or(0);
    (lo <= hi).then(|| lo as usize..=hi as usize)
}

/// Counterfactual sample with explicit demo-phase continuation choices.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_with(
    program: Program,
    variable: Variable,
    spec: &TaskSpec,
    target: &[TokenId],
    t: usize,
    source: &[TokenId],
    u: usize,
    cont: &Continuation,
) -> Result<InterventionSample> {
    let (original, cf) = intervened_states(program, variable, spec, target, t, source, u)?;
    let vocab = spec.vocabulary();
    let max_steps = 4 * spec.max_count + 8;
    let orig = roll_out(&original, &vocab, cont, max_steps)?;
    let counter = roll_out(&cf, &vocab, cont, max_steps)?;
    Ok(InterventionSample {
        program,
        variable,
        target_tokens: target.to_vec(),
        source_tokens: source.to_vec(),
        t,
        u,
        counterfactual_labels: counter.labels,
        original_labels: orig.labels,
        counterfactual_scored: counter.scored,
        original_scored: orig.scored,
    })
}

/// Counterfactual sample with randomly drawn demo-phase continuation.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual<R: Rng + ?Sized>(
    program: Program,
    variable: Variable,
    spec: &TaskSpec,
    target: &[TokenId],
    t: usize,
    source: &[TokenId],
    u: usize,
    rng: &mut R,
) -> Result<InterventionSample> {
    let (original, cf) = intervened_states(program, variable, spec, target, t, source, u)?;
    let range = continuation_range(&[&original, &cf], spec.max_count)
        .ok_or(Error::Filtered("no continuation keeps the count in range"))?;
    let n_more = rng.random_range(range);
    let cont = Continuation {
        n_more,
        demos: random_demos(&spec.vocabulary(), n_more, rng),
    };
    counterfactual_with(program, variable, spec, target, t, source, u, &cont)
}

pub fn random_demos<R: Rng + ?Sized>(vocab: &Vocabulary, n: usize, rng: &mut R) -> Vec<TokenId> {
    let ids = vocab.demo_ids();
    (0..n)
        .map(|_| {
            if ids.len() == 1 {
                ids[0]
            } else {
                ids[rng.random_range(0..ids.len())]
            }
        })
        .collect()
}

/// Where interventions may be placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sites {
    DemoOrResp,
    Resp,
    /// Responses that are followed by another response.
    ContinuingResp,
}

impl Sites {
    pub fn positions(self, vocab: &Vocabulary, seq: &TokenSequence) -> Vec<usize> {
        match self {
            Sites::DemoOrResp => seq.demo_or_resp_positions(vocab),
            Sites::Resp => seq.resp_positions(),
            Sites::ContinuingResp => {
                let mut p = seq.resp_positions();
                p.pop();
                p
            }
        }
    }
}

/// Draw one admissible intervention sample, resampling filtered cases.
pub fn sample_intervention<R: Rng + ?Sized>(
    program: Program,
    variable: Variable,
    spec: &TaskSpec,
    sites: Sites,
    rng: &mut R,
) -> Result<InterventionSample> {
    let vocab = spec.vocabulary();
    for _ in 0..MAX_ATTEMPTS {
        let tq = rng.random_range(1..=spec.max_count);
        let sq = rng.random_range(1..=spec.max_count);
        let target = sample_sequence(spec, tq, rng)?;
        let source = sample_sequence(spec, sq, rng)?;
        let tpos = sites.positions(&vocab, &target);
        let spos = sites.positions(&vocab, &source);
        if tpos.is_empty() || spos.is_empty() {
            continue;
        }
        let t = tpos[rng.random_range(0..tpos.len())];
        let u = spos[rng.random_range(0..spos.len())];
        match counterfactual(
            program,
            variable,
            spec,
            &target.tokens[..=t],
            t,
            &source.tokens[..=u],
            u,
            rng,
        ) {
            Ok(sample) => return Ok(sample),
            Err(Error::Filtered(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Insufficient(format!(
        "no admissible {program}/{variable} sample in {MAX_ATTEMPTS} draws"
    )))
}

pub fn sample_interventions<R: Rng + ?Sized>(
    program: Program,
    variable: Variable,
    spec: &TaskSpec,
    sites: Sites,
    n: usize,
    rng: &mut R,
) -> Result<Vec<InterventionSample>> {
    (0..n)
        .map(|_| sample_intervention(program, variable, spec, sites, rng))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InterventionHeader {
    schema: String,
    version: u32,
    spec: TaskSpec,
}

pub fn write_interventions<W: Write>(
    spec: &TaskSpec,
    samples: &[InterventionSample],
    mut out: W,
) -> Result<()> {
    let header = InterventionHeader {
        schema: INTERVENTION_SCHEMA.into(),
        version: INTERVENTION_VERSION,
        spec: spec.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read an intervention file, checking every sample's shape against its spec.
pub fn read_interventions<R: BufRead>(input: R) -> Result<(TaskSpec, Vec<InterventionSample>)> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema("empty intervention file".into()))??;
    let header: InterventionHeader = serde_json::from_str(&header_line)?;
    if header.schema != INTERVENTION_SCHEMA || header.version != INTERVENTION_VERSION {
        return Err(Error::Schema(format!(
            "expected {INTERVENTION_SCHEMA} v{INTERVENTION_VERSION}, found {} v{}",
            header.schema, header.version
        )));
    }
    header.spec.validate()?;
    let vocab = header.spec.vocabulary();
    let mut samples = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: InterventionSample = serde_json::from_str(&line)?;
        validate_sample(&vocab, &s)?;
        samples.push(s);
    }
    Ok((header.spec, samples))
}

fn validate_sample(vocab: &Vocabulary, s: &InterventionSample) -> Result<()> {
    let in_vocab = |ts: &[TokenId]| ts.iter().all(|&x| (x as usize) < vocab.len());
    if s.t >= s.target_tokens.len() || s.u >= s.source_tokens.len() {
        return Err(Error::Schema("intervention position past end of sequence".into()));
    }
    if !in_vocab(&s.target_tokens)
        || !in_vocab(&s.source_tokens)
        || !in_vocab(&s.counterfactual_labels)
        || !in_vocab(&s.original_labels)
    {
        return Err(Error::Schema("token id outside the vocabulary".into()));
    }
    for (labels, scored) in [
        (&s.counterfactual_labels, &s.counterfactual_scored),
        (&s.original_labels, &s.original_scored),
    ] {
        if labels.last() != Some(&vocab.eos()) {
            return Err(Error::Schema("label sequence must end with EOS".into()));
        }
        if !scored.is_empty() && scored.len() != labels.len() {
            return Err(Error::Schema("scored mask length differs from labels".into()));
        }
    }
    Ok(())
}
