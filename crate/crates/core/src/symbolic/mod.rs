// SPDX-License-Identifier: MIT OR Apache-2.0

//! Symbolic counting programs.
//!
//! Four state machines that solve the numeric-equivalence tasks:
//!
//! - **Up-Down**: one `Count` that goes up on demo tokens and down on
//!   response tokens, plus a `Phase` bit.
//! - **Up-Up**: separate `DemoCount` and `RespCount`, both counting up.
//! - **Ctx-Distr**: no cumulative variable; each token carries an
//!   `InputValue` (+1 demo, -1 trigger/response, 0 otherwise) and the stop
//!   decision re-sums the whole history.
//! - **Increment-Up**: `Progress` advances along a fixed `Interval` by an
//!   `Increment` that is rescaled to `1/Progress` at the trigger.
//!
//! [`step`] is a literal transcription of each program's per-token update.
//! [`readout`] recomputes the same output from the post-step state alone,
//! which is what the counterfactual oracle needs after a variable has been
//! overwritten.

mod counterfactual;

pub use counterfactual::*;

use std::fmt;
use std::str::FromStr;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use crate::corpus::{Role, TokenId, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Program {
    UpDown,
    UpUp,
    CtxDistr,
    IncrementUp,
}

impl Program {
    pub const ALL: [Program; 4] = [
        Program::UpDown,
        Program::UpUp,
        Program::CtxDistr,
        Program::IncrementUp,
    ];

    /// Variables that can be read, written and intervened on.
    pub fn variables(self) -> &'static [Variable] {
        match self {
            Program::UpDown => &[Variable::Count, Variable::Phase, Variable::FullState],
            Program::UpUp => &[
                Variable::DemoCount,
                Variable::RespCount,
                Variable::Phase,
                Variable::FullState,
            ],
            Program::CtxDistr => &[Variable::InputValue, Variable::Phase, Variable::FullState],
            Program::IncrementUp => &[
                Variable::Progress,
                Variable::Increment,
                Variable::Phase,
                Variable::FullState,
            ],
        }
    }

    pub fn initial_state(self, interval: usize) -> SymbolicState {
        match self {
            Program::UpDown => SymbolicState::UpDown(UpDownState::default()),
            Program::UpUp => SymbolicState::UpUp(UpUpState::default()),
            Program::CtxDistr => SymbolicState::CtxDistr(CtxDistrState::default()),
            Program::IncrementUp => {
                let m = interval as i64;
                SymbolicState::IncrementUp(IncrementUpState {
                    progress: Rational64::from_integer(0),
                    increment: Rational64::new(1, m),
                    interval: m,
                    phase: 0,
                })
            }
        }
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Program::UpDown => "up-down",
            Program::UpUp => "up-up",
            Program::CtxDistr => "ctx-distr",
            Program::IncrementUp => "increment-up",
        })
    }
}

impl FromStr for Program {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Program::ALL
            .into_iter()
            .find(|p| p.to_string() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown program `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variable {
    Count,
    Phase,
    DemoCount,
    RespCount,
    InputValue,
    Progress,
    Increment,
    /// Every variable at once; the symbolic analogue of a whole-state swap.
    FullState,
}

impl Variable {
    pub const ALL: [Variable; 8] = [
        Variable::Count,
        Variable::Phase,
        Variable::DemoCount,
        Variable::RespCount,
        Variable::InputValue,
        Variable::Progress,
        Variable::Increment,
        Variable::FullState,
    ];
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::Count => "count",
            Variable::Phase => "phase",
            Variable::DemoCount => "demo-count",
            Variable::RespCount => "resp-count",
            Variable::InputValue => "input-value",
            Variable::Progress => "progress",
            Variable::Increment => "increment",
            Variable::FullState => "full-state",
        })
    }
}

impl FromStr for Variable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variable::ALL
            .into_iter()
            .find(|v| v.to_string() == norm)
            .ok_or_else(|| Error::Invalid(format!("unknown variable `{s}`")))
    }
}

/// What a program says the next token must be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Emit {
    /// Any demo instance (the program samples one).
    AnyDemo,
    Trigger,
    Resp,
    Eos,
}

impl Emit {
    /// Response and EOS outputs are fully determined and get scored.
    pub fn is_scored(self) -> bool {
        matches!(self, Emit::Resp | Emit::Eos)
    }

    /// Concrete token for deterministic outputs.
    pub fn token(self, vocab: &Vocabulary) -> Option<TokenId> {
        match self {
            Emit::AnyDemo => None,
            Emit::Trigger => vocab.trigger(),
            Emit::Resp => Some(vocab.resp()),
            Emit::Eos => Some(vocab.eos()),
        }
    }

    pub fn admits(self, vocab: &Vocabulary, token: TokenId) -> bool {
        match self {
            Emit::AnyDemo => vocab.is_demo(token),
            _ => self.token(vocab) == Some(token),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpDownState {
    pub count: i64,
    pub phase: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpUpState {
    pub demo_count: i64,
    pub resp_count: i64,
    pub phase: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CtxDistrState {
    /// Input values of every consumed token; the last entry is the current
    /// `InputValue`.
    pub values: Vec<i64>,
    pub phase: u8,
    /// Phase before the most recent token; the stop test reads it.
    pub prev_phase: u8,
    pub last_role: Option<Role>,
}

impl CtxDistrState {
    /// Sum over all tokens but the most recent one.
    pub fn history_sum(&self) -> i64 {
        let n = self.values.len().saturating_sub(1);
        self.values[..n].iter().sum()
    }

    pub fn total(&self) -> i64 {
        self.values.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncrementUpState {
    pub progress: Rational64,
    pub increment: Rational64,
    pub interval: i64,
    pub phase: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SymbolicState {
    UpDown(UpDownState),
    UpUp(UpUpState),
    CtxDistr(CtxDistrState),
    IncrementUp(IncrementUpState),
}

impl SymbolicState {
    pub fn program(&self) -> Program {
        match self {
            SymbolicState::UpDown(_) => Program::UpDown,
            SymbolicState::UpUp(_) => Program::UpUp,
            SymbolicState::CtxDistr(_) => Program::CtxDistr,
            SymbolicState::IncrementUp(_) => Program::IncrementUp,
        }
    }

    pub fn phase(&self) -> u8 {
        match self {
            SymbolicState::UpDown(s) => s.phase,
            SymbolicState::UpUp(s) => s.phase,
            SymbolicState::CtxDistr(s) => s.phase,
            SymbolicState::IncrementUp(s) => s.phase,
        }
    }

    /// Number of demo tokens the state stands for, used to keep
    /// counterfactual continuations within `max_count`.
    pub fn demo_level(&self) -> i64 {
        match self {
            SymbolicState::UpDown(s) => s.count,
            SymbolicState::UpUp(s) => s.demo_count,
            SymbolicState::CtxDistr(s) => s.total(),
            SymbolicState::IncrementUp(s) => {
                let step = s.increment * s.interval;
                if step == Rational64::from_integer(0) {
                    s.progress.floor().to_integer()
                } else {
                    (s.progress / step).floor().to_integer()
                }
            }
        }
    }

    pub fn get(&self, var: Variable) -> Result<Rational64> {
        let int = Rational64::from_integer;
        Ok(match (self, var) {
            (SymbolicState::UpDown(s), Variable::Count) => int(s.count),
            (SymbolicState::UpUp(s), Variable::DemoCount) => int(s.demo_count),
            (SymbolicState::UpUp(s), Variable::RespCount) => int(s.resp_count),
            (SymbolicState::CtxDistr(s), Variable::InputValue) => {
                int(s.values.last().copied().unwrap_or(0))
            }
            (SymbolicState::IncrementUp(s), Variable::Progress) => s.progress,
            (SymbolicState::IncrementUp(s), Variable::Increment) => s.increment,
            (s, Variable::Phase) => int(i64::from(s.phase())),
            (s, v) => {
                return Err(Error::Invalid(format!(
                    "{} has no scalar variable {v}",
                    s.program()
                )))
            }
        })
    }

    /// Copy `var` from `source` into `self`.
    pub fn transfer(&mut self, source: &SymbolicState, var: Variable) -> Result<()> {
        if self.program() != source.program() {
            return Err(Error::Invalid("states belong to different programs".into()));
        }
        if var == Variable::FullState {
            *self = source.clone();
            return Ok(());
        }
        let value = source.get(var)?;
        let int = value.to_integer();
        match (self, var) {
            (SymbolicState::UpDown(s), Variable::Count) => s.count = int,
            (SymbolicState::UpDown(s), Variable::Phase) => s.phase = int as u8,
            (SymbolicState::UpUp(s), Variable::DemoCount) => s.demo_count = int,
            (SymbolicState::UpUp(s), Variable::RespCount) => s.resp_count = int,
            (SymbolicState::UpUp(s), Variable::Phase) => s.phase = int as u8,
            (SymbolicState::CtxDistr(s), Variable::InputValue) => match s.values.last_mut() {
                Some(last) => *last = int,
                None => return Err(Error::Invalid("no input value yet".into())),
            },
            (SymbolicState::CtxDistr(s), Variable::Phase) => s.phase = int as u8,
            (SymbolicState::IncrementUp(s), Variable::Progress) => s.progress = value,
            (SymbolicState::IncrementUp(s), Variable::Increment) => s.increment = value,
            (SymbolicState::IncrementUp(s), Variable::Phase) => s.phase = int as u8,
            (s, v) => {
                return Err(Error::Invalid(format!(
                    "{} has no variable {v}",
                    s.program()
                )))
            }
        }
        Ok(())
    }
}

/// Consume one token. Returns the post-step state and the program output.
pub fn step(state: &SymbolicState, vocab: &Vocabulary, token: TokenId) -> Result<(SymbolicState, Emit)> {
    if vocab.variant.bare {
        return Err(Error::Invalid(
            "symbolic programs need BOS and T; bare variants are not supported".into(),
        ));
    }
    let role = vocab.role(token, state.phase() == 1)?;
    if role == Role::Pad {
        return Err(Error::Grammar("PAD is not a task token".into()));
    }
    let mut next = state.clone();
    let emit = match &mut next {
        SymbolicState::UpDown(s) => step_up_down(s, role),
        SymbolicState::UpUp(s) => step_up_up(s, role),
        SymbolicState::CtxDistr(s) => step_ctx_distr(s, role),
        SymbolicState::IncrementUp(s) => step_increment_up(s, role)?,
    };
    Ok((next, emit))
}

fn step_up_down(s: &mut UpDownState, role: Role) -> Emit {
    match role {
        Role::Bos => {
            s.count = 0;
            s.phase = 0;
            return Emit::AnyDemo;
        }
        Role::Demo => {
            s.count += 1;
            return Emit::AnyDemo;
        }
        Role::Trigger => s.phase = 1,
        Role::Resp => s.count -= 1,
        // voids carry no information; the program just waits
        Role::Void if s.phase == 0 => return Emit::AnyDemo,
        _ => {}
    }
    if s.count == 0 && s.phase == 1 {
        Emit::Eos
    } else {
        Emit::Resp
    }
}

fn step_up_up(s: &mut UpUpState, role: Role) -> Emit {
    match role {
        Role::Bos => {
            s.demo_count = 0;
            s.resp_count = 0;
            s.phase = 0;
            return Emit::AnyDemo;
        }
        Role::Demo => {
            s.demo_count += 1;
            return Emit::AnyDemo;
        }
        Role::Trigger => s.phase = 1,
        Role::Resp => s.resp_count += 1,
        Role::Void if s.phase == 0 => return Emit::AnyDemo,
        _ => {}
    }
    // `<=` rather than `==`: a transferred RespCount above DemoCount must
    // still stop the response phase.
    if s.demo_count <= s.resp_count && s.phase == 1 {
        Emit::Eos
    } else {
        Emit::Resp
    }
}

fn step_ctx_distr(s: &mut CtxDistrState, role: Role) -> Emit {
    let sum: i64 = s.values.iter().sum();
    s.prev_phase = s.phase;
    s.last_role = Some(role);
    if role == Role::Bos {
        s.values = vec![0];
        s.phase = 0;
        return Emit::AnyDemo;
    }
    let value = match role {
        Role::Demo => 1,
        Role::Trigger | Role::Resp => -1,
        _ => 0,
    };
    s.values.push(value);
    if sum <= 0 && s.phase == 1 {
        return Emit::Eos;
    }
    if matches!(role, Role::Trigger | Role::Resp) {
        s.phase = 1;
        return Emit::Resp;
    }
    if s.phase == 1 {
        Emit::Resp
    } else {
        Emit::AnyDemo
    }
}

fn step_increment_up(s: &mut IncrementUpState, role: Role) -> Result<Emit> {
    let m = Rational64::from_integer(s.interval);
    match role {
        Role::Bos => {
            s.progress = Rational64::from_integer(0);
            s.phase = 0;
            s.increment = Rational64::new(1, s.interval);
            return Ok(Emit::AnyDemo);
        }
        Role::Demo | Role::Resp if s.progress < m => s.progress += s.increment * m,
        Role::Trigger => {
            if s.progress == Rational64::from_integer(0) {
                return Err(Error::Filtered("trigger reached with zero progress"));
            }
            s.phase = 1;
            s.increment = s.progress.recip();
            s.progress = Rational64::from_integer(0);
        }
        _ => {}
    }
    Ok(increment_up_output(s))
}

fn increment_up_output(s: &IncrementUpState) -> Emit {
    let done = s.progress >= Rational64::from_integer(s.interval);
    match (done, s.phase) {
        (true, 1) => Emit::Eos,
        (true, _) => Emit::Trigger,
        (false, 0) => Emit::AnyDemo,
        (false, _) => Emit::Resp,
    }
}

/// Program output implied by a post-step state.
pub fn readout(state: &SymbolicState) -> Emit {
    match state {
        SymbolicState::UpDown(s) => match (s.phase, s.count) {
            (0, _) => Emit::AnyDemo,
            (_, 0) => Emit::Eos,
            _ => Emit::Resp,
        },
        SymbolicState::UpUp(s) => {
            if s.phase == 0 {
                Emit::AnyDemo
            } else if s.demo_count <= s.resp_count {
                Emit::Eos
            } else {
                Emit::Resp
            }
        }
        SymbolicState::CtxDistr(s) => {
            if matches!(s.last_role, None | Some(Role::Bos)) {
                Emit::AnyDemo
            } else if s.history_sum() <= 0 && s.prev_phase == 1 {
                Emit::Eos
            } else if matches!(s.last_role, Some(Role::Trigger | Role::Resp)) || s.phase == 1 {
                Emit::Resp
            } else {
                Emit::AnyDemo
            }
        }
        SymbolicState::IncrementUp(s) => increment_up_output(s),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub state: SymbolicState,
    pub emit: Emit,
}

/// Per-position snapshots: entry `i` is the state after consuming token `i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolicTrace {
    pub program: Program,
    pub steps: Vec<TraceStep>,
}

impl SymbolicTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn emits(&self) -> Vec<Emit> {
        self.steps.iter().map(|s| s.emit).collect()
    }

    pub fn values(&self, var: Variable) -> Result<Vec<Rational64>> {
        self.steps.iter().map(|s| s.state.get(var)).collect()
    }

    /// First position whose output is EOS.
    pub fn first_eos(&self) -> Option<usize> {
        self.steps.iter().position(|s| s.emit == Emit::Eos)
    }
}

/// Run a program over a token prefix; no grammar check.
pub fn run(program: Program, vocab: &Vocabulary, tokens: &[TokenId], interval: usize) -> Result<SymbolicTrace> {
    let mut state = program.initial_state(interval);
    let mut steps = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let (next, emit) = step(&state, vocab, tok)?;
        steps.push(TraceStep {
            state: next.clone(),
            emit,
        });
        state = next;
    }
    Ok(SymbolicTrace { program, steps })
}

/// Trace a complete trial, validating it against the task grammar first.
pub fn trace(
    program: Program,
    vocab: &Vocabulary,
    tokens: &[TokenId],
    interval: usize,
) -> Result<SymbolicTrace> {
    crate::corpus::TokenSequence::from_tokens(vocab, tokens.to_vec())?;
    run(program, vocab, tokens, interval)
}
