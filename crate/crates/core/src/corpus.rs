// SPDX-License-Identifier: MIT OR Apache-2.0

//! Numeric-equivalence task corpora.
//!
//! A trial is `BOS <demo tokens> T <resp tokens> EOS`, where the number of
//! response tokens equals the number of demo tokens. Three variants differ
//! in their token inventory:
//!
//! - **Multi-Object**: demo instances `D1 D2 D3`, response token `R`.
//! - **Single-Object**: one demo token `D`, response token `R`.
//! - **Same-Object**: one token `C` plays both roles.
//!
//! Each variant has a Variable-Length flavour that sprinkles void tokens `V`
//! through the demo phase, and a *bare* flavour without `BOS`/`T`
//! (`D D R R EOS`), used by the single-layer attention probes.
//!
//! Token ids are assigned in a fixed order so checkpoints stay portable:
//! `BOS`, demo ids, `T`, `R` (when distinct from the demo token), `EOS`,
//! `V` (Variable-Length only), `PAD` last.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const DATASET_SCHEMA: &str = "numalign.dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultiObject,
    SingleObject,
    SameObject,
}

impl TaskKind {
    pub fn demo_instances(self) -> usize {
        match self {
            TaskKind::MultiObject => 3,
            TaskKind::SingleObject | TaskKind::SameObject => 1,
        }
    }
}

/// Task variant: token inventory plus the Variable-Length and bare flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskVariant {
    pub kind: TaskKind,
    #[serde(default)]
    pub variable_length: bool,
    #[serde(default)]
    pub bare: bool,
}

impl TaskVariant {
    pub const fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            variable_length: false,
            bare: false,
        }
    }

    pub const fn variable_length(mut self) -> Self {
        self.variable_length = true;
        self
    }

    pub const fn bare(mut self) -> Self {
        self.bare = true;
        self
    }
}

impl fmt::Display for TaskVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match self.kind {
            TaskKind::MultiObject => "multi-object",
            TaskKind::SingleObject => "single-object",
            TaskKind::SameObject => "same-object",
        };
        f.write_str(base)?;
        if self.variable_length {
            f.write_str("-vl")?;
        }
        if self.bare {
            f.write_str("-bare")?;
        }
        Ok(())
    }
}

impl FromStr for TaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut rest = s.trim().to_ascii_lowercase().replace('_', "-");
        let mut bare = false;
        let mut vl = false;
        if let Some(stripped) = rest.strip_suffix("-bare") {
            bare = true;
            rest = stripped.to_string();
        }
        if let Some(stripped) = rest.strip_suffix("-vl") {
            vl = true;
            rest = stripped.to_string();
        }
        let kind = match rest.as_str() {
            "multi-object" | "multi" | "multiobject" => TaskKind::MultiObject,
            "single-object" | "single" | "singleobject" => TaskKind::SingleObject,
            "same-object" | "same" | "sameobject" => TaskKind::SameObject,
            _ => return Err(Error::Invalid(format!("unknown task variant `{s}`"))),
        };
        Ok(TaskVariant {
            kind,
            variable_length: vl,
            bare,
        })
    }
}

/// What a vocabulary entry is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenKind {
    Bos,
    Demo,
    Trigger,
    Resp,
    /// Same-Object `C`: demo before the trigger, response after it.
    Shared,
    Eos,
    Void,
    Pad,
}

/// Role of a token at a particular position in a trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Bos,
    Demo,
    Trigger,
    Resp,
    Eos,
    Void,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: TokenId,
    pub name: String,
    pub kind: TokenKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub variant: TaskVariant,
    pub tokens: Vec<TokenEntry>,
}

pub fn build_vocabulary(variant: TaskVariant) -> Vocabulary {
    let mut tokens = Vec::new();
    let mut push = |name: &str, kind: TokenKind| {
        let id = tokens.len() as TokenId;
        tokens.push(TokenEntry {
            id,
            name: name.to_string(),
            kind,
        });
    };
    if !variant.bare {
        push("BOS", TokenKind::Bos);
    }
    match variant.kind {
        TaskKind::MultiObject => {
            push("D1", TokenKind::Demo);
            push("D2", TokenKind::Demo);
            push("D3", TokenKind::Demo);
        }
        TaskKind::SingleObject => push("D", TokenKind::Demo),
        TaskKind::SameObject => push("C", TokenKind::Shared),
    }
    if !variant.bare {
        push("T", TokenKind::Trigger);
    }
    if variant.kind != TaskKind::SameObject {
        push("R", TokenKind::Resp);
    }
    push("EOS", TokenKind::Eos);
    if variant.variable_length {
        push("V", TokenKind::Void);
    }
    push("PAD", TokenKind::Pad);
    Vocabulary { variant, tokens }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn find(&self, kind: TokenKind) -> Option<TokenId> {
        self.tokens.iter().find(|t| t.kind == kind).map(|t| t.id)
    }

    pub fn bos(&self) -> Option<TokenId> {
        self.find(TokenKind::Bos)
    }

    pub fn trigger(&self) -> Option<TokenId> {
        self.find(TokenKind::Trigger)
    }

    /// Response token: `R`, or the shared `C` for Same-Object.
    pub fn resp(&self) -> TokenId {
        self.find(TokenKind::Resp)
            .or_else(|| self.find(TokenKind::Shared))
            .expect("every vocabulary has a response token")
    }

    pub fn eos(&self) -> TokenId {
        self.find(TokenKind::Eos).expect("every vocabulary has EOS")
    }

    pub fn void(&self) -> Option<TokenId> {
        self.find(TokenKind::Void)
    }

    pub fn pad(&self) -> TokenId {
        self.find(TokenKind::Pad).expect("every vocabulary has PAD")
    }

    pub fn demo_ids(&self) -> Vec<TokenId> {
        self.tokens
            .iter()
            .filter(|t| matches!(t.kind, TokenKind::Demo | TokenKind::Shared))
            .map(|t| t.id)
            .collect()
    }

    pub fn kind_of(&self, id: TokenId) -> Result<TokenKind> {
        self.tokens
            .get(id as usize)
            .map(|t| t.kind)
            .ok_or(Error::UnknownToken(id))
    }

    pub fn is_demo(&self, id: TokenId) -> bool {
        matches!(self.kind_of(id), Ok(TokenKind::Demo | TokenKind::Shared))
    }

    /// Role of `id` given whether the trial is already past the trigger.
    pub fn role(&self, id: TokenId, resp_phase: bool) -> Result<Role> {
        Ok(match self.kind_of(id)? {
            TokenKind::Bos => Role::Bos,
            TokenKind::Demo => Role::Demo,
            TokenKind::Trigger => Role::Trigger,
            TokenKind::Resp => Role::Resp,
            TokenKind::Shared if resp_phase => Role::Resp,
            TokenKind::Shared => Role::Demo,
            TokenKind::Eos => Role::Eos,
            TokenKind::Void => Role::Void,
            TokenKind::Pad => Role::Pad,
        })
    }

    pub fn name(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(|t| t.name.as_str())
            .unwrap_or("?")
    }

    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parse whitespace-separated token names; `E` is accepted for `EOS`.
    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|word| {
                let word = if word == "E" { "EOS" } else { word };
                self.tokens
                    .iter()
                    .find(|t| t.name == word)
                    .map(|t| t.id)
                    .ok_or_else(|| Error::Grammar(format!("unknown token name `{word}`")))
            })
            .collect()
    }
}

/// Task parameters shared by all generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub variant: TaskVariant,
    #[serde(default = "TaskSpec::default_max_count")]
    pub max_count: usize,
    #[serde(default = "TaskSpec::default_void_prob")]
    pub void_prob: f64,
    #[serde(default = "TaskSpec::default_holdout")]
    pub holdout: BTreeSet<usize>,
}

impl TaskSpec {
    fn default_max_count() -> usize {
        20
    }

    fn default_void_prob() -> f64 {
        0.2
    }

    fn default_holdout() -> BTreeSet<usize> {
        [4, 9, 14, 17].into_iter().collect()
    }

    pub fn new(variant: TaskVariant) -> Self {
        Self {
            variant,
            max_count: Self::default_max_count(),
            void_prob: Self::default_void_prob(),
            holdout: Self::default_holdout(),
        }
    }

    pub fn with_holdout(mut self, holdout: impl IntoIterator<Item = usize>) -> Self {
        self.holdout = holdout.into_iter().collect();
        self
    }

    pub fn vocabulary(&self) -> Vocabulary {
        build_vocabulary(self.variant)
    }

    /// Length of the longest fixed-length trial (43 for `max_count = 20`).
    pub fn fixed_max_len(&self) -> usize {
        let frame = if self.variant.bare { 1 } else { 3 };
        2 * self.max_count + frame
    }

    /// Hard cap on Variable-Length trials before regeneration.
    pub fn max_len(&self) -> usize {
        if self.variant.variable_length {
            4 * self.fixed_max_len()
        } else {
            self.fixed_max_len()
        }
    }

    pub fn trained_quantities(&self) -> Vec<usize> {
        (1..=self.max_count)
            .filter(|q| !self.holdout.contains(q))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_count == 0 {
            return Err(Error::Invalid("max_count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.void_prob) {
            return Err(Error::Invalid(format!(
                "void_prob {} outside [0, 1)",
                self.void_prob
            )));
        }
        if let Some(&q) = self.holdout.iter().find(|&&q| q == 0 || q > self.max_count) {
            return Err(Error::Invalid(format!(
                "holdout quantity {q} outside 1..={}",
                self.max_count
            )));
        }
        if self.trained_quantities().is_empty() {
            return Err(Error::Invalid("holdout removes every quantity".into()));
        }
        Ok(())
    }
}

/// Per-position phase annotation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseLabel {
    Demo,
    Trigger,
    Resp,
    Boundary,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub object_quantity: usize,
    /// Index of `T`; for bare variants, index of the first response token.
    pub trigger_index: usize,
    pub phase_of: Vec<PhaseLabel>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Parse and validate a token list against the task grammar.
    pub fn from_tokens(vocab: &Vocabulary, tokens: Vec<TokenId>) -> Result<Self> {
        let bare = vocab.variant.bare;
        let mut phase_of = Vec::with_capacity(tokens.len());
        let mut iter = tokens.iter().copied().enumerate().peekable();

        if !bare {
            match iter.next() {
                Some((_, t)) if Some(t) == vocab.bos() => phase_of.push(PhaseLabel::Boundary),
                _ => return Err(Error::Grammar("trial must start with BOS".into())),
            }
        }

        let mut demos = 0usize;
        while let Some(&(_, t)) = iter.peek() {
            match vocab.kind_of(t)? {
                TokenKind::Demo | TokenKind::Shared => demos += 1,
                TokenKind::Void => {}
                _ => break,
            }
            phase_of.push(PhaseLabel::Demo);
            iter.next();
        }

        let trigger_index;
        if bare {
            trigger_index = phase_of.len();
        } else {
            match iter.next() {
                Some((i, t)) if Some(t) == vocab.trigger() => {
                    trigger_index = i;
                    phase_of.push(PhaseLabel::Trigger);
                }
                _ => return Err(Error::Grammar("demo phase must end with T".into())),
            }
        }

        let resp_token = vocab.resp();
        let mut resps = 0usize;
        while let Some(&(_, t)) = iter.peek() {
            if t != resp_token {
                break;
            }
            resps += 1;
            phase_of.push(PhaseLabel::Resp);
            iter.next();
        }

        match iter.next() {
            Some((_, t)) if t == vocab.eos() => phase_of.push(PhaseLabel::Boundary),
            Some((i, t)) => {
                return Err(Error::Grammar(format!(
                    "unexpected token `{}` at position {i}",
                    vocab.name(t)
                )))
            }
            None => return Err(Error::Grammar("trial must end with EOS".into())),
        }
        if iter.next().is_some() {
            return Err(Error::Grammar("tokens after EOS".into()));
        }
        if demos == 0 {
            return Err(Error::Grammar("trial has no demo tokens".into()));
        }
        if demos != resps {
            return Err(Error::Grammar(format!(
                "{demos} demo tokens but {resps} response tokens"
            )));
        }
        Ok(TokenSequence {
            tokens,
            object_quantity: demos,
            trigger_index,
            phase_of,
        })
    }

    /// Positions holding demo or response tokens (the intervention sites).
    pub fn demo_or_resp_positions(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.phase_of
            .iter()
            .enumerate()
            .filter(|(i, p)| match p {
                PhaseLabel::Demo => vocab.is_demo(self.tokens[*i]),
                PhaseLabel::Resp => true,
                _ => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn resp_positions(&self) -> Vec<usize> {
        self.phase_of
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == PhaseLabel::Resp)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draw one trial with exactly `quantity` demo tokens.
pub fn sample_sequence<R: Rng + ?Sized>(
    spec: &TaskSpec,
    quantity: usize,
    rng: &mut R,
) -> Result<TokenSequence> {
    if quantity == 0 || quantity > spec.max_count {
        return Err(Error::QuantityOutOfRange {
            quantity,
            max: spec.max_count,
        });
    }
    let vocab = spec.vocabulary();
    let demo_ids = vocab.demo_ids();
    let draw_voids = spec.variant.variable_length && spec.void_prob > 0.0;
    let void = vocab.void();

    loop {
        let mut tokens = Vec::with_capacity(spec.fixed_max_len());
        let mut phase_of = Vec::with_capacity(spec.fixed_max_len());
        if let Some(bos) = vocab.bos() {
            tokens.push(bos);
            phase_of.push(PhaseLabel::Boundary);
        }
        let mut emitted = 0;
        while emitted < quantity {
            if draw_voids && rng.random_bool(spec.void_prob) {
                tokens.push(void.expect("variable-length vocabulary has V"));
            } else {
                let pick = if demo_ids.len() == 1 {
                    demo_ids[0]
                } else {
                    demo_ids[rng.random_range(0..demo_ids.len())]
                };
                tokens.push(pick);
                emitted += 1;
            }
            phase_of.push(PhaseLabel::Demo);
        }
        let trigger_index = tokens.len();
        if let Some(t) = vocab.trigger() {
            tokens.push(t);
            phase_of.push(PhaseLabel::Trigger);
        }
        tokens.extend(std::iter::repeat_n(vocab.resp(), quantity));
        phase_of.extend(std::iter::repeat_n(PhaseLabel::Resp, quantity));
        tokens.push(vocab.eos());
        phase_of.push(PhaseLabel::Boundary);
        if tokens.len() <= spec.max_len() {
            return Ok(TokenSequence {
                tokens,
                object_quantity: quantity,
                trigger_index,
                phase_of,
            });
        }
    }
}

/// A list of trials sharing one task spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub sequences: Vec<TokenSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Training trials with quantities drawn uniformly from the non-held-out range.
pub fn generate_training_set<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n_sequences: usize,
    rng: &mut R,
) -> Result<Dataset> {
    spec.validate()?;
    let allowed = spec.trained_quantities();
    let sequences = (0..n_sequences)
        .map(|_| {
            let q = allowed[rng.random_range(0..allowed.len())];
            sample_sequence(spec, q, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        sequences,
    })
}

pub const GRID_REPEATS: usize = 15;

/// Fixed evaluation grid: 15 trials for every quantity `1..=max_count`,
/// held-out quantities included. Sampled with replacement.
pub fn evaluation_grid<R: Rng + ?Sized>(spec: &TaskSpec, rng: &mut R) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::with_capacity(GRID_REPEATS * spec.max_count);
    for q in 1..=spec.max_count {
        for _ in 0..GRID_REPEATS {
            out.push(sample_sequence(spec, q, rng)?);
        }
    }
    Ok(out)
}

/// Right-pad token lists to the longest member.
pub fn pad_batch(sequences: &[&[TokenId]], pad: TokenId) -> Vec<Vec<TokenId>> {
    let width = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    sequences
        .iter()
        .map(|s| {
            let mut row = s.to_vec();
            row.resize(width, pad);
            row
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    schema: String,
    version: u32,
    spec: TaskSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    tokens: Vec<TokenId>,
    quantity: usize,
    trigger_index: usize,
}

/// Write a dataset as JSON lines with a schema header line.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> Result<()> {
    let header = DatasetHeader {
        schema: DATASET_SCHEMA.to_string(),
        version: DATASET_VERSION,
        spec: dataset.spec.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for seq in &dataset.sequences {
        let rec = DatasetRecord {
            tokens: seq.tokens.clone(),
            quantity: seq.object_quantity,
            trigger_index: seq.trigger_index,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a dataset file, validating every record against the task grammar.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Dataset> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Schema("empty dataset file".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(Error::Schema(format!(
            "expected {DATASET_SCHEMA} v{DATASET_VERSION}, found {} v{}",
            header.schema, header.version
        )));
    }
    header.spec.validate()?;
    let vocab = header.spec.vocabulary();
    let mut sequences = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)?;
        let seq = TokenSequence::from_tokens(&vocab, rec.tokens)?;
        if seq.object_quantity != rec.quantity || seq.trigger_index != rec.trigger_index {
            return Err(Error::Schema(format!(
                "record {} disagrees with its tokens",
                lineno + 1
            )));
        }
        if seq.object_quantity > header.spec.max_count {
            return Err(Error::QuantityOutOfRange {
                quantity: seq.object_quantity,
                max: header.spec.max_count,
            });
        }
        sequences.push(seq);
    }
    Ok(Dataset {
        spec: header.spec,
        sequences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn names(vocab: &Vocabulary) -> Vec<&str> {
        vocab.tokens.iter().map(|t| t.name.as_str()).collect()
    }

    #[test]
    fn vocabularies_follow_fixed_order() {
        let same = build_vocabulary(TaskVariant::new(TaskKind::SameObject));
        assert_eq!(names(&same), ["BOS", "C", "T", "EOS", "PAD"]);
        let single = build_vocabulary(TaskVariant::new(TaskKind::SingleObject));
        assert_eq!(names(&single), ["BOS", "D", "T", "R", "EOS", "PAD"]);
        let multi_vl = build_vocabulary(TaskVariant::new(TaskKind::MultiObject).variable_length());
        assert_eq!(
            names(&multi_vl),
            ["BOS", "D1", "D2", "D3", "T", "R", "EOS", "V", "PAD"]
        );
        let bare = build_vocabulary(TaskVariant::new(TaskKind::SingleObject).bare());
        assert_eq!(names(&bare), ["D", "R", "EOS", "PAD"]);
        assert_eq!(same.resp(), 1);
        assert!(multi_vl.void().is_some());
        assert!(single.void().is_none());
    }

    #[test]
    fn single_and_same_object_samples() {
        let mut rng = seeded(0);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::SingleObject));
        let seq = sample_sequence(&spec, 2, &mut rng).unwrap();
        assert_eq!(spec.vocabulary().render(&seq.tokens), "BOS D D T R R EOS");
        assert_eq!(seq.trigger_index, 3);

        let spec = TaskSpec::new(TaskVariant::new(TaskKind::SameObject));
        let seq = sample_sequence(&spec, 1, &mut rng).unwrap();
        assert_eq!(spec.vocabulary().render(&seq.tokens), "BOS C T C EOS");
    }

    #[test]
    fn quantity_out_of_range() {
        let mut rng = seeded(0);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
        assert!(matches!(
            sample_sequence(&spec, 0, &mut rng),
            Err(Error::QuantityOutOfRange { .. })
        ));
        assert!(sample_sequence(&spec, 21, &mut rng).is_err());
    }

    #[test]
    fn variable_length_example_parses() {
        let vocab = build_vocabulary(TaskVariant::new(TaskKind::SingleObject).variable_length());
        let tokens = vocab.parse("BOS V D V V D T R R EOS").unwrap();
        let seq = TokenSequence::from_tokens(&vocab, tokens).unwrap();
        assert_eq!(seq.object_quantity, 2);
        assert_eq!(seq.trigger_index, 6);
        assert_eq!(seq.demo_or_resp_positions(&vocab), vec![2, 5, 7, 8]);
    }

    #[test]
    fn variable_length_sampler_emits_voids_before_demos_only() {
        let mut rng = seeded(3);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject).variable_length());
        let vocab = spec.vocabulary();
        let mut saw_void = false;
        for q in 1..=20 {
            let seq = sample_sequence(&spec, q, &mut rng).unwrap();
            let reparsed = TokenSequence::from_tokens(&vocab, seq.tokens.clone()).unwrap();
            assert_eq!(reparsed, seq);
            // the slot right before T is always a demo token
            assert!(vocab.is_demo(seq.tokens[seq.trigger_index - 1]));
            saw_void |= seq.tokens.contains(&vocab.void().unwrap());
        }
        assert!(saw_void);
    }

    #[test]
    fn zero_void_probability_matches_fixed_length() {
        let fixed = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
        let mut vl = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject).variable_length());
        vl.void_prob = 0.0;
        let mut a = seeded(11);
        let mut b = seeded(11);
        for q in 1..=20 {
            let x = sample_sequence(&fixed, q, &mut a).unwrap();
            let y = sample_sequence(&vl, q, &mut b).unwrap();
            assert_eq!(x.tokens, y.tokens);
        }
    }

    #[test]
    fn training_set_excludes_holdout() {
        let mut rng = seeded(5);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
        let data = generate_training_set(&spec, 2000, &mut rng).unwrap();
        assert!(data
            .sequences
            .iter()
            .all(|s| ![4, 9, 14, 17].contains(&s.object_quantity)));
        let empty = generate_training_set(&spec, 0, &mut rng).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn training_quantities_are_uniform() {
        // Pearson chi-square against the uniform law over the 16 trained
        // quantities; dof = 15, mean 15, sd sqrt(30). Reject beyond 3 sd.
        let mut rng = seeded(17);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
        let n = 16_000;
        let data = generate_training_set(&spec, n, &mut rng).unwrap();
        let mut hist = [0usize; 21];
        for s in &data.sequences {
            hist[s.object_quantity] += 1;
        }
        let expected = n as f64 / 16.0;
        let chi2: f64 = spec
            .trained_quantities()
            .iter()
            .map(|&q| (hist[q] as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 15.0 + 3.0 * 30f64.sqrt(), "chi2 = {chi2}");
    }

    #[test]
    fn evaluation_grid_shape() {
        let mut rng = seeded(1);
        let single = TaskSpec::new(TaskVariant::new(TaskKind::SingleObject));
        let grid = evaluation_grid(&single, &mut rng).unwrap();
        assert_eq!(grid.len(), 300);
        for chunk in grid.chunks(GRID_REPEATS) {
            assert!(chunk.iter().all(|s| s.tokens == chunk[0].tokens));
        }
        let multi = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject));
        let grid = evaluation_grid(&multi, &mut rng).unwrap();
        let q3: BTreeSet<_> = grid
            .iter()
            .filter(|s| s.object_quantity == 3)
            .map(|s| s.tokens.clone())
            .collect();
        assert!(q3.len() > 1);
        for q in 1..=20 {
            assert_eq!(grid.iter().filter(|s| s.object_quantity == q).count(), 15);
        }
    }

    #[test]
    fn grammar_errors() {
        let vocab = build_vocabulary(TaskVariant::new(TaskKind::SingleObject));
        for bad in [
            "D T R EOS",
            "BOS D D T R EOS",
            "BOS T EOS",
            "BOS D R EOS",
            "BOS D T R",
            "BOS D T R EOS EOS",
        ] {
            let tokens = vocab.parse(bad).unwrap();
            assert!(TokenSequence::from_tokens(&vocab, tokens).is_err(), "{bad}");
        }
        assert!(TokenSequence::from_tokens(&vocab, vec![0, 99]).is_err());
    }

    #[test]
    fn dataset_file_round_trip() {
        let mut rng = seeded(9);
        let spec = TaskSpec::new(TaskVariant::new(TaskKind::MultiObject).variable_length());
        let data = generate_training_set(&spec, 50, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn dataset_header_is_checked() {
        let text = "{\"schema\":\"other\",\"version\":1,\"spec\":{\"variant\":{\"kind\":\"multi-object\"}}}\n";
        assert!(matches!(read_dataset(text.as_bytes()), Err(Error::Schema(_))));
        assert!(read_dataset("".as_bytes()).is_err());
    }

    #[test]
    fn pad_batch_right_pads() {
        let a = [0, 1, 2];
        let b = [0];
        let padded = pad_batch(&[&a, &b], 9);
        assert_eq!(padded, vec![vec![0, 1, 2], vec![0, 9, 9]]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in [
            TaskVariant::new(TaskKind::MultiObject),
            TaskVariant::new(TaskKind::SameObject).variable_length(),
            TaskVariant::new(TaskKind::SingleObject).bare(),
        ] {
            assert_eq!(v.to_string().parse::<TaskVariant>().unwrap(), v);
        }
        assert!("triple-object".parse::<TaskVariant>().is_err());
    }
}
