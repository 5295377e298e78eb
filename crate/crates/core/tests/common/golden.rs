// SPDX-License-Identifier: MIT OR Apache-2.0

//! Worked intervention examples for every program/variable/task triple.
//!
//! Each row is `(source, target, original labels, counterfactual labels)`.
//! The intervention sits on the last token of each prefix. Demo-phase
//! continuations are read back from the labels themselves.

use numalign::corpus::{TaskKind, TaskSpec, TaskVariant, TokenId, Vocabulary};
use numalign::symbolic::{counterfactual_with, Continuation, Program, Variable};

type Row = (&'static str, &'static str, &'static str, &'static str);

pub struct Table {
    pub program: Program,
    pub variable: Variable,
    pub kind: TaskKind,
    pub rows: [Row; 4],
}

const MO: TaskKind = TaskKind::MultiObject;
const SO: TaskKind = TaskKind::SingleObject;
const SAME: TaskKind = TaskKind::SameObject;

pub fn tables() -> Vec<Table> {
    use Program::*;
    use Variable::*;
    vec![
        Table { program: UpDown, variable: Count, kind: MO, rows: [
            ("BOS D1", "BOS D3 D2", "D2 D3 T R R R R EOS", "D2 D3 T R R R EOS"),
            ("BOS D2 D1 D1", "BOS D2 T R", "EOS", "R R R EOS"),
            ("BOS D2 D1 T R", "BOS D1 D2 D1 T R", "R R EOS", "R EOS"),
            ("BOS D1 D3 T R R", "BOS D2", "D2 T R R EOS", "D2 T R EOS"),
        ]},
        Table { program: UpDown, variable: Count, kind: SO, rows: [
            ("BOS D", "BOS D D", "D D T R R R R EOS", "D D T R R R EOS"),
            ("BOS D D D", "BOS D T R", "EOS", "R R R EOS"),
            ("BOS D D T R", "BOS D D D T R", "R R EOS", "R EOS"),
            ("BOS D D T R R", "BOS D", "D T R R EOS", "D T R EOS"),
        ]},
        Table { program: UpDown, variable: Count, kind: SAME, rows: [
            ("BOS C", "BOS C C", "C C T C C C C EOS", "C C T C C C EOS"),
            ("BOS C C C", "BOS C T C", "EOS", "C C C EOS"),
            ("BOS C C T C", "BOS C C C T C", "C C EOS", "C EOS"),
            ("BOS C C T C C", "BOS C", "C T C C EOS", "C T C EOS"),
        ]},
        Table { program: UpDown, variable: Phase, kind: MO, rows: [
            ("BOS D1", "BOS D2 D1", "D3 D1 T R R R R EOS", "D3 D1 T R R R R EOS"),
            ("BOS D3 D1 D2", "BOS D3 T R", "EOS", "D2 T R EOS"),
            ("BOS D2 D1 T R", "BOS D1 D3 D1 T R", "R R EOS", "R R EOS"),
            ("BOS D2 D3 T R R", "BOS D2", "D1 T R R EOS", "R EOS"),
        ]},
        Table { program: UpDown, variable: Phase, kind: SO, rows: [
            ("BOS D", "BOS D D", "D D T R R R R EOS", "D D T R R R R EOS"),
            ("BOS D D D", "BOS D T R", "EOS", "D T R EOS"),
            ("BOS D D T R", "BOS D D D T R", "R R EOS", "R R EOS"),
            ("BOS D D T R R", "BOS D", "D T R R EOS", "R EOS"),
        ]},
        Table { program: UpDown, variable: Phase, kind: SAME, rows: [
            ("BOS C", "BOS C C", "C C T C C C C EOS", "C C T C C C C EOS"),
            ("BOS C C C", "BOS C T C", "EOS", "C T C EOS"),
            ("BOS C C T C", "BOS C C C T C", "C C EOS", "C C EOS"),
            ("BOS C C T C C", "BOS C", "C T C C EOS", "C EOS"),
        ]},
        Table { program: UpUp, variable: DemoCount, kind: MO, rows: [
            ("BOS D1", "BOS D3 D2", "T R R EOS", "T R EOS"),
            ("BOS D2 D3 D3", "BOS D2 D2 D3 T R R", "R EOS", "R EOS"),
            ("BOS D2 D1 T R R", "BOS D1 D2 D1 T R", "R R EOS", "R EOS"),
            ("BOS D1 D3 T R R", "BOS D2", "D2 T R R EOS", "D2 T R R R EOS"),
        ]},
        Table { program: UpUp, variable: DemoCount, kind: SO, rows: [
            ("BOS D", "BOS D D", "T R R EOS", "T R EOS"),
            ("BOS D D D", "BOS D D D T R R", "R EOS", "R EOS"),
            ("BOS D D T R R", "BOS D D D T R", "R R EOS", "R EOS"),
            ("BOS D D T R R", "BOS D", "D T R R EOS", "D T R R R EOS"),
        ]},
        Table { program: UpUp, variable: DemoCount, kind: SAME, rows: [
            ("BOS C", "BOS C C", "T C C EOS", "T C EOS"),
            ("BOS C C C", "BOS C C C T C C", "C EOS", "C EOS"),
            ("BOS C C T C C", "BOS C C C T C", "C C EOS", "C EOS"),
            ("BOS C C T C C", "BOS C", "C T C C EOS", "C T C C C EOS"),
        ]},
        Table { program: UpUp, variable: RespCount, kind: MO, rows: [
            ("BOS D1 D3 D3", "BOS D3 D2", "T R R EOS", "T R R EOS"),
            ("BOS D2", "BOS D2 D2 D3 T R R", "R EOS", "R R R EOS"),
            ("BOS D2 D1 T R R", "BOS D1 D2 D1 T R", "R R EOS", "R EOS"),
            ("BOS D1 D3 D3 T R R R", "BOS D2", "D2 T R R EOS", "D2 T EOS"),
        ]},
        Table { program: UpUp, variable: RespCount, kind: SO, rows: [
            ("BOS D D D", "BOS D D", "T R R EOS", "T R R EOS"),
            ("BOS D", "BOS D D D T R R", "R EOS", "R R R EOS"),
            ("BOS D D T R R", "BOS D D D T R", "R R EOS", "R EOS"),
            ("BOS D D D T R R R", "BOS D", "D T R R EOS", "D T EOS"),
        ]},
        Table { program: UpUp, variable: RespCount, kind: SAME, rows: [
            ("BOS C C C", "BOS C C", "T C C EOS", "T C C EOS"),
            ("BOS C", "BOS C C C T C C", "C EOS", "C C C EOS"),
            ("BOS C C T C C", "BOS C C C T C", "C C EOS", "C EOS"),
            ("BOS C C C T C C C", "BOS C", "C T C C EOS", "C T EOS"),
        ]},
        Table { program: CtxDistr, variable: InputValue, kind: MO, rows: [
            ("BOS D1", "BOS D3 D2", "T R R EOS", "T R R EOS"),
            ("BOS D2", "BOS D2 D2 D3 T R R", "R EOS", "R R R EOS"),
            ("BOS D2 D1 T R R", "BOS D1 D2 D1 T R", "R R EOS", "R R EOS"),
            ("BOS D1 D3 D3 T R R R", "BOS D2 D1", "D2 T R R R EOS", "D2 T R EOS"),
        ]},
        Table { program: CtxDistr, variable: InputValue, kind: SO, rows: [
            ("BOS D", "BOS D D", "T R R EOS", "T R R EOS"),
            ("BOS D", "BOS D D D T R R", "R EOS", "R R R EOS"),
            ("BOS D D T R R", "BOS D D D T R", "R R EOS", "R R EOS"),
            ("BOS D D D T R R R", "BOS D D", "D T R R R EOS", "D T R EOS"),
        ]},
        Table { program: CtxDistr, variable: InputValue, kind: SAME, rows: [
            ("BOS C", "BOS C C", "T C C EOS", "T C C EOS"),
            ("BOS C", "BOS C C C T C C", "C EOS", "C C C EOS"),
            ("BOS C C T C C", "BOS C C C T C", "C C EOS", "C C EOS"),
            ("BOS C C C T C C C", "BOS C C", "C T C C C EOS", "C T C EOS"),
        ]},
    ]
}

/// Whole-state substitutions at response positions. A history-recomputing
/// solution keeps the original labels, so only those are listed. The first
/// two rows of each table are one response longer in the published listing
/// than the prefixes allow; the labels here follow the prefixes.
pub struct AntiMarkov {
    pub kind: TaskKind,
    pub rows: [(&'static str, &'static str, &'static str); 4],
}

pub fn anti_markov() -> Vec<AntiMarkov> {
    vec![
        AntiMarkov { kind: MO, rows: [
            ("BOS D1 D3 T R R", "BOS D3 D2 T R", "R EOS"),
            ("BOS D2 T R", "BOS D2 D2 D3 T R", "R R EOS"),
            ("BOS D2 D1 T R", "BOS D1 D2 T R R", "EOS"),
            ("BOS D1 D3 D3 T R R", "BOS D2 D1 D2 T R", "R R EOS"),
        ]},
        AntiMarkov { kind: SO, rows: [
            ("BOS D D T R R", "BOS D D T R", "R EOS"),
            ("BOS D T R", "BOS D D D T R", "R R EOS"),
            ("BOS D D D T R", "BOS D D T R R", "EOS"),
            ("BOS D D D T R R", "BOS D D D T R", "R R EOS"),
        ]},
        AntiMarkov { kind: SAME, rows: [
            ("BOS C C T C C", "BOS C C T C", "C EOS"),
            ("BOS C T C", "BOS C C C T C", "C C EOS"),
            ("BOS C C C T C", "BOS C C T C C", "EOS"),
            ("BOS C C C T C C", "BOS C C C T C", "C C EOS"),
        ]},
    ]
}

/// Demo continuation implied by a label sequence: the demos before `T`.
fn continuation_of(vocab: &Vocabulary, labels: &[TokenId]) -> Option<Continuation> {
    let trig = vocab.trigger()?;
    let pos = labels.iter().position(|&x| x == trig)?;
    Some(Continuation {
        n_more: pos,
        demos: labels[..pos].to_vec(),
    })
}

fn check_row(program: Program, variable: Variable, kind: TaskKind, row: &Row) -> Result<(), String> {
    let spec = TaskSpec::new(TaskVariant::new(kind));
    let v = spec.vocabulary();
    let parse = |s: &str| v.parse(s).map_err(|e| e.to_string());
    let (src, tgt, orig, cf) = (parse(row.0)?, parse(row.1)?, parse(row.2)?, parse(row.3)?);
    let conts = [continuation_of(&v, &orig), continuation_of(&v, &cf)];
    let cont = match conts {
        [Some(a), Some(b)] if a != b => return Err("original and counterfactual disagree on demos".into()),
        [Some(a), _] | [None, Some(a)] => a,
        [None, None] => Continuation::none(),
    };
    let s = counterfactual_with(program, variable, &spec, &tgt, tgt.len() - 1, &src, src.len() - 1, &cont)
        .map_err(|e| e.to_string())?;
    if s.original_labels != orig {
        return Err(format!("original: got `{}`, want `{}`", v.render(&s.original_labels), row.2));
    }
    if s.counterfactual_labels != cf {
        return Err(format!(
            "counterfactual: got `{}`, want `{}`",
            v.render(&s.counterfactual_labels),
            row.3
        ));
    }
    Ok(())
}

fn check_anti_markov(kind: TaskKind, row: &(&str, &str, &str)) -> Result<(), String> {
    let spec = TaskSpec::new(TaskVariant::new(kind));
    let v = spec.vocabulary();
    let parse = |s: &str| v.parse(s).map_err(|e| e.to_string());
    let (src, tgt, want) = (parse(row.0)?, parse(row.1)?, parse(row.2)?);
    for program in [Program::CtxDistr, Program::UpDown] {
        let s = counterfactual_with(
            program,
            Variable::FullState,
            &spec,
            &tgt,
            tgt.len() - 1,
            &src,
            src.len() - 1,
            &Continuation::none(),
        )
        .map_err(|e| e.to_string())?;
        if s.original_labels != want {
            return Err(format!("{program}: got `{}`, want `{}`", v.render(&s.original_labels), row.2));
        }
    }
    Ok(())
}

/// Every fixture row with its outcome.
pub fn run_all() -> Vec<(String, Result<(), String>)> {
    let mut out = Vec::new();
    for table in tables() {
        for (i, row) in table.rows.iter().enumerate() {
            out.push((
                format!("{}/{}/{:?} #{}", table.program, table.variable, table.kind, i + 1),
                check_row(table.program, table.variable, table.kind, row),
            ));
        }
    }
    for table in anti_markov() {
        for (i, row) in table.rows.iter().enumerate() {
            out.push((
                format!("anti-markov/{:?} #{}", table.kind, i + 1),
                check_anti_markov(table.kind, row),
            ));
        }
    }
    out
}
