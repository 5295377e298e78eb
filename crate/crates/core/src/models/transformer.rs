// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pre-norm single-head causal transformer. Sequences are packed row-wise
//! (sequence after sequence) so dense layers run as one matrix product and
//! attention runs per sequence.

use super::{Bound, Model, PosEncoding};
use crate::autodiff::{Matrix, Tape, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// Replace rows of a residual stream. `residual` 0 is the embedding
/// output and `l` the output of block `l`; the patched rows are what every
/// later layer reads.
pub struct Patch {
    pub residual: usize,
    pub rows: Vec<usize>,
    pub values: Var,
}

/// Extra strength-value terms in one attention read: `copies` additional
/// keys equal to the key (and value) at position `key` of that sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionEdit {
    pub layer: usize,
    pub sequence: usize,
    pub query: usize,
    pub key: usize,
    pub copies: f64,
}

#[derive(Default)]
pub struct ForwardOptions {
    pub patch: Option<Patch>,
    pub edits: Vec<AttentionEdit>,
}

pub struct TransformerForward {
    /// Final normalised residual stream, packed.
    pub output: Var,
    /// Packed row of each `(sequence, position)`.
    pub rows: Vec<Vec<usize>>,
    /// Residual streams: embeddings, then each block's output.
    pub residuals: Vec<Var>,
    /// `[layer][sequence]` attention weights.
    pub attention: Vec<Vec<Var>>,
    /// `[layer]` packed queries, keys and values (after rotary encoding).
    pub qkv: Vec<(Var, Var, Var)>,
}

/// Plain copies of the hidden quantities of one forward pass.
#[derive(Clone, Debug)]
pub struct HiddenRecord {
    pub rows: Vec<Vec<usize>>,
    pub residuals: Vec<Matrix>,
    pub attention: Vec<Vec<Matrix>>,
    pub queries: Vec<Matrix>,
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl HiddenRecord {
    pub fn capture(tape: &Tape, fwd: &TransformerForward) -> Self {
        HiddenRecord {
            rows: fwd.rows.clone(),
            residuals: fwd.residuals.iter().map(|&v| tape.value(v).clone()).collect(),
            attention: fwd
                .attention
                .iter()
                .map(|l| l.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
            queries: fwd.qkv.iter().map(|q| tape.value(q.0).clone()).collect(),
            keys: fwd.qkv.iter().map(|q| tape.value(q.1).clone()).collect(),
            values: fwd.qkv.iter().map(|q| tape.value(q.2).clone()).collect(),
        }
    }

    /// Residual vector at `(sequence, position)` of residual stream `layer`.
    pub fn residual(&self, layer: usize, sequence: usize, position: usize) -> ndarray::ArrayView1<'_, f64> {
        self.residuals[layer].row(self.rows[sequence][position])
    }
}

fn ln(tape: &mut Tape, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let g = b.get(&format!("{prefix}.gain"))?;
    let bias = b.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, bias)
}

fn linear(tape: &mut Tape, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(bv) => tape.add_row(y, bv),
        None => Ok(y),
    }
}

fn apply_patch(tape: &mut Tape, x: Var, level: usize, opts: &ForwardOptions) -> Result<Var> {
    match &opts.patch {
        Some(p) if p.residual == level => tape.replace_rows(x, p.values, &p.rows),
        _ => Ok(x),
    }
}

/// Edited attention output row `query` of one sequence, given its raw
/// scores, weights and values.
fn edited_row(scores: &Matrix, values: &Matrix, out: &Matrix, query: usize, edits: &[&AttentionEdit]) -> Matrix {
    let row = scores.row(query);
    let max = row.iter().take(query + 1).cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().take(query + 1).map(|s| (s - max).exp()).sum::<f64>().ln();
    let mut num = out.row(query).to_owned();
    let mut den = 1.0;
    for e in edits {
        let w = e.copies * (row[e.key] - lse).exp();
        num.scaled_add(w, &values.row(e.key));
        den += w;
    }
    (num / den).insert_axis(ndarray::Axis(0))
}

pub fn forward(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    sequences: &[&[TokenId]],
    opts: &ForwardOptions,
) -> Result<TransformerForward> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let mut rows = Vec::with_capacity(sequences.len());
    let mut offsets = Vec::with_capacity(sequences.len());
    let mut flat = Vec::new();
    let mut positions = Vec::new();
    for s in sequences {
        offsets.push(flat.len());
        rows.push((flat.len()..flat.len() + s.len()).collect::<Vec<_>>());
        flat.extend(s.iter().map(|&t| t as usize));
        positions.extend(0..s.len());
    }
    for e in &opts.edits {
        let len = sequences.get(e.sequence).map(|s| s.len()).unwrap_or(0);
        if e.layer >= cfg.n_layers || e.query >= len || e.key > e.query {
            return Err(Error::Invalid(format!("attention edit out of range: {e:?}")));
        }
    }

    let mut x = tape.gather_rows(b.get("embed")?, &flat)?;
    x = apply_patch(tape, x, 0, opts)?;
    let mut residuals = vec![x];
    let mut attention = Vec::with_capacity(cfg.n_layers);
    let mut qkv = Vec::with_capacity(cfg.n_layers);
    let scale = 1.0 / (d as f64).sqrt();

    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layer{l}.{n}");
        let a = ln(tape, b, x, &p("ln1"))?;
        let mut q = linear(tape, a, b.get(&p("attn.wq"))?, None)?;
        let mut k = linear(tape, a, b.get(&p("attn.wk"))?, None)?;
        let v = linear(tape, a, b.get(&p("attn.wv"))?, None)?;
        if cfg.pos_encoding == PosEncoding::Rope {
            q = tape.rope(q, &positions)?;
            k = tape.rope(k, &positions)?;
        }
        let mut outs = Vec::with_capacity(sequences.len());
        let mut maps = Vec::with_capacity(sequences.len());
        for (s, seq) in sequences.iter().enumerate() {
            let (lo, hi) = (offsets[s], offsets[s] + seq.len());
            let qs = tape.slice_rows(q, lo, hi)?;
            let ks = tape.slice_rows(k, lo, hi)?;
            let vs = tape.slice_rows(v, lo, hi)?;
            let raw = tape.matmul_nt(qs, ks)?;
            let scores = tape.scale(raw, scale);
            let w = tape.softmax_rows(scores, true);
            let mut o = tape.matmul(w, vs)?;
            let edits: Vec<&AttentionEdit> = opts.edits.iter().filter(|e| e.layer == l && e.sequence == s).collect();
            if !edits.is_empty() {
                let mut queries: Vec<usize> = edits.iter().map(|e| e.query).collect();
                queries.sort_unstable();
                queries.dedup();
                let mut replaced = Matrix::zeros((queries.len(), d));
                for (i, &qr) in queries.iter().enumerate() {
                    let mine: Vec<&AttentionEdit> = edits.iter().copied().filter(|e| e.query == qr).collect();
                    let row = edited_row(tape.value(scores), tape.value(vs), tape.value(o), qr, &mine);
                    replaced.row_mut(i).assign(&row.row(0));
                }
                let src = tape.constant(replaced);
                o = tape.replace_rows(o, src, &queries)?;
            }
            outs.push(o);
            maps.push(w);
        }
        let att = tape.concat_rows(&outs)?;
        let att = linear(tape, att, b.get(&p("attn.wo"))?, Some(b.get(&p("attn.bo"))?))?;
        x = tape.add(x, att)?;
        let m = ln(tape, b, x, &p("ln2"))?;
        let h = linear(tape, m, b.get(&p("mlp.w1"))?, Some(b.get(&p("mlp.b1"))?))?;
        let h = tape.gelu(h);
        let h = linear(tape, h, b.get(&p("mlp.w2"))?, Some(b.get(&p("mlp.b2"))?))?;
        x = tape.add(x, h)?;
        x = apply_patch(tape, x, l + 1, opts)?;
        residuals.push(x);
        attention.push(maps);
        qkv.push((q, k, v));
    }
    let output = ln(tape, b, x, "final_ln")?;
    Ok(TransformerForward {
        output,
        rows,
        residuals,
        attention,
        qkv,
    })
}

/// Logits and hidden record for a batch, with optional patches and edits.
pub fn run(model: &Model, sequences: &[&[TokenId]], opts: &ForwardOptions) -> Result<(Vec<Matrix>, HiddenRecord)> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    run_on(model, &mut tape, &b, sequences, opts)
}

/// As [`run`], on a tape the caller already bound the weights to (so a
/// patch can reference a constant on the same tape).
pub fn run_on(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    sequences: &[&[TokenId]],
    opts: &ForwardOptions,
) -> Result<(Vec<Matrix>, HiddenRecord)> {
    if model.config.family != super::Family::Transformer {
        return Err(Error::Invalid("not a transformer".into()));
    }
    let fwd = forward(model, tape, b, sequences, opts)?;
    let logits = model.readout(tape, b, fwd.output, &mut super::Mode::Eval)?;
    let lv = tape.value(logits);
    let per_seq = fwd.rows.iter().map(|r| lv.select(ndarray::Axis(0), r)).collect();
    Ok((per_seq, HiddenRecord::capture(tape, &fwd)))
}
