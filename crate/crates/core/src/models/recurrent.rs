// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-cell GRU and LSTM, in the gate layout of the common deep
//! learning frameworks (`r, z, n` and `i, f, g, o`).

use ndarray::Axis;

use super::{Bound, Family, Model};
use crate::autodiff::{Matrix, Tape, Var};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// `x W_ih + b_ih` for one token per row.
pub fn input_projection(tape: &mut Tape, b: &Bound, tokens: &[TokenId]) -> Result<Var> {
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let x = tape.gather_rows(b.get("embed")?, &idx)?;
    let xi = tape.matmul(x, b.get("cell.w_ih")?)?;
    tape.add_row(xi, b.get("cell.b_ih")?)
}

/// One recurrent update. `state` is `h` for a GRU and `[h, c]` for an LSTM;
/// `xi` is the input projection of the token being read.
pub fn cell(model: &Model, tape: &mut Tape, b: &Bound, state: Var, xi: Var) -> Result<Var> {
    let d = model.config.d_model;
    match model.config.family {
        Family::Gru => {
            let hh = tape.matmul(state, b.get("cell.w_hh")?)?;
            let hh = tape.add_row(hh, b.get("cell.b_hh")?)?;
            let (xr, xz, xn) = (
                tape.slice_cols(xi, 0, d)?,
                tape.slice_cols(xi, d, 2 * d)?,
                tape.slice_cols(xi, 2 * d, 3 * d)?,
            );
            let (hr, hz, hn) = (
                tape.slice_cols(hh, 0, d)?,
                tape.slice_cols(hh, d, 2 * d)?,
                tape.slice_cols(hh, 2 * d, 3 * d)?,
            );
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n);
            // h' = (1 - z) n + z h = n + z (h - n)
            let diff = tape.sub(state, n)?;
            let zd = tape.mul(z, diff)?;
            tape.add(n, zd)
        }
        Family::Lstm => {
            let h = tape.slice_cols(state, 0, d)?;
            let c = tape.slice_cols(state, d, 2 * d)?;
            let hh = tape.matmul(h, b.get("cell.w_hh")?)?;
            let hh = tape.add_row(hh, b.get("cell.b_hh")?)?;
            let g = tape.add(xi, hh)?;
            let i = tape.slice_cols(g, 0, d)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(g, d, 2 * d)?;
            let f = tape.sigmoid(f);
            let gg = tape.slice_cols(g, 2 * d, 3 * d)?;
            let gg = tape.tanh(gg);
            let o = tape.slice_cols(g, 3 * d, 4 * d)?;
            let o = tape.sigmoid(o);
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, gg)?;
            let c2 = tape.add(fc, ig)?;
            let tc = tape.tanh(c2);
            let h2 = tape.mul(o, tc)?;
            tape.concat_cols(&[h2, c2])
        }
        Family::Transformer => Err(Error::Invalid("not a recurrent model".into())),
    }
}

pub fn zero_state(model: &Model, tape: &mut Tape, batch: usize) -> Var {
    tape.constant(Matrix::zeros((batch, model.config.state_dim())))
}

/// Run from `state0`, reading one column of tokens per step. Returns the
/// state after each step.
pub fn unroll(model: &Model, tape: &mut Tape, b: &Bound, state0: Var, steps: &[Vec<TokenId>]) -> Result<Vec<Var>> {
    let batch = tape.shape(state0).0;
    if steps.iter().any(|s| s.len() != batch) {
        return Err(Error::Shape("ragged token columns".into()));
    }
    if steps.is_empty() {
        return Ok(Vec::new());
    }
    let flat: Vec<TokenId> = steps.iter().flatten().copied().collect();
    let xi_all = input_projection(tape, b, &flat)?;
    let mut state = state0;
    let mut out = Vec::with_capacity(steps.len());
    for t in 0..steps.len() {
        let xi = tape.slice_rows(xi_all, t * batch, (t + 1) * batch)?;
        state = cell(model, tape, b, state, xi)?;
        out.push(state);
    }
    Ok(out)
}

/// The `h` part of a state (all of it for a GRU).
pub fn output_part(model: &Model, tape: &mut Tape, state: Var) -> Result<Var> {
    match model.config.family {
        Family::Lstm => tape.slice_cols(state, 0, model.config.d_model),
        _ => Ok(state),
    }
}

fn time_major(sequences: &[&[TokenId]], pad: TokenId) -> Vec<Vec<TokenId>> {
    let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
    (0..len)
        .map(|t| sequences.iter().map(|s| s.get(t).copied().unwrap_or(pad)).collect())
        .collect()
}

/// Readout inputs for every real position, packed sequence by sequence,
/// with the row of each `(sequence, position)`.
pub fn hidden_rows(
    model: &Model,
    tape: &mut Tape,
    b: &Bound,
    sequences: &[&[TokenId]],
) -> Result<(Var, Vec<Vec<usize>>)> {
    let pad = model.task.vocabulary().pad();
    let steps = time_major(sequences, pad);
    let batch = sequences.len();
    let state0 = zero_state(model, tape, batch);
    let states = unroll(model, tape, b, state0, &steps)?;
    let mut hs = Vec::with_capacity(states.len());
    for s in states {
        hs.push(output_part(model, tape, s)?);
    }
    let all = tape.concat_rows(&hs)?;
    let mut pick = Vec::new();
    let mut rows = Vec::with_capacity(batch);
    for (s, seq) in sequences.iter().enumerate() {
        let mut r = Vec::with_capacity(seq.len());
        for t in 0..seq.len() {
            r.push(pick.len());
            pick.push(t * batch + s);
        }
        rows.push(r);
    }
    Ok((tape.gather_rows(all, &pick)?, rows))
}

/// Aligned state (`h`, or `[h, c]`) after reading each token.
pub fn states(model: &Model, sequences: &[&[TokenId]]) -> Result<Vec<Matrix>> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let pad = model.task.vocabulary().pad();
    let steps = time_major(sequences, pad);
    let state0 = zero_state(model, &mut tape, sequences.len());
    let vars = unroll(model, &mut tape, &b, state0, &steps)?;
    Ok(sequences
        .iter()
        .enumerate()
        .map(|(s, seq)| {
            let mut m = Matrix::zeros((seq.len(), model.config.state_dim()));
            for t in 0..seq.len() {
                m.row_mut(t).assign(&tape.value(vars[t]).row(s));
            }
            m
        })
        .collect())
}

/// State after reading `tokens[..=at[i]]`, one row per sequence.
pub fn states_at(model: &Model, sequences: &[&[TokenId]], at: &[usize]) -> Result<Matrix> {
    if sequences.len() != at.len() {
        return Err(Error::Shape("one position per sequence".into()));
    }
    for (s, &t) in sequences.iter().zip(at) {
        if t >= s.len() {
            return Err(Error::IndexOutOfRange { index: t, dim: s.len() });
        }
    }
    let all = states(model, sequences)?;
    let mut out = Matrix::zeros((sequences.len(), model.config.state_dim()));
    for (i, (m, &t)) in all.iter().zip(at).enumerate() {
        out.row_mut(i).assign(&m.row(t));
    }
    Ok(out)
}

/// Plain single update for rows of `state` and token embeddings `x_embed`.
pub fn step(model: &Model, state: &Matrix, x_embed: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let s = tape.constant(state.clone());
    let x = tape.constant(x_embed.clone());
    let xi = tape.matmul(x, b.get("cell.w_ih")?)?;
    let xi = tape.add_row(xi, b.get("cell.b_ih")?)?;
    let out = cell(model, &mut tape, &b, s, xi)?;
    Ok(tape.value(out).clone())
}

/// Logits produced by the readout for each row of `states`.
pub fn readout_states(model: &Model, states: &Matrix) -> Result<Matrix> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let s = tape.constant(states.clone());
    let h = output_part(model, &mut tape, s)?;
    let out = model.readout(&mut tape, &b, h, &mut super::Mode::Eval)?;
    Ok(tape.value(out).clone())
}

pub fn embed(model: &Model, tokens: &[TokenId]) -> Result<Matrix> {
    let e = model
        .params
        .get("embed")
        .ok_or_else(|| Error::Schema("missing parameter `embed`".into()))?;
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = idx.iter().find(|&&i| i >= e.nrows()) {
        return Err(Error::UnknownToken(bad as TokenId));
    }
    Ok(e.select(Axis(0), &idx))
}
