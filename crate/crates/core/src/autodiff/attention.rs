//! Single-head causal self-attention built from tape primitives.

use super::{Activation, Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Tape handles of one attention block's weights.
///
/// `pos` is a `[max_ctx, D]` table of learned positional encodings; the
/// projections are `[D, D]`. Keys carry no bias: a key bias shifts every
/// score of a query equally and cancels in the softmax.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub pos: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

fn check_tokens(tape: &Tape, tokens: Var, w: &AttentionWeights) -> Result<(usize, usize, usize)> {
    let s = tape.shape(tokens);
    if s.len() != 3 {
        return Err(shape_err("attention", format!("tokens must be [B,L,D], got {s:?}")));
    }
    let (b, l, d) = (s[0], s[1], s[2]);
    let ps = tape.shape(w.pos);
    if ps.len() != 2 || ps[1] != d {
        return Err(shape_err(
            "attention",
            format!("positional table {ps:?} does not match width {d}"),
        ));
    }
    if l == 0 {
        return Err(shape_err("attention", "empty token sequence"));
    }
    if l > ps[0] {
        return Err(Error::ContextOverflow {
            tokens: l,
            max: ps[0],
        });
    }
    Ok((b, l, d))
}

fn with_positions(tape: &mut Tape, tokens: Var, w: &AttentionWeights, l: usize) -> Result<Var> {
    let pos = tape.narrow(w.pos, 0, 0, l)?;
    tape.add_broadcast(tokens, pos)
}

/// Causal self-attention over `[B,L,D]` tokens with a residual connection.
///
/// Position `t` attends to positions `0..=t` only.
pub fn causal_self_attention(tape: &mut Tape, tokens: Var, w: &AttentionWeights) -> Result<Var> {
    let (_, _, d) = check_tokens(tape, tokens, w)?;
    let l = tape.shape(tokens)[1];
    let x = with_positions(tape, tokens, w, l)?;
    let q = tape.dense(x, w.wq, Some(w.bq), Activation::Identity)?;
    let k = tape.dense(x, w.wk, None, Activation::Identity)?;
    let v = tape.dense(x, w.wv, Some(w.bv), Activation::Identity)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.causal_softmax(scores)?;
    let ctx = tape.bmm(attn, v, false)?;
    let out = tape.dense(ctx, w.wo, Some(w.bo), Activation::Identity)?;
    tape.add(out, x)
}

/// The final-position output of [`causal_self_attention`], `[B,D]`.
///
/// Only the last query is formed, which is all a policy head needs.
pub fn attend_last(tape: &mut Tape, tokens: Var, w: &AttentionWeights) -> Result<Var> {
    let (b, l, d) = check_tokens(tape, tokens, w)?;
    let x = with_positions(tape, tokens, w, l)?;
    let last = tape.narrow(x, 1, l - 1, 1)?;
    let q = tape.dense(last, w.wq, Some(w.bq), Activation::Identity)?;
    let k = tape.dense(x, w.wk, None, Activation::Identity)?;
    let v = tape.dense(x, w.wv, Some(w.bv), Activation::Identity)?;
    let scores = tape.bmm(q, k, true)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(scores)?;
    let ctx = tape.bmm(attn, v, false)?;
    let out = tape.dense(ctx, w.wo, Some(w.bo), Activation::Identity)?;
    let out = tape.add(out, last)?;
    tape.reshape(out, &[b, d])
}
