//! The MAC cell: control, read and write units, and the output classifier.
//!
//! The read unit scores cell `i` as `((m ⊙ kb_i)·W_m ‖ kb_i)·W_c · (c ⊙ w)`.
//! That form is linear in `kb_i`, so it is evaluated as `kb · key` with a
//! single `d`-vector `key` built from matrix–vector products, instead of
//! materializing the `[H·W, 2d]` intermediate. Bias terms that would add the
//! same constant to every cell's logit are left out: softmax cancels them.

use crate::encoder::{KnowledgeBase, QuestionEncoding};
use crate::model::Net;
use crate::tensor::{Real, Var};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct ControlOutput {
    /// `[1, d]`
    pub c: Var,
    /// Attention over the question words, `[1, L]`.
    pub attn: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOutput {
    /// `[1, d]`
    pub r: Var,
    /// Attention over grid cells, `[1, H·W]`.
    pub attn: Var,
}

/// Reshapes a `[1, n]` row into an `[n, 1]` column (same buffer).
fn col<T: Real>(net: &mut Net<'_, T>, row: Var) -> Result<Var> {
    let n = net.tape.value(row).len();
    Ok(net.tape.reshape(row, &[n, 1])?)
}

fn row<T: Real>(net: &mut Net<'_, T>, col: Var) -> Result<Var> {
    let n = net.tape.value(col).len();
    Ok(net.tape.reshape(col, &[1, n])?)
}

pub fn control_step<T: Real>(
    net: &mut Net<'_, T>,
    prev: Var,
    q: &QuestionEncoding,
    k: usize,
) -> Result<ControlOutput> {
    assert!(k < net.cfg.p, "step {k} out of range for p = {}", net.cfg.p);
    let cq = net.linear(q.q, &format!("ctrl.cq.{k}"))?;
    let joined = net.tape.concat_cols(&[cq, prev])?;
    let inter = net.linear(joined, "ctrl.inter")?;
    let u = net.tape.mul(inter, net.w.get("ctrl.attn.w"))?;
    let u = col(net, u)?;
    let logits = net.tape.matmul(q.words, u)?;
    let logits = row(net, logits)?;
    let attn = net.tape.softmax(logits)?;
    let c = net.tape.matmul(attn, q.words)?;
    Ok(ControlOutput { c, attn })
}

pub fn read_step<T: Real>(
    net: &mut Net<'_, T>,
    m: Var,
    c: Var,
    kb: &KnowledgeBase,
) -> Result<ReadOutput> {
    let d = net.cfg.d;
    let u = net.tape.mul(c, net.w.get("read.attn.w"))?;
    let u = col(net, u)?;
    let s = net.tape.matmul(net.w.get("read.comb.w"), u)?;
    let s_inter = net.tape.slice_rows(s, 0, d)?;
    let s_kb = net.tape.slice_rows(s, d, d)?;
    let a = net.tape.matmul(net.w.get("read.mem.w"), s_inter)?;
    let a = row(net, a)?;
    let am = net.tape.mul(a, m)?;
    let s_kb = row(net, s_kb)?;
    let key = net.tape.add(am, s_kb)?;
    let key = col(net, key)?;
    let logits = net.tape.matmul(kb.features, key)?;
    let logits = row(net, logits)?;
    let attn = net.tape.softmax(logits)?;
    let ctx = net.tape.matmul(attn, kb.features)?;
    let r = net.linear(ctx, "read.out")?;
    Ok(ReadOutput { r, attn })
}

pub fn write_step<T: Real>(net: &mut Net<'_, T>, m_prev: Var, r: Var) -> Result<Var> {
    let z = net.tape.concat_cols(&[r, m_prev])?;
    net.linear(z, "write")
}

/// Answer logits `[1, |answers|]` from a two-layer network over `[m ; q]`.
pub fn output_answer<T: Real>(net: &mut Net<'_, T>, m: Var, q: Var) -> Result<Var> {
    let z = net.tape.concat_cols(&[m, q])?;
    let h = net.linear(z, "out.hidden")?;
    let h = net.tape.relu(h)?;
    net.linear(h, "out.logits")
}
