//! Input unit: the scene grid becomes a knowledge base of per-cell features,
//! and question text is read by a bidirectional GRU.

use crate::model::Net;
use crate::scenegen::{SceneGraph, SEP_TOKEN};
use crate::tensor::{Real, TensorError, Var};
use crate::{Error, Result};

/// One feature row per grid cell, `[H·W, d]`, in row-major cell order.
#[derive(Debug, Clone, Copy)]
pub struct KnowledgeBase {
    pub features: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct QuestionEncoding {
    /// `[1, d]`
    pub q: Var,
    /// `[L, d]`
    pub words: Var,
    pub len: usize,
}

/// Cell feature: sum of the occupant's four attribute embeddings, or the
/// learned empty embedding, plus a positional embedding.
pub fn embed_scene<T: Real>(net: &mut Net<'_, T>, scene: &SceneGraph) -> Result<KnowledgeBase> {
    if scene.grid_size != net.cfg.grid {
        return Err(Error::Config(format!(
            "scene grid {:?} does not match model grid {:?}",
            scene.grid_size, net.cfg.grid
        )));
    }
    scene.validate()?;
    let n = scene.objects.len();
    let empty = net.p("kb.empty");
    let table = if n == 0 {
        empty
    } else {
        let col = |f: fn(&crate::scenegen::SceneObject) -> usize| {
            scene.objects.iter().map(f).collect::<Vec<_>>()
        };
        let color = net
            .tape
            .gather(net.w.get("kb.color"), &col(|o| o.color.index()))?;
        let shape = net
            .tape
            .gather(net.w.get("kb.shape"), &col(|o| o.shape.index()))?;
        let size = net
            .tape
            .gather(net.w.get("kb.size"), &col(|o| o.size.index()))?;
        let material = net
            .tape
            .gather(net.w.get("kb.material"), &col(|o| o.material.index()))?;
        let s = net.tape.add(color, shape)?;
        let s = net.tape.add(s, size)?;
        let s = net.tape.add(s, material)?;
        net.tape.concat_rows(&[s, empty])?
    };
    let mut rows = vec![n; scene.cells()];
    for (i, o) in scene.objects.iter().enumerate() {
        rows[scene.cell_index(o.cell)] = i;
    }
    let content = net.tape.gather(table, &rows)?;
    let features = net.tape.add(content, net.w.get("kb.pos"))?;
    Ok(KnowledgeBase { features })
}

/// Runs one GRU direction over the rows of `xs` and returns the hidden state
/// at every position (in position order).
fn gru<T: Real>(
    net: &mut Net<'_, T>,
    xs: Var,
    len: usize,
    dir: &str,
    reverse: bool,
) -> Result<Vec<Var>> {
    let h = net.cfg.d / 2;
    let wx = net.p(&format!("enc.gru.{dir}.wx"));
    let wh = net.p(&format!("enc.gru.{dir}.wh"));
    let bx = net.p(&format!("enc.gru.{dir}.bx"));
    let bh = net.p(&format!("enc.gru.{dir}.bh"));
    let t = &mut *net.tape;
    let xp = t.matmul(xs, wx)?;
    let xp = t.add(xp, bx)?;
    let mut state = t.constant(crate::tensor::Tensor::zeros(&[1, h]));
    let mut out = vec![state; len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for i in order {
        let x = t.slice_rows(xp, i, 1)?;
        let hp = t.matmul(state, wh)?;
        let hp = t.add(hp, bh)?;
        // Gate layout along columns: reset, update, candidate.
        let x_rz = t.slice_cols(x, 0, 2 * h)?;
        let h_rz = t.slice_cols(hp, 0, 2 * h)?;
        let rz = t.add(x_rz, h_rz)?;
        let rz = t.sigmoid(rz)?;
        let r = t.slice_cols(rz, 0, h)?;
        let z = t.slice_cols(rz, h, h)?;
        let x_n = t.slice_cols(x, 2 * h, h)?;
        let h_n = t.slice_cols(hp, 2 * h, h)?;
        let rh = t.mul(r, h_n)?;
        let n = t.add(x_n, rh)?;
        let n = t.tanh(n)?;
        // (1 - z) * n + z * h == n + z * (h - n)
        let diff = t.sub(state, n)?;
        let zd = t.mul(z, diff)?;
        state = t.add(n, zd)?;
        out[i] = state;
    }
    Ok(out)
}

fn encode_ids<T: Real>(net: &mut Net<'_, T>, ids: &[usize]) -> Result<QuestionEncoding> {
    let len = ids.len();
    if len == 0 {
        return Err(TensorError::Invalid {
            op: "encode_question",
            msg: "empty token list".into(),
        }
        .into());
    }
    let xs = net.tape.gather(net.w.get("enc.embed"), ids)?;
    let fwd = gru(net, xs, len, "f", false)?;
    let bwd = gru(net, xs, len, "b", true)?;
    let t = &mut *net.tape;
    let hf = t.concat_rows(&fwd)?;
    let hb = t.concat_rows(&bwd)?;
    let hs = t.concat_cols(&[hf, hb])?;
    let last = t.concat_cols(&[fwd[len - 1], bwd[0]])?;
    let words = net.linear(hs, "enc.words")?;
    let q = net.linear(last, "enc.q")?;
    Ok(QuestionEncoding { q, words, len })
}

pub fn encode_question<T: Real>(
    net: &mut Net<'_, T>,
    tokens: &[String],
) -> Result<QuestionEncoding> {
    let ids = net.lex.words(tokens)?;
    encode_ids(net, &ids)
}

/// One earlier turn as seen by history concatenation. The caption has no
/// answer.
#[derive(Debug, Clone, Copy)]
pub struct HistoryTurn<'a> {
    pub text: &'a [String],
    pub answer: Option<&'a str>,
}

/// `[history…, SEP, current]`, dropping the oldest history turns until the
/// sequence fits in `max_len`. The current question is never cut; with no
/// history left there is no separator.
pub fn concat_tokens(
    history: &[HistoryTurn<'_>],
    current: &[String],
    max_len: usize,
) -> Vec<String> {
    let turn_len = |h: &HistoryTurn<'_>| h.text.len() + usize::from(h.answer.is_some());
    let mut total: usize = history.iter().map(turn_len).sum();
    let mut start = 0;
    while start < history.len() && total + 1 + current.len() > max_len {
        total -= turn_len(&history[start]);
        start += 1;
    }
    let mut out = Vec::with_capacity(total + 1 + current.len());
    for h in &history[start..] {
        out.extend(h.text.iter().cloned());
        if let Some(a) = h.answer {
            out.push(a.to_string());
        }
    }
    if !out.is_empty() {
        out.push(SEP_TOKEN.to_string());
    }
    out.extend(current.iter().cloned());
    out
}

pub fn encode_history_concat<T: Real>(
    net: &mut Net<'_, T>,
    history: &[HistoryTurn<'_>],
    current: &[String],
) -> Result<QuestionEncoding> {
    let toks = concat_tokens(history, current, net.cfg.max_concat_len);
    encode_question(net, &toks)
}
