//! Context-aware attention over past control states, the fusion gate, and
//! memory carried across turns, plus the per-turn and per-dialog drivers.

use serde::{Deserialize, Serialize};

use crate::encoder::{
    embed_scene, encode_history_concat, encode_question, HistoryTurn, KnowledgeBase,
    QuestionEncoding,
};
use crate::maccell::{control_step, output_answer, read_step, write_step};
use crate::model::{Lexicon, ModelConfig, ModelParams, Net};
use crate::scenegen::DialogRecord;
use crate::tensor::gradcheck::{self, CheckOutcome};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::{Error, Result};

/// Attention of control step `(turn, step)` over the control log up to and
/// including itself; `weights.len() == turn·p + step + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub turn: usize,
    pub step: usize,
    pub weights: Vec<f64>,
}

/// Everything one dialog carries from turn to turn. Holds tape handles, so
/// it lives exactly as long as the tape it was built on.
#[derive(Debug, Clone)]
pub struct DialogState {
    control_log: Vec<Var>,
    keys: Vec<Var>,
    carry_memory: Option<Var>,
    turn_index: usize,
    keep_log: bool,
}

impl Default for DialogState {
    fn default() -> Self {
        Self::new()
    }
}

impl DialogState {
    pub fn new() -> Self {
        Self {
            control_log: Vec::new(),
            keys: Vec::new(),
            carry_memory: None,
            turn_index: 0,
            keep_log: true,
        }
    }

    /// A state that records no control log. Only valid without attention
    /// over past controls.
    pub fn without_log() -> Self {
        Self {
            keep_log: false,
            ..Self::new()
        }
    }

    pub fn turn_index(&self) -> usize {
        self.turn_index
    }

    pub fn control_log(&self) -> &[Var] {
        &self.control_log
    }

    pub fn carry_memory(&self) -> Option<Var> {
        self.carry_memory
    }

    /// Moves to the next turn without running the current one. Used to skip
    /// the caption for models that carry nothing between turns.
    pub fn skip_turn(&mut self) {
        self.turn_index += 1;
    }
}

/// Zero at the first turn or without carried memory; otherwise the final
/// memory of the previous turn.
pub fn init_turn_memory<T: Real>(net: &mut Net<'_, T>, state: &DialogState, mtm: bool) -> Var {
    match (mtm, state.turn_index, state.carry_memory) {
        (true, t, Some(m)) if t > 0 => m,
        _ => net.zeros_row(net.cfg.d),
    }
}

/// `g ⊙ relu(W_r z + b_r) + (1 − g) ⊙ x` with `g = sigmoid(W_g z + b_g)` and
/// `z = [x ; y ; x ⊙ y ; x − y]`.
pub fn fusion<T: Real>(net: &mut Net<'_, T>, x: Var, y: Var) -> Result<Var> {
    let t = &mut *net.tape;
    let xy = t.mul(x, y)?;
    let dxy = t.sub(x, y)?;
    let z = t.concat_cols(&[x, y, xy, dxy])?;
    let (wr, br, wg, bg) = (
        net.w.get("fusion.wr"),
        net.w.get("fusion.br"),
        net.w.get("fusion.wg"),
        net.w.get("fusion.bg"),
    );
    let xt = t.matmul(z, wr)?;
    let xt = t.add(xt, br)?;
    let xt = t.relu(xt)?;
    let g = t.matmul(z, wg)?;
    let g = t.add(g, bg)?;
    let g = t.sigmoid(g)?;
    // g·x̃ + (1 − g)·x == x + g·(x̃ − x)
    let diff = t.sub(xt, x)?;
    let gd = t.mul(g, diff)?;
    Ok(t.add(x, gd)?)
}

fn push_control<T: Real>(net: &mut Net<'_, T>, state: &mut DialogState, raw: Var) -> Result<()> {
    if net.cfg.flags.caa {
        let key = net.tape.matmul(raw, net.w.get("caa.proj_b"))?;
        state.keys.push(key);
    }
    if state.keep_log {
        state.control_log.push(raw);
    }
    Ok(())
}

/// Attends from the newest log entry over the whole log (which, being built
/// in order, holds no future entries) and fuses the result into it.
pub fn context_attend<T: Real>(
    net: &mut Net<'_, T>,
    state: &DialogState,
    step: usize,
) -> Result<(Var, AttentionRecord)> {
    let raw = *state
        .control_log
        .last()
        .ok_or_else(|| Error::Config("context attention needs a control log".into()))?;
    let d = net.cfg.d;
    let n = state.control_log.len();
    let t = &mut *net.tape;
    let query = t.matmul(raw, net.w.get("caa.proj_a"))?;
    let query = t.scale(query, 1.0 / (d as f64).sqrt())?;
    let query = t.reshape(query, &[d, 1])?;
    let keys = t.concat_rows(&state.keys)?;
    let logits = t.matmul(keys, query)?;
    let logits = t.reshape(logits, &[1, n])?;
    let attn = t.softmax(logits)?;
    let values = t.concat_rows(&state.control_log)?;
    let attended = t.matmul(attn, values)?;
    let record = AttentionRecord {
        turn: state.turn_index,
        step,
        weights: t.value(attn).to_f64_vec(),
    };
    let fused = fusion(net, raw, attended)?;
    Ok((fused, record))
}

#[derive(Debug, Clone)]
pub struct TurnOutput {
    /// `[1, |answers|]`
    pub logits: Var,
    /// Final memory `[1, d]`.
    pub memory: Var,
    pub records: Vec<AttentionRecord>,
    pub word_attn: Vec<Var>,
    pub cell_attn: Vec<Var>,
}

/// One turn: `p` control → (context attention) → read → write iterations,
/// then the classifier.
pub fn run_turn<T: Real>(
    net: &mut Net<'_, T>,
    state: &mut DialogState,
    kb: &KnowledgeBase,
    qenc: &QuestionEncoding,
) -> Result<TurnOutput> {
    let flags = net.cfg.flags;
    if flags.caa && !state.keep_log {
        return Err(Error::Config(
            "context attention needs a control log".into(),
        ));
    }
    let d = net.cfg.d;
    let mut m = init_turn_memory(net, state, flags.mtm);
    let mut prev = net.tape.reshape(net.w.get("ctrl.init"), &[1, d])?;
    let mut out = TurnOutput {
        logits: prev,
        memory: m,
        records: Vec::new(),
        word_attn: Vec::with_capacity(net.cfg.p),
        cell_attn: Vec::with_capacity(net.cfg.p),
    };
    for k in 0..net.cfg.p {
        let ctl = control_step(net, prev, qenc, k)?;
        push_control(net, state, ctl.c)?;
        let c = if flags.caa {
            let (c, rec) = context_attend(net, state, k)?;
            out.records.push(rec);
            c
        } else {
            ctl.c
        };
        let read = read_step(net, m, c, kb)?;
        m = write_step(net, m, read.r)?;
        prev = c;
        out.word_attn.push(ctl.attn);
        out.cell_attn.push(read.attn);
    }
    out.logits = output_answer(net, m, qenc.q)?;
    out.memory = m;
    state.carry_memory = Some(m);
    state.turn_index += 1;
    Ok(out)
}

/// Encodes turn `turn` of a dialog (0 is the caption) as the model's flags
/// require: on its own, or with the preceding history concatenated.
pub fn encode_turn<T: Real>(
    net: &mut Net<'_, T>,
    record: &DialogRecord,
    turn: usize,
) -> Result<QuestionEncoding> {
    let text = if turn == 0 {
        &record.caption
    } else {
        &record.turns[turn - 1].text
    };
    if !net.cfg.flags.cq {
        return encode_question(net, text);
    }
    let mut history = Vec::with_capacity(turn);
    if turn > 0 {
        history.push(HistoryTurn {
            text: &record.caption,
            answer: None,
        });
        history.extend(record.turns[..turn - 1].iter().map(|t| HistoryTurn {
            text: &t.text,
            answer: Some(&t.answer),
        }));
    }
    encode_history_concat(net, &history, text)
}

#[derive(Debug, Clone)]
pub struct DialogRun {
    /// `None` when the model carries nothing between turns and the caption
    /// was skipped.
    pub caption: Option<TurnOutput>,
    /// Output of question turn `i + 1`.
    pub questions: Vec<TurnOutput>,
    pub state: DialogState,
}

impl DialogRun {
    /// Attention records of every turn, caption first.
    pub fn records(&self) -> impl Iterator<Item = &AttentionRecord> {
        self.caption
            .iter()
            .chain(&self.questions)
            .flat_map(|t| &t.records)
    }
}

/// Runs the caption and the first `upto` question turns of `record`
/// (all of them when `upto` is `None`).
pub fn run_dialog<T: Real>(
    net: &mut Net<'_, T>,
    record: &DialogRecord,
    upto: Option<usize>,
) -> Result<DialogRun> {
    run_dialog_with(net, record, upto, DialogState::new())
}

pub fn run_dialog_with<T: Real>(
    net: &mut Net<'_, T>,
    record: &DialogRecord,
    upto: Option<usize>,
    mut state: DialogState,
) -> Result<DialogRun> {
    let n = upto.unwrap_or(record.turns.len()).min(record.turns.len());
    let kb = embed_scene(net, &record.scene)?;
    let caption = if net.cfg.flags.carries_state() {
        let q = encode_turn(net, record, 0)?;
        Some(run_turn(net, &mut state, &kb, &q)?)
    } else {
        state.skip_turn();
        None
    };
    let mut questions = Vec::with_capacity(n);
    for turn in 1..=n {
        let q = encode_turn(net, record, turn)?;
        questions.push(run_turn(net, &mut state, &kb, &q)?);
    }
    Ok(DialogRun {
        caption,
        questions,
        state,
    })
}

/// Question turn `turn` (1-based) of `record` as an isolated example, with no
/// state from earlier turns. Matches [`run_dialog`] for models that carry no
/// state.
pub fn run_single_turn<T: Real>(
    net: &mut Net<'_, T>,
    record: &DialogRecord,
    turn: usize,
) -> Result<TurnOutput> {
    let kb = embed_scene(net, &record.scene)?;
    let q = encode_turn(net, record, turn)?;
    let mut state = DialogState::new();
    state.turn_index = turn;
    run_turn(net, &mut state, &kb, &q)
}

/// Recomputes every attention row of a finished dialog at once, as a full
/// masked score matrix `softmax(causal_mask(Q Kᵀ / √d))`. Row `i` must match
/// the record of log entry `i`.
pub fn full_attention_matrix<T: Real>(
    net: &mut Net<'_, T>,
    state: &DialogState,
) -> Result<Tensor<T>> {
    if !net.cfg.flags.caa {
        return Err(Error::Unsupported("model has no context attention".into()));
    }
    let d = net.cfg.d;
    let t = &mut *net.tape;
    let c = t.concat_rows(&state.control_log)?;
    let q = t.matmul(c, net.w.get("caa.proj_a"))?;
    let q = t.scale(q, 1.0 / (d as f64).sqrt())?;
    let k = t.matmul(c, net.w.get("caa.proj_b"))?;
    let kt = t.transpose(k)?;
    let e = t.matmul(q, kt)?;
    let e = t.causal_mask(e)?;
    let a = t.softmax(e)?;
    Ok(t.value(a).clone())
}

/// Finite-difference check of the whole network in double precision: the
/// loss is the cross-entropy of question turns `1..=turns` of `record` with
/// respect to every parameter.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    record: &DialogRecord,
    turns: usize,
    seed: u64,
) -> Result<CheckOutcome> {
    let params = ModelParams::<f64>::init(cfg, seed)?;
    let lex = Lexicon::new(cfg);
    let targets = record.turns[..turns]
        .iter()
        .map(|t| lex.answer(&t.answer))
        .collect::<Result<Vec<_>>>()?;
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> std::result::Result<Var, TensorError> {
        let mut net = Net::with_bound(tape, cfg, &lex, params.bound_to(vars.to_vec()));
        let run = run_dialog(&mut net, record, Some(turns)).map_err(|e| TensorError::Invalid {
            op: "model",
            msg: e.to_string(),
        })?;
        let logits: Vec<Var> = run.questions.iter().map(|o| o.logits).collect();
        let all = net.tape.concat_rows(&logits)?;
        net.tape.cross_entropy(all, &targets)
    };
    Ok(gradcheck::check(
        params.tensors(),
        gradcheck::DEFAULT_EPS,
        None,
        &loss,
    )?)
}
