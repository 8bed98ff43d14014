//! Accuracy breakdowns, attention summaries and their CSV reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cam::{run_dialog, AttentionRecord};
use crate::model::{vocab_hash, Lexicon, ModelConfig, ModelParams, Net};
use crate::scenegen::{Dataset, DialogRecord, Family, HistoryUse, TemplateId};
use crate::tensor::Tape;
use crate::trainer::Checkpoint;
use crate::{Error, Result};

/// What the model did on one dialog.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogPrediction {
    /// Predicted answer index for each question turn.
    pub answers: Vec<usize>,
    /// Attention records of every turn (caption included); empty without
    /// context attention.
    pub records: Vec<AttentionRecord>,
    /// Most attended grid cell at the last reasoning step of each question
    /// turn.
    pub final_cell: Vec<usize>,
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn predict_shard(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    records: &[DialogRecord],
) -> Result<Vec<DialogPrediction>> {
    let lex = Lexicon::new(cfg);
    let mut tape = Tape::new();
    let mut net = Net::new(&mut tape, cfg, &lex, params, false);
    let base = net.tape.len();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let run = run_dialog(&mut net, record, None)?;
        let answers = run
            .questions
            .iter()
            .map(|t| argmax(net.tape.value(t.logits).data()))
            .collect();
        let final_cell = run
            .questions
            .iter()
            .map(|t| argmax(net.tape.value(*t.cell_attn.last().expect("p >= 1")).data()))
            .collect();
        out.push(DialogPrediction {
            answers,
            records: run.records().cloned().collect(),
            final_cell,
        });
        net.tape.truncate(base);
    }
    Ok(out)
}

/// Forward passes over `records`, split across `workers` threads. The result
/// does not depend on `workers`.
pub fn predict(
    cfg: &ModelConfig,
    params: &ModelParams<f32>,
    records: &[DialogRecord],
    workers: usize,
) -> Result<Vec<DialogPrediction>> {
    let workers = workers.clamp(1, records.len().max(1));
    if workers == 1 {
        return predict_shard(cfg, params, records);
    }
    let chunk = records.len().div_ceil(workers);
    let parts: Vec<Result<Vec<DialogPrediction>>> = std::thread::scope(|s| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|c| s.spawn(move || predict_shard(cfg, params, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("eval thread"))
            .collect()
    });
    let mut out = Vec::with_capacity(records.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub key: String,
    pub correct: usize,
    pub total: usize,
}

impl Bucket {
    fn new(key: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            correct: 0,
            total: 0,
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

/// Accuracy overall and along each breakdown axis. Buckets with no
/// questions are left out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakdownReport {
    pub overall: Bucket,
    pub family: Vec<Bucket>,
    pub template: Vec<Bucket>,
    /// Keyed by question turn index, starting at 1.
    pub turn: Vec<Bucket>,
    /// Keyed by coreference distance `1..=T`, then `none`.
    pub coref: Vec<Bucket>,
}

pub const NO_COREF: &str = "none";

impl BreakdownReport {
    pub fn from_predictions(
        records: &[DialogRecord],
        preds: &[DialogPrediction],
        answers: &[String],
    ) -> Self {
        let max_turns = records.iter().map(|r| r.turns.len()).max().unwrap_or(0);
        let mut overall = Bucket::new("all");
        let mut family: Vec<Bucket> = Family::ALL.iter().map(|f| Bucket::new(f.name())).collect();
        let mut template: Vec<Bucket> = TemplateId::ALL
            .iter()
            .map(|t| Bucket::new(t.name()))
            .collect();
        let mut turn: Vec<Bucket> = (1..=max_turns)
            .map(|t| Bucket::new(t.to_string()))
            .collect();
        let mut coref: Vec<Bucket> = (1..=max_turns)
            .map(|t| Bucket::new(t.to_string()))
            .collect();
        coref.push(Bucket::new(NO_COREF));
        for (r, p) in records.iter().zip(preds) {
            for (i, (t, &a)) in r.turns.iter().zip(&p.answers).enumerate() {
                let ok = answers.get(a).is_some_and(|w| *w == t.answer);
                overall.add(ok);
                family[Family::ALL
                    .iter()
                    .position(|&f| f == t.question_family)
                    .expect("family")]
                .add(ok);
                template[TemplateId::ALL
                    .iter()
                    .position(|&x| x == t.template_id)
                    .expect("template")]
                .add(ok);
                turn[i].add(ok);
                match t.coref_distance {
                    Some(dist) if dist <= max_turns => coref[dist - 1].add(ok),
                    Some(_) => unreachable!("coreference distance exceeds the dialog length"),
                    None => coref[max_turns].add(ok),
                }
            }
        }
        let keep = |v: Vec<Bucket>| v.into_iter().filter(|b| b.total > 0).collect();
        Self {
            overall,
            family: keep(family),
            template: keep(template),
            turn: keep(turn),
            coref: keep(coref),
        }
    }

    pub fn accuracy(&self) -> f64 {
        self.overall.accuracy()
    }

    pub fn turn_accuracy(&self, turn: usize) -> Option<f64> {
        self.turn
            .iter()
            .find(|b| b.key == turn.to_string())
            .map(Bucket::accuracy)
    }

    /// Pooled accuracy over coreference distances of at least `min`.
    pub fn coref_accuracy_at_least(&self, min: usize) -> Option<f64> {
        let (c, t) = self
            .coref
            .iter()
            .filter(|b| b.key.parse::<usize>().is_ok_and(|d| d >= min))
            .fold((0, 0), |(c, t), b| (c + b.correct, t + b.total));
        (t > 0).then(|| c as f64 / t as f64)
    }
}

fn check_vocab(ckpt: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ckpt.model.vocab != ds.header.vocab || ckpt.model.answers != ds.header.answer_vocab {
        return Err(Error::VocabMismatch {
            checkpoint: ckpt.model.vocab_hash(),
            dataset: vocab_hash(&ds.header.vocab, &ds.header.answer_vocab),
        });
    }
    Ok(())
}

/// Scores the checkpoint's best parameters on every question of `ds`.
pub fn evaluate(ckpt: &Checkpoint, ds: &Dataset, workers: usize) -> Result<BreakdownReport> {
    check_vocab(ckpt, ds)?;
    let preds = predict(&ckpt.model, &ckpt.params, &ds.records, workers)?;
    Ok(BreakdownReport::from_predictions(
        &ds.records,
        &preds,
        &ckpt.model.answers,
    ))
}

const AXES: [&str; 4] = ["overall", "template", "turn", "coref"];

fn axis_rows(report: &BreakdownReport, axis: &str) -> Vec<Bucket> {
    match axis {
        "overall" => std::iter::once(report.overall.clone())
            .chain(report.family.iter().cloned())
            .collect(),
        "template" => report.template.clone(),
        "turn" => report.turn.clone(),
        _ => report.coref.clone(),
    }
}

fn bucket_csv(rows: &[Bucket]) -> String {
    let mut s = String::from("bucket,correct,total,accuracy\n");
    for b in rows {
        writeln!(s, "{},{},{},{:.4}", b.key, b.correct, b.total, b.accuracy())
            .expect("write to string");
    }
    s
}

/// `breakdown_{overall,template,turn,coref}.csv` in `dir`. The overall file
/// holds the `all` row followed by one row per question family.
pub fn write_reports(report: &BreakdownReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for axis in AXES {
        fs::write(
            dir.join(format!("breakdown_{axis}.csv")),
            bucket_csv(&axis_rows(report, axis)),
        )?;
    }
    Ok(())
}

fn parse_bucket_csv(text: &str, file: &str) -> Result<Vec<Bucket>> {
    let bad = |line: usize| Error::Format(format!("{file}: malformed line {line}"));
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some("bucket,correct,total,accuracy") {
        return Err(bad(1));
    }
    lines
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let [key, correct, total, _] = f[..] else {
                return Err(bad(i + 1));
            };
            Ok(Bucket {
                key: key.to_string(),
                correct: correct.parse().map_err(|_| bad(i + 1))?,
                total: total.parse().map_err(|_| bad(i + 1))?,
            })
        })
        .collect()
}

/// Reads back what [`write_reports`] wrote.
pub fn read_reports(dir: &Path) -> Result<BreakdownReport> {
    let mut axes = Vec::new();
    for axis in AXES {
        let file = format!("breakdown_{axis}.csv");
        axes.push(parse_bucket_csv(
            &fs::read_to_string(dir.join(&file))?,
            &file,
        )?);
    }
    let coref = axes.pop().expect("four axes");
    let turn = axes.pop().expect("four axes");
    let template = axes.pop().expect("four axes");
    let mut overall_rows = axes.pop().expect("four axes").into_iter();
    let overall = overall_rows
        .next()
        .ok_or_else(|| Error::Format("breakdown_overall.csv has no rows".into()))?;
    Ok(BreakdownReport {
        overall,
        family: overall_rows.collect(),
        template,
        turn,
        coref,
    })
}

/// For each turn `t` and each turn `s ≤ t`, the largest attention weight any
/// control step of `t` puts on any control step of `s`. Turn 0 is the
/// caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnAttentionSummary {
    pub dialog_id: usize,
    /// `weights[t][s]`, with `weights[t].len() == t + 1`.
    pub weights: Vec<Vec<f64>>,
}

impl TurnAttentionSummary {
    pub fn from_records(dialog_id: usize, records: &[AttentionRecord], p: usize) -> Self {
        let turns = records.iter().map(|r| r.turn + 1).max().unwrap_or(0);
        let mut weights: Vec<Vec<f64>> = (0..turns).map(|t| vec![0.0; t + 1]).collect();
        for r in records {
            for (pos, &w) in r.weights.iter().enumerate() {
                let s = pos / p;
                let cell = &mut weights[r.turn][s];
                *cell = cell.max(w);
            }
        }
        Self { dialog_id, weights }
    }
}

/// Per-dialog turn-to-turn attention maxima. Needs a model with context
/// attention.
pub fn summarize_attention(
    ckpt: &Checkpoint,
    ds: &Dataset,
    workers: usize,
) -> Result<Vec<TurnAttentionSummary>> {
    if !ckpt.model.flags.caa {
        return Err(Error::Unsupported(format!(
            "attention analysis needs context attention; model is {}",
            ckpt.model.flags
        )));
    }
    check_vocab(ckpt, ds)?;
    let preds = predict(&ckpt.model, &ckpt.params, &ds.records, workers)?;
    Ok(summaries_from_predictions(&preds, ckpt.model.p))
}

pub fn summaries_from_predictions(
    preds: &[DialogPrediction],
    p: usize,
) -> Vec<TurnAttentionSummary> {
    preds
        .iter()
        .enumerate()
        .map(|(i, pr)| TurnAttentionSummary::from_records(i, &pr.records, p))
        .collect()
}

/// Element-wise mean over dialogs, for every `(t, s)` present in at least
/// one summary.
pub fn mean_summary(summaries: &[TurnAttentionSummary]) -> Vec<Vec<f64>> {
    let turns = summaries.iter().map(|s| s.weights.len()).max().unwrap_or(0);
    let mut sum: Vec<Vec<f64>> = (0..turns).map(|t| vec![0.0; t + 1]).collect();
    let mut count: Vec<Vec<usize>> = (0..turns).map(|t| vec![0; t + 1]).collect();
    for s in summaries {
        for (t, row) in s.weights.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                sum[t][j] += w;
                count[t][j] += 1;
            }
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(r, c)| {
            r.iter()
                .zip(c)
                .map(|(&w, &n)| if n > 0 { w / n as f64 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// `dialog_id,t,s,weight` rows for every dialog, then the mean matrix under
/// dialog id `mean`.
pub fn write_attention_csv(summaries: &[TurnAttentionSummary], path: &Path) -> Result<()> {
    let mut s = String::from("dialog_id,t,s,weight\n");
    for sum in summaries {
        for (t, row) in sum.weights.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                writeln!(s, "{},{t},{j},{w:.4}", sum.dialog_id).expect("write to string");
            }
        }
    }
    for (t, row) in mean_summary(summaries).iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            writeln!(s, "mean,{t},{j},{w:.4}").expect("write to string");
        }
    }
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, s)?;
    Ok(())
}

/// Attention on the referent turn of coreferent questions versus a uniform
/// spread over the `t + 1` turns seen so far.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundingStats {
    pub questions: usize,
    pub mean_gold_weight: f64,
    pub mean_uniform_baseline: f64,
}

pub fn coref_grounding(
    records: &[DialogRecord],
    summaries: &[TurnAttentionSummary],
) -> GroundingStats {
    let (mut n, mut gold, mut base) = (0usize, 0.0, 0.0);
    for (r, s) in records.iter().zip(summaries) {
        for (i, turn) in r.turns.iter().enumerate() {
            let t = i + 1;
            if let (Some(c), HistoryUse::Coreference) =
                (turn.coref_turn, turn.template_id.history())
            {
                n += 1;
                gold += s.weights[t][c];
                base += 1.0 / (t + 1) as f64;
            }
        }
    }
    let div = n.max(1) as f64;
    GroundingStats {
        questions: n,
        mean_gold_weight: gold / div,
        mean_uniform_baseline: base / div,
    }
}

/// Share of correctly answered attribute-lookup questions whose last read
/// step attends most to the referent object's cell.
pub fn seek_cell_grounding(
    records: &[DialogRecord],
    preds: &[DialogPrediction],
    answers: &[String],
) -> (usize, f64) {
    use TemplateId::*;
    let (mut n, mut hit) = (0usize, 0usize);
    for (r, p) in records.iter().zip(preds) {
        for (i, t) in r.turns.iter().enumerate() {
            if !matches!(t.template_id, SeekAttr | SeekAttrIt | SeekAttrPrev)
                || answers[p.answers[i]] != t.answer
            {
                continue;
            }
            let Some(obj) = t.referent_object else {
                continue;
            };
            n += 1;
            hit += usize::from(p.final_cell[i] == r.scene.cell_index(r.scene.objects[obj].cell));
        }
    }
    (n, if n > 0 { hit as f64 / n as f64 } else { 0.0 })
}
