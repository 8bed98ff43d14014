//! Adam training with gradient clipping, validation-based early stopping and
//! resumable checkpoints.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, ResumeState,
    RngState,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{run_dialog, run_single_turn};
use crate::eval::{predict, BreakdownReport};
use crate::model::{Flags, Lexicon, ModelConfig, ModelParams, Net};
use crate::scenegen::Dataset;
use crate::tensor::{Tape, Tensor, TensorError};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub d: usize,
    pub p: usize,
    /// Dialogs per step for models that carry state between turns.
    pub batch_dialogs: usize,
    /// Independent turns per step for the other models.
    pub batch_turns: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub flags: Flags,
    pub precision: Precision,
    pub max_concat_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 8.0,
            d: 64,
            p: 8,
            batch_dialogs: 12,
            batch_turns: 128,
            max_epochs: 25,
            early_stop_patience: 5,
            max_steps: None,
            seed: 0,
            flags: Flags::default(),
            precision: Precision::F32,
            max_concat_len: 96,
        }
    }
}

impl TrainConfig {
    /// Four reasoning steps instead of eight, sized for a single workstation.
    pub fn desk() -> Self {
        Self {
            p: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps <= 0.0
        {
            return bad("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.batch_dialogs == 0
            || self.batch_turns == 0
            || self.max_epochs == 0
            || self.early_stop_patience == 0
        {
            return bad("batch sizes, max_epochs and early_stop_patience must be positive");
        }
        if self.early_stop_patience > self.max_epochs {
            return bad("early_stop_patience must not exceed max_epochs");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        if self.precision != Precision::F32 {
            return bad("training runs in f32; f64 is only used by gradient checks");
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &Dataset) -> ModelConfig {
        let mut m = ModelConfig::new(&ds.header, self.flags).with_dims(self.d, self.p);
        m.max_concat_len = self.max_concat_len;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub steps: usize,
}

impl EpochMetrics {
    /// `epoch train_loss val_acc` on one line.
    pub fn log_line(&self) -> String {
        format!("{} {:.6} {:.6}", self.epoch, self.train_loss, self.val_acc)
    }

    pub fn parse_log_line(line: &str) -> Option<(usize, f64, f64)> {
        let mut it = line.split_whitespace();
        let e = it.next()?.parse().ok()?;
        let l = it.next()?.parse().ok()?;
        let a = it.next()?.parse().ok()?;
        it.next().is_none().then_some((e, l, a))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &[Tensor<f32>],
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = (cfg.learning_rate / c1) as f32;
        let (b1, b2, c2, eps) = (b1 as f32, b2 as f32, c2 as f32, cfg.adam_eps as f32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * *m / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Training progress that a checkpoint can restore exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: Adam,
    rng: ChaCha8Rng,
    lex: Lexicon,
    next_epoch: usize,
    best: Option<(ModelParams<f32>, usize, f64)>,
    since_best: usize,
    stopped: bool,
    pub metrics: Vec<EpochMetrics>,
}

const SHUFFLE_STREAM: u64 = 0x5eed_cafe;

/// One example within a step: a whole dialog, or one question turn.
#[derive(Debug, Clone, Copy)]
enum Item {
    Dialog(usize),
    Turn(usize, usize),
}

impl Trainer {
    pub fn new(train: &Dataset, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.records.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        let model = cfg.model_config(train);
        let params = ModelParams::init(&model, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            lex: Lexicon::new(&model),
            adam: Adam::new(&params),
            model,
            cfg,
            params,
            rng,
            next_epoch: 0,
            best: None,
            since_best: 0,
            stopped: false,
            metrics: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let r = ckpt
            .resume
            .as_ref()
            .ok_or_else(|| Error::Format("checkpoint carries no resume state".into()))?;
        ckpt.train.validate()?;
        Ok(Self {
            lex: Lexicon::new(&ckpt.model),
            model: ckpt.model.clone(),
            cfg: ckpt.train.clone(),
            params: r.params.clone(),
            adam: Adam {
                m: r.adam_m.clone(),
                v: r.adam_v.clone(),
                step: r.step,
            },
            rng: r.rng.restore(),
            next_epoch: r.next_epoch,
            best: ckpt.epoch.map(|e| (ckpt.params.clone(), e, ckpt.val_acc)),
            since_best: r.since_best,
            stopped: r.stopped,
            metrics: ckpt.metrics.clone(),
        })
    }

    /// Adopts the optimizer and stopping settings of `cfg` for the remaining
    /// epochs. The model shape, flags and seed must match the current run.
    pub fn reschedule(&mut self, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if (cfg.d, cfg.p, cfg.flags, cfg.seed, cfg.max_concat_len)
            != (
                self.cfg.d,
                self.cfg.p,
                self.cfg.flags,
                self.cfg.seed,
                self.cfg.max_concat_len,
            )
        {
            return Err(Error::Config(
                "resumed runs keep the checkpoint's dimensions, flags and seed".into(),
            ));
        }
        self.cfg = cfg.clone();
        Ok(())
    }

    pub fn finished(&self) -> bool {
        self.stopped || self.next_epoch >= self.cfg.max_epochs
    }

    fn steps_left(&self) -> Option<usize> {
        self.cfg
            .max_steps
            .map(|m| m.saturating_sub(self.adam.step as usize))
    }

    /// Mean loss and the logits-derived correct count of one step, after
    /// applying its update.
    fn step(&mut self, train: &Dataset, items: &[Item]) -> Result<(f64, usize, usize)> {
        let mut tape = Tape::<f32>::new();
        let mut net = Net::new(&mut tape, &self.model, &self.lex, &self.params, true);
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for &item in items {
            match item {
                Item::Dialog(i) => {
                    let r = &train.records[i];
                    let run = run_dialog(&mut net, r, None)?;
                    for (out, t) in run.questions.iter().zip(&r.turns) {
                        logits.push(out.logits);
                        targets.push(net.lex.answer(&t.answer)?);
                    }
                }
                Item::Turn(i, turn) => {
                    let r = &train.records[i];
                    let out = run_single_turn(&mut net, r, turn)?;
                    logits.push(out.logits);
                    targets.push(net.lex.answer(&r.turns[turn - 1].answer)?);
                }
            }
        }
        let all = net.tape.concat_rows(&logits)?;
        let correct = {
            let v = net.tape.value(all);
            let a = self.model.answers.len();
            targets
                .iter()
                .enumerate()
                .filter(|&(i, &t)| {
                    let row = &v.data()[i * a..(i + 1) * a];
                    (0..a).all(|j| row[j] < row[t] || (row[j] == row[t] && j >= t))
                })
                .count()
        };
        let loss = net.tape.cross_entropy(all, &targets)?;
        let loss_value = net.tape.value(loss).data()[0] as f64;
        let vars = net.w.vars().to_vec();
        let mut grads = tape.backward(loss)?;
        let mut g: Vec<Tensor<f32>> = vars
            .iter()
            .map(|&v| grads.take(v).expect("every parameter has a gradient"))
            .collect();
        clip_grad_norm(&mut g, self.cfg.clip_norm);
        if g.iter().any(|t| !t.is_all_finite()) {
            return Err(TensorError::NonFinite { op: "backward" }.into());
        }
        self.adam.update(&mut self.params, &g, &self.cfg);
        Ok((loss_value, correct, targets.len()))
    }

    fn epoch_items(&mut self, train: &Dataset) -> Vec<Vec<Item>> {
        if self.model.flags.carries_state() {
            let mut idx: Vec<usize> = (0..train.records.len()).collect();
            idx.shuffle(&mut self.rng);
            idx.chunks(self.cfg.batch_dialogs)
                .map(|c| c.iter().map(|&i| Item::Dialog(i)).collect())
                .collect()
        } else {
            let mut idx: Vec<(usize, usize)> = train
                .records
                .iter()
                .enumerate()
                .flat_map(|(i, r)| (1..=r.turns.len()).map(move |t| (i, t)))
                .collect();
            idx.shuffle(&mut self.rng);
            idx.chunks(self.cfg.batch_turns)
                .map(|c| c.iter().map(|&(i, t)| Item::Turn(i, t)).collect())
                .collect()
        }
    }

    /// Runs one epoch plus validation. Returns `None` once training is over.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<Option<EpochMetrics>> {
        if self.finished() {
            return Ok(None);
        }
        let epoch = self.next_epoch;
        let batches = self.epoch_items(train);
        let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
        for items in batches {
            if self.steps_left() == Some(0) {
                self.stopped = true;
                break;
            }
            let (l, c, n) = self.step(train, &items).map_err(|e| match e {
                Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged {
                    op,
                    epoch,
                    step: self.adam.step as usize,
                },
                e => e,
            })?;
            loss_sum += l * n as f64;
            correct += c;
            seen += n;
            steps += 1;
        }
        if self.steps_left() == Some(0) {
            self.stopped = true;
        }
        let val_acc = self.accuracy(val)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            val_acc,
            steps,
        };
        self.metrics.push(m.clone());
        self.next_epoch += 1;
        match &self.best {
            Some((_, _, best)) if val_acc <= *best => {
                self.since_best += 1;
                if self.since_best >= self.cfg.early_stop_patience {
                    self.stopped = true;
                }
            }
            _ => {
                self.best = Some((self.params.clone(), epoch, val_acc));
                self.since_best = 0;
            }
        }
        Ok(Some(m))
    }

    /// Accuracy of the current parameters on `ds`.
    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        Ok(self.report(ds)?.accuracy())
    }

    pub fn report(&self, ds: &Dataset) -> Result<BreakdownReport> {
        let preds = predict(&self.model, &self.params, &ds.records, 1)?;
        Ok(BreakdownReport::from_predictions(
            &ds.records,
            &preds,
            &self.model.answers,
        ))
    }

    /// Snapshot holding the best parameters so far plus everything needed to
    /// continue exactly where training stands.
    pub fn checkpoint(&self) -> Checkpoint {
        let (params, epoch, val_acc) = match &self.best {
            Some((p, e, a)) => (p.clone(), Some(*e), *a),
            None => (self.params.clone(), None, 0.0),
        };
        Checkpoint {
            model: self.model.clone(),
            train: self.cfg.clone(),
            params,
            epoch,
            val_acc,
            metrics: self.metrics.clone(),
            resume: Some(ResumeState {
                params: self.params.clone(),
                adam_m: self.adam.m.clone(),
                adam_v: self.adam.v.clone(),
                step: self.adam.step,
                rng: RngState::capture(&self.rng),
                next_epoch: self.next_epoch,
                since_best: self.since_best,
                stopped: self.stopped,
            }),
        }
    }

    /// Trains to completion, calling `on_epoch` after every epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        val: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<Checkpoint> {
        check_compatible(&self.model, train)?;
        check_compatible(&self.model, val)?;
        if val.records.is_empty() {
            return Err(Error::Config("empty validation set".into()));
        }
        while let Some(m) = self.run_epoch(train, val)? {
            on_epoch(self, &m)?;
        }
        Ok(self.checkpoint())
    }
}

fn check_compatible(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    if model.vocab != ds.header.vocab || model.answers != ds.header.answer_vocab {
        return Err(Error::VocabMismatch {
            checkpoint: model.vocab_hash(),
            dataset: crate::model::vocab_hash(&ds.header.vocab, &ds.header.answer_vocab),
        });
    }
    if model.grid != ds.header.cfg.scene.grid {
        return Err(Error::Config(format!(
            "dataset grid {:?} differs from model grid {:?}",
            ds.header.cfg.scene.grid, model.grid
        )));
    }
    Ok(())
}

/// Trains a fresh model and returns the best-validation checkpoint.
pub fn train(train: &Dataset, val: &Dataset, cfg: TrainConfig) -> Result<Checkpoint> {
    Trainer::new(train, cfg)?.run(train, val, |_, _| Ok(()))
}

/// Continues a run from a checkpoint written mid-training.
pub fn resume(ckpt: &Checkpoint, train: &Dataset, val: &Dataset) -> Result<Checkpoint> {
    Trainer::from_checkpoint(ckpt)?.run(train, val, |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_dataset, GenConfig};

    fn data(n: usize, seed: u64) -> Dataset {
        generate_dataset(&GenConfig::default(), seed, n, 1).unwrap()
    }

    fn small(flags: Flags) -> TrainConfig {
        TrainConfig {
            d: 16,
            p: 2,
            batch_dialogs: 4,
            batch_turns: 16,
            max_epochs: 3,
            early_stop_patience: 3,
            flags,
            seed: 7,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_dialog_one_epoch_is_finite() {
        let ds = data(1, 1);
        let cfg = TrainConfig {
            max_epochs: 1,
            early_stop_patience: 1,
            ..small(Flags::new(false, true, true))
        };
        let ck = train(&ds, &ds, cfg).unwrap();
        assert_eq!(ck.metrics.len(), 1);
        assert!(ck.metrics[0].train_loss.is_finite());
    }

    #[test]
    fn identical_runs_give_identical_logs() {
        let (tr, va) = (data(12, 2), data(4, 3));
        for flags in [Flags::default(), Flags::new(false, true, true)] {
            let a = train(&tr, &va, small(flags)).unwrap();
            let b = train(&tr, &va, small(flags)).unwrap();
            assert_eq!(a.metrics, b.metrics);
            assert_eq!(a.params, b.params);
        }
    }

    #[test]
    fn first_batch_loss_is_near_uniform() {
        let ds = data(24, 4);
        for flags in [
            Flags::default(),
            Flags::new(false, true, true),
            Flags::new(true, false, false),
        ] {
            let cfg = TrainConfig {
                flags,
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(&ds, cfg).unwrap();
            let batch = t.epoch_items(&ds).remove(0);
            let (loss, _, _) = t.step(&ds, &batch).unwrap();
            let uniform = (ds.header.answer_vocab.len() as f64).ln();
            assert!(
                (loss - uniform).abs() <= 0.1 * uniform,
                "{flags}: {loss} vs {uniform}"
            );
        }
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![Tensor::from_f64(&[2], &[30.0, 40.0]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 8.0), 50.0);
        let n = g[0].sq_norm().sqrt();
        assert!((n - 8.0).abs() < 1e-5);
        let mut small = vec![Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()];
        clip_grad_norm(&mut small, 8.0);
        assert_eq!(small[0].data(), &[3.0, 4.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let ds = data(1, 5);
        let cfg = small(Flags::default());
        let model = cfg.model_config(&ds);
        let mut p = ModelParams::<f32>::init(&model, 0).unwrap();
        let before = p.clone();
        let grads: Vec<Tensor<f32>> = p
            .tensors()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.5))
            .collect();
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &grads, &cfg);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) as f64 - cfg.learning_rate).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn early_stopping_keeps_the_best_epoch() {
        let (tr, va) = (data(16, 6), data(6, 7));
        let cfg = TrainConfig {
            max_epochs: 6,
            early_stop_patience: 2,
            learning_rate: 5e-3,
            ..small(Flags::new(false, true, false))
        };
        let ck = train(&tr, &va, cfg).unwrap();
        let best = ck
            .metrics
            .iter()
            .map(|m| m.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(ck.val_acc, best);
        let e = ck.epoch.unwrap();
        assert_eq!(ck.metrics[e].val_acc, best);
        assert!(ck.metrics[..e].iter().all(|m| m.val_acc < best));
        let last = ck.metrics.len() - 1;
        assert!(last == 5 || last - e >= 2);
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let ds = data(20, 8);
        let cfg = TrainConfig {
            max_steps: Some(3),
            ..small(Flags::new(false, false, true))
        };
        let ck = train(&ds, &ds, cfg).unwrap();
        assert_eq!(ck.resume.as_ref().unwrap().step, 3);
        assert_eq!(ck.metrics.len(), 1);
        assert_eq!(ck.metrics[0].steps, 3);
    }

    #[test]
    fn metrics_lines_parse_back() {
        let m = EpochMetrics {
            epoch: 3,
            train_loss: 1.25,
            train_acc: 0.5,
            val_acc: 0.75,
            steps: 10,
        };
        assert_eq!(
            EpochMetrics::parse_log_line(&m.log_line()),
            Some((3, 1.25, 0.75))
        );
        assert_eq!(EpochMetrics::parse_log_line("3 x 0.1"), None);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            early_stop_patience: 30,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let f64_train = TrainConfig {
            precision: Precision::F64,
            ..TrainConfig::default()
        };
        assert!(f64_train.validate().is_err());
    }
}
