//! Quantization-aware training: AdamW, global-norm clipping, linear lr decay,
//! step logs, variant comparison and learning-rate sweeps.

mod eval;
mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use eval::{evaluate_scene, evaluate_windows, ModelPredictor, OraclePredictor, Predictor};
pub use optim::{linear_decay_lr, AdamW};

use crate::autodiff::{Gradients, Tape};
use crate::bitlinear::{BitLinearConfig, QuantMode};
use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::model::{build_model, teacher_forcing_pair, ModelConfig, Seq2SeqModel};
use crate::scalar::Scalar;
use crate::tokenizer::{serialize_window, BpeVocab};

/// One tokenized window: encoder prompt ids and answer ids (no EOS).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn from_window(w: &TrajectoryWindow, vocab: &BpeVocab, precision: usize) -> Self {
        let t = serialize_window(w, precision);
        Self {
            src: vocab.encode(&t.prompt),
            answer: vocab.encode(&t.answer),
        }
    }
}

pub fn build_examples(windows: &[TrajectoryWindow], vocab: &BpeVocab, precision: usize) -> Vec<Example> {
    windows.iter().map(|w| Example::from_window(w, vocab, precision)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Stops early after this many optimizer steps; the lr schedule is laid
    /// out over the capped total.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 8,
            batch_size: 128,
            grad_clip_norm: 1.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad(format!("grad_clip_norm must be > 0, got {}", self.grad_clip_norm));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps must be > 0 and weight_decay >= 0".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        let full = self.epochs * n_examples.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Trailing moving average over `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        moving_average(&self.losses(), window)
    }

    pub fn smoothed_final_loss(&self, window: usize) -> f64 {
        self.smoothed(window).last().copied().unwrap_or(f64::NAN)
    }

    /// First step at which the smoothed loss drops below `fraction` of the
    /// initial loss; `None` if it never does.
    pub fn plateau_steps(&self, window: usize, fraction: f64) -> Option<usize> {
        let first = self.steps.first()?.loss;
        self.smoothed(window).iter().position(|&l| l < fraction * first)
    }

    /// Columns `step,epoch,loss,grad_norm,lr`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,grad_norm,lr\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.loss, r.grad_norm, r.lr);
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_loss\n");
        for r in &self.epochs {
            let eval = r.eval_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, eval);
        }
        s
    }
}

pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= window {
            sum -= xs[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Stacks a batch into encoder inputs, decoder inputs and flat targets.
fn collate<'a>(batch: &[&'a Example]) -> (Vec<&'a [usize]>, Vec<Vec<usize>>, Vec<usize>) {
    let srcs = batch.iter().map(|e| e.src.as_slice()).collect();
    let mut tgt_in = Vec::with_capacity(batch.len());
    let mut targets = Vec::new();
    for e in batch {
        let (i, t) = teacher_forcing_pair(&e.answer);
        tgt_in.push(i);
        targets.extend(t);
    }
    (srcs, tgt_in, targets)
}

/// Mean answer-token cross-entropy of a batch and its parameter gradients.
pub fn batch_gradients<T: Scalar>(model: &Seq2SeqModel<T>, batch: &[&Example]) -> Result<(f64, Gradients<T>)> {
    let (srcs, tgt_in, targets) = collate(batch);
    let tgt: Vec<&[usize]> = tgt_in.iter().map(|v| v.as_slice()).collect();
    let mut tape = Tape::with_params(&model.params);
    let logits = model.forward(&mut tape, &srcs, &tgt)?;
    let loss = tape.cross_entropy(logits, &targets)?;
    let value = tape.value(loss).data()[0].as_f64();
    tape.backward(loss);
    Ok((value, tape.param_grads()))
}

/// Teacher-forced loss over `data` in chunks of `batch_size`, weighted by
/// answer-token count.
pub fn evaluate_loss<T: Scalar>(model: &Seq2SeqModel<T>, data: &[Example], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let (srcs, tgt_in, targets) = collate(&batch);
        let tgt: Vec<&[usize]> = tgt_in.iter().map(|v| v.as_slice()).collect();
        total += model.loss(&srcs, &tgt, &targets)? * targets.len() as f64;
        tokens += targets.len();
    }
    Ok(total / tokens.max(1) as f64)
}

fn non_finite_layer<T: Scalar>(model: &Seq2SeqModel<T>, grads: Option<&Gradients<T>>) -> String {
    if let Some(name) = model.params.first_non_finite() {
        return name.to_string();
    }
    if let Some(g) = grads {
        for (id, p) in model.params.iter() {
            if g.get(id).is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return format!("{} (gradient)", p.name);
            }
        }
    }
    "loss".into()
}

/// Trains in place. Each epoch visits `data` in a seeded shuffled order;
/// gradients are clipped to `grad_clip_norm` before every AdamW update.
/// A non-finite loss or update aborts with the step, lr and first
/// offending parameter.
pub fn train<T: Scalar>(model: &mut Seq2SeqModel<T>, data: &[Example], eval: &[Example], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("no training examples".into()));
    }
    let total = cfg.total_steps(data.len());
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'epochs;
            }
            let lr = linear_decay_lr(cfg.lr, step, total);
            let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
            let (loss, mut grads) = batch_gradients(model, &batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    lr,
                    layer: non_finite_layer(model, Some(&grads)),
                });
            }
            let grad_norm = grads.clip_global_norm(cfg.grad_clip_norm);
            opt.step(&mut model.params, &grads, lr);
            if model.params.first_non_finite().is_some() {
                return Err(Error::NonFinite {
                    step,
                    lr,
                    layer: non_finite_layer(model, None),
                });
            }
            log.steps.push(StepRecord {
                step,
                epoch,
                loss,
                grad_norm,
                lr,
            });
            epoch_loss += loss;
            epoch_steps += 1;
            step += 1;
        }
        finish_epoch(model, eval, cfg, &mut log, epoch, epoch_loss, epoch_steps)?;
    }
    if log.epochs.last().map(|e| e.epoch) != log.steps.last().map(|s| s.epoch) {
        // Stopped by max_steps partway through an epoch.
        let last = log.steps.last().expect("at least one step").epoch;
        let (sum, n) = log
            .steps
            .iter()
            .filter(|s| s.epoch == last)
            .fold((0.0, 0), |(a, n), s| (a + s.loss, n + 1));
        finish_epoch(model, eval, cfg, &mut log, last, sum, n)?;
    }
    Ok(log)
}

fn finish_epoch<T: Scalar>(
    model: &Seq2SeqModel<T>,
    eval: &[Example],
    cfg: &TrainConfig,
    log: &mut TrainLog,
    epoch: usize,
    loss_sum: f64,
    steps: usize,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    let eval_loss = if eval.is_empty() {
        None
    } else {
        Some(evaluate_loss(model, eval, cfg.batch_size)?)
    };
    log.epochs.push(EpochRecord {
        epoch,
        train_loss: loss_sum / steps as f64,
        eval_loss,
    });
    Ok(())
}

/// Trains one fresh model per mode from the same initialization seed and
/// data order.
pub fn compare_variants<T: Scalar>(
    model_config: &ModelConfig,
    bit: BitLinearConfig,
    data: &[Example],
    cfg: &TrainConfig,
    modes: &[QuantMode],
) -> Result<Vec<(QuantMode, TrainLog)>> {
    modes
        .iter()
        .map(|&mode| {
            let mut model = build_model::<T>(*model_config, mode, bit, cfg.seed)?;
            Ok((mode, train(&mut model, data, &[], cfg)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: QuantMode,
    pub lr: f64,
    pub seed: u64,
    pub diverged: bool,
    pub steps_completed: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Present when the run aborted on a non-finite value.
    pub error: Option<String>,
}

/// A run diverges when it aborts on NaN/inf or any step loss exceeds ten
/// times the first one.
pub fn is_divergent(log: &TrainLog) -> bool {
    let Some(first) = log.steps.first().map(|s| s.loss) else {
        return false;
    };
    log.steps.iter().any(|s| !s.loss.is_finite() || s.loss > 10.0 * first)
}

/// Every `(mode, lr, seed)` combination, in that nesting order.
pub fn lr_sweep<T: Scalar>(
    model_config: &ModelConfig,
    bit: BitLinearConfig,
    data: &[Example],
    base: &TrainConfig,
    lrs: &[f64],
    modes: &[QuantMode],
    seeds: &[u64],
    smoothing: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(lrs.len() * modes.len() * seeds.len());
    for &mode in modes {
        for &lr in lrs {
            for &seed in seeds {
                let cfg = TrainConfig { lr, seed, ..base.clone() };
                let mut model = build_model::<T>(*model_config, mode, bit, seed)?;
                let row = match train(&mut model, data, &[], &cfg) {
                    Ok(log) => SweepRow {
                        mode,
                        lr,
                        seed,
                        diverged: is_divergent(&log),
                        steps_completed: log.steps.len(),
                        initial_loss: log.steps.first().map_or(f64::NAN, |s| s.loss),
                        final_loss: log.smoothed_final_loss(smoothing),
                        error: None,
                    },
                    Err(e @ Error::NonFinite { .. }) => SweepRow {
                        mode,
                        lr,
                        seed,
                        diverged: true,
                        steps_completed: match &e {
                            Error::NonFinite { step, .. } => *step,
                            _ => 0,
                        },
                        initial_loss: f64::NAN,
                        final_loss: f64::NAN,
                        error: Some(e.to_string()),
                    },
                    Err(e) => return Err(e),
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Columns `mode,lr,seed,diverged,steps,initial_loss,final_loss`.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("mode,lr,seed,diverged,steps,initial_loss,final_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{:.6},{:.6}",
            r.mode.name(),
            r.lr,
            r.seed,
            r.diverged,
            r.steps_completed,
            r.initial_loss,
            r.final_loss
        );
    }
    s
}
