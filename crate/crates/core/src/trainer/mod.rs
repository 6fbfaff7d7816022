//! Desk-scale two-step training: Adam with linear decay to zero, adaptive
//! gradient clipping, cross-entropy or distillation loss, seeded shuffling.

pub mod agc;
pub mod checkpoint;
pub mod loss;

use std::io::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use agc::agc_clip;
pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use loss::{cross_entropy, distill_loss, softmax};

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::nfgraph::network::{Grads, Moments, PathMode, Phase, Prepared, TrainState};
use crate::nfgraph::{ActKind, GraphSpec, Layer};

pub const DEFAULT_SEED: u64 = 2023;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    CrossEntropy,
    /// KL divergence to the softmax of a teacher loaded from a checkpoint.
    Distill { teacher: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub agc_lambda: f64,
    /// Leave the final dense layer out of gradient clipping.
    pub agc_exclude_head: bool,
    pub seed: u64,
    pub loss: LossKind,
    /// Replaces every block activation of the graph when set.
    pub activation: Option<ActKind>,
    /// Replaces the graph-wide residual exponent when set.
    pub alpha_exp: Option<i32>,
    /// Step-1 checkpoint a step-2 run starts from.
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint_out: Option<PathBuf>,
    /// Line-delimited JSON metrics, one record appended per epoch.
    pub metrics_log: Option<PathBuf>,
}

impl TrainConfig {
    /// Stage-one defaults (weight decay 5e-6, small-data clipping 0.001).
    pub fn step1() -> Self {
        Self {
            phase: Phase::Step1,
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 5e-6,
            agc_lambda: 0.001,
            agc_exclude_head: false,
            seed: DEFAULT_SEED,
            loss: LossKind::CrossEntropy,
            activation: None,
            alpha_exp: None,
            init_checkpoint: None,
            checkpoint_out: None,
            metrics_log: None,
        }
    }

    /// Stage-two defaults (no weight decay).
    pub fn step2() -> Self {
        Self {
            phase: Phase::Step2,
            weight_decay: 0.0,
            ..Self::step1()
        }
    }

    /// `warm_start` tells whether a step-1 state is available in-process;
    /// otherwise step 2 needs `init_checkpoint`.
    pub fn validate(&self, warm_start: bool) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if !(self.agc_lambda > 0.0) {
            return Err(Error::Config(format!("agc_lambda must be > 0, got {}", self.agc_lambda)));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be non-negative".into()));
        }
        if self.phase == Phase::Step2 && !warm_start && self.init_checkpoint.is_none() {
            return Err(Error::Config("phase step2 requires a step-1 checkpoint (init_checkpoint)".into()));
        }
        Ok(())
    }

    /// Graph with this config's activation/alpha overrides applied.
    pub fn apply_to(&self, spec: &GraphSpec) -> Result<GraphSpec> {
        let mut out = match self.activation {
            Some(kind) => spec.with_activation(kind),
            None => spec.clone(),
        };
        if let Some(a) = self.alpha_exp {
            out.alpha_exp = a;
            for l in &mut out.layers {
                if let Layer::BlockBegin { alpha_exp } = l {
                    *alpha_exp = None;
                }
            }
        }
        out.plan()?;
        Ok(out)
    }
}

/// Teacher network used by the distillation loss.
pub struct Teacher {
    state: TrainState,
    prepared: Prepared,
}

impl Teacher {
    pub fn new(state: TrainState) -> Result<Self> {
        let prepared = state.prepare(state.phase, PathMode::Exact)?;
        Ok(Self { state, prepared })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::new(load_checkpoint(path)?)
    }

    pub fn probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.prepared.forward(&self.state, x)?.logits))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
    pub clipped_rows: usize,
    pub lr: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_finite(values: &[f64], tensor: &str, step: u64) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: tensor.to_string(),
            step,
        });
    }
    Ok(())
}

/// Linear decay from `lr0` to zero over `total_steps`.
pub fn scheduled_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64).max(0.0)
}

/// One Adam update of every parameter. Weight decay (L2, added to the
/// gradient) applies to weight matrices only.
pub fn adam_update(state: &mut TrainState, grads: &Grads, lr: f64, weight_decay: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, mom), g) in state.params.iter_mut().zip(&mut state.moments).zip(&grads.tensors) {
        let wd = if p.kind.is_weight_matrix() { weight_decay } else { 0.0 };
        let Moments { m, v } = mom;
        for i in 0..p.values.len() {
            let gi = g[i] + wd * p.values[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.values[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

/// A mini-batch of images with labels and, for distillation, teacher
/// probabilities.
pub struct Batch {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    pub teacher_probs: Option<Vec<Vec<f64>>>,
}

/// Mean loss gradient of a batch on the latent parameters, with metrics.
pub fn batch_gradients(state: &TrainState, prep: &Prepared, batch: &Batch) -> Result<(Grads, StepMetrics)> {
    let mut grads = Grads::zeros_like(state);
    let mut metrics = StepMetrics::default();
    let n = batch.images.len();
    for (i, (x, &label)) in batch.images.iter().zip(&batch.labels).enumerate() {
        let trace = prep.forward(state, x)?;
        check_finite(&trace.logits, "logits", state.step)?;
        let (loss, g) = match &batch.teacher_probs {
            Some(t) => loss::distill_sample(&trace.logits, &t[i]),
            None => {
                if label as usize >= trace.logits.len() {
                    return Err(Error::Data(format!(
                        "label {label} out of range for {} classes",
                        trace.logits.len()
                    )));
                }
                cross_entropy(&trace.logits, label as usize)
            }
        };
        metrics.loss += loss;
        metrics.correct += (argmax(&trace.logits) == label as usize) as usize;
        let g: Vec<f64> = g.into_iter().map(|v| v / n as f64).collect();
        grads.add(&prep.backward(state, &trace, &g));
    }
    metrics.count = n;
    if n > 0 {
        metrics.loss /= n as f64;
    }
    Ok((prep.finish_grads(grads), metrics))
}

/// Forward, loss, backward, clipping and one Adam step on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    cfg: &TrainConfig,
    step_in_phase: u64,
    total_steps: u64,
) -> Result<StepMetrics> {
    let prep = state.prepare(cfg.phase, PathMode::Exact)?;
    let (mut grads, mut metrics) = batch_gradients(state, &prep, batch)?;
    if !metrics.loss.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss".into(),
            step: state.step,
        });
    }
    let head = prep.layout.head_weight;
    for (i, (p, g)) in state.params.iter().zip(&mut grads.tensors).enumerate() {
        check_finite(g, &format!("grad({})", p.name), state.step)?;
        if p.kind.is_weight_matrix() && !(cfg.agc_exclude_head && i == head) {
            metrics.clipped_rows += agc_clip(g, &p.values, p.rows, cfg.agc_lambda)?;
        }
    }
    let lr = scheduled_lr(cfg.lr, step_in_phase, total_steps);
    metrics.lr = lr;
    adam_update(state, &grads, lr, cfg.weight_decay);
    for p in &state.params {
        check_finite(&p.values, &p.name, state.step)?;
    }
    state.phase = cfg.phase;
    Ok(metrics)
}

/// Loss and accuracy of the exact network over a dataset.
pub fn evaluate(state: &TrainState, phase: Phase, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let prep = state.prepare(phase, PathMode::Exact)?;
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..data.len() {
        let logits = prep.forward(state, &data.image(i))?.logits;
        let label = data.labels[i] as usize;
        if label >= logits.len() {
            return Err(Error::Data(format!("label {label} out of range")));
        }
        loss += cross_entropy(&logits, label).0;
        correct += (argmax(&logits) == label) as usize;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Permutation of `0..n` for one epoch, a pure function of
/// (seed, phase, epoch).
pub fn epoch_order(n: usize, seed: u64, phase: Phase, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((phase.as_u8() as u64) << 32) | epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Metrics of one epoch; epoch 0 is the evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    pub lr: f64,
    pub clipped_rows: usize,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn last(&self, phase: Phase) -> Option<&EpochRecord> {
        self.phase(phase).last()
    }

    pub fn first(&self, phase: Phase) -> Option<&EpochRecord> {
        self.phase(phase).next()
    }

    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| r.to_json() + "\n").collect()
    }
}

fn append_log(path: &std::path::Path, rec: &EpochRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", rec.to_json()).map_err(|e| Error::io(path, e))
}

/// Train one phase for `cfg.epochs` epochs.
pub fn train_phase(state: &mut TrainState, data: &Split, cfg: &TrainConfig, teacher: Option<&Teacher>) -> Result<History> {
    cfg.validate(true)?;
    if data.train.shape != state.spec.input {
        return Err(Error::Data(format!(
            "data images are {}, graph input is {}",
            data.train.shape, state.spec.input
        )));
    }
    let n = data.train.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = batches_per_epoch * cfg.epochs as u64;
    let mut history = History::default();
    let log = |rec: EpochRecord, history: &mut History| -> Result<()> {
        if let Some(p) = &cfg.metrics_log {
            append_log(p, &rec)?;
        }
        history.records.push(rec);
        Ok(())
    };

    let (train_loss, train_acc) = evaluate(state, cfg.phase, &data.train)?;
    let (test_loss, test_acc) = evaluate(state, cfg.phase, &data.test)?;
    log(
        EpochRecord {
            phase: cfg.phase,
            epoch: 0,
            train_loss,
            train_acc,
            test_loss,
            test_acc,
            lr: cfg.lr,
            clipped_rows: 0,
        },
        &mut history,
    )?;

    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(n, cfg.seed, cfg.phase, epoch);
        let (mut loss_sum, mut correct, mut clipped, mut lr) = (0.0, 0, 0, cfg.lr);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Vec<f64>> = chunk.iter().map(|&i| data.train.image(i)).collect();
            let teacher_probs = match teacher {
                Some(t) => Some(images.iter().map(|x| t.probs(x)).collect::<Result<Vec<_>>>()?),
                None => None,
            };
            let batch = Batch {
                labels: chunk.iter().map(|&i| data.train.labels[i]).collect(),
                images,
                teacher_probs,
            };
            let m = train_step(state, &batch, cfg, step, total_steps)?;
            step += 1;
            loss_sum += m.loss * m.count as f64;
            correct += m.correct;
            clipped += m.clipped_rows;
            lr = m.lr;
        }
        let (test_loss, test_acc) = evaluate(state, cfg.phase, &data.test)?;
        log(
            EpochRecord {
                phase: cfg.phase,
                epoch,
                train_loss: loss_sum / n.max(1) as f64,
                train_acc: correct as f64 / n.max(1) as f64,
                test_loss,
                test_acc,
                lr,
                clipped_rows: clipped,
            },
            &mut history,
        )?;
    }
    state.phase = cfg.phase;
    Ok(history)
}

fn load_teacher(cfg: &TrainConfig) -> Result<Option<Teacher>> {
    match &cfg.loss {
        LossKind::CrossEntropy => Ok(None),
        LossKind::Distill { teacher } => Teacher::load(teacher).map(Some),
    }
}

/// Start step 2 from a step-1 state: parameters are restored, optimizer
/// moments and the step counter start fresh.
pub fn warm_start(step1: &TrainState, spec: &GraphSpec) -> Result<TrainState> {
    let mut state = checkpoint_from_bytes(&checkpoint_to_bytes(step1)?)?;
    state.check_against(spec)?;
    for m in &mut state.moments {
        *m = Moments::zeros(m.m.len());
    }
    state.step = 0;
    state.phase = Phase::Step2;
    Ok(state)
}

/// Stage 1 from scratch (binary activations, real weights), then stage 2
/// from its result (both binarized). Returns the final state and the
/// concatenated history.
pub fn run_two_step(spec: &GraphSpec, data: &Split, cfg1: &TrainConfig, cfg2: &TrainConfig) -> Result<(TrainState, History)> {
    if cfg1.phase != Phase::Step1 || cfg2.phase != Phase::Step2 {
        return Err(Error::Config("run_two_step needs a step1 and a step2 config".into()));
    }
    cfg1.validate(false)?;
    cfg2.validate(true)?;
    let spec1 = cfg1.apply_to(spec)?;
    let mut state = TrainState::init(&spec1, cfg1.seed)?;
    let mut history = train_phase(&mut state, data, cfg1, load_teacher(cfg1)?.as_ref())?;
    if let Some(p) = &cfg1.checkpoint_out {
        save_checkpoint(&state, p)?;
    }
    let mut state2 = match &cfg2.init_checkpoint {
        Some(p) if cfg1.checkpoint_out.as_ref() != Some(p) => warm_start(&load_checkpoint_for(p, &spec1)?, &spec1)?,
        _ => warm_start(&state, &spec1)?,
    };
    let h2 = train_phase(&mut state2, data, cfg2, load_teacher(cfg2)?.as_ref())?;
    history.records.extend(h2.records);
    if let Some(p) = &cfg2.checkpoint_out {
        save_checkpoint(&state2, p)?;
    }
    Ok((state2, history))
}
