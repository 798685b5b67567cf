//! Adam optimization, learning-rate schedules with warmup, the training
//! loop with divergence detection, and run checkpointing.

use crate::checkpoint::{write_checkpoint, TensorRecord};
use crate::data::BatchSource;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kv;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Real;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

/// Loss exceeding this multiple of the step-0 loss counts as an overshoot.
pub const DIVERGENCE_LOSS_FACTOR: f64 = 10.0;
/// Consecutive overshoot steps that terminate a run as diverged.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecayStyle {
    Linear,
    Cosine,
}

impl fmt::Display for DecayStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayStyle::Linear => "linear",
            DecayStyle::Cosine => "cosine",
        })
    }
}

impl FromStr for DecayStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DecayStyle::Linear),
            "cosine" => Ok(DecayStyle::Cosine),
            other => Err(Error::config(format!(
                "unknown lr-decay-style `{other}`; valid: linear, cosine"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub decay_style: DecayStyle,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 0.0,
            decay_style: DecayStyle::Cosine,
            warmup_fraction: 0.01,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("steps must be >= 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch-size must be >= 1"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::config(format!(
                "learning-rate must be positive and finite, got {}",
                self.lr
            )));
        }
        if !self.min_lr.is_finite() || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::config(
                "min-learning-rate must satisfy 0 <= min_lr <= lr",
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("lr-warmup-fraction must lie in [0, 1)"));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::config("weight-decay must be >= 0"));
        }
        if let Some(c) = self.grad_clip {
            if !c.is_finite() || c <= 0.0 {
                return Err(Error::config("grad-clip must be positive when set"));
            }
        }
        if self.log_every < 1 {
            return Err(Error::config("log-every must be >= 1"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_fraction * self.steps as f64).round() as usize
    }
}

/// Learning rate at a step: linear warmup to `lr` over
/// `round(warmup_fraction * steps)` steps, then linear or cosine decay to
/// `min_lr`, reached exactly at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.steps {
        return Err(Error::contract(format!(
            "step {step} lies beyond the schedule horizon {}",
            cfg.steps
        )));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.lr * step as f64 / warmup as f64);
    }
    let denom = cfg.steps - warmup;
    let progress = if denom == 0 {
        1.0
    } else {
        (step - warmup) as f64 / denom as f64
    };
    Ok(match cfg.decay_style {
        DecayStyle::Linear => cfg.lr + (cfg.min_lr - cfg.lr) * progress,
        DecayStyle::Cosine => {
            cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    })
}

/// exp(mean per-token loss).
pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

/// Per-parameter Adam moments plus the completed-step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: usize,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let m = params
            .entries()
            .iter()
            .map(|e| vec![T::zero(); e.tensor.numel()])
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimizerState { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update with decoupled weight decay
/// (`theta <- theta - lr * wd * theta` before the Adam delta).
/// Non-finite gradients abort with a divergence error carrying the step.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr_t: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if lr_t < 0.0 || !lr_t.is_finite() {
        return Err(Error::contract(format!("lr must be finite and >= 0, got {lr_t}")));
    }
    let t = state.step + 1;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one_minus_b1 = T::from_f64(1.0 - cfg.adam_beta1);
    let one_minus_b2 = T::from_f64(1.0 - cfg.adam_beta2);
    let eps = T::from_f64(cfg.adam_eps);
    let lr = T::from_f64(lr_t);
    let bc1 = T::from_f64(1.0 - cfg.adam_beta1.powi(t as i32));
    let bc2 = T::from_f64(1.0 - cfg.adam_beta2.powi(t as i32));
    let decay = T::from_f64(1.0 - lr_t * cfg.weight_decay);

    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if let Some(g) = &entry.tensor.grad {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: state.step,
                    reason: format!("non-finite gradient in `{}`", entry.name),
                });
            }
        }
        let n = entry.tensor.numel();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let (theta, grad) = entry.tensor.data_and_grad();
        for j in 0..n {
            let gj = grad.map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + one_minus_b1 * gj;
            v[j] = b2 * v[j] + one_minus_b2 * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            theta[j] = theta[j] * decay - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step = t;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

impl RunStatus {
    pub fn diverged(&self) -> bool {
        matches!(self, RunStatus::Diverged { .. })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub status: RunStatus,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_done: usize,
}

/// Where a run writes its artifacts. A null sink trains in memory only.
pub struct RunSink {
    metrics: Option<std::io::BufWriter<std::fs::File>>,
    metrics_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub config_block: String,
    started: Instant,
}

impl RunSink {
    pub fn null() -> Self {
        RunSink {
            metrics: None,
            metrics_path: None,
            checkpoint_dir: None,
            config_block: String::new(),
            started: Instant::now(),
        }
    }

    /// Metrics CSV plus checkpoints under `dir`, which is created if needed.
    pub fn into_dir(dir: impl Into<PathBuf>, config_block: impl Into<String>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let metrics_path = dir.join("metrics.csv");
        let mut file = std::io::BufWriter::new(
            std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
        );
        writeln!(file, "step,lr,loss,ppl,grad_norm_global,elapsed_s")
            .map_err(|e| Error::io(&metrics_path, e))?;
        file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        Ok(RunSink {
            metrics: Some(file),
            metrics_path: Some(metrics_path),
            checkpoint_dir: Some(dir),
            config_block: config_block.into(),
            started: Instant::now(),
        })
    }

    fn emit(&mut self, step: usize, lr: f64, loss: f64, grad_norm: f64) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            let elapsed = self.started.elapsed().as_secs_f64();
            let path = self.metrics_path.clone().unwrap_or_default();
            writeln!(
                w,
                "{step},{lr},{loss},{},{grad_norm},{elapsed:.3}",
                perplexity(loss)
            )
            .map_err(|e| Error::io(&path, e))?;
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// State carried across a checkpoint boundary so a resumed run is bitwise
/// identical to an uninterrupted one.
#[derive(Debug, Clone)]
pub struct ResumeState<T: Real> {
    pub opt: OptimizerState<T>,
    pub next_step: usize,
    pub initial_loss: f64,
    pub overshoot_streak: usize,
}

/// Runs the training loop: forward, loss, backward, optional global-norm
/// clip, Adam with the scheduled rate. Divergence (non-finite loss, or loss
/// above 10x the step-0 loss for 50 consecutive steps) terminates the run
/// with a status rather than an error.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    source: &dyn BatchSource,
    cfg: &TrainConfig,
    sink: &mut RunSink,
    resume: Option<ResumeState<T>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    let (mut opt, start_step, mut initial_loss, mut streak) = match resume {
        Some(r) => (r.opt, r.next_step, Some(r.initial_loss), r.overshoot_streak),
        None => (OptimizerState::new(&model.params), 0, None, 0),
    };
    if start_step >= cfg.steps {
        return Err(Error::config(format!(
            "resume step {start_step} is not below the configured steps {}",
            cfg.steps
        )));
    }

    let mut last_loss = f64::NAN;
    let mut steps_done = start_step;
    let mut status = RunStatus::Completed;

    for step in start_step..cfg.steps {
        model.params.mark_training_started();
        let batch = source.batch_at(step)?;
        let mut graph = Graph::new();
        let step_result: Result<(f64, f64)> = (|| {
            let (trace, loss_var) =
                model.forward_loss(&mut graph, &batch.input_ids, &batch.targets, batch.batch)?;
            let loss = graph.scalar(loss_var)?.as_f64();
            model.params.zero_grads();
            graph.backward_and_release(loss_var)?;
            model.params.accumulate_grads(&graph, &trace.bound)?;
            Ok((loss, model.params.grad_global_norm()))
        })();
        let (loss, grad_norm) = match step_result {
            Ok(v) => v,
            Err(Error::NonFinite { op }) => {
                status = RunStatus::Diverged {
                    step,
                    reason: format!("non-finite value in {op}"),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        last_loss = loss;
        let init = *initial_loss.get_or_insert(loss);

        if !loss.is_finite() {
            status = RunStatus::Diverged {
                step,
                reason: "non-finite loss".into(),
            };
            break;
        }
        if loss > DIVERGENCE_LOSS_FACTOR * init {
            streak += 1;
        } else {
            streak = 0;
        }
        let lr_t = lr_at(step, cfg)?;
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            sink.emit(step, lr_t, loss, grad_norm)?;
        }
        if streak >= DIVERGENCE_PATIENCE {
            status = RunStatus::Diverged {
                step,
                reason: format!(
                    "loss above {DIVERGENCE_LOSS_FACTOR}x the initial loss for {DIVERGENCE_PATIENCE} consecutive steps"
                ),
            };
            break;
        }

        if let Some(clip) = cfg.grad_clip {
            if grad_norm > clip {
                model.params.scale_grads(clip / grad_norm);
            }
        }
        match adam_step(&mut model.params, &mut opt, lr_t, cfg) {
            Ok(()) => {}
            Err(Error::Divergence { step: s, reason }) => {
                status = RunStatus::Diverged { step: s, reason };
                break;
            }
            Err(e) => return Err(e),
        }
        steps_done = step + 1;

        if cfg.checkpoint_every > 0 && steps_done % cfg.checkpoint_every == 0 {
            if let Some(dir) = sink.checkpoint_dir.clone() {
                let path = dir.join(format!("ckpt-step-{steps_done:06}.fln"));
                save_run_checkpoint(
                    &path,
                    &sink.config_block,
                    model,
                    &opt,
                    &CheckpointMeta {
                        next_step: steps_done,
                        initial_loss: Some(init),
                        overshoot_streak: streak,
                    },
                )?;
            }
        }
    }

    if !status.diverged() {
        if let Some(dir) = sink.checkpoint_dir.clone() {
            let path = dir.join("ckpt-final.fln");
            save_run_checkpoint(
                &path,
                &sink.config_block,
                model,
                &opt,
                &CheckpointMeta {
                    next_step: steps_done,
                    initial_loss,
                    overshoot_streak: streak,
                },
            )?;
        }
    }

    Ok(TrainOutcome {
        status,
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_loss: last_loss,
        steps_done,
    })
}

/// Training-state metadata stored in a checkpoint's config block.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub next_step: usize,
    pub initial_loss: Option<f64>,
    pub overshoot_streak: usize,
}

impl CheckpointMeta {
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut pairs = vec![
            ("state.next-step".to_string(), self.next_step.to_string()),
            (
                "state.overshoot-streak".to_string(),
                self.overshoot_streak.to_string(),
            ),
        ];
        if let Some(l) = self.initial_loss {
            // Bit-exact round trip via the raw representation.
            pairs.push((
                "state.initial-loss-bits".to_string(),
                format!("{:016x}", l.to_bits()),
            ));
        }
        pairs
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let next_step = kv::get(pairs, "state.next-step")
            .ok_or_else(|| Error::config("checkpoint lacks state.next-step"))?
            .parse::<usize>()
            .map_err(|e| Error::config(format!("state.next-step: {e}")))?;
        let overshoot_streak = kv::get(pairs, "state.overshoot-streak")
            .unwrap_or("0")
            .parse::<usize>()
            .map_err(|e| Error::config(format!("state.overshoot-streak: {e}")))?;
        let initial_loss = match kv::get(pairs, "state.initial-loss-bits") {
            Some(hex) => Some(f64::from_bits(
                u64::from_str_radix(hex, 16)
                    .map_err(|e| Error::config(format!("state.initial-loss-bits: {e}")))?,
            )),
            None => None,
        };
        Ok(CheckpointMeta {
            next_step,
            initial_loss,
            overshoot_streak,
        })
    }
}

/// Writes model parameters, optimizer moments, and training state.
pub fn save_run_checkpoint<T: Real>(
    path: impl AsRef<Path>,
    config_block: &str,
    model: &Model<T>,
    opt: &OptimizerState<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut block = config_block.trim_end().to_string();
    if !block.is_empty() {
        block.push('\n');
    }
    block.push_str(&kv::format_kv(&meta.to_kv()));

    let mut records = Vec::with_capacity(model.params.len() * 3);
    for e in model.params.entries() {
        records.push(TensorRecord::from_tensor(e.name.clone(), &e.tensor));
    }
    for (i, e) in model.params.entries().iter().enumerate() {
        let m = crate::tensor::Tensor::from_vec(e.tensor.shape().to_vec(), opt.m[i].clone())?;
        records.push(TensorRecord::from_tensor(format!("opt.m.{}", e.name), &m));
        let v = crate::tensor::Tensor::from_vec(e.tensor.shape().to_vec(), opt.v[i].clone())?;
        records.push(TensorRecord::from_tensor(format!("opt.v.{}", e.name), &v));
    }
    write_checkpoint(path, &block, &records)
}

/// Loads parameters and optimizer moments saved by [`save_run_checkpoint`]
/// into a freshly built model. The model's config must match the records'
/// shapes; names missing from the checkpoint are an error.
pub fn load_run_state<T: Real>(
    model: &mut Model<T>,
    records: &[TensorRecord],
    meta: &CheckpointMeta,
) -> Result<(OptimizerState<T>, ResumeState<T>)> {
    let mut opt = OptimizerState::new(&model.params);
    opt.step = meta.next_step;
    let find = |name: &str| -> Result<&TensorRecord> {
        records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::config(format!("checkpoint lacks tensor `{name}`")))
    };
    for (i, entry) in model.params.entries_mut().iter_mut().enumerate() {
        let rec = find(&entry.name)?;
        let t: crate::tensor::Tensor<T> = rec.to_tensor()?;
        if t.shape() != entry.tensor.shape() {
            return Err(Error::config(format!(
                "checkpoint tensor `{}` has shape {:?}, model expects {:?}",
                entry.name,
                t.shape(),
                entry.tensor.shape()
            )));
        }
        entry.tensor = t.requires_grad(true);
        opt.m[i] = find(&format!("opt.m.{}", entry.name))?.to_tensor::<T>()?.data().to_vec();
        opt.v[i] = find(&format!("opt.v.{}", entry.name))?.to_tensor::<T>()?.data().to_vec();
    }
    let resume = ResumeState {
        opt: opt.clone(),
        next_step: meta.next_step,
        initial_loss: meta.initial_loss.unwrap_or(f64::NAN),
        overshoot_streak: meta.overshoot_streak,
    };
    Ok((opt, resume))
}
