//! Optimizers, learning-rate schedule, loss-spike counting and the training
//! loop.

mod data;
mod optim;

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use data::{tokens, Corpus};
pub use optim::{trust_ratio, Optimizer, OptimizerConfig, OptimizerKind};

use crate::model::{Model, ModelConfig, ModelError, ModelParams};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("gradient of tensor {tensor} is not finite")]
    NonFiniteGradient { tensor: usize },
    #[error("non-finite {quantity} at step {step}")]
    NonFinite {
        step: usize,
        quantity: &'static str,
        /// Metrics recorded before the failing step.
        metrics: Box<RunMetrics>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of `total_steps` spent in linear warmup.
    pub warmup_frac: f64,
    pub total_steps: usize,
    /// Run only the first `stop_after` steps of the schedule.
    pub stop_after: Option<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub dtype: DType,
    /// Rescale the gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub eval_every: usize,
    pub eval_sequences: usize,
    pub spike_window: usize,
    pub spike_jump: f64,
    /// Worker threads for per-sequence gradients; results are reduced in
    /// batch order, so the count does not affect the numbers.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adamw,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_frac: 0.05,
            total_steps: 2000,
            stop_after: None,
            batch_size: 16,
            seq_len: 128,
            seed: 0,
            dtype: DType::F32,
            grad_clip: None,
            eval_every: 100,
            eval_sequences: 16,
            spike_window: 50,
            spike_jump: 0.5,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            force_unit_trust: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        self.optimizer_config().validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1), got {}", self.warmup_frac));
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_sequences == 0 {
            return bad("total_steps, batch_size, eval_every and eval_sequences must be positive".into());
        }
        if self.seq_len < 2 {
            return bad(format!("seq_len must be at least 2, got {}", self.seq_len));
        }
        if self.spike_window < 3 {
            return bad(format!("spike_window must be at least 3, got {}", self.spike_window));
        }
        if self.threads == 0 {
            return bad("threads must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// Steps this run executes.
    pub fn steps_to_run(&self) -> usize {
        self.stop_after.map_or(self.total_steps, |s| s.min(self.total_steps))
    }
}

/// Linear warmup to `peak_lr` over `round(warmup_frac * total)` steps, then
/// cosine decay reaching zero at `total`. Steps past `total` get zero.
pub fn cosine_schedule(step: usize, total: usize, warmup_frac: f64, peak_lr: f64) -> f64 {
    if step >= total {
        return 0.0;
    }
    let warmup = (warmup_frac * total as f64).round() as usize;
    if step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}

fn median(window: &[f64]) -> f64 {
    let mut w = window.to_vec();
    w.sort_by(f64::total_cmp);
    let n = w.len();
    if n % 2 == 1 {
        w[n / 2]
    } else {
        0.5 * (w[n / 2 - 1] + w[n / 2])
    }
}

/// Steps whose loss exceeds the median of the preceding `window` losses by
/// more than `jump`.
pub fn spike_count(losses: &[f64], window: usize, jump: f64) -> Result<usize> {
    if window < 3 {
        return Err(TrainError::Config(format!("spike window must be at least 3, got {window}")));
    }
    Ok((window..losses.len())
        .filter(|&i| losses[i] > median(&losses[i - window..i]) + jump)
        .count())
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub eval_loss: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str = "step,loss,grad_norm,lr,eval_loss";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let eval = self.eval_loss.map(|e| e.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.loss, self.grad_norm, self.lr, eval)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: Vec<StepRecord>,
    pub spike_window: usize,
    pub spike_jump: f64,
    pub spike_count: usize,
}

impl RunMetrics {
    fn new(config: &TrainConfig) -> Self {
        Self {
            steps: Vec::new(),
            spike_window: config.spike_window,
            spike_jump: config.spike_jump,
            spike_count: 0,
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }

    pub fn grad_norms(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.grad_norm).collect()
    }

    /// `(step, eval_loss)` for every evaluated step.
    pub fn eval_losses(&self) -> Vec<(usize, f64)> {
        self.steps.iter().filter_map(|r| r.eval_loss.map(|e| (r.step, e))).collect()
    }

    pub fn final_eval_loss(&self) -> Option<f64> {
        self.eval_losses().last().map(|p| p.1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.steps {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    fn recount_spikes(&mut self) {
        self.spike_count = spike_count(&self.losses(), self.spike_window, self.spike_jump).unwrap_or(0);
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub metrics: RunMetrics,
}

fn add_into<T: Scalar>(acc: &mut ModelParams<Tensor<T>>, g: &ModelParams<Tensor<T>>) {
    let g = g.named();
    let mut i = 0;
    acc.for_each_mut(|_, a| {
        for (x, y) in a.data_mut().iter_mut().zip(g[i].1.data()) {
            *x = *x + *y;
        }
        i += 1;
    });
}

fn scale_all<T: Scalar>(p: &mut ModelParams<Tensor<T>>, c: T) {
    p.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|x| *x = *x * c));
}

/// Mean loss and mean gradient over `batch`, summed in batch order.
pub fn batch_gradient<T: Scalar>(
    model: &Model<T>,
    batch: &[Vec<usize>],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, ModelParams<Tensor<T>>)> {
    let mut acc = model.params.zeros_like();
    let mut loss = 0.0;
    match pool {
        Some(pool) => {
            let parts: Vec<_> = pool.install(|| batch.par_iter().map(|s| model.loss_and_grads(s)).collect());
            for part in parts {
                let (l, g) = part?;
                loss += l.to_f64().unwrap();
                add_into(&mut acc, &g);
            }
        }
        None => {
            for s in batch {
                let (l, g) = model.loss_and_grads(s)?;
                loss += l.to_f64().unwrap();
                add_into(&mut acc, &g);
            }
        }
    }
    let n = batch.len() as f64;
    scale_all(&mut acc, T::lit(1.0 / n));
    Ok((loss / n, acc))
}

/// Mean loss over `windows` without gradients.
pub fn eval_loss<T: Scalar>(model: &Model<T>, windows: &[Vec<usize>]) -> Result<f64> {
    let mut total = 0.0;
    for w in windows {
        total += model.forward_loss(w)?.0.to_f64().unwrap();
    }
    Ok(total / windows.len() as f64)
}

/// Trains a freshly initialized model on `corpus`.
///
/// Initialization uses `config.seed`; batches come from an independent
/// stream of the same seed. Every step reports a [`StepRecord`] to
/// `on_step`; evaluation on the held-out windows runs after every
/// `eval_every`-th update and after the last one.
pub fn train_loop<T: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    corpus: &Corpus,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    model_config.validate()?;
    if config.seq_len > model_config.max_seq_len {
        return Err(TrainError::Config(format!(
            "seq_len {} exceeds the model's max_seq_len {}",
            config.seq_len, model_config.max_seq_len
        )));
    }
    if corpus.max_token() >= model_config.vocab_size {
        return Err(TrainError::Config(format!(
            "corpus byte {} outside vocabulary of {}",
            corpus.max_token(),
            model_config.vocab_size
        )));
    }
    let eval_windows = corpus.eval_windows(config.eval_sequences, config.seq_len)?;
    let mut model = Model::<T>::init(model_config.clone(), config.seed)?;
    let mut opt = Optimizer::for_model(config.optimizer_config(), &model.params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let pool = if config.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Some(pool)
    } else {
        None
    };

    let mut metrics = RunMetrics::new(config);
    let steps = config.steps_to_run();
    for step in 0..steps {
        let batch = corpus.sample_batch(&mut rng, config.batch_size, config.seq_len)?;
        let (loss, mut grads) = batch_gradient(&model, &batch, pool.as_ref())?;
        let abort = |quantity, metrics: &RunMetrics| TrainError::NonFinite {
            step,
            quantity,
            metrics: Box::new(metrics.clone()),
        };
        if !loss.is_finite() {
            return Err(abort("loss", &metrics));
        }
        let grad_norm = grads.l2_norm();
        if !grad_norm.is_finite() {
            return Err(abort("gradient", &metrics));
        }
        if let Some(clip) = config.grad_clip {
            if grad_norm > clip {
                scale_all(&mut grads, T::lit(clip / grad_norm));
            }
        }
        let lr = cosine_schedule(step, config.total_steps, config.warmup_frac, config.learning_rate);
        opt.step_model(&mut model.params, &grads, lr)?;
        if !model.params.is_finite() {
            return Err(abort("parameter", &metrics));
        }
        let eval_loss = if (step + 1) % config.eval_every == 0 || step + 1 == steps {
            let e = eval_loss(&model, &eval_windows)?;
            if !e.is_finite() {
                return Err(abort("eval loss", &metrics));
            }
            Some(e)
        } else {
            None
        };
        let record = StepRecord {
            step,
            loss,
            grad_norm,
            lr,
            eval_loss,
        };
        on_step(&record);
        metrics.steps.push(record);
    }
    metrics.recount_spikes();
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        assert_eq!(cosine_schedule(0, 100, 0.1, 1.0), 0.0);
        assert_eq!(cosine_schedule(5, 100, 0.1, 1.0), 0.5);
        assert_eq!(cosine_schedule(10, 100, 0.1, 1.0), 1.0);
        assert_eq!(cosine_schedule(100, 100, 0.1, 1.0), 0.0);
        assert_eq!(cosine_schedule(150, 100, 0.1, 1.0), 0.0);
        assert!((cosine_schedule(55, 100, 0.1, 2.0) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_schedule(0, 10, 0.0, 3.0), 3.0);
    }

    #[test]
    fn spikes() {
        let down: Vec<f64> = (0..200).map(|i| 5.0 - i as f64 * 0.01).collect();
        assert_eq!(spike_count(&down, 50, 0.5).unwrap(), 0);
        let mut flat = vec![2.0; 100];
        flat[70] = 12.0;
        assert_eq!(spike_count(&flat, 10, 1.0).unwrap(), 1);
        assert_eq!(spike_count(&flat[..5], 10, 1.0).unwrap(), 0);
        assert!(spike_count(&flat, 2, 1.0).is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), 2.5);
    }

    #[test]
    fn csv_rows() {
        let r = StepRecord { step: 3, loss: 2.5, grad_norm: 0.25, lr: 1e-3, eval_loss: None };
        assert_eq!(r.csv_row(), "3,2.5,0.25,0.001,");
        let r = StepRecord { eval_loss: Some(1.5), ..r };
        assert_eq!(r.csv_row(), "3,2.5,0.25,0.001,1.5");
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { warmup_frac: 1.0, ..Default::default() },
            TrainConfig { beta2: 1.0, ..Default::default() },
            TrainConfig { spike_window: 2, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
