//! L2-loss training with Adam over shuffled window batches.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, ArrayD, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{Window, WindowSet};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_windows;
use crate::params::{accumulate, Parameters};
use crate::transformer::{model_backward_into, model_forward_traced, ModelConfig, ModelParams};

/// Learning rates the training protocol chooses from.
pub const LR_MENU: [f64; 4] = [1e-4, 3e-4, 5e-4, 1e-3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// `F32` rounds parameters through `f32` after every update.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 || self.lr.is_infinite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Mean of squared elementwise differences.
pub fn l2_loss(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("l2 loss", target.shape(), pred.shape()));
    }
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// First and second moments per tensor, in [`Parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let zeros: Vec<ArrayD<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| ArrayD::zeros(t.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam tensors",
            &[params.len()],
            &[grads.len()],
        ));
    }
    for (((_, p), (_, g)), m) in params.iter().zip(&grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam tensor", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((((_, p), (_, g)), m), v) in params
        .iter_mut()
        .zip(&grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
            });
    }
    Ok(())
}

/// Mean L2 loss over `batch` and its gradient. Items run in parallel; the
/// reduction runs in batch order so results do not depend on thread count.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    cfg: &ModelConfig,
    batch: &[(ArrayView2<'_, f64>, ArrayView2<'_, f64>)],
    dropout_seed: Option<u64>,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let per_item: Vec<Result<(f64, ModelParams)>> = batch
        .par_iter()
        .enumerate()
        .map(|(idx, (x, y))| {
            let mut rng = dropout_seed.map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                r.set_stream(idx as u64);
                r
            });
            let (pred, trace) = model_forward_traced(params, cfg, *x, rng.as_mut())?;
            let loss = l2_loss(pred.view(), *y)?;
            let scale = 2.0 / pred.len() as f64;
            let d_pred = (&pred - y) * scale;
            let mut grad = params.zeros_like();
            model_backward_into(params, &trace, d_pred.view(), &mut grad)?;
            Ok((loss, grad))
        })
        .collect();
    let n = batch.len() as f64;
    let mut iter = per_item.into_iter();
    let (mut loss, mut grad) = iter.next().expect("nonempty")?;
    for item in iter {
        let (l, g) = item?;
        loss += l;
        accumulate(&mut grad, &g);
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// SHA-256 over every batch fed to the optimizer, in order.
    pub batch_hash: String,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_mse,val_mae,seconds";

    /// CSV with one row per epoch. With `with_seconds` false the timing
    /// column is written as zero so reruns are byte-identical.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let secs = if with_seconds { r.seconds } else { 0.0 };
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.epoch, r.train_loss, r.val_mse, r.val_mae, secs
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub params: ModelParams,
    pub history: TrainHistory,
    pub initial_val_mse: f64,
}

fn hash_batch(hasher: &mut Sha256, windows: &[&Window]) {
    for w in windows {
        hasher.update((w.start as u64).to_le_bytes());
        for v in w.input.iter().chain(w.target.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        .wrapping_add(epoch as u64)
}

/// Trains from a seeded initialization.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &WindowSet,
    val_set: &WindowSet,
) -> Result<TrainOutcome> {
    let mut params = ModelParams::init(model_cfg, train_cfg.seed)?;
    if train_cfg.precision == Precision::F32 {
        params.round_to_f32();
    }
    train_from(params, model_cfg, train_cfg, train_set, val_set)
}

/// Trains starting from `params`.
pub fn train_from(
    mut params: ModelParams,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &WindowSet,
    val_set: &WindowSet,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training windows"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation windows"));
    }
    params.check_config(model_cfg)?;

    let initial = evaluate_windows(&params, model_cfg, val_set)?;
    let mut best = (initial.0, params.clone(), 0usize);
    let mut state = AdamState::new(&params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut hasher = Sha256::new();
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(train_cfg.batch_size).enumerate() {
            let windows: Vec<&Window> = chunk.iter().map(|&i| &train_set.windows[i]).collect();
            hash_batch(&mut hasher, &windows);
            let batch: Vec<_> = windows
                .iter()
                .map(|w| (w.input.view(), w.target.view()))
                .collect();
            let dropout_seed = (model_cfg.dropout > 0.0)
                .then(|| epoch_seed(train_cfg.seed, epoch).wrapping_add((b as u64) << 32));
            let (loss, mut grad) = batch_loss_and_grad(&params, model_cfg, &batch, dropout_seed)?;
            step += 1;
            if !loss.is_finite() || !grad.all_finite() {
                return Err(Error::NonFinite { epoch, step, loss });
            }
            if let Some(max) = train_cfg.clip_norm {
                let norm = grad.global_norm();
                if norm > max {
                    grad.scale(max / norm);
                }
            }
            adam_step(&mut params, &grad, &mut state, train_cfg)?;
            if train_cfg.precision == Precision::F32 {
                params.round_to_f32();
            }
            if !params.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let (val_mse, val_mae) = evaluate_windows(&params, model_cfg, val_set)?;
        if !val_mse.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                step,
                loss: val_mse,
            });
        }
        if val_mse < best.0 {
            best = (val_mse, params.clone(), epoch);
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mse,
            val_mae,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    history.batch_hash = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    history.best_epoch = best.2;
    Ok(TrainOutcome {
        params: best.1,
        history,
        initial_val_mse: initial.0,
    })
}

/// Predictions for a batch of inputs; helper for callers that already hold arrays.
pub fn predict_batch(
    params: &ModelParams,
    cfg: &ModelConfig,
    inputs: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    inputs
        .par_iter()
        .map(|x| crate::transformer::model_forward(params, cfg, x.view()))
        .collect()
}
