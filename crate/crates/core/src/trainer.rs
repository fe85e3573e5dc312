//! Self-distillation training loop.
//!
//! Each step splits the batch into `floor(eta * M)` diagonal items trained with
//! the endpoint cross-entropy and `M - floor(eta * M)` off-diagonal items
//! trained with the configured distillation loss, then applies one AdamW update
//! with global-norm clipping and refreshes the EMA shadow.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::CategoricalDataset;
use crate::error::{CfmError, Result};
use crate::flowmap::TimePair;
use crate::interpolant::sample_prior;
use crate::losses::{objective_value_and_grad, LossConfig, LossReport, PairBatch};
use crate::predictor::{Predictor, PredictorParams};
use crate::rng::{self, CfmRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
    pub ema_decay: f64,
    /// Location and scale of the logit-normal time distribution.
    pub time_mu: f64,
    pub time_sigma: f64,
    pub warmup_steps: u64,
    /// Learning-rate multiplier at the first warmup step.
    pub warmup_start_factor: f64,
    /// Cosine decay from the end of warmup to `min_lr_factor * lr`.
    pub cosine_decay: bool,
    pub min_lr_factor: f64,
    /// Metrics are emitted every `log_every` steps (and on the last step).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 128,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-12,
            grad_clip: 1.0,
            ema_decay: 0.999,
            time_mu: -0.4,
            time_sigma: 1.0,
            warmup_steps: 0,
            warmup_start_factor: 1e-3,
            cosine_decay: false,
            min_lr_factor: 0.0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CfmError::Config(msg));
        if !(self.lr > 0.0) {
            return bad(format!("train.lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("train.ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if self.time_sigma < 0.0 || self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return bad("train.time_sigma, train.grad_clip and train.weight_decay must be >= 0".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        Ok(())
    }

    /// Learning rate applied at (zero-based) step `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let frac = step as f64 / self.warmup_steps as f64;
            return self.lr * (self.warmup_start_factor + (1.0 - self.warmup_start_factor) * frac);
        }
        if self.cosine_decay && self.steps > self.warmup_steps {
            let span = (self.steps - self.warmup_steps) as f64;
            let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
            let floor = self.min_lr_factor * self.lr;
            return floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        self.lr
    }
}

/// Draws two independent logit-normal times and orders them.
pub fn sample_time_pair(rng: &mut impl rand::Rng, mu: f64, sigma: f64) -> TimePair {
    let mut draw = || {
        let z = mu + sigma * rng::normal(rng);
        1.0 / (1.0 + (-z).exp())
    };
    let (a, b) = (draw(), draw());
    TimePair { s: a.min(b), t: a.max(b) }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: u64,
    pub params: PredictorParams,
    pub ema: PredictorParams,
    pub m: PredictorParams,
    pub v: PredictorParams,
    data_rng: CfmRng,
    prior_rng: CfmRng,
    time_rng: CfmRng,
}

impl TrainState {
    pub fn new(params: PredictorParams, seed: u64) -> Self {
        TrainState {
            step: 0,
            ema: params.clone(),
            m: params.zeros_like(),
            v: params.zeros_like(),
            params,
            data_rng: rng::stream(seed, rng::STREAM_DATA),
            prior_rng: rng::stream(seed, rng::STREAM_PRIOR),
            time_rng: rng::stream(seed, rng::STREAM_TIME),
        }
    }

    /// Fresh initialization of `predictor` from `seed`.
    pub fn init(predictor: &Predictor, seed: u64) -> Self {
        let params = predictor.init_params(&mut rng::stream(seed, rng::STREAM_INIT));
        Self::new(params, seed)
    }
}

/// `|diag| = floor(eta * M)`, `|off| = M - |diag|`.
pub fn split_sizes(batch: usize, eta: f64) -> (usize, usize) {
    let d = ((eta * batch as f64).floor() as usize).min(batch);
    (d, batch - d)
}

/// Diagonal and off-diagonal batches for one step.
pub fn draw_batches(state: &mut TrainState, dataset: &CategoricalDataset, batch: usize, loss: &LossConfig, cfg: &TrainConfig) -> Result<(Option<PairBatch>, Option<PairBatch>)> {
    let (md, mo) = split_sizes(batch, loss.diagonal_fraction);
    if loss.diagonal_fraction < 1.0 && (md == 0 || mo == 0) {
        return Err(CfmError::InvalidArgument(format!("batch of {batch} leaves an empty branch at eta = {}", loss.diagonal_fraction)));
    }
    let (d, k) = (dataset.positions, dataset.categories);
    let mut draw = |n: usize, diagonal: bool| -> Result<Option<PairBatch>> {
        if n == 0 {
            return Ok(None);
        }
        let x1 = dataset.sample_batch(&mut state.data_rng, n);
        let x0 = sample_prior(&mut state.prior_rng, n, d, k);
        let pairs: Vec<TimePair> = (0..n).map(|_| sample_time_pair(&mut state.time_rng, cfg.time_mu, cfg.time_sigma)).collect();
        let t: Vec<f64> = pairs.iter().map(|p| p.t).collect();
        let s = if diagonal { t.clone() } else { pairs.iter().map(|p| p.s).collect() };
        PairBatch::new(x0, x1, s, t).map(Some)
    };
    let diag = draw(md, true)?;
    let off = draw(mo, false)?;
    Ok((diag, off))
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub loss: LossReport,
    pub wall_time: f64,
}

fn global_norm(g: &PredictorParams) -> f64 {
    g.tensors.values().map(|t| t.norm_sq()).sum::<f64>().sqrt()
}

/// One AdamW step on pre-drawn batches. On error nothing in `state` changes.
pub fn train_step_on(
    state: &mut TrainState,
    predictor: &Predictor,
    diag: Option<&PairBatch>,
    off: Option<&PairBatch>,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let (report, mut grads) = objective_value_and_grad(predictor, &state.params, diag, off, loss_cfg)?;
    let grad_norm = global_norm(&grads);
    if !grad_norm.is_finite() {
        return Err(CfmError::NonFiniteLoss("gradient".into()));
    }
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let c = cfg.grad_clip / grad_norm;
        for t in grads.tensors.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    let lr = cfg.lr_at(state.step);
    let n = (state.step + 1) as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (bc1, bc2) = (1.0 - b1.powi(n), 1.0 - b2.powi(n));
    for (name, g) in &grads.tensors {
        let p = state.params.tensors.get_mut(name).unwrap().data_mut();
        let m = state.m.tensors.get_mut(name).unwrap().data_mut();
        let v = state.v.tensors.get_mut(name).unwrap().data_mut();
        for i in 0..g.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.adam_eps);
            p[i] -= lr * (update + cfg.weight_decay * p[i]);
        }
    }
    let d = cfg.ema_decay;
    for (name, p) in &state.params.tensors {
        let e = state.ema.tensors.get_mut(name).unwrap().data_mut();
        for (e, &p) in e.iter_mut().zip(p.data()) {
            *e = d * *e + (1.0 - d) * p;
        }
    }
    state.step += 1;
    Ok(StepRecord { step: state.step, lr, grad_norm, loss: report, wall_time: 0.0 })
}

/// Draws a batch from `dataset` and takes one step.
pub fn train_step(state: &mut TrainState, predictor: &Predictor, dataset: &CategoricalDataset, loss_cfg: &LossConfig, cfg: &TrainConfig) -> Result<StepRecord> {
    let (diag, off) = draw_batches(state, dataset, cfg.batch_size, loss_cfg, cfg)?;
    train_step_on(state, predictor, diag.as_ref(), off.as_ref(), loss_cfg, cfg)
}

/// Final state of a run; `abort` holds the error that stopped it early.
pub struct TrainRun {
    pub state: TrainState,
    pub abort: Option<CfmError>,
}

/// Runs `cfg.steps` steps from `state`, calling `on_metrics` every
/// `cfg.log_every` steps and after the last one.
pub fn run_training(
    mut state: TrainState,
    predictor: &Predictor,
    dataset: &CategoricalDataset,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_metrics: impl FnMut(&StepRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if dataset.support().is_empty() {
        return Err(CfmError::InvalidArgument("empty dataset".into()));
    }
    let start = Instant::now();
    while state.step < cfg.steps {
        match train_step(&mut state, predictor, dataset, loss_cfg, cfg) {
            Ok(mut rec) => {
                if rec.step % cfg.log_every.max(1) == 0 || rec.step == cfg.steps {
                    rec.wall_time = start.elapsed().as_secs_f64();
                    on_metrics(&rec);
                }
            }
            Err(e) => return Ok(TrainRun { state, abort: Some(e) }),
        }
    }
    Ok(TrainRun { state, abort: None })
}
