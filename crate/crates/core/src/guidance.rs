//! Reward-tilted sampling.
//!
//! The SDE score is shifted by `t * grad_x r(lookahead(x))`, where the
//! lookahead estimates the trajectory endpoint with the flow map `X_{t,1}`, the
//! denoiser `pi_{t,t}`, or not at all. Particles carry importance weights built
//! from increments of the potential `t * r(lookahead(x))` and are resampled
//! systematically when the effective sample size drops below a threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Graph, Tensor};
use crate::data::{one_hot, CategoricalDataset, State};
use crate::error::{CfmError, Result};
use crate::flowmap::gamma;
use crate::interpolant::{sample_prior, score_from_velocity};
use crate::predictor::{times, OutputKind, Predictor, PredictorParams};
use crate::rng::{self, CfmRng};
use crate::sampler::{discretize, sde_update, DiscretizeMode, Field, ModelField, SampleOutput, SampleRngs, TimeGrid};

/// A log-reward `r(x)` on `[B, D, K]` states, one value per row.
pub trait RewardModel {
    fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>>;
    /// `grad_x r(x)` row by row, same shape as `x`.
    fn gradient(&self, x: &Tensor) -> Result<Tensor>;
    /// True when the reward is identically zero.
    fn is_null(&self) -> bool {
        false
    }
}

pub struct ZeroReward;

impl RewardModel for ZeroReward {
    fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(vec![0.0; rows(x)?])
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Tensor::zeros(x.shape()))
    }

    fn is_null(&self) -> bool {
        true
    }
}

/// `r(x) = <a, x>` with `a` of shape `[D, K]`.
pub struct LinearReward {
    pub a: Tensor,
}

impl RewardModel for LinearReward {
    fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let n = check_row_shape(x, &self.a)?;
        Ok(x.data().chunks(n).map(|row| row.iter().zip(self.a.data()).map(|(x, a)| x * a).sum()).collect())
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        check_row_shape(x, &self.a)?;
        Ok(Tensor::new(x.shape().to_vec(), self.a.data().repeat(rows(x)?))?)
    }
}

/// `r(x) = -scale * ||x - c||^2`.
pub struct QuadraticReward {
    pub center: Tensor,
    pub scale: f64,
}

impl RewardModel for QuadraticReward {
    fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>> {
        let n = check_row_shape(x, &self.center)?;
        let c = self.center.data();
        Ok(x.data().chunks(n).map(|row| -self.scale * row.iter().zip(c).map(|(x, c)| (x - c) * (x - c)).sum::<f64>()).collect())
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        let n = check_row_shape(x, &self.center)?;
        let c = self.center.data();
        let data = x.data().iter().enumerate().map(|(i, &v)| -2.0 * self.scale * (v - c[i % n])).collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

fn rows(x: &Tensor) -> Result<usize> {
    if x.ndim() != 3 {
        return Err(CfmError::ShapeMismatch(format!("expected [B, D, K], got {:?}", x.shape())));
    }
    Ok(x.shape()[0])
}

fn check_row_shape(x: &Tensor, row: &Tensor) -> Result<usize> {
    rows(x)?;
    if x.shape()[1..] != *row.shape() {
        return Err(CfmError::ShapeMismatch(format!("state {:?} vs reward {:?}", x.shape(), row.shape())));
    }
    Ok(row.len())
}

/// Multinomial logistic classifier on flattened one-hot features; the reward
/// is the log-probability of `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticReward {
    pub positions: usize,
    pub categories: usize,
    pub classes: usize,
    pub target: usize,
    /// `[D * K, C]`.
    pub weights: Tensor,
    /// `[C]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticFit {
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogisticFit {
    fn default() -> Self {
        LogisticFit { steps: 2000, lr: 1.0, l2: 1e-3 }
    }
}

impl LogisticReward {
    /// Fits by full-batch gradient descent on the dataset's exact distribution.
    pub fn fit(ds: &CategoricalDataset, label: impl Fn(&[usize]) -> usize, classes: usize, target: usize, fit: &LogisticFit) -> Result<Self> {
        if target >= classes || classes < 2 {
            return Err(CfmError::InvalidArgument(format!("target class {target} of {classes}")));
        }
        let (d, k) = (ds.positions, ds.categories);
        let states = ds.support();
        let labels: Vec<usize> = states.iter().map(|s| label(s)).collect();
        if let Some(&bad) = labels.iter().find(|&&c| c >= classes) {
            return Err(CfmError::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        let feats = one_hot(states, k);
        let mut model = LogisticReward {
            positions: d,
            categories: k,
            classes,
            target,
            weights: Tensor::zeros(&[d * k, classes]),
            bias: Tensor::zeros(&[classes]),
        };
        let n = d * k;
        for _ in 0..fit.steps {
            let mut gw = model.weights.scale(fit.l2);
            let mut gb = vec![0.0; classes];
            for ((row, &y), &p) in feats.data().chunks(n).zip(&labels).zip(ds.probs()) {
                let probs = model.class_probs(row);
                for c in 0..classes {
                    let err = p * (probs[c] - f64::from(c == y));
                    gb[c] += err;
                    for (j, &f) in row.iter().enumerate() {
                        if f != 0.0 {
                            gw.data_mut()[j * classes + c] += err * f;
                        }
                    }
                }
            }
            for (w, g) in model.weights.data_mut().iter_mut().zip(gw.data()) {
                *w -= fit.lr * g;
            }
            for (b, g) in model.bias.data_mut().iter_mut().zip(&gb) {
                *b -= fit.lr * g;
            }
        }
        Ok(model)
    }

    fn logits(&self, row: &[f64]) -> Vec<f64> {
        let c = self.classes;
        let mut out = self.bias.data().to_vec();
        for (j, &f) in row.iter().enumerate() {
            if f != 0.0 {
                for (o, w) in out.iter_mut().zip(&self.weights.data()[j * c..(j + 1) * c]) {
                    *o += f * w;
                }
            }
        }
        out
    }

    fn class_probs(&self, row: &[f64]) -> Vec<f64> {
        let z = self.logits(row);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Most likely class of a hard state.
    pub fn classify(&self, state: &[usize]) -> usize {
        let x = one_hot(&[state.to_vec()], self.categories);
        let p = self.class_probs(x.data());
        crate::sampler::argmax(&p)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        rows(x)?;
        if x.shape()[1] != self.positions || x.shape()[2] != self.categories {
            return Err(CfmError::ShapeMismatch(format!("reward expects [B, {}, {}], got {:?}", self.positions, self.categories, x.shape())));
        }
        Ok(())
    }
}

impl RewardModel for LogisticReward {
    fn evaluate(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.check(x)?;
        let n = self.positions * self.categories;
        Ok(x.data().chunks(n).map(|row| self.class_probs(row)[self.target].max(1e-300).ln()).collect())
    }

    fn gradient(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (n, c) = (self.positions * self.categories, self.classes);
        let w = self.weights.data();
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let p = self.class_probs(row);
            for j in 0..n {
                let wj = &w[j * c..(j + 1) * c];
                out.push(wj[self.target] - wj.iter().zip(&p).map(|(w, p)| w * p).sum::<f64>());
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Lookahead {
    /// `X_{t,1}(x)`.
    #[default]
    Flowmap,
    /// `pi_{t,t}(x)`.
    Denoiser,
    /// The noisy state itself.
    None,
}

impl std::str::FromStr for Lookahead {
    type Err = CfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flowmap" => Ok(Lookahead::Flowmap),
            "denoiser" => Ok(Lookahead::Denoiser),
            "none" => Ok(Lookahead::None),
            _ => Err(CfmError::InvalidArgument(format!("unknown lookahead `{s}` (flowmap, denoiser, none)"))),
        }
    }
}

/// How the reward sees a soft state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardPathway {
    /// Evaluate on the argmax state, pass the gradient straight through.
    #[default]
    Ste,
    Soft,
}

/// Straight-through reward: value and gradient at the argmax discretization.
pub fn ste_reward(reward: &dyn RewardModel, soft: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (hard, _) = discretize(soft, DiscretizeMode::Argmax, &mut rng::seeded(0))?;
    Ok((reward.evaluate(&hard)?, reward.gradient(&hard)?))
}

fn reward_at(reward: &dyn RewardModel, y: &Tensor, pathway: RewardPathway) -> Result<(Vec<f64>, Tensor)> {
    match pathway {
        RewardPathway::Ste => ste_reward(reward, y),
        RewardPathway::Soft => Ok((reward.evaluate(y)?, reward.gradient(y)?)),
    }
}

/// `r(lookahead(x))` per row and its gradient with respect to `x`.
pub fn lookahead_reward(
    predictor: &Predictor,
    params: &PredictorParams,
    x: &Tensor,
    t: f64,
    reward: &dyn RewardModel,
    lookahead: Lookahead,
    pathway: RewardPathway,
) -> Result<(Vec<f64>, Tensor)> {
    let b = rows(x)?;
    if reward.is_null() {
        return Ok((vec![0.0; b], Tensor::zeros(x.shape())));
    }
    if lookahead == Lookahead::None {
        return reward_at(reward, x, pathway);
    }
    predictor.check_input(x, &vec![t; b], &vec![t; b])?;
    let g = Graph::new();
    let p = params.bind(&g, false);
    let xv = g.param(x.clone());
    let xd = Dual::constant(xv);
    let end = match lookahead {
        Lookahead::Flowmap => 1.0,
        _ => t,
    };
    let out = predictor.forward(&p, xd, times(&g, &vec![t; b]), times(&g, &vec![end; b])).primal;
    let y = match (predictor.cfg.output, lookahead) {
        (OutputKind::Simplex, Lookahead::Flowmap) => xv + (out - xv) * gamma(t, 1.0),
        (OutputKind::Simplex, _) => out,
        (OutputKind::Velocity, _) => xv + out * (1.0 - t),
    };
    let (values, gy) = reward_at(reward, &y.value(), pathway)?;
    let grads = g.backward((y * g.constant(gy)).sum())?;
    Ok((values, grads.get_or_zero(xv)))
}

/// `s(x) + t * grad_x r(lookahead(x))`.
pub fn tilted_score(
    predictor: &Predictor,
    params: &PredictorParams,
    x: &Tensor,
    t: f64,
    reward: &dyn RewardModel,
    lookahead: Lookahead,
    pathway: RewardPathway,
) -> Result<Tensor> {
    let v = ModelField { predictor, params }.velocity(x, t)?;
    let score = score_from_velocity(&v, x, t)?;
    let (_, grad) = lookahead_reward(predictor, params, x, t, reward, lookahead, pathway)?;
    score.add(&grad.scale(t))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub lookahead: Lookahead,
    pub pathway: RewardPathway,
    /// SDE steps.
    pub nfe: usize,
    pub sigma0: f64,
    /// Particles per ensemble.
    pub particles: usize,
    /// Resample when `ESS < ess_fraction * P`.
    pub ess_fraction: f64,
    pub samples: usize,
    pub mode: DiscretizeMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lookahead: Lookahead::Flowmap,
            pathway: RewardPathway::Ste,
            nfe: 8,
            sigma0: 1.0,
            particles: 16,
            ess_fraction: 0.5,
            samples: 1000,
            mode: DiscretizeMode::Argmax,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(CfmError::Config("guidance.nfe must be >= 1".into()));
        }
        if self.particles == 0 {
            return Err(CfmError::Config("guidance.particles must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ess_fraction) {
            return Err(CfmError::Config("guidance.ess_fraction must lie in [0, 1]".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return Err(CfmError::Config("guidance.sigma0 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Weighted particles at a common time.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    /// `[P, D, K]`.
    pub states: Tensor,
    pub log_weights: Vec<f64>,
    /// Current potential `t * r(lookahead(x))` per particle.
    pub potential: Vec<f64>,
    /// Current `grad_x r(lookahead(x))`.
    pub reward_grad: Tensor,
    pub t: f64,
    pub resamples: usize,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    /// Normalized weights.
    pub fn weights(&self) -> Result<Vec<f64>> {
        normalize_log_weights(&self.log_weights)
    }

    pub fn ess(&self) -> Result<f64> {
        Ok(effective_sample_size(&self.weights()?))
    }

    fn select(&mut self, ancestors: &[usize]) {
        let n: usize = self.states.shape()[1..].iter().product();
        let pick = |t: &Tensor| {
            let data = ancestors.iter().flat_map(|&a| t.data()[a * n..(a + 1) * n].iter().copied()).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        };
        self.states = pick(&self.states);
        self.reward_grad = pick(&self.reward_grad);
        self.potential = ancestors.iter().map(|&a| self.potential[a]).collect();
        self.log_weights = vec![0.0; ancestors.len()];
        self.resamples += 1;
    }
}

pub fn normalize_log_weights(lw: &[f64]) -> Result<Vec<f64>> {
    let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(CfmError::AllWeightsDegenerate);
    }
    let e: Vec<f64> = lw.iter().map(|v| if v.is_nan() { 0.0 } else { (v - m).exp() }).collect();
    let s: f64 = e.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(CfmError::AllWeightsDegenerate);
    }
    Ok(e.into_iter().map(|v| v / s).collect())
}

pub fn effective_sample_size(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Systematic resampling: ancestor indices for positions `(i + u) / P`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let p = weights.len();
    let mut out = Vec::with_capacity(p);
    let mut cdf = 0.0;
    let mut j = 0;
    for i in 0..p {
        let pos = (i as f64 + u) / p as f64;
        while j + 1 < p && cdf + weights[j] <= pos {
            cdf += weights[j];
            j += 1;
        }
        out.push(j);
    }
    out
}

/// Offspring count per particle for a set of ancestors.
pub fn offspring_counts(ancestors: &[usize], p: usize) -> Vec<usize> {
    let mut c = vec![0; p];
    for &a in ancestors {
        c[a] += 1;
    }
    c
}

/// Random streams of one guided run.
pub struct GuidanceRngs {
    pub sample: SampleRngs,
    pub resample: CfmRng,
}

impl GuidanceRngs {
    pub fn new(seed: u64) -> Self {
        GuidanceRngs { sample: SampleRngs::new(seed), resample: rng::stream(seed, rng::STREAM_RESAMPLE) }
    }
}

/// Fresh ensemble of `p` prior draws at `t = 0`.
pub fn init_ensemble(predictor: &Predictor, params: &PredictorParams, p: usize, reward: &dyn RewardModel, cfg: &GuidanceConfig, rng: &mut CfmRng) -> Result<ParticleEnsemble> {
    let (d, k) = (predictor.cfg.positions, predictor.cfg.categories);
    let states = sample_prior(rng, p, d, k);
    let (_, reward_grad) = lookahead_reward(predictor, params, &states, 0.0, reward, cfg.lookahead, cfg.pathway)?;
    Ok(ParticleEnsemble { states, log_weights: vec![0.0; p], potential: vec![0.0; p], reward_grad, t: 0.0, resamples: 0 })
}

/// One tilted SDE step from `ens.t` to `t_to`, reweighting by the potential
/// increment and resampling when the ESS falls below the threshold. `last`
/// makes the step land exactly on the endpoint prediction.
#[allow(clippy::too_many_arguments)]
pub fn smc_step(
    mut ens: ParticleEnsemble,
    predictor: &Predictor,
    params: &PredictorParams,
    t_to: f64,
    last: bool,
    reward: &dyn RewardModel,
    cfg: &GuidanceConfig,
    rngs: &mut GuidanceRngs,
) -> Result<ParticleEnsemble> {
    if ens.is_empty() {
        return Err(CfmError::InvalidArgument("empty particle ensemble".into()));
    }
    let field = ModelField { predictor, params };
    let t0 = ens.t;
    let extra = ens.reward_grad.scale(t0);
    ens.states = sde_update(&field, &ens.states, t0, t_to, last, cfg.sigma0, Some(&extra), &mut rngs.sample.noise)?;
    ens.t = t_to;
    let (values, grad) = lookahead_reward(predictor, params, &ens.states, t_to, reward, cfg.lookahead, cfg.pathway)?;
    for ((lw, phi), r) in ens.log_weights.iter_mut().zip(ens.potential.iter_mut()).zip(values) {
        let next = t_to * r;
        *lw += next - *phi;
        *phi = next;
    }
    ens.reward_grad = grad;
    let w = ens.weights()?;
    if ens.len() > 1 && effective_sample_size(&w) < cfg.ess_fraction * ens.len() as f64 {
        let u: f64 = rngs.resample.random();
        ens.select(&systematic_resample(&w, u));
    }
    Ok(ens)
}

/// Guided samples with per-sample rewards of the final discrete states.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidedOutput {
    pub output: SampleOutput,
    pub rewards: Vec<f64>,
    pub resamples: usize,
}

/// Runs ensembles of `cfg.particles` over `grid` until `cfg.samples` states
/// are drawn. Each ensemble is resampled once more at the end if its final
/// weights are not uniform, so every returned state carries equal weight.
pub fn guided_sample(predictor: &Predictor, params: &PredictorParams, reward: &dyn RewardModel, grid: &TimeGrid, cfg: &GuidanceConfig, seed: u64) -> Result<GuidedOutput> {
    cfg.validate()?;
    let mut rngs = GuidanceRngs::new(seed);
    let mut softs = Vec::new();
    let mut resamples = 0;
    let mut done = 0;
    let knots = grid.knots();
    while done < cfg.samples {
        let p = cfg.particles.min(cfg.samples - done);
        let mut ens = init_ensemble(predictor, params, p, reward, cfg, &mut rngs.sample.prior)?;
        for (i, &t1) in knots.iter().enumerate().skip(1) {
            ens = smc_step(ens, predictor, params, t1, i + 1 == knots.len(), reward, cfg, &mut rngs)?;
        }
        let w = ens.weights()?;
        if w.iter().any(|&v| (v - w[0]).abs() > 1e-15) {
            let u: f64 = rngs.resample.random();
            ens.select(&systematic_resample(&w, u));
        }
        resamples += ens.resamples;
        softs.push(ens.states);
        done += p;
    }
    let soft = Tensor::concat_rows(&softs)?;
    let (hard, states) = discretize(&soft, cfg.mode, &mut rngs.sample.discrete)?;
    let rewards = reward.evaluate(&hard)?;
    Ok(GuidedOutput { output: SampleOutput { soft, hard, states, mode: cfg.mode }, rewards, resamples })
}

/// Share of `states` whose label is `class`.
pub fn class_frequency(states: &[State], label: impl Fn(&[usize]) -> usize, class: usize) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    states.iter().filter(|s| label(s) == class).count() as f64 / states.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_parity_dataset, two_class_label};
    use crate::predictor::PredictorConfig;
    use crate::rng::seeded;
    use crate::sampler::sample_euler;
    use proptest::prelude::*;
    use rand::Rng;

    fn model(d: usize, k: usize) -> (Predictor, PredictorParams) {
        let pred = Predictor::new(PredictorConfig { positions: d, categories: k, width: 8, depth: 2, embed_dim: 6, ..Default::default() }).unwrap();
        let params = pred.random_params(&mut seeded(1), 1.0);
        (pred, params)
    }

    fn constant(pred: &Predictor, logits: &[f64]) -> PredictorParams {
        let mut p = pred.init_params(&mut seeded(3));
        p.tensors.insert("head.b".into(), Tensor::vector(logits.to_vec()));
        p
    }

    fn fd_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
        let mut out = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data_mut()[i] += eps;
            b.data_mut()[i] -= eps;
            out.data_mut()[i] = (f(&a) - f(&b)) / (2.0 * eps);
        }
        out
    }

    #[test]
    fn zero_reward_leaves_the_score() {
        let (pred, params) = model(2, 3);
        let x = sample_prior(&mut seeded(2), 4, 2, 3);
        let plain = score_from_velocity(&ModelField { predictor: &pred, params: &params }.velocity(&x, 0.4).unwrap(), &x, 0.4).unwrap();
        let tilted = tilted_score(&pred, &params, &x, 0.4, &ZeroReward, Lookahead::Flowmap, RewardPathway::Soft).unwrap();
        assert_eq!(plain, tilted);
    }

    #[test]
    fn reward_term_vanishes_at_t0() {
        let (pred, params) = model(2, 3);
        let x = sample_prior(&mut seeded(3), 4, 2, 3);
        let r = LinearReward { a: Tensor::new(vec![2, 3], vec![1., -2., 0.5, 3., 0., -1.]).unwrap() };
        let plain = tilted_score(&pred, &params, &x, 0.0, &ZeroReward, Lookahead::Flowmap, RewardPathway::Soft).unwrap();
        let tilted = tilted_score(&pred, &params, &x, 0.0, &r, Lookahead::Flowmap, RewardPathway::Soft).unwrap();
        assert_eq!(plain, tilted);
    }

    #[test]
    fn quadratic_reward_through_a_constant_flow_map() {
        let pred = model(2, 3).0;
        let params = constant(&pred, &[0.3, -0.2, 1.0, 0.0, 0.5, -1.0]);
        let c = Tensor::new(vec![2, 3], vec![0.1, 0.7, 0.2, 0.5, 0.0, 0.5]).unwrap();
        let r = QuadraticReward { center: c.clone(), scale: 1.0 };
        let x = sample_prior(&mut seeded(4), 3, 2, 3);
        let t = 0.97;
        let g = gamma(t, 1.0);
        assert!(g < 1.0);
        let (_, grad) = lookahead_reward(&pred, &params, &x, t, &r, Lookahead::Flowmap, RewardPathway::Soft).unwrap();
        let pi = pred.predict(&params, &x, &[t; 3], &[1.0; 3]).unwrap();
        let xs = x.zip_map(&pi, |x, p| x + g * (p - x)).unwrap();
        let expect = Tensor::new(x.shape().to_vec(), xs.data().iter().enumerate().map(|(i, v)| -2.0 * (1.0 - g) * (v - c.data()[i % 6])).collect()).unwrap();
        assert!(grad.max_abs_diff(&expect) < 1e-12);
        let f = |y: &Tensor| lookahead_reward(&pred, &params, y, t, &r, Lookahead::Flowmap, RewardPathway::Soft).unwrap().0.iter().sum();
        assert!(grad.max_abs_diff(&fd_grad(f, &x, 1e-6)) < 1e-5);
    }

    #[test]
    fn lookahead_gradients_match_finite_differences() {
        let (pred, params) = model(2, 3);
        let r = QuadraticReward { center: Tensor::full(&[2, 3], 0.3), scale: 0.7 };
        let x = sample_prior(&mut seeded(5), 2, 2, 3);
        for look in [Lookahead::Flowmap, Lookahead::Denoiser, Lookahead::None] {
            let (_, grad) = lookahead_reward(&pred, &params, &x, 0.6, &r, look, RewardPathway::Soft).unwrap();
            let f = |y: &Tensor| lookahead_reward(&pred, &params, y, 0.6, &r, look, RewardPathway::Soft).unwrap().0.iter().sum();
            let fd = fd_grad(f, &x, 1e-6);
            let rel = grad.max_abs_diff(&fd) / fd.data().iter().fold(1e-12, |m: f64, v| m.max(v.abs()));
            assert!(rel < 1e-5, "{look:?}: {rel}");
        }
    }

    #[test]
    fn ste_examples() {
        let a = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let r = LinearReward { a: a.clone() };
        let onehot = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(ste_reward(&r, &onehot).unwrap().0, r.evaluate(&onehot).unwrap());
        let soft = Tensor::new(vec![3, 1, 2], vec![0.6, 0.4, 0.1, 0.9, 0.5, 0.5]).unwrap();
        let (v, g) = ste_reward(&r, &soft).unwrap();
        assert_eq!(v, vec![2.0, -1.0, 2.0]);
        assert_eq!(g.shape(), soft.shape());
        assert_eq!(g.data(), a.data().repeat(3).as_slice());
    }

    #[test]
    fn systematic_resampling_by_hand() {
        let anc = systematic_resample(&[0.75, 0.25], 0.1);
        assert_eq!(offspring_counts(&anc, 2), vec![2, 0]);
        assert_eq!(systematic_resample(&[0.25; 4], 0.5), vec![0, 1, 2, 3]);
    }

    #[test]
    fn resampling_is_unbiased() {
        let w = [0.1, 0.45, 0.05, 0.3, 0.1];
        let mut r = seeded(6);
        let draws = 100_000;
        let mut total = [0usize; 5];
        for _ in 0..draws {
            for (t, c) in total.iter_mut().zip(offspring_counts(&systematic_resample(&w, r.random()), 5)) {
                *t += c;
            }
        }
        for (t, w) in total.iter().zip(w) {
            let mean = *t as f64 / draws as f64;
            assert!((mean - 5.0 * w).abs() / (5.0 * w) < 0.01, "{mean} vs {}", 5.0 * w);
        }
    }

    #[test]
    fn degenerate_weights_are_an_error() {
        assert!(matches!(normalize_log_weights(&[f64::NEG_INFINITY; 3]), Err(CfmError::AllWeightsDegenerate)));
        assert!(matches!(normalize_log_weights(&[f64::NAN, f64::NAN]), Err(CfmError::AllWeightsDegenerate)));
        let w = normalize_log_weights(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn single_particle_without_noise_or_reward_is_euler() {
        let (pred, params) = model(3, 4);
        let grid = TimeGrid::uniform(5);
        let cfg = GuidanceConfig { particles: 1, sigma0: 0.0, samples: 6, ..Default::default() };
        let guided = guided_sample(&pred, &params, &ZeroReward, &grid, &cfg, 9).unwrap();
        let euler = sample_euler(&pred, &params, &grid, 6, DiscretizeMode::Argmax, 9).unwrap();
        assert_eq!(guided.output.soft, euler.soft);
        assert_eq!(guided.resamples, 0);
    }

    #[test]
    fn uniform_weights_do_not_resample() {
        let (pred, params) = model(2, 3);
        let cfg = GuidanceConfig { particles: 8, ..Default::default() };
        let mut rngs = GuidanceRngs::new(1);
        let ens = init_ensemble(&pred, &params, 8, &ZeroReward, &cfg, &mut rngs.sample.prior).unwrap();
        let next = smc_step(ens, &pred, &params, 0.25, false, &ZeroReward, &cfg, &mut rngs).unwrap();
        assert_eq!(next.resamples, 0);
        assert_eq!(next.ess().unwrap(), 8.0);
    }

    #[test]
    fn strong_reward_triggers_resampling_and_resets_weights() {
        let (pred, params) = model(2, 3);
        let r = LinearReward { a: Tensor::new(vec![2, 3], vec![40., -40., 0., 0., 40., -40.]).unwrap() };
        let cfg = GuidanceConfig { particles: 32, pathway: RewardPathway::Soft, ..Default::default() };
        let mut rngs = GuidanceRngs::new(2);
        let mut ens = init_ensemble(&pred, &params, 32, &r, &cfg, &mut rngs.sample.prior).unwrap();
        for t in [0.25, 0.5, 0.75] {
            ens = smc_step(ens, &pred, &params, t, false, &r, &cfg, &mut rngs).unwrap();
        }
        assert!(ens.resamples > 0);
        if ens.log_weights.iter().all(|&w| w == 0.0) {
            assert_eq!(ens.ess().unwrap(), 32.0);
        }
    }

    #[test]
    fn logistic_reward_separates_the_toy_classes() {
        let ds = make_parity_dataset(4, 3).unwrap();
        let r = LogisticReward::fit(&ds, two_class_label, 2, 0, &LogisticFit::default()).unwrap();
        for s in ds.support() {
            assert_eq!(r.classify(s), two_class_label(s), "{s:?}");
        }
        let x = sample_prior(&mut seeded(7), 3, 4, 3).map(|v| v.abs());
        let f = |y: &Tensor| r.evaluate(y).unwrap().iter().sum();
        assert!(r.gradient(&x).unwrap().max_abs_diff(&fd_grad(f, &x, 1e-6)) < 1e-6);
    }

    #[test]
    fn guided_output_is_reproducible() {
        let (pred, params) = model(2, 3);
        let r = LinearReward { a: Tensor::new(vec![2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap() };
        let cfg = GuidanceConfig { particles: 4, samples: 10, nfe: 3, ..Default::default() };
        let a = guided_sample(&pred, &params, &r, &TimeGrid::uniform(3), &cfg, 5).unwrap();
        let b = guided_sample(&pred, &params, &r, &TimeGrid::uniform(3), &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.output.states.len(), 10);
    }

    proptest! {
        #[test]
        fn resampled_ancestors_are_sorted_and_in_range(raw in proptest::collection::vec(0.0f64..1.0, 1..20), u in 0.0f64..1.0) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-9;
            let w: Vec<f64> = raw.iter().map(|v| (v + 1e-9 / raw.len() as f64) / s).collect();
            let anc = systematic_resample(&w, u);
            prop_assert_eq!(anc.len(), w.len());
            prop_assert!(anc.windows(2).all(|p| p[0] <= p[1]));
            prop_assert!(anc.iter().all(|&a| a < w.len()));
        }
    }
}
