//! Samplers: few-step flow-map jumps, Euler integration of the instantaneous
//! velocity, Euler-Maruyama for the score-corrected SDE, and discretization of
//! the final soft state.
//!
//! The final step of every sampler lands on `t = 1` with an exact unit jump to
//! the endpoint prediction; the `0.05` clamp only affects intermediate knots.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::State;
use crate::error::{CfmError, Result};
use crate::flowmap::{flow_map_apply, TimePair};
use crate::interpolant::{one_minus_clamped, sample_prior, score_from_velocity};
use crate::predictor::{OutputKind, Predictor, PredictorParams};
use crate::rng::{self, CfmRng};

/// Knots `0 = t_0 < ... < t_N = 1`. The single knot `[0]` is the empty grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(steps: usize) -> Self {
        if steps == 0 {
            return TimeGrid { knots: vec![0.0] };
        }
        let mut knots: Vec<f64> = (0..steps).map(|i| i as f64 / steps as f64).collect();
        knots.push(1.0);
        TimeGrid { knots }
    }

    pub fn custom(knots: Vec<f64>) -> Result<Self> {
        let ok = knots.first() == Some(&0.0)
            && (knots.len() == 1 || knots.last() == Some(&1.0))
            && knots.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(CfmError::InvalidArgument(format!("time grid must rise strictly from 0 to 1, got {knots:?}")));
        }
        Ok(TimeGrid { knots })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    fn segments(&self) -> impl Iterator<Item = (f64, f64, bool)> + '_ {
        let n = self.steps();
        self.knots.windows(2).enumerate().map(move |(i, w)| (w[0], w[1], i + 1 == n))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeMode {
    /// Lowest index wins ties.
    #[default]
    Argmax,
    Categorical,
}

/// Final soft states and their discretization.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub soft: Tensor,
    pub hard: Tensor,
    pub states: Vec<State>,
    pub mode: DiscretizeMode,
}

/// Per-slice (last axis) discretization into a one-hot tensor.
pub fn discretize(soft: &Tensor, mode: DiscretizeMode, rng: &mut impl Rng) -> Result<(Tensor, Vec<State>)> {
    let shape = soft.shape();
    if shape.len() != 3 {
        return Err(CfmError::ShapeMismatch(format!("expected [B, D, K], got {shape:?}")));
    }
    let (b, d, k) = (shape[0], shape[1], shape[2]);
    let mut hard = Tensor::zeros(shape);
    let mut states = Vec::with_capacity(b);
    for i in 0..b {
        let mut state = Vec::with_capacity(d);
        for j in 0..d {
            let slice = &soft.data()[(i * d + j) * k..(i * d + j + 1) * k];
            let c = match mode {
                DiscretizeMode::Argmax => argmax(slice),
                DiscretizeMode::Categorical => draw_categorical(slice, rng).ok_or_else(|| CfmError::DegenerateSlice(i * d + j, slice.iter().map(|v| v.max(0.0)).sum()))?,
            };
            hard.data_mut()[(i * d + j) * k + c] = 1.0;
            state.push(c);
        }
        states.push(state);
    }
    Ok((hard, states))
}

pub fn argmax(slice: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in slice.iter().enumerate() {
        if v > slice[best] {
            best = i;
        }
    }
    best
}

fn draw_categorical(slice: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let clean: Vec<f64> = slice.iter().map(|&v| if v >= -1e-9 { v.max(0.0) } else { f64::NAN }).collect();
    let total: f64 = clean.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in clean.iter().enumerate() {
        acc += p;
        if u < acc {
            return Some(i);
        }
    }
    clean.iter().rposition(|&p| p > 0.0)
}

/// What a sampler needs from a model.
pub trait Field {
    /// `X_{s,t}(x)` for a shared time pair.
    fn jump(&self, x: &Tensor, s: f64, t: f64) -> Result<Tensor>;
    /// Instantaneous velocity `v_{t,t}(x)`.
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
    /// Endpoint prediction `pi_{t,t}(x)`, for fields that have one.
    fn denoise(&self, _x: &Tensor, _t: f64) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// A trained predictor as a sampling field.
pub struct ModelField<'a> {
    pub predictor: &'a Predictor,
    pub params: &'a PredictorParams,
}

impl ModelField<'_> {
    fn call(&self, x: &Tensor, s: f64, t: f64) -> Result<Tensor> {
        let b = x.shape()[0];
        self.predictor.predict(self.params, x, &vec![s; b], &vec![t; b])
    }
}

impl Field for ModelField<'_> {
    fn jump(&self, x: &Tensor, s: f64, t: f64) -> Result<Tensor> {
        let out = self.call(x, s, t)?;
        match self.predictor.cfg.output {
            OutputKind::Simplex if t == 1.0 => Ok(out),
            OutputKind::Simplex => flow_map_apply(x, &out, TimePair::new(s, t)?),
            OutputKind::Velocity => x.zip_map(&out, |x, v| x + (t - s) * v),
        }
    }

    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let out = self.call(x, t, t)?;
        match self.predictor.cfg.output {
            OutputKind::Simplex => out.zip_map(x, |p, v| (p - v) / one_minus_clamped(t)),
            OutputKind::Velocity => Ok(out),
        }
    }

    fn denoise(&self, x: &Tensor, t: f64) -> Result<Option<Tensor>> {
        match self.predictor.cfg.output {
            OutputKind::Simplex => self.call(x, t, t).map(Some),
            OutputKind::Velocity => Ok(None),
        }
    }
}

/// Euler step; the last step jumps exactly onto the endpoint prediction when
/// the field has one.
fn euler_update(field: &dyn Field, x: &Tensor, t0: f64, t1: f64, last: bool) -> Result<Tensor> {
    if last {
        if let Some(pi) = field.denoise(x, t0)? {
            return Ok(pi);
        }
    }
    let v = field.velocity(x, t0)?;
    let dt = t1 - t0;
    x.zip_map(&v, |x, v| x + dt * v)
}

/// Few-step sampling: `x <- X_{t_i, t_{i+1}}(x)` over the grid.
pub fn flowmap_trajectory(field: &dyn Field, x0: Tensor, grid: &TimeGrid, mut on_step: impl FnMut(&Tensor, &Tensor, f64, f64)) -> Result<Tensor> {
    let mut x = x0;
    for (t0, t1, _) in grid.segments() {
        let next = field.jump(&x, t0, t1)?;
        on_step(&x, &next, t0, t1);
        x = next;
    }
    Ok(x)
}

pub fn euler_trajectory(field: &dyn Field, x0: Tensor, grid: &TimeGrid) -> Result<Tensor> {
    let mut x = x0;
    for (t0, t1, last) in grid.segments() {
        x = euler_update(field, &x, t0, t1, last)?;
    }
    Ok(x)
}

/// SDE noise scale `sigma(t) = sigma0 (1 - t)`.
pub fn sde_sigma(sigma0: f64, t: f64) -> f64 {
    sigma0 * (1.0 - t)
}

/// One Euler-Maruyama step of `dx = [v + sigma^2 / 2 s] dt + sigma dW`.
/// `extra_score` is added to the model score (reward tilting). The last step is
/// deterministic.
pub fn sde_update(
    field: &dyn Field,
    x: &Tensor,
    t0: f64,
    t1: f64,
    last: bool,
    sigma0: f64,
    extra_score: Option<&Tensor>,
    noise: &mut CfmRng,
) -> Result<Tensor> {
    let sigma = sde_sigma(sigma0, t0);
    if last || sigma == 0.0 {
        return euler_update(field, x, t0, t1, last);
    }
    let v = field.velocity(x, t0)?;
    let dt = t1 - t0;
    let mut score = score_from_velocity(&v, x, t0)?;
    if let Some(extra) = extra_score {
        score = score.add(extra)?;
    }
    let half_var = 0.5 * sigma * sigma;
    let drift = v.zip_map(&score, |v, s| v + half_var * s)?;
    let sq = dt.sqrt();
    let mut out = x.zip_map(&drift, |x, d| x + dt * d)?;
    for o in out.data_mut() {
        *o += sigma * sq * rng::normal(noise);
    }
    Ok(out)
}

pub fn sde_trajectory(field: &dyn Field, x0: Tensor, grid: &TimeGrid, sigma0: f64, noise: &mut CfmRng) -> Result<Tensor> {
    let mut x = x0;
    for (t0, t1, last) in grid.segments() {
        x = sde_update(field, &x, t0, t1, last, sigma0, None, noise)?;
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Flowmap,
    Euler,
    Sde,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Flowmap => "flowmap",
            SamplerKind::Euler => "euler",
            SamplerKind::Sde => "sde",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = CfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flowmap" => Ok(SamplerKind::Flowmap),
            "euler" => Ok(SamplerKind::Euler),
            "sde" => Ok(SamplerKind::Sde),
            _ => Err(CfmError::InvalidArgument(format!("unknown sampler `{s}` (flowmap, euler, sde)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub sampler: SamplerKind,
    pub nfe: usize,
    pub mode: DiscretizeMode,
    /// `sigma0` of the SDE noise schedule.
    pub sigma0: f64,
    pub samples: usize,
    /// Samples integrated together.
    pub chunk: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { sampler: SamplerKind::Flowmap, nfe: 1, mode: DiscretizeMode::Argmax, sigma0: 1.0, samples: 10_000, chunk: 4096 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nfe == 0 {
            return Err(CfmError::Config("sample.nfe must be >= 1".into()));
        }
        if self.chunk == 0 {
            return Err(CfmError::Config("sample.chunk must be >= 1".into()));
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return Err(CfmError::Config("sample.sigma0 must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Independent streams for prior draws, SDE noise and discretization.
pub struct SampleRngs {
    pub prior: CfmRng,
    pub noise: CfmRng,
    pub discrete: CfmRng,
}

impl SampleRngs {
    pub fn new(seed: u64) -> Self {
        SampleRngs {
            prior: rng::stream(seed, rng::STREAM_PRIOR),
            noise: rng::stream(seed, rng::STREAM_NOISE),
            discrete: rng::stream(seed, rng::STREAM_DISCRETE),
        }
    }
}

/// Draws `n` samples in chunks with the configured sampler.
pub fn sample_with(field: &dyn Field, shape: (usize, usize), kind: SamplerKind, grid: &TimeGrid, sigma0: f64, mode: DiscretizeMode, n: usize, chunk: usize, rngs: &mut SampleRngs) -> Result<SampleOutput> {
    let (d, k) = shape;
    let mut softs = Vec::new();
    let mut done = 0;
    while done < n {
        let b = chunk.min(n - done);
        let x0 = sample_prior(&mut rngs.prior, b, d, k);
        let x = match kind {
            SamplerKind::Flowmap => flowmap_trajectory(field, x0, grid, |_, _, _, _| {})?,
            SamplerKind::Euler => euler_trajectory(field, x0, grid)?,
            SamplerKind::Sde => sde_trajectory(field, x0, grid, sigma0, &mut rngs.noise)?,
        };
        softs.push(x);
        done += b;
    }
    let soft = if softs.is_empty() { Tensor::zeros(&[0, d, k]) } else { Tensor::concat_rows(&softs)? };
    let (hard, states) = discretize(&soft, mode, &mut rngs.discrete)?;
    Ok(SampleOutput { soft, hard, states, mode })
}

/// Samples from a trained predictor according to `cfg`.
pub fn sample(predictor: &Predictor, params: &PredictorParams, cfg: &SampleConfig, seed: u64) -> Result<SampleOutput> {
    cfg.validate()?;
    let field = ModelField { predictor, params };
    let grid = TimeGrid::uniform(cfg.nfe);
    let shape = (predictor.cfg.positions, predictor.cfg.categories);
    sample_with(&field, shape, cfg.sampler, &grid, cfg.sigma0, cfg.mode, cfg.samples, cfg.chunk, &mut SampleRngs::new(seed))
}

pub fn sample_flowmap(predictor: &Predictor, params: &PredictorParams, grid: &TimeGrid, n: usize, mode: DiscretizeMode, seed: u64) -> Result<SampleOutput> {
    let shape = (predictor.cfg.positions, predictor.cfg.categories);
    sample_with(&ModelField { predictor, params }, shape, SamplerKind::Flowmap, grid, 0.0, mode, n, 4096, &mut SampleRngs::new(seed))
}

pub fn sample_euler(predictor: &Predictor, params: &PredictorParams, grid: &TimeGrid, n: usize, mode: DiscretizeMode, seed: u64) -> Result<SampleOutput> {
    let shape = (predictor.cfg.positions, predictor.cfg.categories);
    sample_with(&ModelField { predictor, params }, shape, SamplerKind::Euler, grid, 0.0, mode, n, 4096, &mut SampleRngs::new(seed))
}

pub fn sample_sde(predictor: &Predictor, params: &PredictorParams, grid: &TimeGrid, sigma0: f64, n: usize, mode: DiscretizeMode, seed: u64) -> Result<SampleOutput> {
    let shape = (predictor.cfg.positions, predictor.cfg.categories);
    sample_with(&ModelField { predictor, params }, shape, SamplerKind::Sde, grid, sigma0, mode, n, 4096, &mut SampleRngs::new(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{empirical, tv_distance};
    use crate::flowmap::confinement_check;
    use crate::predictor::PredictorConfig;
    use crate::rng::seeded;

    /// Endpoint fixed at `c` regardless of input and time.
    struct Constant(Tensor);

    impl Constant {
        fn like(&self, x: &Tensor) -> Tensor {
            let b = x.shape()[0];
            let rows: Vec<Tensor> = (0..b).map(|_| self.0.clone()).collect();
            Tensor::concat_rows(&rows).unwrap()
        }
    }

    impl Field for Constant {
        fn jump(&self, x: &Tensor, s: f64, t: f64) -> Result<Tensor> {
            if t == 1.0 {
                return Ok(self.like(x));
            }
            flow_map_apply(x, &self.like(x), TimePair::new(s, t)?)
        }

        fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
            self.like(x).zip_map(x, |p, v| (p - v) / one_minus_clamped(t))
        }

        fn denoise(&self, x: &Tensor, _t: f64) -> Result<Option<Tensor>> {
            Ok(Some(self.like(x)))
        }
    }

    fn model() -> (Predictor, PredictorParams) {
        let pred = Predictor::new(PredictorConfig { positions: 3, categories: 4, width: 8, depth: 2, embed_dim: 6, ..Default::default() }).unwrap();
        let params = pred.random_params(&mut seeded(1), 1.0);
        (pred, params)
    }

    #[test]
    fn grids() {
        assert_eq!(TimeGrid::uniform(4).knots(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(TimeGrid::uniform(0).steps(), 0);
        assert!(TimeGrid::custom(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::custom(vec![0.0, 0.5]).is_err());
        assert!(TimeGrid::custom(vec![0.0, 0.3, 1.0]).is_ok());
    }

    #[test]
    fn discretize_examples() {
        let mut r = seeded(0);
        let onehot = Tensor::new(vec![1, 2, 3], vec![0., 1., 0., 0., 0., 1.]).unwrap();
        for mode in [DiscretizeMode::Argmax, DiscretizeMode::Categorical] {
            assert_eq!(discretize(&onehot, mode, &mut r).unwrap().0, onehot);
        }
        let uniform = Tensor::full(&[1, 1, 3], 1.0 / 3.0);
        assert_eq!(discretize(&uniform, DiscretizeMode::Argmax, &mut r).unwrap().1, vec![vec![0]]);
        let zero = Tensor::zeros(&[1, 1, 3]);
        assert!(matches!(discretize(&zero, DiscretizeMode::Categorical, &mut r), Err(CfmError::DegenerateSlice(0, _))));
        let tiny_negative = Tensor::new(vec![1, 1, 2], vec![-1e-12, 1.0]).unwrap();
        assert_eq!(discretize(&tiny_negative, DiscretizeMode::Categorical, &mut r).unwrap().1, vec![vec![1]]);
    }

    #[test]
    fn categorical_frequencies() {
        let n = 1_000_000;
        let soft = Tensor::new(vec![n, 1, 2], [0.25, 0.75].repeat(n)).unwrap();
        let (_, states) = discretize(&soft, DiscretizeMode::Categorical, &mut seeded(2)).unwrap();
        let ones = states.iter().filter(|s| s[0] == 1).count() as f64 / n as f64;
        assert!((ones - 0.75).abs() < 0.002, "{ones}");
    }

    #[test]
    fn one_flowmap_step_is_the_endpoint_prediction() {
        let (pred, params) = model();
        let out = sample_flowmap(&pred, &params, &TimeGrid::uniform(1), 5, DiscretizeMode::Argmax, 3).unwrap();
        let x0 = sample_prior(&mut SampleRngs::new(3).prior, 5, 3, 4);
        let pi = pred.predict(&params, &x0, &[0.0; 5], &[1.0; 5]).unwrap();
        assert_eq!(out.soft, pi);
        for slice in out.soft.data().chunks(4) {
            assert!((slice.iter().sum::<f64>() - 1.0).abs() < 1e-12 && slice.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn flowmap_knots_are_confined() {
        let (pred, params) = model();
        let field = ModelField { predictor: &pred, params: &params };
        let x0 = sample_prior(&mut seeded(4), 64, 3, 4);
        let mut checked = 0;
        flowmap_trajectory(&field, x0, &TimeGrid::uniform(8), |a, b, s, t| {
            assert!(confinement_check(a, b, TimePair::new(s, t).unwrap()));
            checked += 1;
        })
        .unwrap();
        assert_eq!(checked, 8);
    }

    #[test]
    fn constant_field_euler_and_flowmap_agree() {
        let c = Tensor::new(vec![1, 2, 2], vec![0.2, 0.8, 0.6, 0.4]).unwrap();
        let field = Constant(c.clone());
        let x0 = sample_prior(&mut seeded(5), 1, 2, 2);
        let e = euler_trajectory(&field, x0.clone(), &TimeGrid::uniform(1)).unwrap();
        assert_eq!(e, c);
        let two = flowmap_trajectory(&field, x0.clone(), &TimeGrid { knots: vec![0.0, 0.3, 0.7] }, |_, _, _, _| {}).unwrap();
        let one = field.jump(&x0, 0.0, 0.7).unwrap();
        assert!(two.max_abs_diff(&one) < 1e-15);
        let e = euler_trajectory(&field, x0.clone(), &TimeGrid::uniform(0)).unwrap();
        assert_eq!(e, x0);
    }

    #[test]
    fn zero_steps_discretize_the_prior() {
        let (pred, params) = model();
        let out = sample_euler(&pred, &params, &TimeGrid::uniform(0), 4, DiscretizeMode::Argmax, 6).unwrap();
        let x0 = sample_prior(&mut SampleRngs::new(6).prior, 4, 3, 4);
        assert_eq!(out.soft, x0);
    }

    #[test]
    fn sde_without_noise_is_euler_and_seeds_reproduce() {
        let (pred, params) = model();
        let grid = TimeGrid::uniform(6);
        let a = sample_sde(&pred, &params, &grid, 0.0, 7, DiscretizeMode::Argmax, 8).unwrap();
        let b = sample_euler(&pred, &params, &grid, 7, DiscretizeMode::Argmax, 8).unwrap();
        assert_eq!(a.soft, b.soft);
        let c = sample_sde(&pred, &params, &grid, 1.0, 7, DiscretizeMode::Argmax, 8).unwrap();
        let d = sample_sde(&pred, &params, &grid, 1.0, 7, DiscretizeMode::Argmax, 8).unwrap();
        assert_eq!(c, d);
        assert_ne!(a.soft, c.soft);
    }

    #[test]
    fn discretization_stream_leaves_soft_states_alone() {
        let (pred, params) = model();
        let grid = TimeGrid::uniform(3);
        let field = ModelField { predictor: &pred, params: &params };
        let mut r1 = SampleRngs::new(9);
        let mut r2 = SampleRngs::new(9);
        r2.discrete = seeded(1234);
        let a = sample_with(&field, (3, 4), SamplerKind::Sde, &grid, 1.0, DiscretizeMode::Categorical, 50, 16, &mut r1).unwrap();
        let b = sample_with(&field, (3, 4), SamplerKind::Sde, &grid, 1.0, DiscretizeMode::Categorical, 50, 16, &mut r2).unwrap();
        assert_eq!(a.soft, b.soft);
        assert_ne!(a.states, b.states);
    }

    /// Exact field for a point-mass target `x1`.
    struct PointMass(f64);

    impl Field for PointMass {
        fn jump(&self, x: &Tensor, s: f64, t: f64) -> Result<Tensor> {
            let g = (t - s) / one_minus_clamped(s);
            Ok(x.map(|v| v + g * (self.0 - v)))
        }

        fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
            Ok(x.map(|v| (self.0 - v) / one_minus_clamped(t)))
        }
    }

    #[test]
    fn sde_preserves_gaussian_marginals() {
        let x1 = 0.7;
        let n = 40_000;
        let grid = TimeGrid::uniform(400);
        let mut noise = seeded(10);
        let mut x = sample_prior(&mut seeded(11), n, 1, 1);
        for (i, (t0, t1, last)) in grid.segments().enumerate() {
            x = sde_update(&PointMass(x1), &x, t0, t1, last, 1.5, None, &mut noise).unwrap();
            if i + 1 == 200 || i + 1 == 300 {
                let t = t1;
                let mean = x.sum() / n as f64;
                let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let (m_true, v_true) = (t * x1, (1.0 - t).powi(2));
                assert!((mean - m_true).abs() < 0.03 * m_true, "t={t} mean {mean} vs {m_true}");
                assert!((var - v_true).abs() < 0.03 * v_true, "t={t} var {var} vs {v_true}");
            }
        }
    }

    #[test]
    fn many_flowmap_steps_approach_euler() {
        let (pred, params) = model();
        let a = sample_flowmap(&pred, &params, &TimeGrid::uniform(64), 4000, DiscretizeMode::Argmax, 12).unwrap();
        let b = sample_euler(&pred, &params, &TimeGrid::uniform(64), 4000, DiscretizeMode::Argmax, 12).unwrap();
        // An untrained map is not self-consistent, so only a loose agreement holds.
        let tv = tv_distance(&empirical(&a.states), &empirical(&b.states));
        assert!(tv < 0.5, "{tv}");
    }

    #[test]
    fn sampler_names_parse() {
        assert_eq!("euler".parse::<SamplerKind>().unwrap(), SamplerKind::Euler);
        assert!("rk4".parse::<SamplerKind>().is_err());
        assert!(SampleConfig { nfe: 0, ..Default::default() }.validate().is_err());
    }
}
