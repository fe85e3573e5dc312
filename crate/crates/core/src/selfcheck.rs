//! Randomized invariant suite behind `cfm selfcheck`.
//!
//! Each check draws random predictors and batches from a seed and reports the
//! worst violation it saw. The suite is cheap enough to run on every build.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::flowmap::{confinement_check, Teacher, flow_map_with_dt, lagrangian_residual, TimePair};
use crate::interpolant::{expected_interpolant_norm, interpolate, sample_prior, Schedule};
use crate::losses::{check_ecld_bound_with, kl, teacher_targets, term_value, term_value_and_grad, LossConfig, PairBatch, TdPower, Term, TimeWeight};
use crate::predictor::{OutputKind, Predictor, PredictorConfig, PredictorParams};
use crate::rng::{self, CfmRng};
use crate::sampler::{flowmap_trajectory, ModelField, TimeGrid};

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    pub seed: u64,
    /// Random draws for the bound suite.
    pub bound_draws: usize,
    /// TD power handed to the bound suite. Anything but `GammaSq` is a
    /// deliberately wrong convention and must fail.
    pub bound_td_power: TdPower,
    pub norm_draws: usize,
    pub trajectories: usize,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        SelfcheckOptions { seed: 0, bound_draws: 1000, bound_td_power: TdPower::GammaSq, norm_draws: 200_000, trajectories: 2000 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfcheckReport {
    pub results: Vec<CheckResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failed(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }
}

fn small(d: usize, k: usize) -> Predictor {
    Predictor::new(PredictorConfig { positions: d, categories: k, width: 8, depth: 2, embed_dim: 6, weight_net_dim: 4, ..Default::default() }).unwrap()
}

pub fn random_batch(r: &mut CfmRng, b: usize, d: usize, k: usize, max_s: f64) -> PairBatch {
    let x0 = sample_prior(r, b, d, k);
    let mut x1 = Tensor::zeros(&[b, d, k]);
    for row in 0..b * d {
        let c = r.random_range(0..k);
        x1.data_mut()[row * k + c] = 1.0;
    }
    let (mut s, mut t) = (Vec::new(), Vec::new());
    for _ in 0..b {
        let si = r.random::<f64>() * max_s;
        s.push(si);
        t.push(si + r.random::<f64>() * (1.0 - si));
    }
    PairBatch::new(x0, x1, s, t).unwrap()
}

fn result(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

/// `4 L_EC + 2 L_TD >= L_CSD`, the residual decomposition and the drift
/// identity on random draws.
pub fn check_bound(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 101);
    let (mut worst_slack, mut worst_dec, mut worst_drift) = (f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..opts.bound_draws {
        let (d, k) = (1 + i % 3, 2 + i % 3);
        let pred = small(d, k);
        let scale = 0.5 + 1.5 * r.random::<f64>();
        let params = pred.random_params(&mut r, scale);
        let batch = random_batch(&mut r, 4, d, k, 0.95);
        let c = check_ecld_bound_with(&pred, &params, &batch, opts.bound_td_power)?;
        worst_slack = worst_slack.min(c.slack);
        worst_dec = worst_dec.max(c.decomposition_error);
        worst_drift = worst_drift.max(c.drift_error);
    }
    let passed = worst_slack >= -1e-8 && worst_dec < 1e-9 && worst_drift < 1e-12;
    Ok(result("ecld_bound", passed, format!("{} draws: min slack {worst_slack:.3e}, decomposition {worst_dec:.3e}, drift {worst_drift:.3e}", opts.bound_draws)))
}

/// `||p - q||_1^2 <= 2 KL(p || q)` on random simplex pairs.
pub fn check_pinsker(opts: &SelfcheckOptions) -> CheckResult {
    let mut r = rng::stream(opts.seed, 102);
    let mut worst = f64::INFINITY;
    for i in 0..10_000 {
        let k = 2 + i % 6;
        let draw = |r: &mut CfmRng| {
            let v: Vec<f64> = (0..k).map(|_| r.random::<f64>().powi(3)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect::<Vec<_>>()
        };
        let (p, q) = (draw(&mut r), draw(&mut r));
        let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        worst = worst.min(2.0 * kl(&p, &q) - l1 * l1);
    }
    result("pinsker", worst >= -1e-12, format!("min 2KL - |p-q|^2 = {worst:.3e}"))
}

/// Worst relative gap between forward-mode `d/dt` of the predictor and of the
/// flow map and central differences in `t`. Targets are pulled inside `(s, 1)`
/// so the difference stencil stays in range.
pub fn jvp_fd_error(pred: &Predictor, params: &PredictorParams, batch: &PairBatch) -> Result<f64> {
    let s = &batch.s;
    let t: Vec<f64> = s.iter().zip(&batch.t).map(|(s, t)| (s + 0.01).max(t.min(0.99))).collect();
    let x_s = batch.x_s();
    let eps = 1e-5;
    let shifted = |dt: f64| -> Vec<f64> { t.iter().map(|t| t + dt).collect() };
    let rel = |an: &Tensor, hi: &Tensor, lo: &Tensor| -> Result<f64> {
        let fd = hi.zip_map(lo, |a, b| (a - b) / (2.0 * eps))?;
        let scale = fd.data().iter().fold(1e-8f64, |m, v| m.max(v.abs()));
        Ok(an.max_abs_diff(&fd) / scale)
    };

    let pi = pred.predict_with_dt(params, &x_s, s, &t)?;
    let (hi, lo) = (pred.predict(params, &x_s, s, &shifted(eps))?, pred.predict(params, &x_s, s, &shifted(-eps))?);
    let predictor_err = rel(&pi.tangent, &hi, &lo)?;

    let map = flow_map_with_dt(pred, params, &x_s, s, &t)?;
    let hi = flow_map_with_dt(pred, params, &x_s, s, &shifted(eps))?.x_out;
    let lo = flow_map_with_dt(pred, params, &x_s, s, &shifted(-eps))?.x_out;
    let map_err = rel(&map.dt_out.expect("flow map tangent"), &hi, &lo)?;
    Ok(predictor_err.max(map_err))
}

/// Forward-mode tangents against central differences.
pub fn check_jvp(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 103);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let pred = small(2, 3);
        let params = pred.random_params(&mut r, 1.0);
        let b = random_batch(&mut r, 3, 2, 3, 0.9);
        worst = worst.max(jvp_fd_error(&pred, &params, &b)?);
    }
    Ok(result("jvp_vs_fd", worst < 1e-5, format!("max relative error {worst:.3e}")))
}

/// Worst relative gap between the reverse-mode gradient of `term` and central
/// differences along `probes` random coordinates. The teacher output is held
/// at its value under `params`, which is what the gradient differentiates.
pub fn gradient_fd_error(pred: &Predictor, params: &PredictorParams, batch: &PairBatch, term: Term, cfg: &LossConfig, probes: usize, r: &mut CfmRng) -> Result<f64> {
    let fixed = teacher_targets(pred, params, batch, term)?;
    let teacher = || fixed.as_ref().map_or(Teacher::Live, Teacher::Fixed);
    let (_, grads) = term_value_and_grad(pred, params, teacher(), batch, term, cfg)?;
    let names: Vec<&String> = params.tensors.keys().collect();
    let eps = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let name = names[r.random_range(0..names.len())];
        let i = r.random_range(0..params.tensors[name].len());
        let at = |delta: f64| -> Result<f64> {
            let mut q = params.clone();
            q.tensors.get_mut(name).unwrap().data_mut()[i] += delta;
            term_value(pred, &q, teacher(), batch, term, cfg)
        };
        let fd = (at(eps)? - at(-eps)?) / (2.0 * eps);
        let an = grads.tensors[name].data()[i];
        worst = worst.max((fd - an).abs() / fd.abs().max(1e-4));
    }
    Ok(worst)
}

/// Whether the live-teacher gradient equals the gradient with the teacher
/// frozen as a constant, while moving the teacher still moves the loss.
pub fn teacher_is_detached(pred: &Predictor, params: &PredictorParams, batch: &PairBatch, term: Term, cfg: &LossConfig) -> Result<bool> {
    let Some(fixed) = teacher_targets(pred, params, batch, term)? else {
        return Ok(true);
    };
    let (v_live, g_live) = term_value_and_grad(pred, params, Teacher::Live, batch, term, cfg)?;
    let (v_fixed, g_fixed) = term_value_and_grad(pred, params, Teacher::Fixed(&fixed), batch, term, cfg)?;
    let shifted = fixed.map(|v| v + 1e-3);
    let moved = term_value(pred, params, Teacher::Fixed(&shifted), batch, term, cfg)?;
    // The drift term never reads the teacher.
    let reads_teacher = term != Term::Td;
    Ok(v_live == v_fixed && g_live == g_fixed && (!reads_teacher || (moved - v_live).abs() > 1e-12))
}

/// Batches and heads on which every loss term is defined.
pub fn term_fixture(term: Term, r: &mut CfmRng) -> (Predictor, PredictorParams, PairBatch) {
    let output = if term.needs_velocity() { OutputKind::Velocity } else { OutputKind::Simplex };
    let pred = Predictor::new(PredictorConfig { positions: 2, categories: 3, width: 8, depth: 2, embed_dim: 6, weight_net_dim: 4, output, ..Default::default() }).unwrap();
    let params = pred.random_params(r, 0.7);
    let mut batch = random_batch(r, 3, 2, 3, 0.9);
    if matches!(term, Term::Inf | Term::Fm) {
        batch.s = batch.t.clone();
    }
    (pred, params, batch)
}

/// Reverse-mode parameter gradients of every loss against central differences,
/// and detachment of the distillation teacher.
pub fn check_gradients(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 104);
    let mut worst = 0.0f64;
    let mut detached = true;
    for term in Term::ALL {
        for w_t in [TimeWeight::One, TimeWeight::Inv1mtSq] {
            let (pred, params, batch) = term_fixture(term, &mut r);
            let cfg = LossConfig { w_t, ..Default::default() };
            worst = worst.max(gradient_fd_error(&pred, &params, &batch, term, &cfg, 12, &mut r)?);
            detached &= teacher_is_detached(&pred, &params, &batch, term, &cfg)?;
        }
    }
    Ok(result("grad_vs_fd", worst < 1e-4 && detached, format!("max relative error {worst:.3e}, teacher detached: {detached}")))
}

/// Largest gap between a one-sided second-order difference of `t -> X_{s,t}(x)`
/// at `t = s` and the velocity `(pi_{s,s}(x) - x) / (1 - s)`.
pub fn tangent_fd_error(pred: &Predictor, params: &PredictorParams, x: &Tensor, s: &[f64], eps: f64) -> Result<f64> {
    let at = |k: f64| -> Result<Tensor> {
        let t: Vec<f64> = s.iter().map(|s| s + k * eps).collect();
        Ok(flow_map_with_dt(pred, params, x, s, &t)?.x_out)
    };
    let (m1, m2) = (at(1.0)?, at(2.0)?);
    let velocity = instantaneous_velocity(pred, params, x, s)?;
    let mut worst = 0.0f64;
    for (i, v) in velocity.data().iter().enumerate() {
        let fd = (-3.0 * x.data()[i] + 4.0 * m1.data()[i] - m2.data()[i]) / (2.0 * eps);
        worst = worst.max((fd - v).abs());
    }
    Ok(worst)
}

fn instantaneous_velocity(pred: &Predictor, params: &PredictorParams, x: &Tensor, s: &[f64]) -> Result<Tensor> {
    let pi = pred.predict(params, x, s, s)?;
    let mut v = pi.sub(x)?;
    let row = x.len() / s.len();
    for (i, chunk) in v.data_mut().chunks_mut(row).enumerate() {
        let denom = crate::interpolant::one_minus_clamped(s[i]);
        chunk.iter_mut().for_each(|e| *e /= denom);
    }
    Ok(v)
}

/// `X_{t,t} = id` exactly, the forward-mode tangent at `t = s` equals the
/// velocity, and so does a finite difference at `eps = 1e-4`.
pub fn check_tangent(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 105);
    let pred = small(2, 3);
    let mut identity = true;
    let (mut exact, mut fd) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let params = pred.random_params(&mut r, 1.0);
        let b = random_batch(&mut r, 4, 2, 3, 0.9);
        let x = b.x_s();
        let same = flow_map_with_dt(&pred, &params, &x, &b.s, &b.s)?;
        identity &= same.x_out == x;
        let v = instantaneous_velocity(&pred, &params, &x, &b.s)?;
        exact = exact.max(same.dt_out.expect("flow map tangent").max_abs_diff(&v));
        fd = fd.max(tangent_fd_error(&pred, &params, &x, &b.s, 1e-4)?);
        let res = lagrangian_residual(&pred, &params, &x, &b.s, &b.s)?;
        exact = exact.max(res.data().iter().fold(0.0, |m: f64, e| m.max(e.abs())));
    }
    let passed = identity && exact < 1e-9 && fd < 1e-3;
    Ok(result("tangent", passed, format!("identity exact: {identity}, tangent error {exact:.3e}, finite difference error {fd:.3e}")))
}

/// Every knot of random flow-map trajectories stays in the confinement cone.
pub fn check_confinement(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 106);
    let pred = small(3, 4);
    let params = pred.random_params(&mut r, 1.5);
    let field = ModelField { predictor: &pred, params: &params };
    let (mut ok, mut total) = (0usize, 0usize);
    for steps in [1, 2, 5, 8] {
        let x0 = sample_prior(&mut r, opts.trajectories / 4, 3, 4);
        flowmap_trajectory(&field, x0, &TimeGrid::uniform(steps), |a, b, s, t| {
            let tp = TimePair::new(s, t).unwrap();
            for i in 0..a.shape()[0] {
                total += 1;
                let (ai, bi) = (a.select_rows(&[i]), b.select_rows(&[i]));
                ok += usize::from(confinement_check(&ai, &bi, tp));
            }
        })?;
    }
    Ok(result("confinement", ok == total, format!("{ok}/{total} knots confined")))
}

/// Monte Carlo `E||x_t||^2` against `d (1 - t)^2 + t^2`.
pub fn check_norm_formula(opts: &SelfcheckOptions) -> Result<CheckResult> {
    let mut r = rng::stream(opts.seed, 107);
    let (d, k) = (1, 5);
    let n = opts.norm_draws;
    let x0 = sample_prior(&mut r, n, d, k);
    let mut x1 = Tensor::zeros(&[n, d, k]);
    for row in 0..n * d {
        let c = r.random_range(0..k);
        x1.data_mut()[row * k + c] = 1.0;
    }
    let mut worst = 0.0f64;
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let xt = interpolate(&Schedule::Linear, &x0, &x1, t)?;
        let mc = xt.norm_sq() / n as f64;
        let exact = expected_interpolant_norm(d * k, t);
        worst = worst.max((mc - exact).abs() / exact);
    }
    Ok(result("norm_formula", worst < 0.01, format!("max relative error {worst:.3e} over {n} draws")))
}

pub fn run_selfcheck(opts: &SelfcheckOptions) -> Result<SelfcheckReport> {
    let results = vec![
        check_bound(opts)?,
        check_pinsker(opts),
        check_jvp(opts)?,
        check_gradients(opts)?,
        check_tangent(opts)?,
        check_confinement(opts)?,
        check_norm_formula(opts)?,
    ];
    Ok(SelfcheckReport { results })
}

/// Seeded default run.
pub fn selfcheck(seed: u64) -> Result<SelfcheckReport> {
    run_selfcheck(&SelfcheckOptions { seed, ..Default::default() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> SelfcheckOptions {
        SelfcheckOptions { bound_draws: 100, norm_draws: 200_000, trajectories: 400, ..Default::default() }
    }

    #[test]
    fn fresh_build_passes() {
        let report = run_selfcheck(&quick()).unwrap();
        assert!(report.passed(), "{report:#?}");
        assert_eq!(report.results.len(), 7);
    }

    #[test]
    fn first_power_td_fails_the_bound_suite() {
        let opts = SelfcheckOptions { bound_td_power: TdPower::Gamma, ..quick() };
        let c = check_bound(&opts).unwrap();
        assert!(!c.passed, "{c:?}");
    }

    #[test]
    fn seeds_reproduce() {
        let a = check_bound(&SelfcheckOptions { bound_draws: 20, ..quick() }).unwrap();
        let b = check_bound(&SelfcheckOptions { bound_draws: 20, ..quick() }).unwrap();
        assert_eq!(a, b);
    }
}
