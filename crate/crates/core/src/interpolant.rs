//! Stochastic interpolants `x_t = alpha(t) x0 + beta(t) x1` and the closed-form
//! maps between endpoint predictions, velocities and scores.

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{CfmError, Result};
use crate::rng;

/// Lower bound applied to every `1 - t` (or `1 - s`) denominator.
pub const DENOM_CLAMP: f64 = 0.05;

/// `max(1 - t, DENOM_CLAMP)`.
#[inline]
pub fn one_minus_clamped(t: f64) -> f64 {
    (1.0 - t).max(DENOM_CLAMP)
}

/// Interpolation schedule.
#[derive(Clone, Copy, Debug, Default)]
pub enum Schedule {
    /// `alpha = 1 - t`, `beta = t`.
    #[default]
    Linear,
    /// Any affine schedule given by its coefficient functions and derivatives.
    Affine {
        alpha: fn(f64) -> f64,
        beta: fn(f64) -> f64,
        alpha_dot: fn(f64) -> f64,
        beta_dot: fn(f64) -> f64,
    },
}

impl Schedule {
    /// The linear schedule expressed through the general affine path.
    pub fn linear_as_affine() -> Self {
        Schedule::Affine { alpha: |t| 1.0 - t, beta: |t| t, alpha_dot: |_| -1.0, beta_dot: |_| 1.0 }
    }

    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`.
    pub fn trigonometric() -> Self {
        use std::f64::consts::FRAC_PI_2;
        Schedule::Affine {
            alpha: |t| (FRAC_PI_2 * t).cos(),
            beta: |t| (FRAC_PI_2 * t).sin(),
            alpha_dot: |t| -FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            beta_dot: |t| FRAC_PI_2 * (FRAC_PI_2 * t).cos(),
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self, Schedule::Linear)
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
            Schedule::Affine { alpha, .. } => alpha(t),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
            Schedule::Affine { beta, .. } => beta(t),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
            Schedule::Affine { alpha_dot, .. } => alpha_dot(t),
        }
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0,
            Schedule::Affine { beta_dot, .. } => beta_dot(t),
        }
    }
}

/// I.i.d. standard normal prior draws of shape `[b, d, k]`.
pub fn sample_prior(rng: &mut impl Rng, b: usize, d: usize, k: usize) -> Tensor {
    Tensor::new(vec![b, d, k], rng::normals(rng, b * d * k)).expect("prior shape")
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CfmError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `alpha(t) x0 + beta(t) x1` for a shared time.
pub fn interpolate(sched: &Schedule, x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    check_same(x0, x1)?;
    // Schedules pin alpha/beta at the boundaries; skip round-off there.
    if t == 0.0 {
        return Ok(x0.clone());
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let (a, b) = (sched.alpha(t), sched.beta(t));
    x0.zip_map(x1, |u, v| a * u + b * v)
}

/// Interpolation with one time per leading-axis item.
pub fn interpolate_batch(sched: &Schedule, x0: &Tensor, x1: &Tensor, ts: &[f64]) -> Result<Tensor> {
    check_same(x0, x1)?;
    let b = x0.shape()[0];
    if ts.len() != b {
        return Err(CfmError::ShapeMismatch(format!("{} times for batch of {b}", ts.len())));
    }
    let row = x0.len() / b.max(1);
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let (a, bt) = (sched.alpha(t), sched.beta(t));
        let dst = &mut out.data_mut()[i * row..(i + 1) * row];
        for (j, v) in dst.iter_mut().enumerate() {
            *v = a * x0.data()[i * row + j] + bt * x1.data()[i * row + j];
        }
    }
    Ok(out)
}

/// Velocity implied by an endpoint prediction `pi` at state `x`, time `t`.
pub fn velocity_from_endpoint(pi: &Tensor, x: &Tensor, t: f64, sched: &Schedule) -> Result<Tensor> {
    check_same(pi, x)?;
    match sched {
        Schedule::Linear => {
            let denom = one_minus_clamped(t);
            pi.zip_map(x, |p, v| (p - v) / denom)
        }
        Schedule::Affine { .. } => {
            let a = sched.alpha(t);
            if a == 0.0 && t < 1.0 {
                return Err(CfmError::ScheduleSingularity(t));
            }
            let (ad, b, bd) = (sched.alpha_dot(t), sched.beta(t), sched.beta_dot(t));
            let cx = ad / a;
            let cp = bd - b * ad / a;
            pi.zip_map(x, |p, v| cx * v + cp * p)
        }
    }
}

/// Score of the interpolant marginal from the velocity: `(t v - x) / (1 - t)`.
pub fn score_from_velocity(v: &Tensor, x: &Tensor, t: f64) -> Result<Tensor> {
    check_same(v, x)?;
    let denom = one_minus_clamped(t);
    v.zip_map(x, |vv, xx| (t * vv - xx) / denom)
}

/// `E||x_t||^2 = d (1 - t)^2 + t^2` for Gaussian `x0` and a one-hot `x1` of size `d`.
pub fn expected_interpolant_norm(d: usize, t: f64) -> f64 {
    let d = d as f64;
    d * (1.0 - t) * (1.0 - t) + t * t
}
