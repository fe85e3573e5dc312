//! Endpoint-parametrised flow map
//! `X_{s,t}(x) = x + (t - s) / (1 - s) * (pi_{s,t}(x) - x)`,
//! its time derivative, the Lagrangian residual and the confinement predicate.

use crate::autodiff::{Dual, Graph, Tensor, Var};
use crate::error::{CfmError, Result};
use crate::interpolant::one_minus_clamped;
use crate::predictor::{times, times_dual, BoundParams, Predictor, PredictorParams};

/// Ordered times `0 <= s <= t <= 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimePair {
    pub s: f64,
    pub t: f64,
}

impl TimePair {
    pub fn new(s: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s > t {
            return Err(CfmError::InvalidArgument(format!("time pair must satisfy 0 <= s <= t <= 1, got ({s}, {t})")));
        }
        Ok(TimePair { s, t })
    }

    pub fn diagonal(t: f64) -> Result<Self> {
        Self::new(t, t)
    }

    /// Step fraction `(t - s) / max(1 - s, clamp)`.
    pub fn gamma(&self) -> f64 {
        gamma(self.s, self.t)
    }
}

pub fn gamma(s: f64, t: f64) -> f64 {
    (t - s) / one_minus_clamped(s)
}

/// Output of a flow-map evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMapEval {
    pub x_out: Tensor,
    pub dt_out: Option<Tensor>,
}

fn lerp_rows(x_s: &Tensor, pi: &Tensor, gammas: &[f64]) -> Result<Tensor> {
    if x_s.shape() != pi.shape() {
        return Err(CfmError::ShapeMismatch(format!("{:?} vs {:?}", x_s.shape(), pi.shape())));
    }
    let b = gammas.len();
    if x_s.shape().first() != Some(&b) {
        return Err(CfmError::ShapeMismatch(format!("{b} time pairs for state {:?}", x_s.shape())));
    }
    let row = x_s.len() / b.max(1);
    let mut out = x_s.clone();
    for (i, &gm) in gammas.iter().enumerate() {
        if gm == 0.0 {
            continue;
        }
        let range = i * row..(i + 1) * row;
        for ((o, &x), &p) in out.data_mut()[range.clone()].iter_mut().zip(&x_s.data()[range.clone()]).zip(&pi.data()[range]) {
            *o = (1.0 - gm) * x + gm * p;
        }
    }
    Ok(out)
}

/// `X_{s,t}(x_s)` for a given endpoint prediction. Identity when `s == t`.
pub fn flow_map_apply(x_s: &Tensor, pi: &Tensor, tp: TimePair) -> Result<Tensor> {
    if x_s.shape() != pi.shape() {
        return Err(CfmError::ShapeMismatch(format!("{:?} vs {:?}", x_s.shape(), pi.shape())));
    }
    let gm = tp.gamma();
    if gm == 0.0 {
        return Ok(x_s.clone());
    }
    x_s.zip_map(pi, |x, p| (1.0 - gm) * x + gm * p)
}

/// Batched [`flow_map_apply`] with one time pair per leading-axis item.
pub fn flow_map_apply_batch(x_s: &Tensor, pi: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
    let gammas: Vec<f64> = s.iter().zip(t).map(|(&s, &t)| gamma(s, t)).collect();
    lerp_rows(x_s, pi, &gammas)
}

/// Per-item `gamma` as a `[B, 1, 1]` dual along `t`: tangent `1 / (1 - s)`.
fn gamma_dual<'g>(g: &'g Graph, s: &[f64], t: &[f64], with_dt: bool) -> Dual<'g> {
    let b = s.len();
    let gm: Vec<f64> = s.iter().zip(t).map(|(&s, &t)| gamma(s, t)).collect();
    let primal = g.constant(Tensor::new(vec![b, 1, 1], gm).unwrap());
    if with_dt {
        let dg: Vec<f64> = s.iter().map(|&s| 1.0 / one_minus_clamped(s)).collect();
        Dual::new(primal, g.constant(Tensor::new(vec![b, 1, 1], dg).unwrap()))
    } else {
        Dual::constant(primal)
    }
}

/// Where the distillation teacher `pi_{t,t}` takes its parameters from.
#[derive(Clone, Copy)]
pub enum Teacher<'a> {
    /// The student's own parameters behind a stop-gradient.
    Live,
    /// Precomputed teacher outputs, so finite-difference oracles can hold the
    /// whole teacher branch fixed.
    Fixed(&'a Tensor),
}

/// Predictor plus parameters bound on one tape.
pub struct TapeModel<'g, 'a> {
    pub graph: &'g Graph,
    pub predictor: &'a Predictor,
    pub params: BoundParams<'g>,
    teacher: Option<Var<'g>>,
}

impl<'g, 'a> TapeModel<'g, 'a> {
    pub fn new(graph: &'g Graph, predictor: &'a Predictor, params: &PredictorParams, trainable: bool, teacher: Teacher<'_>) -> Self {
        let teacher = match teacher {
            Teacher::Live => None,
            Teacher::Fixed(v) => Some(graph.constant(v.clone())),
        };
        TapeModel { graph, predictor, params: params.bind(graph, trainable), teacher }
    }

    /// `pi_{s,t}(x)`; with `with_dt` the tangent is `d/dt pi_{s,t}(x)`.
    pub fn student(&self, x: Dual<'g>, s: &[f64], t: &[f64], with_dt: bool) -> Dual<'g> {
        let td = if with_dt { times_dual(self.graph, t) } else { times(self.graph, t) };
        self.predictor.forward(&self.params, x, times(self.graph, s), td)
    }

    /// `sg(pi_{t,t}(sg(x)))`.
    pub fn teacher(&self, x: Var<'g>, t: &[f64]) -> Var<'g> {
        if let Some(fixed) = self.teacher {
            assert_eq!(fixed.shape(), x.shape(), "fixed teacher shape");
            return fixed;
        }
        let x = Dual::constant(x.detach());
        let tt = times(self.graph, t);
        self.predictor.forward(&self.params, x, tt, tt).primal.detach()
    }
}

/// Tape values shared by the distillation losses for one off-diagonal batch.
pub struct FlowMapBranch<'g> {
    /// `pi_{s,t}(x_s)` with tangent `d/dt pi_{s,t}(x_s)`.
    pub pi: Dual<'g>,
    /// `X_{s,t}(x_s)` with tangent `d/dt X_{s,t}(x_s)`.
    pub x_out: Dual<'g>,
    /// Detached teacher `pi_{t,t}(X_{s,t}(x_s))`.
    pub teacher: Var<'g>,
    /// Per-item `gamma`, shape `[B, 1, 1]`.
    pub gamma: Var<'g>,
}

/// One forward-mode pass through `t' -> x_s + gamma(t') (pi_{s,t'}(x_s) - x_s)`
/// followed by the detached teacher call at the transported state.
pub fn flow_map_branch<'g>(model: &TapeModel<'g, '_>, x_s: &Tensor, s: &[f64], t: &[f64]) -> FlowMapBranch<'g> {
    let g = model.graph;
    let xs = Dual::constant(g.constant(x_s.clone()));
    let pi = model.student(xs, s, t, true);
    let gm = gamma_dual(g, s, t, true);
    let x_out = xs.add(gm.mul(pi.sub(xs)));
    let teacher = model.teacher(x_out.primal, t);
    FlowMapBranch { pi, x_out, teacher, gamma: gm.primal }
}

/// Scaled Lagrangian residual `(1 - t) dX/dt - (pi_{t,t}(X) - X)` on the tape.
pub fn residual_on_tape<'g>(branch: &FlowMapBranch<'g>, t: &[f64]) -> Var<'g> {
    let g = branch.teacher.graph();
    let one_minus_t = g.constant(Tensor::new(vec![t.len(), 1, 1], t.iter().map(|t| 1.0 - t).collect()).unwrap());
    let dx = branch.x_out.tangent_or_zero();
    one_minus_t * dx - (branch.teacher - branch.x_out.primal)
}

/// `X_{s,t}(x_s)` and `d/dt X_{s,t}(x_s)` from one forward-mode pass.
pub fn flow_map_with_dt(predictor: &Predictor, params: &PredictorParams, x_s: &Tensor, s: &[f64], t: &[f64]) -> Result<FlowMapEval> {
    check_times(x_s, s, t)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, false, Teacher::Live);
    let xs = Dual::constant(g.constant(x_s.clone()));
    let pi = model.student(xs, s, t, true);
    let x_out = xs.add(gamma_dual(&g, s, t, true).mul(pi.sub(xs)));
    let eval = x_out.materialize();
    // The boundary is an exact identity regardless of floating-point noise.
    let x_out = flow_map_apply_batch(x_s, &pi.primal.value(), s, t)?;
    Ok(FlowMapEval { x_out, dt_out: Some(eval.tangent) })
}

/// Lagrangian residual `(1 - t) dX/dt - (pi_{t,t}(X) - X)` per item.
pub fn lagrangian_residual(predictor: &Predictor, params: &PredictorParams, x_s: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
    check_times(x_s, s, t)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, false, Teacher::Live);
    let branch = flow_map_branch(&model, x_s, s, t);
    let r = residual_on_tape(&branch, t);
    Ok((*r.value()).clone())
}

fn check_times(x: &Tensor, s: &[f64], t: &[f64]) -> Result<()> {
    if s.len() != t.len() || x.shape().first() != Some(&s.len()) {
        return Err(CfmError::ShapeMismatch(format!("{} / {} times for state {:?}", s.len(), t.len(), x.shape())));
    }
    for (&s, &t) in s.iter().zip(t) {
        TimePair::new(s, t)?;
    }
    Ok(())
}

/// Recovers the simplex point `y` with `x_out = (1 - gamma) x_s + gamma y`,
/// if every `K`-slice of `y` is a probability vector within `1e-9`.
pub fn confinement_witness(x_s: &Tensor, x_out: &Tensor, tp: TimePair) -> Option<Tensor> {
    if x_s.shape() != x_out.shape() {
        return None;
    }
    let gm = tp.gamma();
    if gm == 0.0 {
        return (x_s == x_out).then(|| x_s.clone());
    }
    let y = x_out.zip_map(x_s, |o, x| (o - (1.0 - gm) * x) / gm).ok()?;
    let k = *y.shape().last()?;
    let ok = y.data().chunks(k).all(|slice| {
        slice.iter().all(|&v| v >= -1e-9) && (slice.iter().sum::<f64>() - 1.0).abs() <= 1e-9
    });
    ok.then_some(y)
}

/// Whether `x_out` lies on a segment from `x_s` to a point of the simplex.
pub fn confinement_check(x_s: &Tensor, x_out: &Tensor, tp: TimePair) -> bool {
    let gm = tp.gamma();
    if gm == 0.0 {
        return x_s == x_out;
    }
    confinement_witness(x_s, x_out, tp).is_some()
}
