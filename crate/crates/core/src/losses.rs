//! Training objectives.
//!
//! Every term is first built on a tape as a per-item column `[B, 1]` so the
//! trainer can combine branches and apply per-sample uncertainty weights. The
//! plain functions (`loss_inf`, `loss_csd`, ...) return batch means.
//!
//! Reductions: squared norms and KL/CE sum over all `D * K` entries of an item;
//! `L_inf` averages its cross-entropy over the `D` positions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Graph, Tensor, Var};
use crate::error::{CfmError, Result};
use crate::flowmap::{flow_map_branch, residual_on_tape, FlowMapBranch, TapeModel, Teacher};
use crate::interpolant::{interpolate_batch, one_minus_clamped, Schedule};
use crate::predictor::{times, OutputKind, Predictor, PredictorParams};

/// Floor applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Csd,
    #[default]
    Ecld,
    /// Unconstrained-velocity Lagrangian self-distillation plus flow matching.
    Naive,
}

/// Time weight `w_t` on the distillation terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimeWeight {
    #[default]
    One,
    Inv1mt,
    Inv1mtSq,
}

impl TimeWeight {
    pub fn at(self, t: f64) -> f64 {
        match self {
            TimeWeight::One => 1.0,
            TimeWeight::Inv1mt => 1.0 / one_minus_clamped(t),
            TimeWeight::Inv1mtSq => one_minus_clamped(t).powi(-2),
        }
    }
}

/// Power of `gamma` in front of the temporal drift penalty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TdPower {
    Gamma,
    #[default]
    GammaSq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub w_t: TimeWeight,
    pub label_smoothing: f64,
    pub diagonal_fraction: f64,
    pub td_power: TdPower,
    /// Learned per-sample weights `e^{-w} L + w` on both branches.
    pub uncertainty_weighting: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ecld,
            w_t: TimeWeight::One,
            label_smoothing: 0.1,
            diagonal_fraction: 0.75,
            td_power: TdPower::GammaSq,
            uncertainty_weighting: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diagonal_fraction > 0.0 && self.diagonal_fraction <= 1.0) {
            return Err(CfmError::Config(format!("loss.diagonal_fraction must be in (0, 1], got {}", self.diagonal_fraction)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(CfmError::Config(format!("loss.label_smoothing must be in [0, 1), got {}", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Loss values of one training step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    pub diagonal_size: usize,
    pub off_diagonal_size: usize,
}

impl LossReport {
    pub fn get(&self, name: &str) -> f64 {
        self.components.get(name).copied().unwrap_or(0.0)
    }
}

/// Noise/data pairs with one time pair per item.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl PairBatch {
    pub fn new(x0: Tensor, x1: Tensor, s: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        if x0.shape() != x1.shape() || x0.ndim() != 3 {
            return Err(CfmError::ShapeMismatch(format!("x0 {:?} vs x1 {:?}", x0.shape(), x1.shape())));
        }
        let b = x0.shape()[0];
        if s.len() != b || t.len() != b {
            return Err(CfmError::ShapeMismatch(format!("{} / {} times for batch of {b}", s.len(), t.len())));
        }
        for (&s, &t) in s.iter().zip(&t) {
            crate::flowmap::TimePair::new(s, t)?;
        }
        Ok(PairBatch { x0, x1, s, t })
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn x_s(&self) -> Tensor {
        interpolate_batch(&Schedule::Linear, &self.x0, &self.x1, &self.s).expect("validated batch")
    }

    pub fn x_t(&self) -> Tensor {
        interpolate_batch(&Schedule::Linear, &self.x0, &self.x1, &self.t).expect("validated batch")
    }

    pub fn positions(&self) -> usize {
        self.x0.shape()[1]
    }

    pub fn categories(&self) -> usize {
        self.x0.shape()[2]
    }
}

/// Sum over everything but the leading axis: `[B, ...] -> [B, 1]`.
fn per_item<'g>(v: Var<'g>) -> Var<'g> {
    let shape = v.shape();
    let n: usize = shape[1..].iter().product();
    v.reshape(&[shape[0], n]).sum_axis(1)
}

/// Sum over categories, mean over positions: `[B, D, K] -> [B, 1]`.
fn per_position<'g>(v: Var<'g>) -> Var<'g> {
    let d = v.shape()[1];
    per_item(v).scale(1.0 / d as f64)
}

fn column<'g>(g: &'g Graph, vals: Vec<f64>) -> Var<'g> {
    let b = vals.len();
    g.constant(Tensor::new(vec![b, 1], vals).unwrap())
}

fn ln_clamped(v: Var<'_>) -> Var<'_> {
    v.clamp_min(PROB_CLAMP).ln()
}

/// Label-smoothed endpoint cross-entropy at `(t, t)`, averaged over positions.
pub fn inf_terms<'g>(model: &TapeModel<'g, '_>, batch: &PairBatch, smoothing: f64) -> Var<'g> {
    let g = model.graph;
    let k = batch.categories();
    let target = batch.x1.map(|v| (1.0 - smoothing) * v + smoothing / k as f64);
    let x_t = Dual::constant(g.constant(batch.x_t()));
    let pi = model.student(x_t, &batch.t, &batch.t, false).primal;
    per_position(g.constant(target) * ln_clamped(pi)).scale(-1.0)
}

/// Flow-matching regression `||v_{t,t}(x_t) - (x1 - x0)||^2` for a velocity head.
pub fn fm_terms<'g>(model: &TapeModel<'g, '_>, batch: &PairBatch) -> Var<'g> {
    let g = model.graph;
    let x_t = Dual::constant(g.constant(batch.x_t()));
    let v = model.student(x_t, &batch.t, &batch.t, false).primal;
    let u = batch.x1.sub(&batch.x0).unwrap();
    per_position((v - g.constant(u)).square())
}

/// Per-item tape values of the off-diagonal distillation terms.
pub struct DistillTerms<'g> {
    pub csd: Var<'g>,
    pub ec: Var<'g>,
    pub ce: Var<'g>,
    pub td: Var<'g>,
    pub branch: FlowMapBranch<'g>,
    pub residual: Var<'g>,
}

impl<'g> DistillTerms<'g> {
    pub fn ecld(&self) -> Var<'g> {
        self.ce.scale(4.0) + self.td.scale(2.0)
    }
}

/// CSD, EC (KL), CE and TD terms from one flow-map branch.
pub fn distill_terms<'g>(model: &TapeModel<'g, '_>, batch: &PairBatch, w_t: TimeWeight, td_power: TdPower) -> DistillTerms<'g> {
    let g = model.graph;
    let branch = flow_map_branch(model, &batch.x_s(), &batch.s, &batch.t);
    let w = column(g, batch.t.iter().map(|&t| w_t.at(t)).collect());
    let residual = residual_on_tape(&branch, &batch.t);
    let csd = w * per_position(residual.square());

    let p = branch.teacher;
    let log_q = ln_clamped(branch.pi.primal);
    let ce_raw = per_position(-(p * log_q));
    let neg_entropy = per_position(p * ln_clamped(p));
    let ce = w * ce_raw;
    let ec = w * (ce_raw + neg_entropy);

    let gm = per_item(branch.gamma);
    let gm = match td_power {
        TdPower::Gamma => gm,
        TdPower::GammaSq => gm.square(),
    };
    let td = gm * per_position(branch.pi.tangent_or_zero().square());
    DistillTerms { csd, ec, ce, td, branch, residual }
}

/// Lagrangian self-distillation for a velocity head: `X = x_s + (t - s) v_{s,t}(x_s)`
/// and the per-item `||dX/dt - sg(v_{t,t}(X))||^2`.
pub fn lsd_terms<'g>(model: &TapeModel<'g, '_>, batch: &PairBatch) -> Var<'g> {
    let x_out = velocity_flow_map(model, &batch.x_s(), &batch.s, &batch.t);
    let teacher = model.teacher(x_out.primal, &batch.t);
    per_position((x_out.tangent_or_zero() - teacher).square())
}

/// `x_s + (t - s) v_{s,t}(x_s)` with its tangent along `t`.
pub fn velocity_flow_map<'g>(model: &TapeModel<'g, '_>, x_s: &Tensor, s: &[f64], t: &[f64]) -> Dual<'g> {
    let g = model.graph;
    let b = s.len();
    let xs = Dual::constant(g.constant(x_s.clone()));
    let v = model.student(xs, s, t, true);
    let dt: Vec<f64> = s.iter().zip(t).map(|(s, t)| t - s).collect();
    let step = Dual::new(
        g.constant(Tensor::new(vec![b, 1, 1], dt).unwrap()),
        g.constant(Tensor::full(&[b, 1, 1], 1.0)),
    );
    xs.add(step.mul(v))
}

/// `e^{-w} loss + w`.
pub fn apply_uncertainty_weight(loss: f64, w: f64) -> f64 {
    (-w).exp() * loss + w
}

fn weighted<'g>(loss: Var<'g>, w: Var<'g>) -> Var<'g> {
    (-w).exp() * loss + w
}

/// Which per-item term a plain evaluation returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Inf,
    Fm,
    Csd,
    Ec,
    Ce,
    Td,
    Ecld,
    NaiveLsd,
}

impl Term {
    pub const ALL: [Term; 8] = [Term::Inf, Term::Fm, Term::Csd, Term::Ec, Term::Ce, Term::Td, Term::Ecld, Term::NaiveLsd];

    pub fn name(self) -> &'static str {
        match self {
            Term::Inf => "inf",
            Term::Fm => "fm",
            Term::Csd => "csd",
            Term::Ec => "ec",
            Term::Ce => "ce",
            Term::Td => "td",
            Term::Ecld => "ecld",
            Term::NaiveLsd => "lsd",
        }
    }

    /// Whether the term expects a velocity head rather than a simplex head.
    pub fn needs_velocity(self) -> bool {
        matches!(self, Term::Fm | Term::NaiveLsd)
    }
}

fn term_on_tape<'g>(model: &TapeModel<'g, '_>, batch: &PairBatch, term: Term, cfg: &LossConfig) -> Var<'g> {
    let distill = || distill_terms(model, batch, cfg.w_t, cfg.td_power);
    match term {
        Term::Inf => inf_terms(model, batch, cfg.label_smoothing),
        Term::Fm => fm_terms(model, batch),
        Term::Csd => distill().csd,
        Term::Ec => distill().ec,
        Term::Ce => distill().ce,
        Term::Td => distill().td,
        Term::Ecld => distill().ecld(),
        Term::NaiveLsd => lsd_terms(model, batch),
    }
}

fn check_head(predictor: &Predictor, term: Term) -> Result<()> {
    let velocity = predictor.cfg.output == OutputKind::Velocity;
    if velocity != term.needs_velocity() {
        return Err(CfmError::InvalidArgument(format!("loss `{}` does not apply to a {:?} head", term.name(), predictor.cfg.output)));
    }
    Ok(())
}

/// Batch mean of one term and its parameter gradient.
pub fn term_value_and_grad(
    predictor: &Predictor,
    params: &PredictorParams,
    teacher: Teacher<'_>,
    batch: &PairBatch,
    term: Term,
    cfg: &LossConfig,
) -> Result<(f64, PredictorParams)> {
    check_head(predictor, term)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, true, teacher);
    let loss = term_on_tape(&model, batch, term, cfg).mean();
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(CfmError::NonFiniteLoss(term.name().into()));
    }
    let grads = g.backward(loss)?;
    Ok((value, model.params.gradients(&grads)))
}

/// Batch mean of one term.
pub fn term_value(predictor: &Predictor, params: &PredictorParams, teacher: Teacher<'_>, batch: &PairBatch, term: Term, cfg: &LossConfig) -> Result<f64> {
    check_head(predictor, term)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, false, teacher);
    let value = term_on_tape(&model, batch, term, cfg).mean().value().item();
    if !value.is_finite() {
        return Err(CfmError::NonFiniteLoss(term.name().into()));
    }
    Ok(value)
}

/// The detached teacher values `term` regresses onto, if it has a teacher.
pub fn teacher_targets(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, term: Term) -> Result<Option<Tensor>> {
    check_head(predictor, term)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, false, Teacher::Live);
    let teacher = match term {
        Term::Inf | Term::Fm => return Ok(None),
        Term::NaiveLsd => model.teacher(velocity_flow_map(&model, &batch.x_s(), &batch.s, &batch.t).primal, &batch.t),
        _ => flow_map_branch(&model, &batch.x_s(), &batch.s, &batch.t).teacher,
    };
    Ok(Some((*teacher.value()).clone()))
}

pub fn loss_inf(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    term_value(predictor, params, Teacher::Live, batch, Term::Inf, cfg)
}

pub fn loss_csd(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    term_value(predictor, params, Teacher::Live, batch, Term::Csd, cfg)
}

pub fn loss_ec(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    term_value(predictor, params, Teacher::Live, batch, Term::Ec, cfg)
}

pub fn loss_td(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    term_value(predictor, params, Teacher::Live, batch, Term::Td, cfg)
}

pub fn loss_ecld(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    term_value(predictor, params, Teacher::Live, batch, Term::Ecld, cfg)
}

/// LSD over the off-diagonal items plus flow matching over the diagonal ones.
pub fn loss_naive_lsd(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch) -> Result<f64> {
    let cfg = LossConfig::default();
    let (diag, off) = split_diagonal(batch);
    let mut total = 0.0;
    if let Some(off) = off {
        total += term_value(predictor, params, Teacher::Live, &off, Term::NaiveLsd, &cfg)?;
    }
    if let Some(diag) = diag {
        total += term_value(predictor, params, Teacher::Live, &diag, Term::Fm, &cfg)?;
    }
    Ok(total)
}

fn split_diagonal(batch: &PairBatch) -> (Option<PairBatch>, Option<PairBatch>) {
    let (mut di, mut oi) = (Vec::new(), Vec::new());
    for i in 0..batch.len() {
        if batch.s[i] == batch.t[i] {
            di.push(i)
        } else {
            oi.push(i)
        }
    }
    let pick = |rows: &[usize]| {
        (!rows.is_empty()).then(|| PairBatch {
            x0: batch.x0.select_rows(rows),
            x1: batch.x1.select_rows(rows),
            s: rows.iter().map(|&i| batch.s[i]).collect(),
            t: rows.iter().map(|&i| batch.t[i]).collect(),
        })
    };
    (pick(&di), pick(&oi))
}

/// The full training objective on a tape: `L_inf` (or flow matching) on the
/// diagonal batch plus the configured distillation loss on the off-diagonal one.
pub struct Objective<'g> {
    pub total: Var<'g>,
    pub components: Vec<(&'static str, Var<'g>)>,
}

pub fn training_objective<'g>(model: &TapeModel<'g, '_>, diag: Option<&PairBatch>, off: Option<&PairBatch>, cfg: &LossConfig) -> Objective<'g> {
    let g = model.graph;
    let mut components = Vec::new();
    let mut total = g.scalar(0.0);
    let mut weights = Vec::new();
    let weight_of = |b: &PairBatch, s: &[f64]| model.predictor.weight_net(&model.params, times(g, s), times(g, &b.t)).primal;
    let naive = cfg.kind == LossKind::Naive;

    if let Some(b) = diag.filter(|b| !b.is_empty()) {
        let per = if naive { fm_terms(model, b) } else { inf_terms(model, b, cfg.label_smoothing) };
        components.push((if naive { "fm" } else { "inf" }, per.mean()));
        let part = if cfg.uncertainty_weighting {
            let w = weight_of(b, &b.t);
            weights.push(w);
            weighted(per, w).mean()
        } else {
            per.mean()
        };
        total = total + part;
    }

    if let Some(b) = off.filter(|b| !b.is_empty()) {
        let per = if naive {
            let lsd = lsd_terms(model, b);
            components.push(("lsd", lsd.mean()));
            lsd
        } else {
            let terms = distill_terms(model, b, cfg.w_t, cfg.td_power);
            let ecld = terms.ecld();
            components.push(("csd", terms.csd.mean()));
            components.push(("ec", terms.ec.mean()));
            components.push(("td", terms.td.mean()));
            components.push(("ecld", ecld.mean()));
            if cfg.kind == LossKind::Csd {
                terms.csd
            } else {
                ecld
            }
        };
        let part = if cfg.uncertainty_weighting {
            let w = weight_of(b, &b.s);
            weights.push(w);
            weighted(per, w).mean()
        } else {
            per.mean()
        };
        total = total + part;
    }

    if !weights.is_empty() {
        let n = weights.len() as f64;
        let mean_w = weights.into_iter().map(|w| w.mean()).reduce(|a, b| a + b).unwrap().scale(1.0 / n);
        components.push(("weightnet", mean_w));
    }
    Objective { total, components }
}

/// Evaluates [`training_objective`] and its gradient.
pub fn objective_value_and_grad(
    predictor: &Predictor,
    params: &PredictorParams,
    diag: Option<&PairBatch>,
    off: Option<&PairBatch>,
    cfg: &LossConfig,
) -> Result<(LossReport, PredictorParams)> {
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, true, Teacher::Live);
    let obj = training_objective(&model, diag, off, cfg);
    let mut report = LossReport {
        total: obj.total.value().item(),
        components: BTreeMap::new(),
        diagonal_size: diag.map_or(0, |b| b.len()),
        off_diagonal_size: off.map_or(0, |b| b.len()),
    };
    for (name, v) in &obj.components {
        let value = v.value().item();
        if !value.is_finite() {
            return Err(CfmError::NonFiniteLoss((*name).into()));
        }
        report.components.insert((*name).into(), value);
    }
    if !report.total.is_finite() {
        return Err(CfmError::NonFiniteLoss("total".into()));
    }
    let grads = g.backward(obj.total)?;
    Ok((report, model.params.gradients(&grads)))
}

/// Quantities of the ECLD >= CSD bound with
/// `w_t = (1 - t)^-2` on CSD and EC, and `gamma^2` on TD.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub lcsd: f64,
    pub lec: f64,
    pub ltd: f64,
    /// `4 lec + 2 ltd - lcsd`.
    pub slack: f64,
    /// Largest per-item `||(1 - t) r - a - b||` with `a = pi_{s,t} - pi_{t,t}(X)`
    /// and `b = (1 - t) gamma d/dt pi_{s,t}`.
    pub decomposition_error: f64,
    /// Largest per-item `|(1 - t)^2 td - ||b||^2|`: zero exactly when the TD
    /// term is the drift part of the decomposition.
    pub drift_error: f64,
}

pub fn check_ecld_bound(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch) -> Result<BoundCheck> {
    check_ecld_bound_with(predictor, params, batch, TdPower::GammaSq)
}

/// [`check_ecld_bound`] with a chosen TD power; anything but `GammaSq` breaks
/// the drift identity.
pub fn check_ecld_bound_with(predictor: &Predictor, params: &PredictorParams, batch: &PairBatch, td_power: TdPower) -> Result<BoundCheck> {
    check_head(predictor, Term::Ecld)?;
    let g = Graph::new();
    let model = TapeModel::new(&g, predictor, params, false, Teacher::Live);
    let terms = distill_terms(&model, batch, TimeWeight::Inv1mtSq, td_power);
    let (lcsd, lec, ltd) = (terms.csd.mean().value().item(), terms.ec.mean().value().item(), terms.td.mean().value().item());

    let br = &terms.branch;
    let b = batch.len();
    let one_minus_t: Vec<f64> = batch.t.iter().map(|t| 1.0 - t).collect();
    let omt = g.constant(Tensor::new(vec![b, 1, 1], one_minus_t.clone()).unwrap());
    let a = br.pi.primal - br.teacher;
    let bb = omt * br.gamma * br.pi.tangent_or_zero();
    let gap = per_item((terms.residual - a - bb).square()).value();
    let decomposition_error = gap.data().iter().fold(0.0f64, |m, &v| m.max(v.sqrt()));
    let b_sq = per_position(bb.square()).value();
    let td = terms.td.value();
    let drift_error = (0..b).map(|i| ((one_minus_t[i] * one_minus_t[i]) * td.data()[i] - b_sq.data()[i]).abs()).fold(0.0, f64::max);

    for (name, v) in [("csd", lcsd), ("ec", lec), ("td", ltd)] {
        if !v.is_finite() {
            return Err(CfmError::NonFiniteLoss(name.into()));
        }
    }
    Ok(BoundCheck { lcsd, lec, ltd, slack: 4.0 * lec + 2.0 * ltd - lcsd, decomposition_error, drift_error })
}

/// `KL(p || q)` for probability vectors, with `0 log 0 = 0` and `q` clamped.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(&p, &q)| if p > 0.0 { p * (p.ln() - q.max(PROB_CLAMP).ln()) } else { 0.0 }).sum()
}

/// `-sum p log q` with `q` clamped.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(&p, &q)| p * q.max(PROB_CLAMP).ln()).sum::<f64>()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}
