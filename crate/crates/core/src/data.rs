//! Enumerable toy datasets over `K^D` categorical states and the metrics used to
//! score samples against their exact distributions.
//!
//! A state is a vector of `D` category indices. Its dense index is the base-`K`
//! number with position 0 as the most significant digit.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CfmError, Result};
use crate::predictor::{Predictor, PredictorParams};
use crate::sampler::{sample_with, DiscretizeMode, ModelField, SampleRngs, SamplerKind, TimeGrid};

/// Largest state space for which a dense truth table is materialized.
pub const TRUTH_BUDGET: u128 = 1_000_000;

pub type State = Vec<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Uniform over states whose indices sum to 0 mod `categories`.
    Parity { positions: usize, categories: usize },
    /// Uniform over `grid x grid` binary images holding one full bar.
    Bars { grid: usize },
}

impl DatasetSpec {
    pub fn build(&self) -> Result<CategoricalDataset> {
        match *self {
            DatasetSpec::Parity { positions, categories } => make_parity_dataset(positions, categories),
            DatasetSpec::Bars { grid } => make_bars_dataset(grid),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rule {
    Parity,
    Bars { grid: usize },
}

/// A distribution given by its (sparse) support and probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDataset {
    pub name: String,
    pub positions: usize,
    pub categories: usize,
    support: Vec<State>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
    rule: Rule,
}

fn space_size(d: usize, k: usize) -> u128 {
    (k as u128).checked_pow(d as u32).unwrap_or(u128::MAX)
}

pub fn make_parity_dataset(d: usize, k: usize) -> Result<CategoricalDataset> {
    if d == 0 || k == 0 {
        return Err(CfmError::InvalidArgument("parity dataset needs D >= 1 and K >= 1".into()));
    }
    let size = space_size(d, k);
    if size > TRUTH_BUDGET {
        return Err(CfmError::BudgetExceeded(size));
    }
    let support: Vec<State> = (0..size as usize)
        .map(|i| state_of(i, d, k))
        .filter(|s| s.iter().sum::<usize>() % k == 0)
        .collect();
    Ok(CategoricalDataset::uniform(format!("parity-{d}x{k}"), d, k, support, Rule::Parity))
}

pub fn make_bars_dataset(grid: usize) -> Result<CategoricalDataset> {
    if grid == 0 {
        return Err(CfmError::InvalidArgument("bars dataset needs grid >= 1".into()));
    }
    let mut support = Vec::new();
    for r in 0..grid {
        support.push((0..grid * grid).map(|p| usize::from(p / grid == r)).collect());
    }
    for c in 0..grid {
        let s: State = (0..grid * grid).map(|p| usize::from(p % grid == c)).collect();
        if !support.contains(&s) {
            support.push(s);
        }
    }
    Ok(CategoricalDataset::uniform(format!("bars-{grid}"), grid * grid, 2, support, Rule::Bars { grid }))
}

impl CategoricalDataset {
    fn uniform(name: String, positions: usize, categories: usize, support: Vec<State>, rule: Rule) -> Self {
        let n = support.len();
        let probs = vec![1.0 / n as f64; n];
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        CategoricalDataset { name, positions, categories, support, probs, cumulative, rule }
    }

    pub fn support(&self) -> &[State] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn is_enumerable(&self) -> bool {
        space_size(self.positions, self.categories) <= TRUTH_BUDGET
    }

    pub fn prob_of(&self, state: &[usize]) -> f64 {
        self.support.iter().position(|s| s.as_slice() == state).map_or(0.0, |i| self.probs[i])
    }

    /// Dense probabilities over all `K^D` states.
    pub fn truth_table(&self) -> Result<Vec<f64>> {
        let size = space_size(self.positions, self.categories);
        if size > TRUTH_BUDGET {
            return Err(CfmError::BudgetExceeded(size));
        }
        let mut table = vec![0.0; size as usize];
        for (s, &p) in self.support.iter().zip(&self.probs) {
            table[state_index(s, self.categories)] += p;
        }
        Ok(table)
    }

    pub fn is_valid(&self, state: &[usize]) -> bool {
        if state.len() != self.positions || state.iter().any(|&c| c >= self.categories) {
            return false;
        }
        match self.rule {
            Rule::Parity => state.iter().sum::<usize>() % self.categories == 0,
            Rule::Bars { grid } => {
                let on = |r: usize, c: usize| state[r * grid + c] == 1;
                let count = state.iter().filter(|&&v| v == 1).count();
                count == grid
                    && ((0..grid).any(|r| (0..grid).all(|c| on(r, c))) || (0..grid).any(|c| (0..grid).all(|r| on(r, c))))
            }
        }
    }

    pub fn sample_state(&self, rng: &mut impl Rng) -> State {
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u).min(self.support.len() - 1);
        self.support[i].clone()
    }

    pub fn sample_states(&self, rng: &mut impl Rng, n: usize) -> Vec<State> {
        (0..n).map(|_| self.sample_state(rng)).collect()
    }

    /// One-hot draws of shape `[n, D, K]`.
    pub fn sample_batch(&self, rng: &mut impl Rng, n: usize) -> Tensor {
        one_hot(&self.sample_states(rng, n), self.categories)
    }
}

pub fn state_index(state: &[usize], k: usize) -> usize {
    state.iter().fold(0, |acc, &c| acc * k + c)
}

pub fn state_of(mut index: usize, d: usize, k: usize) -> State {
    let mut s = vec![0; d];
    for slot in s.iter_mut().rev() {
        *slot = index % k;
        index /= k;
    }
    s
}

/// Stacks states into a one-hot tensor `[n, D, K]`.
pub fn one_hot(states: &[State], k: usize) -> Tensor {
    let d = states.first().map_or(0, |s| s.len());
    let mut data = vec![0.0; states.len() * d * k];
    for (i, s) in states.iter().enumerate() {
        for (j, &c) in s.iter().enumerate() {
            data[(i * d + j) * k + c] = 1.0;
        }
    }
    Tensor::new(vec![states.len(), d, k], data).unwrap()
}

/// Empirical state frequencies.
pub fn empirical(states: &[State]) -> BTreeMap<State, f64> {
    let mut counts: BTreeMap<State, f64> = BTreeMap::new();
    for s in states {
        *counts.entry(s.clone()).or_insert(0.0) += 1.0;
    }
    let n = states.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

/// `1/2 sum |p - q|` over the union of both supports.
pub fn tv_distance(p: &BTreeMap<State, f64>, q: &BTreeMap<State, f64>) -> f64 {
    let mut sum = 0.0;
    for (s, &a) in p {
        sum += (a - q.get(s).copied().unwrap_or(0.0)).abs();
    }
    for (s, &b) in q {
        if !p.contains_key(s) {
            sum += b;
        }
    }
    (0.5 * sum).clamp(0.0, 1.0)
}

/// `1/2 sum |p - q|` for dense tables of equal length.
pub fn tv_dense(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn truth_map(ds: &CategoricalDataset) -> BTreeMap<State, f64> {
    ds.support.iter().cloned().zip(ds.probs.iter().copied()).collect()
}

/// `-sum p log p` in nats.
pub fn entropy_of(dist: &BTreeMap<State, f64>) -> f64 {
    -dist.values().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Sample-quality summary of a set of discrete samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub tv: f64,
    pub validity_rate: f64,
    /// 95% Wilson interval on the validity rate.
    pub validity_ci: (f64, f64),
    pub empirical_entropy: f64,
}

pub fn evaluate_states(ds: &CategoricalDataset, states: &[State]) -> Result<EvalReport> {
    if states.is_empty() {
        return Err(CfmError::InvalidArgument("no samples to evaluate".into()));
    }
    let emp = empirical(states);
    let valid = states.iter().filter(|s| ds.is_valid(s)).count();
    Ok(EvalReport {
        samples: states.len(),
        tv: tv_distance(&emp, &truth_map(ds)),
        validity_rate: valid as f64 / states.len() as f64,
        validity_ci: wilson_interval(valid, states.len(), 1.96),
        empirical_entropy: entropy_of(&emp),
    })
}

/// Samples `n` states from a model and scores them against the dataset.
#[allow(clippy::too_many_arguments)]
pub fn eval_model(
    predictor: &Predictor,
    params: &PredictorParams,
    ds: &CategoricalDataset,
    sampler: SamplerKind,
    grid: &TimeGrid,
    sigma0: f64,
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(CfmError::InvalidArgument("eval needs at least one sample".into()));
    }
    let field = ModelField { predictor, params };
    let shape = (predictor.cfg.positions, predictor.cfg.categories);
    let out = sample_with(&field, shape, sampler, grid, sigma0, DiscretizeMode::Argmax, n, 4096, &mut SampleRngs::new(seed))?;
    evaluate_states(ds, &out.states)
}

/// One `(sampler, NFE)` cell of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub sampler: SamplerKind,
    pub nfe: usize,
    pub report: EvalReport,
}

/// [`eval_model`] over every sampler and uniform grid of `nfes` steps. Each
/// cell uses the same seed.
#[allow(clippy::too_many_arguments)]
pub fn nfe_sweep(
    predictor: &Predictor,
    params: &PredictorParams,
    ds: &CategoricalDataset,
    samplers: &[SamplerKind],
    nfes: &[usize],
    sigma0: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<SweepEntry>> {
    if nfes.is_empty() || samplers.is_empty() {
        return Err(CfmError::InvalidArgument("sweep needs at least one sampler and one NFE".into()));
    }
    let mut out = Vec::new();
    for &sampler in samplers {
        for &nfe in nfes {
            if nfe == 0 {
                return Err(CfmError::InvalidArgument("NFE must be >= 1".into()));
            }
            let report = eval_model(predictor, params, ds, sampler, &TimeGrid::uniform(nfe), sigma0, n, seed)?;
            out.push(SweepEntry { sampler, nfe, report });
        }
    }
    Ok(out)
}

/// Two-class labelling used by the guidance toy: class 0 when the first two
/// positions both hold category 0, class 1 otherwise. On parity(4, 3) class 0
/// covers 3 of the 27 valid states.
pub fn two_class_label(state: &[usize]) -> usize {
    usize::from(!(state.len() >= 2 && state[0] == 0 && state[1] == 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    #[test]
    fn parity_counts() {
        let ds = make_parity_dataset(4, 3).unwrap();
        assert_eq!(ds.support().len(), 27);
        let table = ds.truth_table().unwrap();
        assert_eq!(table.len(), 81);
        assert!((table.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(table.iter().all(|&p| p == 0.0 || (p - 1.0 / 27.0).abs() < 1e-15));
        let one = make_parity_dataset(1, 1).unwrap();
        assert_eq!(one.truth_table().unwrap(), vec![1.0]);
        assert!(matches!(make_parity_dataset(13, 3), Err(CfmError::BudgetExceeded(_))));
    }

    #[test]
    fn bars_counts_and_validity() {
        let ds = make_bars_dataset(4).unwrap();
        assert_eq!((ds.positions, ds.categories, ds.support().len()), (16, 2, 8));
        assert!((ds.truth_table().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for s in ds.support() {
            assert!(ds.is_valid(s));
            assert_eq!(s.iter().sum::<usize>(), 4);
        }
        let mut diag = vec![0; 16];
        for i in 0..4 {
            diag[i * 4 + i] = 1;
        }
        assert!(!ds.is_valid(&diag));
        assert_eq!(make_bars_dataset(8).unwrap().support().len(), 16);
        assert!(make_bars_dataset(8).unwrap().truth_table().is_err());
    }

    #[test]
    fn draws_are_valid_and_match_truth() {
        let ds = make_parity_dataset(4, 3).unwrap();
        let states = ds.sample_states(&mut seeded(1), 1_000_000);
        let report = evaluate_states(&ds, &states).unwrap();
        assert_eq!(report.validity_rate, 1.0);
        assert!(report.tv < 0.01, "{}", report.tv);
        assert!((report.empirical_entropy - 27f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn index_round_trip_and_one_hot() {
        for i in 0..81 {
            assert_eq!(state_index(&state_of(i, 4, 3), 3), i);
        }
        let x = one_hot(&[vec![2, 0]], 3);
        assert_eq!(x.data(), &[0., 0., 1., 1., 0., 0.]);
    }

    #[test]
    fn all_zero_state_scores_near_one() {
        let ds = make_parity_dataset(4, 3).unwrap();
        let r = evaluate_states(&ds, &vec![vec![0, 0, 0, 0]; 10]).unwrap();
        assert!((r.tv - (1.0 - 1.0 / 27.0)).abs() < 1e-12);
        assert_eq!(r.empirical_entropy, 0.0);
    }

    #[test]
    fn wilson_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(90, 100, 1.96);
        assert!(lo < 0.9 && 0.9 < hi);
        assert!((lo - 0.8256).abs() < 1e-3 && (hi - 0.9448).abs() < 1e-3);
        assert_eq!(wilson_interval(0, 0, 1.96), (0.0, 1.0));
    }

    #[test]
    fn uniform_model_collapses_onto_the_zero_state() {
        use crate::predictor::PredictorConfig;
        let ds = make_parity_dataset(4, 3).unwrap();
        let pred = Predictor::new(PredictorConfig { width: 8, ..Default::default() }).unwrap();
        let params = pred.init_params(&mut seeded(0));
        let r = eval_model(&pred, &params, &ds, SamplerKind::Flowmap, &TimeGrid::uniform(1), 0.0, 500, 1).unwrap();
        assert!((r.tv - (1.0 - 1.0 / 27.0)).abs() < 1e-12, "{}", r.tv);
        assert_eq!(r.validity_rate, 1.0);
        assert_eq!(r.empirical_entropy, 0.0);
    }

    #[test]
    fn sweep_rows_cover_every_cell() {
        use crate::predictor::PredictorConfig;
        let ds = make_parity_dataset(4, 3).unwrap();
        let pred = Predictor::new(PredictorConfig { width: 8, ..Default::default() }).unwrap();
        let params = pred.random_params(&mut seeded(1), 1.0);
        let rows = nfe_sweep(&pred, &params, &ds, &[SamplerKind::Flowmap, SamplerKind::Euler], &[1, 2, 4], 0.0, 50, 2).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!((rows[3].sampler, rows[3].nfe), (SamplerKind::Euler, 1));
        let one = nfe_sweep(&pred, &params, &ds, &[SamplerKind::Flowmap], &[1], 0.0, 50, 2).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], rows[0]);
        assert!(nfe_sweep(&pred, &params, &ds, &[SamplerKind::Euler], &[], 0.0, 50, 2).is_err());
        assert!(nfe_sweep(&pred, &params, &ds, &[SamplerKind::Euler], &[0], 0.0, 50, 2).is_err());
    }

    proptest! {
        #[test]
        fn tv_is_a_symmetric_bounded_distance(a in proptest::collection::vec(0usize..5, 1..40), b in proptest::collection::vec(0usize..5, 1..40)) {
            let p = empirical(&a.iter().map(|&i| vec![i]).collect::<Vec<_>>());
            let q = empirical(&b.iter().map(|&i| vec![i]).collect::<Vec<_>>());
            let d = tv_distance(&p, &q);
            prop_assert!((d - tv_distance(&q, &p)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(tv_distance(&p, &p), 0.0);
            let h = entropy_of(&p);
            prop_assert!(h >= 0.0 && h <= 5f64.ln() + 1e-12);
        }
    }
}
