//! The learnable partial denoiser `pi_{s,t}(x)` and the loss-weight network.
//!
//! The backbone is an MLP over the flattened `[D*K]` state. Time conditioning
//! embeds `s` and `delta = t - s` separately with magnitude-preserving Fourier
//! features, projects each with a row-normalized linear map and merges them
//! with the magnitude-preserving sum. Every hidden layer receives an additive
//! projection of that embedding. The output head produces `K` logits per
//! position followed by a softmax, so predictions always lie on the simplex.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, DualBatch, Graph, Tensor, Var};
use crate::error::{CfmError, Result};
use crate::interpolant::expected_interpolant_norm;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

/// Which block size the input normalization divides by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    Off,
    /// `d = K`: one categorical position.
    #[default]
    PerPosition,
    /// `d = D * K`: the whole sequence.
    PerSequence,
}

/// Whether the head is a simplex-valued endpoint or an unconstrained velocity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Simplex,
    Velocity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub positions: usize,
    pub categories: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub weight_net_dim: usize,
    pub activation: Activation,
    pub input_norm: InputNorm,
    pub output: OutputKind,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            positions: 4,
            categories: 3,
            width: 64,
            depth: 2,
            embed_dim: 16,
            weight_net_dim: 16,
            activation: Activation::Tanh,
            input_norm: InputNorm::PerPosition,
            output: OutputKind::Simplex,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("positions", self.positions),
            ("categories", self.categories),
            ("width", self.width),
            ("depth", self.depth),
            ("embed_dim", self.embed_dim),
            ("weight_net_dim", self.weight_net_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(CfmError::Config(format!("model.{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        self.positions * self.categories
    }

    /// Exact number of scalar parameters produced by [`Predictor::init_params`].
    pub fn param_count(&self) -> usize {
        let (dk, w, h, e, dw) = (self.flat_dim(), self.width, self.depth, self.embed_dim, self.weight_net_dim);
        let embed = 2 * e * w;
        let hidden = (dk * w + w) + (h - 1) * (w * w + w);
        let film = h * w * w;
        let head = w * dk + dk;
        let wnet = e * dw + dw + 1;
        embed + hidden + film + head + wnet
    }
}

/// Named parameter tensors. Iteration order is lexicographic and stable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl PredictorParams {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    /// Binds every tensor as a leaf; trainable leaves receive gradients.
    pub fn bind<'g>(&self, g: &'g Graph, trainable: bool) -> BoundParams<'g> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn zeros_like(&self) -> PredictorParams {
        PredictorParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }
}

/// Parameters bound to a tape.
pub struct BoundParams<'g> {
    pub vars: BTreeMap<String, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    pub fn var(&self, name: &str) -> Var<'g> {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    fn dual(&self, name: &str) -> Dual<'g> {
        Dual::constant(self.var(name))
    }

    /// Collects the gradient of each bound parameter.
    pub fn gradients(&self, grads: &crate::autodiff::Gradients) -> PredictorParams {
        PredictorParams { tensors: self.vars.iter().map(|(k, v)| (k.clone(), grads.get_or_zero(*v))).collect() }
    }
}

/// Log-spaced frequencies of the Fourier time features.
fn frequencies(count: usize) -> Vec<f64> {
    const F_MIN: f64 = 0.1;
    const F_MAX: f64 = 5.0;
    if count == 1 {
        return vec![F_MIN];
    }
    (0..count)
        .map(|i| (F_MIN.ln() + (F_MAX / F_MIN).ln() * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Magnitude-preserving sum `(a + b) / sqrt(2)`.
pub fn mp_sum<'g>(a: Dual<'g>, b: Dual<'g>) -> Dual<'g> {
    a.add(b).scale(1.0 / SQRT_2)
}

/// Magnitude-preserving Fourier features of `u` (shape `[B, 1]`) with
/// `||phi(u)||^2 == embed_dim` for every `u`.
///
/// Even dims are `sqrt(2) [sin(2 pi f u), cos(2 pi f u)]`; an odd dim gets one
/// extra constant unit component.
pub fn fourier_features<'g>(u: Dual<'g>, embed_dim: usize) -> Dual<'g> {
    let g = u.graph();
    let half = embed_dim / 2;
    let mut parts = Vec::with_capacity(3);
    if half > 0 {
        let omega: Vec<f64> = frequencies(half).iter().map(|f| 2.0 * PI * f).collect();
        let omega = Dual::constant(g.constant(Tensor::new(vec![1, half], omega).unwrap()));
        let arg = u.mul(omega);
        parts.push(arg.sin().scale(SQRT_2));
        parts.push(arg.cos().scale(SQRT_2));
    }
    if embed_dim % 2 == 1 {
        let b = u.primal.shape()[0];
        parts.push(Dual::constant(g.constant(Tensor::full(&[b, 1], 1.0))));
    }
    Dual::concat(&parts)
}

/// Plain-tensor Fourier features for a single time.
pub fn fourier_features_at(u: f64, embed_dim: usize) -> Tensor {
    let g = Graph::new();
    let out = fourier_features(Dual::constant(g.constant(Tensor::full(&[1, 1], u))), embed_dim);
    out.primal.value().reshape(&[embed_dim]).unwrap()
}

/// Linear map whose output columns are normalized to unit length.
fn mp_linear<'g>(x: Dual<'g>, w: Var<'g>) -> Dual<'g> {
    let norm = w.square().sum_axis(0).add_const(1e-12).sqrt();
    let w_hat = w / norm;
    x.matmul(Dual::constant(w_hat))
}

/// Scales `x` by `1 / sqrt(d (1 - t)^2 + t^2)`.
pub fn input_normalize(x: &Tensor, t: f64, d: usize) -> Tensor {
    x.scale(1.0 / expected_interpolant_norm(d, t).sqrt())
}

/// The endpoint predictor network.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub cfg: PredictorConfig,
}

fn name(prefix: &str, i: usize, suffix: &str) -> String {
    format!("{prefix}.{i}.{suffix}")
}

impl Predictor {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Predictor { cfg })
    }

    /// Fresh parameters: LeCun-normal hidden layers, zero output head (so the
    /// initial prediction is uniform), zero weight-net output.
    pub fn init_params(&self, rng: &mut impl Rng) -> PredictorParams {
        let c = &self.cfg;
        let (dk, w, e) = (c.flat_dim(), c.width, c.embed_dim);
        let mut t = BTreeMap::new();
        let mut normal = |shape: &[usize], fan_in: usize| {
            let n = shape.iter().product();
            let std = 1.0 / (fan_in as f64).sqrt();
            Tensor::new(shape.to_vec(), rng::normals(rng, n).into_iter().map(|v| v * std).collect()).unwrap()
        };
        t.insert("embed_s.w".into(), normal(&[e, w], 1));
        t.insert("embed_delta.w".into(), normal(&[e, w], 1));
        for l in 0..c.depth {
            let fan_in = if l == 0 { dk } else { w };
            t.insert(name("layer", l, "w"), normal(&[fan_in, w], fan_in));
            t.insert(name("layer", l, "b"), Tensor::zeros(&[w]));
            t.insert(name("film", l, "w"), normal(&[w, w], w));
        }
        t.insert("head.w".into(), Tensor::zeros(&[w, dk]));
        t.insert("head.b".into(), Tensor::zeros(&[dk]));
        t.insert("wnet.embed.w".into(), normal(&[e, c.weight_net_dim], 1));
        t.insert("wnet.out.w".into(), Tensor::zeros(&[c.weight_net_dim, 1]));
        t.insert("wnet.out.b".into(), Tensor::zeros(&[1]));
        PredictorParams { tensors: t }
    }

    /// [`Predictor::init_params`] with a random output head and weight-net output
    /// of standard deviation `scale`, so predictions depend on `x`, `s` and `t`.
    pub fn random_params(&self, rng: &mut impl Rng, scale: f64) -> PredictorParams {
        let mut p = self.init_params(rng);
        for name in ["head.w", "head.b", "wnet.out.w", "wnet.out.b"] {
            for v in p.tensors.get_mut(name).unwrap().data_mut() {
                *v = scale * rng::normal(rng);
            }
        }
        p
    }

    /// Conditioning vector `h_s (+)_mp h_delta`, shape `[B, width]`.
    pub fn time_embed<'g>(&self, p: &BoundParams<'g>, s: Dual<'g>, delta: Dual<'g>) -> Dual<'g> {
        let e = self.cfg.embed_dim;
        let hs = mp_linear(fourier_features(s, e), p.var("embed_s.w"));
        let hd = mp_linear(fourier_features(delta, e), p.var("embed_delta.w"));
        mp_sum(hs, hd)
    }

    fn activate<'g>(&self, x: Dual<'g>) -> Dual<'g> {
        match self.cfg.activation {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.relu(),
        }
    }

    /// `pi_{s,t}(x)` on the tape. `x` is `[B, D, K]`, `s` and `t` are `[B, 1]`.
    pub fn forward<'g>(&self, p: &BoundParams<'g>, x: Dual<'g>, s: Dual<'g>, t: Dual<'g>) -> Dual<'g> {
        let c = &self.cfg;
        let b = x.primal.shape()[0];
        let (d, k, dk) = (c.positions, c.categories, c.flat_dim());
        let mut h = x.reshape(&[b, dk]);
        let block = match c.input_norm {
            InputNorm::Off => None,
            InputNorm::PerPosition => Some(k),
            InputNorm::PerSequence => Some(dk),
        };
        if let Some(block) = block {
            let one_minus = s.neg().add_const(1.0);
            let q = one_minus.square().scale(block as f64).add(s.square());
            h = h.div(q.sqrt());
        }
        let cond = self.time_embed(p, s, t.sub(s));
        for l in 0..c.depth {
            let pre = h
                .matmul(p.dual(&name("layer", l, "w")))
                .add(p.dual(&name("layer", l, "b")))
                .add(cond.matmul(p.dual(&name("film", l, "w"))));
            h = self.activate(pre);
        }
        let logits = h.matmul(p.dual("head.w")).add(p.dual("head.b")).reshape(&[b, d, k]);
        match c.output {
            OutputKind::Simplex => logits.softmax(),
            OutputKind::Velocity => logits,
        }
    }

    /// Uncertainty weight `w(s, t)`, shape `[B, 1]`.
    pub fn weight_net<'g>(&self, p: &BoundParams<'g>, s: Dual<'g>, t: Dual<'g>) -> Dual<'g> {
        let e = self.cfg.embed_dim;
        let feats = mp_sum(fourier_features(s, e), fourier_features(t, e));
        let h = mp_linear(feats, p.var("wnet.embed.w"));
        h.matmul(p.dual("wnet.out.w")).add(p.dual("wnet.out.b"))
    }

    pub(crate) fn check_input(&self, x: &Tensor, s: &[f64], t: &[f64]) -> Result<()> {
        let c = &self.cfg;
        if x.ndim() != 3 || x.shape()[1] != c.positions || x.shape()[2] != c.categories {
            return Err(CfmError::ShapeMismatch(format!(
                "expected [B, {}, {}], got {:?}",
                c.positions,
                c.categories,
                x.shape()
            )));
        }
        let b = x.shape()[0];
        if s.len() != b || t.len() != b {
            return Err(CfmError::ShapeMismatch(format!("{} / {} times for batch of {b}", s.len(), t.len())));
        }
        if !x.is_finite() {
            return Err(CfmError::NonFiniteInput("predictor state".into()));
        }
        Ok(())
    }

    /// Evaluates `pi_{s,t}(x)` without recording gradients.
    pub fn predict(&self, params: &PredictorParams, x: &Tensor, s: &[f64], t: &[f64]) -> Result<Tensor> {
        self.check_input(x, s, t)?;
        let g = Graph::new();
        let p = params.bind(&g, false);
        let out = self.forward(&p, Dual::constant(g.constant(x.clone())), times(&g, s), times(&g, t));
        Ok((*out.primal.value()).clone())
    }

    /// `pi_{s,t}(x)` and `d/dt pi_{s,t}(x)` in one forward-mode pass.
    pub fn predict_with_dt(&self, params: &PredictorParams, x: &Tensor, s: &[f64], t: &[f64]) -> Result<DualBatch> {
        self.check_input(x, s, t)?;
        let g = Graph::new();
        let p = params.bind(&g, false);
        let out = self.forward(&p, Dual::constant(g.constant(x.clone())), times(&g, s), times_dual(&g, t));
        Ok(out.materialize())
    }

    /// `w(s, t)` per item, without gradients.
    pub fn weight(&self, params: &PredictorParams, s: &[f64], t: &[f64]) -> Vec<f64> {
        let g = Graph::new();
        let p = params.bind(&g, false);
        self.weight_net(&p, times(&g, s), times(&g, t)).primal.value().data().to_vec()
    }
}

/// Per-item times as a constant `[B, 1]` dual.
pub fn times<'g>(g: &'g Graph, ts: &[f64]) -> Dual<'g> {
    Dual::constant(g.constant(Tensor::new(vec![ts.len(), 1], ts.to_vec()).unwrap()))
}

/// Per-item times with unit tangent: the seed of a JVP along `t`.
pub fn times_dual<'g>(g: &'g Graph, ts: &[f64]) -> Dual<'g> {
    Dual::new(
        g.constant(Tensor::new(vec![ts.len(), 1], ts.to_vec()).unwrap()),
        g.constant(Tensor::full(&[ts.len(), 1], 1.0)),
    )
}
