//! Forward-mode differentiation along a scalar direction.
//!
//! A [`Dual`] pairs a primal node with an optional tangent node on the same
//! tape. `None` is a structural zero. Because tangents are built from the same
//! registered primitives as primals, reverse mode can differentiate straight
//! through a JVP.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{CfmError, Result};

#[derive(Clone, Copy, Debug)]
pub struct Dual<'g> {
    pub primal: Var<'g>,
    pub tangent: Option<Var<'g>>,
}

/// Materialized value and directional derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct DualBatch {
    pub primal: Tensor,
    pub tangent: Tensor,
}

fn add_opt<'g>(a: Option<Var<'g>>, b: Option<Var<'g>>) -> Option<Var<'g>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a + b),
        (x, None) | (None, x) => x,
    }
}

impl<'g> Dual<'g> {
    pub fn constant(primal: Var<'g>) -> Self {
        Dual { primal, tangent: None }
    }

    pub fn new(primal: Var<'g>, tangent: Var<'g>) -> Self {
        Dual { primal, tangent: Some(tangent) }
    }

    pub fn graph(&self) -> &'g Graph {
        self.primal.graph()
    }

    /// Tangent as a node, materializing structural zeros.
    pub fn tangent_or_zero(&self) -> Var<'g> {
        self.tangent
            .unwrap_or_else(|| self.graph().constant(Tensor::zeros(&self.primal.shape())))
    }

    pub fn add(self, rhs: Dual<'g>) -> Dual<'g> {
        Dual { primal: self.primal + rhs.primal, tangent: add_opt(self.tangent, rhs.tangent) }
    }

    pub fn sub(self, rhs: Dual<'g>) -> Dual<'g> {
        Dual { primal: self.primal - rhs.primal, tangent: add_opt(self.tangent, rhs.tangent.map(|t| -t)) }
    }

    pub fn mul(self, rhs: Dual<'g>) -> Dual<'g> {
        let tangent = add_opt(self.tangent.map(|t| t * rhs.primal), rhs.tangent.map(|t| self.primal * t));
        Dual { primal: self.primal * rhs.primal, tangent }
    }

    pub fn div(self, rhs: Dual<'g>) -> Dual<'g> {
        let out = self.primal / rhs.primal;
        let tangent = add_opt(
            self.tangent.map(|t| t / rhs.primal),
            rhs.tangent.map(|t| -(out * t / rhs.primal)),
        );
        Dual { primal: out, tangent }
    }

    pub fn neg(self) -> Dual<'g> {
        Dual { primal: -self.primal, tangent: self.tangent.map(|t| -t) }
    }

    pub fn scale(self, c: f64) -> Dual<'g> {
        Dual { primal: self.primal.scale(c), tangent: self.tangent.map(|t| t.scale(c)) }
    }

    pub fn add_const(self, c: f64) -> Dual<'g> {
        Dual { primal: self.primal.add_const(c), tangent: self.tangent }
    }

    pub fn exp(self) -> Dual<'g> {
        let y = self.primal.exp();
        Dual { primal: y, tangent: self.tangent.map(|t| t * y) }
    }

    pub fn ln(self) -> Dual<'g> {
        Dual { primal: self.primal.ln(), tangent: self.tangent.map(|t| t / self.primal) }
    }

    pub fn tanh(self) -> Dual<'g> {
        let y = self.primal.tanh();
        let tangent = self.tangent.map(|t| t - t * y.square());
        Dual { primal: y, tangent }
    }

    pub fn sin(self) -> Dual<'g> {
        Dual { primal: self.primal.sin(), tangent: self.tangent.map(|t| t * self.primal.cos()) }
    }

    pub fn cos(self) -> Dual<'g> {
        Dual { primal: self.primal.cos(), tangent: self.tangent.map(|t| -(t * self.primal.sin())) }
    }

    pub fn sqrt(self) -> Dual<'g> {
        let y = self.primal.sqrt();
        Dual { primal: y, tangent: self.tangent.map(|t| (t / y).scale(0.5)) }
    }

    pub fn relu(self) -> Dual<'g> {
        let tangent = self.tangent.map(|t| {
            let mask = self.primal.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            t * self.graph().constant(mask)
        });
        Dual { primal: self.primal.relu(), tangent }
    }

    pub fn clamp_min(self, c: f64) -> Dual<'g> {
        let tangent = self.tangent.map(|t| {
            let mask = self.primal.value().map(|v| if v > c { 1.0 } else { 0.0 });
            t * self.graph().constant(mask)
        });
        Dual { primal: self.primal.clamp_min(c), tangent }
    }

    pub fn square(self) -> Dual<'g> {
        self.mul(self)
    }

    pub fn matmul(self, rhs: Dual<'g>) -> Dual<'g> {
        let tangent = add_opt(
            self.tangent.map(|t| t.matmul(rhs.primal)),
            rhs.tangent.map(|t| self.primal.matmul(t)),
        );
        Dual { primal: self.primal.matmul(rhs.primal), tangent }
    }

    pub fn sum(self) -> Dual<'g> {
        Dual { primal: self.primal.sum(), tangent: self.tangent.map(|t| t.sum()) }
    }

    pub fn sum_axis(self, axis: usize) -> Dual<'g> {
        Dual { primal: self.primal.sum_axis(axis), tangent: self.tangent.map(|t| t.sum_axis(axis)) }
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Dual<'g> {
        Dual {
            primal: self.primal.broadcast_to(shape),
            tangent: self.tangent.map(|t| t.broadcast_to(shape)),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Dual<'g> {
        Dual { primal: self.primal.reshape(shape), tangent: self.tangent.map(|t| t.reshape(shape)) }
    }

    pub fn concat(parts: &[Dual<'g>]) -> Dual<'g> {
        let primal = Var::concat(&parts.iter().map(|p| p.primal).collect::<Vec<_>>());
        let tangent = if parts.iter().any(|p| p.tangent.is_some()) {
            Some(Var::concat(&parts.iter().map(|p| p.tangent_or_zero()).collect::<Vec<_>>()))
        } else {
            None
        };
        Dual { primal, tangent }
    }

    /// Softmax over the last axis; tangent `y * (dz - <y, dz>)`.
    pub fn softmax(self) -> Dual<'g> {
        let y = self.primal.softmax();
        let last = y.shape().len() - 1;
        let tangent = self.tangent.map(|t| {
            let inner = (y * t).sum_axis(last);
            y * (t - inner)
        });
        Dual { primal: y, tangent }
    }

    /// Value-transparent; zero tangent and no gradient.
    pub fn stop_gradient(self) -> Dual<'g> {
        Dual { primal: self.primal.detach(), tangent: None }
    }

    /// Forward-only map; fails if a tangent would have to pass through it.
    pub fn opaque_map(self, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Dual<'g>> {
        if self.tangent.is_some() {
            return Err(CfmError::UnsupportedPrimitive(name.to_string()));
        }
        Ok(Dual::constant(self.primal.opaque_map(name, f)))
    }

    pub fn materialize(&self) -> DualBatch {
        DualBatch {
            primal: (*self.primal.value()).clone(),
            tangent: (*self.tangent_or_zero().value()).clone(),
        }
    }
}

/// Value of `f(t)` and its derivative along `direction`, exact for the
/// registered primitives.
pub fn forward_jvp<F>(f: F, t: f64, direction: f64) -> Result<DualBatch>
where
    F: for<'g> Fn(&'g Graph, Dual<'g>) -> Result<Dual<'g>>,
{
    let g = Graph::new();
    let input = Dual::new(g.scalar(t), g.scalar(direction));
    let out = f(&g, input)?;
    Ok(out.materialize())
}

/// Stop-gradient on a materialized tensor: the returned leaf is constant.
pub fn stop_gradient<'g>(x: Var<'g>) -> Var<'g> {
    x.detach()
}
