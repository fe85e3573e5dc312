//! Differentiation engine: reverse-mode gradients over a tape of registered
//! primitives, and forward-mode tangents along the time input.

mod dual;
mod graph;
mod tensor;

pub use dual::{forward_jvp, stop_gradient, Dual, DualBatch};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use crate::error::{CfmError, Result};

/// Gradient of a scalar program with respect to a set of named parameters.
///
/// `loss` receives one gradient-tracked leaf per entry of `params`, in
/// iteration order.
pub fn grad<F>(loss: F, params: &BTreeMap<String, Tensor>) -> Result<(f64, BTreeMap<String, Tensor>)>
where
    F: for<'g> Fn(&'g Graph, &BTreeMap<String, Var<'g>>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let bound: BTreeMap<String, Var<'_>> =
        params.iter().map(|(k, v)| (k.clone(), g.param(v.clone()))).collect();
    let out = loss(&g, &bound)?;
    let value = out.value().item();
    if !value.is_finite() {
        return Err(CfmError::NonFiniteLoss("loss".into()));
    }
    let grads = g.backward(out)?;
    Ok((value, bound.iter().map(|(k, v)| (k.clone(), grads.get_or_zero(*v))).collect()))
}
