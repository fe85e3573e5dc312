//! Categorical flow maps.
//!
//! Few-step generation of categorical data with flow maps whose endpoint
//! predictions live on the probability simplex. The crate contains a small
//! differentiation engine, the interpolant and flow-map algebra, an MLP
//! endpoint predictor, the self-distillation objectives and trainer, samplers,
//! reward-guided SMC, enumerable toy datasets with exact metrics, and the file
//! formats used by the `cfm` command-line tool.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flowmap;
pub mod guidance;
pub mod interpolant;
pub mod io;
pub mod losses;
pub mod predictor;
pub mod rng;
pub mod sampler;
pub mod selfcheck;
pub mod trainer;

pub use autodiff::Tensor;
pub use error::{CfmError, Result};
