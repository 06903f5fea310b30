//! Structured generative networks for counterfactual queries.
//!
//! A conditional normalizing flow models each mechanism as a map from
//! exogenous noise to an observed variable that is strictly increasing
//! in the noise. Networks are trained by maximum likelihood under one of
//! several causal structures and answer counterfactuals by abduction
//! followed by a forward pass under the intervened condition.
//!
//! Everything numeric is generic over [`Real`]; the aliases below fix
//! the scalar type for the common cases.

pub mod autodiff;
pub mod counterfactual;
pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod scalar;
pub mod scm;
pub mod structured;

pub use error::{Error, Result};
pub use scalar::Real;

/// Double-precision conditional flow.
pub type Bijection = flow::ConditionalBijection<f64>;
/// Single-precision conditional flow.
pub type Bijection32 = flow::ConditionalBijection<f32>;
/// Double-precision structured network.
pub type Network = structured::StructuredGenerativeNetwork<f64>;
/// Single-precision structured network.
pub type Network32 = structured::StructuredGenerativeNetwork<f32>;
