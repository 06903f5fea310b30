//! Monotone conditional bijections built from rational-spline layers.

pub mod affine;
pub mod bijection;
pub mod conditioner;
pub mod spline;

pub use affine::AffineCalibration;
pub use bijection::{ConditionalBijection, FlowConfig, Layer};
pub use conditioner::{ConditionerNet, Dense};
pub use spline::{raw_to_spline, spline_forward, spline_inverse, SplineParams};
