//! Checks of the identification conditions and of what was recovered.

pub mod equivalence;
pub mod independence;
pub mod monotonicity;
pub mod stats;
pub mod variability;

pub use equivalence::{
    cross_condition_residual, equivalence_check, equivalence_of_samples, EquivalenceMode, EquivalenceReport,
    PiecewiseLinear,
};
pub use independence::{conditional_independence_test, equal_frequency_bins, independence_test, IndependenceReport};
pub use monotonicity::{monotonicity_check, MonotonicityReport, Violation};
pub use stats::{
    determinant, fisher_combine, ks_two_sample, ks_uniform, silverman_bandwidth, spearman, AsSamples, KsResult,
};
pub use variability::{variability_bc, variability_iv, VariabilityReport};
