//! End-to-end runs: data generation, training, evaluation and diagnostics.

pub mod config;
pub mod eval;
pub mod model;
pub mod run;

pub use config::{AbrTarget, EvalConfig, ExperimentConfig};
pub use eval::{abr_normalized_mse, abr_targets, angle_sweep, sampled_sweep_mape, sweep_mape, MetricsReport, SchemeMetrics, MAPE_FLOOR};
pub use model::{train_model, ModelSpec, Network, TrainedModel};
pub use run::{
    cmd_counterfactual, cmd_diagnose, cmd_eval_abr, cmd_eval_ellipse, cmd_generate, cmd_train, generate,
    load_or_generate, split_heldout, DiagnosticReport, NamedIndependence, RunError, RunResult, TrainReport,
    CHECKPOINT_EVERY, MARKOVIAN_MULTI_D_WARNING,
};
