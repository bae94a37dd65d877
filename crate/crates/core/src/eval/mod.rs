//! Metrics, latency, gate diagnostics, reports and experiment drivers.

pub mod diagnostics;
pub mod experiments;
pub mod latency;
pub mod metrics;
pub mod report;

pub use diagnostics::{collapse_diagnostic, gate_heatmap, GateHeatmap, Verdict};
pub use experiments::{
    comparison_report, run_ablation, run_sweep, run_variant, sweep_config, train_and_evaluate, ExperimentData,
    ExperimentOptions, SweepAxis, Variant, VariantResult,
};
pub use latency::{bench_latency, LatencyReport};
pub use metrics::{evaluate, predict, topk_accuracy, MetricsReport, Predictions};
pub use report::{Report, Table};
