//! Experiment runner: configs, runs, comparisons and plots.

pub mod compare;
pub mod config;
pub mod plots;
pub mod run;

pub use compare::{compare_variants, Comparison, ComparisonRow};
pub use config::{ConfigIssue, DataSource, ExperimentConfig, ExperimentKind, MetricEncoder};
pub use plots::emit_plots;
pub use run::{output_root, run_config, run_experiment, MetricRow, RunRecord, OUTPUT_ROOT_ENV};
