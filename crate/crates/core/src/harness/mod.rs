//! Experiment orchestration: configuration, seeded runs, suites, ablations,
//! plots and the factor-recovery study.

pub mod config;
pub mod log;
pub mod plot;
pub mod recovery;
pub mod run;
pub mod suite;

pub use config::{load_config, ConfigMap, ExperimentConfig, RunConfig};
pub use log::{metric_columns, read_log, read_log_file, write_metric_csv, LogRow};
pub use plot::{emit_plots, render_svg};
pub use recovery::{random_policy_buffer, run_factor_recovery, RecoveryConfig, RecoveryReport};
pub use run::{build_agent, metric_report, run_experiment, run_to_writer, stream_rng, RunOutcome, Stream};
pub use suite::{
    ablation_variants, aggregate, read_aggregate, recovery_step, run_ablations, run_suite, summarize, AggregateRow,
    MeanStd, RunSummary, SuiteResult, VariantResult,
};
