//! Experiment runner: config parsing, replicated continual runs, NLPD and
//! error-rate tables per visited region, and report files.

pub mod config;
pub mod report;
pub mod run;

pub use config::{DatasetSpec, ExperimentConfig, MetricsSpec, ModelSpec};
pub use report::{emit_reports, load_report_csv, report_csv, Region, ReportRow, StepReport, REPORT_COLUMNS};
pub use run::{nlpd, run_experiment, run_prepared, ExperimentOutcome, Prepared};
