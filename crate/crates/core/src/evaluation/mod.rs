//! Metrics, experiment drivers and report files.

mod config;
mod experiment;
mod metrics;
mod report;

pub use config::{DataSource, Method, RunConfig};
pub use experiment::{
    budget_grid, prepare_prompts, repeat_runs, resume_experiment, run_experiment, scarcity_sweep, Aggregates,
    CausalCache, GridCell, MetricReport, QueryLog, QueryRow, Resources, RunOutput, SweepLevel,
};
pub use metrics::{classification_metrics, exact_match, normalize_answer, word_f1, ClassificationMetrics};
pub use report::{
    aggregates_csv, average_headline, grid_csv, parse_report_jsonl, pct, report_jsonl, runlog_jsonl, sha256_file,
    sha256_hex, sweep_csv, Manifest,
};
