//! Experiment runner: configuration files, single runs with CSV/JSON output,
//! and paired comparison suites.

mod config;
mod experiment;
mod suite;

pub use config::{parse_config, AttackSpec, ExpectSpec, RunConfig, TaskKind, TaskSpec, CONFIG_KEYS};
pub use experiment::{
    metrics_csv, run_experiment, write_outputs, Acceptance, ExperimentOutput, MetricsRecord,
    Summary, SUMMARY_SCHEMA_VERSION,
};
pub use suite::{compare_suite, load_suite_dir, Pairing, PairRow, SuiteReport};
