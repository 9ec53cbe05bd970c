//! Config-driven experiments: parsing, orchestration, metrics and outputs.

mod config;
mod metrics;
mod run;

pub use config::{parse_pairs, DataSource, ExperimentConfig, ModelKind};
pub use metrics::{append_summary, tai, tail_mean, tdr, MetricsRecord, SummaryRow, SUMMARY_HEADER};
pub use run::{
    build_federation, load_data, run_experiment, run_experiment_with, run_to_dir, split_clients,
    time_aggregation, ExperimentReport,
};

use crate::attacks::attack_names;
use crate::defenses::defense_names;
use crate::fl::algorithm_names;

/// Registered names of one kind: `attacks`, `defenses` or `algorithms`.
pub fn list(kind: &str) -> Option<Vec<&'static str>> {
    match kind {
        "attacks" => Some(attack_names()),
        "defenses" => Some(defense_names()),
        "algorithms" => Some(algorithm_names()),
        _ => None,
    }
}
