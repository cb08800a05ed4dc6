//! Synthetic two-party scenarios, experiment orchestration and reports.

mod pipeline;
mod report;
mod scenario;
mod synthetic;

pub use pipeline::{read_robustness, read_selection, reselect, rerun_manifest, run_matrix, Pipeline, RobustnessRow, Scored, SelectionReport};
pub use report::{bi_objective, bi_objective_svg, positional, positional_svg, write_bi_objective, write_positional, write_report, ObjectiveRow, PositionRow};
pub use scenario::{derive_seed, load_dataset, save_dataset, Approach, ApproachDisplay, RobustnessConfig, RunManifest, ScenarioConfig};
pub use synthetic::{generate_synthetic_party, PartySpec};
