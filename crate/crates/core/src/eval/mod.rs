//! Evaluation: linear probe, closed-form model statistics, similarity-map
//! export, the gradient-check suite and ablation sweeps.

pub mod ablate;
pub mod gradcheck;
pub mod maps;
pub mod probe;
pub mod stats;

pub use ablate::{default_grid, parse_grid, run_point, run_sweep, AblationKind, AblationRow, GridValue, Status};
pub use maps::{export_maps, MapExport};
pub use probe::{linear_probe, pooled_features, ProbeConfig, ProbeResult};
pub use stats::{model_stats, ModelStats};
