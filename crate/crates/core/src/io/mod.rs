//! Manifests, result tables, provenance sidecars and experiment plans.

pub mod manifest;
pub mod plan;
pub mod provenance;
pub mod table;

pub use manifest::{load_manifest, rd_curves, ImageRecord, Manifest, ManifestKind, RdRecord};
pub use plan::{run_plan, ExperimentPlan, PlanStep, PlanSummary, StepState, StepStatus, SUMMARY_FILE};
pub use provenance::{config_hash, read_sidecar, sidecar_path, write_sidecar, Provenance};
pub use table::{Cell, Emphasis, ResultsTable, TableFormat, TableRow};
