//! Config-driven experiment commands: analyze, train, prune, export, report
//! and sweep. Every command is a pure function of its config and seed.

mod analyze;
mod commands;
mod config;
mod report;

pub use analyze::{cmd_analyze, Analysis};
pub use commands::{
    cmd_export, cmd_prune, cmd_sweep, cmd_train, run_experiment, sweep_csv, sweep_spread,
    ExportedModel, RunSummary, SweepCell, CHECKPOINT_FILE, EPOCHS_FILE, LAYERS_FILE,
    PRUNED_SPEC_FILE, SUMMARY_FILE, TELEMETRY_FILE,
};
pub use config::{
    BudgetConfig, DataConfig, ExperimentConfig, ModelSource, ResourceConfig, SweepConfig,
    DATA_DIR_ENV,
};
pub use report::{cmd_report, ReportSummary, REPORT_FILES};
