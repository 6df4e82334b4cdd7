//! Experiment orchestration: configs, single runs, sweeps and reports.

mod config;
mod memory;
mod run;
mod sweep;

pub use config::{criterion_name, default_prune_batch, parse_criterion, ArchScale, ExperimentConfig, OUT_DIR_ENV};
pub use memory::{report_memory, write_memory_csv, MemoryRow, BYTES_PER_MB};
pub use run::{
    load_dataset, run_experiment, run_with_dataset, write_run, EvalPoint, MaskAudit, NetworkLayers, PhaseEvent,
    RunFiles, RunRecord, RunTiming,
};
pub use sweep::{run_sweep, summarize, write_summary, SummaryRow, SweepCell};
