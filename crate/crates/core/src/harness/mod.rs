//! Workload generation, experiment orchestration and reporting.

pub mod experiment;
pub mod r3a;
pub mod report;
pub mod workload;

pub use experiment::{run_experiment, ExperimentConfig, Overrides, R3aWorkload, WorkloadSpec};
pub use report::{summarize_cell, CellSummary, ReportSummary, RunReport};
pub use workload::{gen_r3a_workload, gen_tot_workload, R3aShape, Role, TotWorkload};
