//! End-to-end runs driven by a plan file.
//!
//! A plan names the data, the models on each side, the attack settings and
//! the defense toggles. Every random choice is seeded from the plan seed, so
//! the same plan reproduces the same matrices and reports; only the timing
//! files change between runs.

mod plan;
mod report;
mod run;

pub use plan::{DataSource, DefensePlan, ExperimentPlan, ModelPlan};
pub use report::{audit, emit_report, sha256_file, AuditReport, Manifest, ReportFormat};
pub use run::{
    detection_rate, run, run_botnet_campaign, run_defense_eval, run_transfer_study, CleanEval,
    DefenseResults, DefenseRow, EvasionSummary, ExperimentOutput, ExperimentResults, FamilyContext,
    FamilyResults, PairRecord, PredictionRecord, Stages, SurrogatePerturbation, TimingRecord,
    TransferMatrix,
};
