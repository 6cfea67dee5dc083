//! Monte Carlo experiments and verification reports.

pub mod config;
pub mod report;
pub mod run;
pub mod stats;
pub mod verify;

pub use config::{
    AllocationSpec, DirectionSpec, ExperimentConfig, InvarianceSpec, MatcherConfig, NamedDirection, Population, Sizes,
    TolerancePolicy,
};
pub use report::{render_json, render_text, write_report_files, RawStats};
pub use run::{
    invariance_section, random_affine_map, run_experiment, verify_affine_invariance, verify_conditional_invariance,
    with_workers, InvarianceKind, InvarianceResult, MatcherRun, ReplicationStats,
};
pub use stats::{Aggregates, DesignRow, RepRow, Target};
pub use verify::{
    check_registry, expected_claims, verify_all, verify_conditional, verify_epbr, verify_theorem_3_1,
    verify_variance_decompositions, ClaimRecord, Suite, Verdict, VerificationReport, REGISTRY,
};
