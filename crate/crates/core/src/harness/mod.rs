//! Experiment orchestration: configuration, ensemble studies over ε grids,
//! and CSV output.

pub mod config;
pub mod experiments;
pub mod results;

pub use config::{parse_config, parse_config_str, ExperimentConfig, LoadedConfig, Observable};
pub use experiments::{
    run_audit, run_average, run_converge, run_convergence_study, run_holder_stats, run_invariant,
    run_khasminskii_study, run_moment_audit, run_simulate, run_theta_stability, RunReport,
};
pub use results::{emit_results, ResultRow, ResultTable};
