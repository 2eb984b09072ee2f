//! Spectral Galerkin Monte Carlo for slow-fast systems of stochastic
//! reaction-diffusion equations on an interval: the frozen fast equation and
//! its invariant averages, the averaged slow equation, the coupled system at
//! scale ε, and the Khasminskii auxiliary processes.

pub mod averaging;
pub mod error;
pub mod fast;
pub mod harness;
pub mod noise;
pub mod reaction;
pub mod slowfast;
pub mod spectral;
pub mod stats;

pub use averaging::{
    analytic_fbar_linear, estimate_fbar, estimate_vbar, simulate_averaged, step_averaged, AveragedDriftParams,
    AveragedState, DriftSource, FbarEstimator,
};
pub use error::{Error, Hypothesis, Result};
pub use fast::{estimate_invariant_average, FrozenFastConfig, InvariantAverageEstimate};
pub use noise::{derive_stream, make_plan, ou_step, OUStepPlan, RngStream, RoleTag};
pub use reaction::{eval_v, GrowthConstants, LyapunovSpec, Monomial, ReactionKind, ReactionSpec};
pub use slowfast::{
    build_auxiliary, compute_rho0, khasminskii_delta, simulate_slowfast, step_coupled, KhasminskiiPlan, ModelSpec,
    SimOptions, SlowFastState, SlowFastStreams, TestFunction, Trajectory,
};
pub use spectral::{GridSpec, ModalField, SpectralOperator, Transform};
pub use stats::Estimate;
