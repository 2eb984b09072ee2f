//! JSON experiment configuration. Unknown keys are rejected and every
//! structural hypothesis is checked when the file is loaded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::AveragedDriftParams;
use crate::error::{Error, Result};
use crate::reaction::{validate_growth, GrowthConstants, LyapunovSpec, Monomial, ReactionSpec, SampleBox};
use crate::slowfast::{ModelSpec, TestFunction, DEFAULT_EXPLOSION_BOUND, DEFAULT_SUBSTEP_RATIO, DEFAULT_THETA};
use crate::spectral::{GridSpec, ModalField, SpectralOperator};

/// Censoring above this fraction aborts an experiment.
pub const MAX_CENSORED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    /// `ν∂²_ξ` with Dirichlet conditions and `λ_k = λ₀ k^{−s}`.
    Dirichlet {
        diffusivity: f64,
        noise_amplitude: f64,
        noise_decay: f64,
        gamma: f64,
    },
    Explicit {
        alphas: Vec<f64>,
        lambdas: Vec<f64>,
        gamma: f64,
    },
}

impl OperatorConfig {
    fn build(&self, n: usize, length: f64) -> Result<SpectralOperator> {
        match self {
            OperatorConfig::Dirichlet {
                diffusivity,
                noise_amplitude,
                noise_decay,
                gamma,
            } => SpectralOperator::dirichlet_power_law(n, *diffusivity, length, *noise_amplitude, *noise_decay, *gamma),
            OperatorConfig::Explicit { alphas, lambdas, gamma } => {
                if alphas.len() != n {
                    return Err(Error::Config(format!(
                        "explicit operator lists {} eigenvalues for {n} modes",
                        alphas.len()
                    )));
                }
                SpectralOperator::new(alphas.clone(), lambdas.clone(), *gamma)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SlowReactionConfig {
    LinearSlow,
    CubicRough {
        c_u: f64,
        c_v: f64,
    },
    Polynomial {
        #[serde(default)]
        constant: f64,
        terms: Vec<MonomialConfig>,
        growth: GrowthConstants,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialConfig {
    pub coef: f64,
    pub sigma_pow: u32,
    pub lambda_pow: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum FastReactionConfig {
    LinearFast {
        a_c: f64,
        b_c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
    LipschitzFast {
        a_c: f64,
        b_c: f64,
        s_c: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lipschitz: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_modes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_quad: Option<usize>,
    #[serde(default = "one")]
    pub length: f64,
    pub slow_operator: OperatorConfig,
    pub fast_operator: OperatorConfig,
    pub reaction_slow: SlowReactionConfig,
    pub reaction_fast: FastReactionConfig,
    /// Overrides the growth constants of a built-in slow reaction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthConstants>,
    #[serde(default = "one")]
    pub c_v: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    /// Leading modal coefficients; missing modes are zero.
    #[serde(default)]
    pub u0: Vec<f64>,
    #[serde(default)]
    pub v0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(default = "default_beta")]
    pub holder_beta: f64,
    #[serde(default = "one")]
    pub lambda_exp: f64,
    #[serde(default = "two")]
    pub c_const: f64,
    #[serde(default = "default_h")]
    pub h_macro: f64,
    #[serde(default = "default_ratio")]
    pub substep_ratio: f64,
    #[serde(default = "default_bound")]
    pub explosion_bound: f64,
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    0.2
}
fn default_h() -> f64 {
    1e-3
}
fn default_ratio() -> f64 {
    DEFAULT_SUBSTEP_RATIO
}
fn default_bound() -> f64 {
    DEFAULT_EXPLOSION_BOUND
}

impl ModelConfig {
    pub fn build(&self) -> Result<ModelSpec> {
        let n = self.n_modes;
        if n == 0 {
            return Err(Error::Config("n_modes must be positive".into()));
        }
        let grid = GridSpec::new(n, self.n_quad.unwrap_or(4 * n), self.length)?;
        let op1 = self.slow_operator.build(n, self.length)?;
        let op2 = self.fast_operator.build(n, self.length)?;

        let mut slow = match &self.reaction_slow {
            SlowReactionConfig::LinearSlow => ReactionSpec::linear_slow(),
            SlowReactionConfig::CubicRough { c_u, c_v } => ReactionSpec::cubic_rough(*c_u, *c_v),
            SlowReactionConfig::Polynomial { constant, terms, growth } => ReactionSpec::polynomial(
                *constant,
                terms
                    .iter()
                    .map(|t| Monomial {
                        coef: t.coef,
                        sigma_pow: t.sigma_pow,
                        lambda_pow: t.lambda_pow,
                    })
                    .collect(),
                *growth,
            )?,
        };
        if let Some(g) = self.growth {
            slow = slow.with_growth(g)?;
        }
        slow.growth().validate()?;
        validate_growth(&slow, &SampleBox::symmetric(10.0, 21))?.into_result()?;

        let fast = match &self.reaction_fast {
            FastReactionConfig::LinearFast { a_c, b_c, lipschitz } => {
                with_lipschitz(ReactionSpec::linear_fast(*a_c, *b_c), *lipschitz)?
            }
            FastReactionConfig::LipschitzFast {
                a_c,
                b_c,
                s_c,
                lipschitz,
            } => with_lipschitz(ReactionSpec::lipschitz_fast(*a_c, *b_c, *s_c), *lipschitz)?,
        };

        let u0 = ModalField::padded(&self.u0, n)?;
        let v0 = ModalField::padded(&self.v0, n)?;
        let mut m = ModelSpec::new(op1, op2, slow, fast, grid, self.epsilon, self.horizon, u0, v0)?;
        m.lyapunov = LyapunovSpec::from_growth(self.c_v, m.reaction_slow.growth())?;
        m.theta = self.theta.unwrap_or(m.theta);
        m.holder_beta = self.holder_beta;
        m.lambda_exp = self.lambda_exp;
        m.c_const = self.c_const;
        m.h_macro = self.h_macro;
        m.substep_ratio = self.substep_ratio;
        m.explosion_bound = self.explosion_bound;
        m.validate()?;
        Ok(m)
    }

    /// Default truncation level for this reaction when none is configured.
    pub fn effective_theta(&self) -> f64 {
        self.theta.unwrap_or(match self.reaction_slow {
            SlowReactionConfig::LinearSlow => 0.0,
            _ => DEFAULT_THETA,
        })
    }
}

fn with_lipschitz(spec: ReactionSpec, l: Option<f64>) -> Result<ReactionSpec> {
    match l {
        Some(l) => spec.with_lipschitz(l),
        None => Ok(spec),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    /// `⟨u(T), e_k⟩`, 1-based.
    Mode { k: usize },
    /// `‖u(T)‖²`.
    NormSquared,
}

impl Observable {
    pub fn id(&self) -> String {
        match self {
            Observable::Mode { k } => format!("mode{k}"),
            Observable::NormSquared => "norm_sq".into(),
        }
    }

    pub fn eval(&self, u: &ModalField) -> f64 {
        self.eval_coeffs(u.coeffs())
    }

    pub fn eval_coeffs(&self, c: &[f64]) -> f64 {
        match self {
            Observable::Mode { k } => c.get(k.wrapping_sub(1)).copied().unwrap_or(0.0),
            Observable::NormSquared => c.iter().map(|x| x * x).sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// Modes written per trajectory CSV.
    #[serde(default = "four")]
    pub k_dump: usize,
    /// How many trajectories get their own CSV.
    #[serde(default = "four")]
    pub dump_trajectories: usize,
    /// Write every `record_every`-th macro step.
    #[serde(default = "ten")]
    pub record_every: usize,
}

fn four() -> usize {
    4
}
fn ten() -> usize {
    10
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            k_dump: 4,
            dump_trajectories: 4,
            record_every: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Times per trajectory at which moments are sampled.
    #[serde(default = "default_time_samples")]
    pub time_samples: usize,
    /// Times per trajectory at which `V̄(u(t))` is estimated.
    #[serde(default = "default_vbar_points")]
    pub vbar_points: usize,
    /// Draws per `V̄` evaluation (Gaussian route) or replicas (time averages).
    #[serde(default = "default_vbar_samples")]
    pub vbar_samples: usize,
    /// Trajectories per ε that receive the `V̄` proxy.
    #[serde(default = "default_vbar_trajectories")]
    pub vbar_trajectories: usize,
    /// Dyadic level of the increment pairs.
    #[serde(default = "default_dyadic")]
    pub dyadic_level: u32,
}

fn default_time_samples() -> usize {
    101
}
fn default_vbar_points() -> usize {
    11
}
fn default_vbar_samples() -> usize {
    32
}
fn default_vbar_trajectories() -> usize {
    100
}
fn default_dyadic() -> u32 {
    4
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            time_samples: default_time_samples(),
            vbar_points: default_vbar_points(),
            vbar_samples: default_vbar_samples(),
            vbar_trajectories: default_vbar_trajectories(),
            dyadic_level: default_dyadic(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub epsilon_grid: Vec<f64>,
    pub ensemble_size: usize,
    #[serde(default)]
    pub test_functions: Vec<TestFunction>,
    #[serde(default)]
    pub observables: Vec<Observable>,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "one_usize")]
    pub worker_count: usize,
    #[serde(default)]
    pub averaged: AveragedDriftParams,
    #[serde(default = "default_thetas")]
    pub theta_sequence: Vec<f64>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub audit: AuditConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn one_usize() -> usize {
    1
}
fn default_thetas() -> Vec<f64> {
    vec![0.1, 0.01, 0.001]
}

impl ExperimentConfig {
    /// Schema, ordering and hypothesis checks. Returns the built model.
    pub fn validate(&self) -> Result<ModelSpec> {
        let model = self.model.build()?;
        if self.epsilon_grid.is_empty() {
            return Err(Error::Config("epsilon_grid is empty".into()));
        }
        if self.epsilon_grid.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
            return Err(Error::Config(format!(
                "epsilon_grid entries must lie in (0, 1): {:?}",
                self.epsilon_grid
            )));
        }
        if self.epsilon_grid.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Config(format!(
                "epsilon_grid must be strictly decreasing: {:?}",
                self.epsilon_grid
            )));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be positive".into()));
        }
        if self.worker_count == 0 {
            return Err(Error::Config("worker_count must be at least 1".into()));
        }
        if self.theta_sequence.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::Config("theta_sequence entries must lie in (0, 1]".into()));
        }
        let n = model.grid.n_modes();
        for xi in &self.test_functions {
            if xi.modes.is_empty() || xi.modes.len() > n {
                return Err(Error::Config(format!("test function must have 1..={n} modes")));
            }
        }
        for o in &self.observables {
            if let Observable::Mode { k } = o {
                if *k == 0 || *k > n {
                    return Err(Error::Config(format!("observable mode {k} outside 1..={n}")));
                }
            }
        }
        if self.audit.time_samples < 2 || self.audit.vbar_points < 2 {
            return Err(Error::Config("audit needs at least two sample times".into()));
        }
        if self.simulate.record_every == 0 {
            return Err(Error::Config("record_every must be positive".into()));
        }
        Ok(model)
    }

    /// SHA-256 of the canonical JSON with `worker_count` and `output_dir`
    /// blanked, so runs that differ only in those hash equal.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.worker_count = 0;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A configuration together with its validated model.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub model: ModelSpec,
}

pub fn parse_config_str(text: &str) -> Result<LoadedConfig> {
    let config: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("schema violation: {e}")))?;
    let model = config.validate()?;
    Ok(LoadedConfig { config, model })
}

pub fn parse_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}
