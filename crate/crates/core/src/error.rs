use thiserror::Error;

/// Structural assumptions a model configuration must satisfy before it is run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    /// Fast drift gap ω := α_{2,1} − L₂ > 0.
    Dissipativity,
    /// κ₁ ≤ 2m₂ between the one-sided and growth exponents.
    GrowthExponents,
    /// |b| ≤ c₁(a₁ + |σ|^{m₁} + |λ|^{m₂}).
    PolynomialGrowth,
    /// b(σ+ρ, λ)σ ≤ c₂(a₂ + σ² + |λ|^{κ₁} + |ρ|^{κ₂}).
    OneSidedGrowth,
    /// Σ λ_k² α_k^{2γ−1} < ∞.
    NoiseRegularity,
    /// Positive, nondecreasing eigenvalues.
    Spectrum,
}

impl Hypothesis {
    pub fn statement(&self) -> &'static str {
        match self {
            Hypothesis::Dissipativity => "dissipativity hypothesis: ω := α_{2,1} − L₂ > 0",
            Hypothesis::GrowthExponents => "growth exponent hypothesis: κ₁ ≤ 2m₂",
            Hypothesis::PolynomialGrowth => {
                "polynomial growth hypothesis: |b(t,ξ,σ,λ)| ≤ c₁(a₁ + |σ|^m₁ + |λ|^m₂)"
            }
            Hypothesis::OneSidedGrowth => {
                "one-sided growth hypothesis: b(t,ξ,σ+ρ,λ)σ ≤ c₂(a₂ + |σ|² + |λ|^κ₁ + |ρ|^κ₂)"
            }
            Hypothesis::NoiseRegularity => {
                "noise regularity hypothesis: Σ_k λ_k² α_k^(2γ−1) < ∞"
            }
            Hypothesis::Spectrum => "spectrum hypothesis: inf_k α_k = α_1 > 0, α_k nondecreasing",
        }
    }
}

impl std::fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.statement())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{hypothesis} violated: {detail}")]
    HypothesisViolated {
        hypothesis: Hypothesis,
        detail: String,
    },

    #[error("state explosion at t = {t}: ‖u‖ = {u_norm:e}, ‖v‖ = {v_norm:e}")]
    StateExplosion { t: f64, u_norm: f64, v_norm: f64 },

    #[error("undefined fit: {0}")]
    UndefinedFit(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("too many censored trajectories: {censored} of {total}")]
    ExcessiveCensoring { censored: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn violated(hypothesis: Hypothesis, detail: impl Into<String>) -> Self {
        Error::HypothesisViolated {
            hypothesis,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
