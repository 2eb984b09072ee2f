//! Pointwise reaction terms, their Nemytskii lifts, the truncation `b_θ`,
//! the Lyapunov functional `V`, and the structural checks a reaction must
//! pass before it is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Hypothesis, Result};
use crate::spectral::GridSpec;

/// `coef · σ^sigma_pow · λ^lambda_pow`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coef: f64,
    pub sigma_pow: u32,
    pub lambda_pow: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReactionKind {
    /// `b(σ, λ) = λ`.
    LinearSlow,
    /// `b(σ, λ) = −σ³ + c_u σ + c_v λ|λ|`.
    CubicRough { c_u: f64, c_v: f64 },
    /// `b(σ, λ) = constant + Σ coef σ^i λ^j`.
    Polynomial { constant: f64, terms: Vec<Monomial> },
    /// `g(ρ, σ) = a_c ρ − b_c σ`.
    LinearFast { a_c: f64, b_c: f64 },
    /// `g(ρ, σ) = a_c ρ − b_c σ + s_c sin σ`.
    LipschitzFast { a_c: f64, b_c: f64, s_c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReactionClass {
    PolynomialSlow,
    LipschitzFast,
    LinearBenchmark,
}

/// Growth constants: `m₁, m₂ ≥ 1`, `κ₁ ≤ 2m₂`, `κ₂ ≥ 0`, `c₁, c₂ > 0`
/// and constant baselines `a₁, a₂`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthConstants {
    pub m1: f64,
    pub m2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub c1: f64,
    pub c2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl GrowthConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.m1 >= 1.0 && self.m2 >= 1.0) {
            return Err(Error::invalid(format!(
                "growth exponents need m1, m2 ≥ 1 (got {}, {})",
                self.m1, self.m2
            )));
        }
        if !(self.kappa1 >= 0.0 && self.kappa2 >= 0.0) {
            return Err(Error::invalid("κ₁, κ₂ must be nonnegative"));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::invalid("c₁, c₂ must be positive"));
        }
        if !(self.a1 >= 0.0 && self.a2 >= 0.0) {
            return Err(Error::invalid("a₁, a₂ must be nonnegative"));
        }
        if self.kappa1 > 2.0 * self.m2 {
            return Err(Error::violated(
                Hypothesis::GrowthExponents,
                format!("κ₁ = {} > 2m₂ = {}", self.kappa1, 2.0 * self.m2),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReactionSpec {
    kind: ReactionKind,
    growth: GrowthConstants,
    lipschitz: Option<f64>,
}

impl ReactionSpec {
    pub fn linear_slow() -> Self {
        Self {
            kind: ReactionKind::LinearSlow,
            growth: GrowthConstants {
                m1: 1.0,
                m2: 1.0,
                kappa1: 2.0,
                kappa2: 0.0,
                c1: 1.0,
                c2: 1.0,
                a1: 0.0,
                a2: 0.0,
            },
            lipschitz: None,
        }
    }

    pub fn cubic_rough(c_u: f64, c_v: f64) -> Self {
        let (cu, cv) = (c_u.abs(), c_v.abs());
        Self {
            kind: ReactionKind::CubicRough { c_u, c_v },
            growth: GrowthConstants {
                m1: 3.0,
                m2: 2.0,
                kappa1: 4.0,
                kappa2: 4.0,
                c1: (1.0 + cu).max(cv),
                c2: (1.5 * cu + 0.5 * cv).max(0.25 + 0.25 * cu),
                a1: 1.0,
                a2: 1.0,
            },
            lipschitz: None,
        }
    }

    pub fn polynomial(constant: f64, terms: Vec<Monomial>, growth: GrowthConstants) -> Result<Self> {
        growth.validate()?;
        for t in &terms {
            let load = t.sigma_pow as f64 / growth.m1 + t.lambda_pow as f64 / growth.m2;
            if t.coef != 0.0 && load > 1.0 + 1e-12 {
                return Err(Error::violated(
                    Hypothesis::PolynomialGrowth,
                    format!(
                        "monomial σ^{}λ^{} exceeds the growth envelope (i/m₁ + j/m₂ = {load} > 1)",
                        t.sigma_pow, t.lambda_pow
                    ),
                ));
            }
        }
        Ok(Self {
            kind: ReactionKind::Polynomial { constant, terms },
            growth,
            lipschitz: None,
        })
    }

    pub fn linear_fast(a_c: f64, b_c: f64) -> Self {
        Self {
            kind: ReactionKind::LinearFast { a_c, b_c },
            growth: Self::fast_growth(),
            lipschitz: Some(b_c.abs()),
        }
    }

    pub fn lipschitz_fast(a_c: f64, b_c: f64, s_c: f64) -> Self {
        Self {
            kind: ReactionKind::LipschitzFast { a_c, b_c, s_c },
            growth: Self::fast_growth(),
            lipschitz: Some(b_c.abs() + s_c.abs()),
        }
    }

    fn fast_growth() -> GrowthConstants {
        GrowthConstants {
            m1: 1.0,
            m2: 1.0,
            kappa1: 2.0,
            kappa2: 2.0,
            c1: 1.0,
            c2: 1.0,
            a1: 0.0,
            a2: 0.0,
        }
    }

    /// Replaces the kind-derived growth constants (slow kinds only).
    pub fn with_growth(mut self, growth: GrowthConstants) -> Result<Self> {
        if !self.is_slow() {
            return Err(Error::invalid("growth constants apply to slow reactions"));
        }
        growth.validate()?;
        self.growth = growth;
        Ok(self)
    }

    /// Declares a Lipschitz constant in σ; must dominate the structural one.
    pub fn with_lipschitz(mut self, l2: f64) -> Result<Self> {
        let structural = self
            .lipschitz
            .ok_or_else(|| Error::invalid("Lipschitz constant applies to fast reactions"))?;
        if !(l2 >= structural) {
            return Err(Error::invalid(format!(
                "declared L₂ = {l2} is below the Lipschitz constant {structural} of g"
            )));
        }
        self.lipschitz = Some(l2);
        Ok(self)
    }

    pub fn kind(&self) -> &ReactionKind {
        &self.kind
    }

    pub fn growth(&self) -> &GrowthConstants {
        &self.growth
    }

    /// `L₂` for fast kinds.
    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn class(&self) -> ReactionClass {
        match self.kind {
            ReactionKind::LinearSlow | ReactionKind::LinearFast { .. } => {
                ReactionClass::LinearBenchmark
            }
            ReactionKind::CubicRough { .. } | ReactionKind::Polynomial { .. } => {
                ReactionClass::PolynomialSlow
            }
            ReactionKind::LipschitzFast { .. } => ReactionClass::LipschitzFast,
        }
    }

    pub fn is_slow(&self) -> bool {
        matches!(
            self.kind,
            ReactionKind::LinearSlow
                | ReactionKind::CubicRough { .. }
                | ReactionKind::Polynomial { .. }
        )
    }

    /// Whether `b` depends on its fast argument λ.
    pub fn depends_on_fast(&self) -> bool {
        match &self.kind {
            ReactionKind::LinearSlow => true,
            ReactionKind::CubicRough { c_v, .. } => *c_v != 0.0,
            ReactionKind::Polynomial { terms, .. } => {
                terms.iter().any(|t| t.coef != 0.0 && t.lambda_pow > 0)
            }
            _ => false,
        }
    }

    /// Whether `g` depends on the frozen slow argument ρ.
    pub fn depends_on_slow(&self) -> bool {
        match self.kind {
            ReactionKind::LinearFast { a_c, .. } | ReactionKind::LipschitzFast { a_c, .. } => {
                a_c != 0.0
            }
            _ => false,
        }
    }

    /// Coupling `a_c` and damping `b_c` of a fast reaction.
    pub fn fast_linear_part(&self) -> Option<(f64, f64)> {
        match self.kind {
            ReactionKind::LinearFast { a_c, b_c } | ReactionKind::LipschitzFast { a_c, b_c, .. } => {
                Some((a_c, b_c))
            }
            _ => None,
        }
    }

    #[inline]
    pub(crate) fn b_unchecked(&self, sigma: f64, lambda: f64) -> f64 {
        match &self.kind {
            ReactionKind::LinearSlow => lambda,
            ReactionKind::CubicRough { c_u, c_v } => {
                -sigma * sigma * sigma + c_u * sigma + c_v * lambda * lambda.abs()
            }
            ReactionKind::Polynomial { constant, terms } => {
                let mut acc = *constant;
                for t in terms {
                    acc += t.coef * sigma.powi(t.sigma_pow as i32) * lambda.powi(t.lambda_pow as i32);
                }
                acc
            }
            _ => f64::NAN,
        }
    }

    /// Part of `g` not absorbed into the shifted generator: `g + b_c σ`.
    #[inline]
    pub(crate) fn g_remainder(&self, rho: f64, sigma: f64) -> f64 {
        match self.kind {
            ReactionKind::LinearFast { a_c, .. } => a_c * rho,
            ReactionKind::LipschitzFast { a_c, s_c, .. } => a_c * rho + s_c * sigma.sin(),
            _ => f64::NAN,
        }
    }
}

/// `b(t, ξ, σ, λ)` for a slow reaction. Built-in reactions are autonomous and
/// homogeneous in space.
pub fn eval_b(spec: &ReactionSpec, _t: f64, _xi: f64, sigma: f64, lambda: f64) -> Result<f64> {
    if !spec.is_slow() {
        return Err(Error::invalid("eval_b needs a slow reaction"));
    }
    Ok(spec.b_unchecked(sigma, lambda))
}

/// `g(t, ξ, ρ, σ)` for a fast reaction.
pub fn eval_g(spec: &ReactionSpec, _t: f64, _xi: f64, rho: f64, sigma: f64) -> Result<f64> {
    let (_, b_c) = spec
        .fast_linear_part()
        .ok_or_else(|| Error::invalid("eval_g needs a fast reaction"))?;
    Ok(spec.g_remainder(rho, sigma) - b_c * sigma)
}

/// `b_θ = b/(1 + θ|b|)`; `theta == 0` returns `b`.
#[inline]
pub fn truncate(b: f64, theta: f64) -> f64 {
    if theta == 0.0 {
        b
    } else {
        b / (1.0 + theta * b.abs())
    }
}

pub fn truncate_b(
    spec: &ReactionSpec,
    theta: f64,
    t: f64,
    xi: f64,
    sigma: f64,
    lambda: f64,
) -> Result<f64> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::invalid(format!("θ must lie in (0, 1], got {theta}")));
    }
    Ok(truncate(eval_b(spec, t, xi, sigma, lambda)?, theta))
}

/// Pointwise slow drift `b` (or `b_θ` when `theta` is given) at every node.
pub fn nemytskii_drift(
    spec: &ReactionSpec,
    theta: Option<f64>,
    _t: f64,
    u_phys: &[f64],
    v_phys: &[f64],
    grid: &GridSpec,
) -> Result<Vec<f64>> {
    if !spec.is_slow() {
        return Err(Error::invalid("nemytskii_drift needs a slow reaction"));
    }
    if u_phys.len() != grid.n_quad() || v_phys.len() != grid.n_quad() {
        return Err(Error::invalid(format!(
            "drift fields have {} and {} nodes, grid has {}",
            u_phys.len(),
            v_phys.len(),
            grid.n_quad()
        )));
    }
    if let Some(th) = theta {
        if !(th >= 0.0) {
            return Err(Error::invalid(format!("θ must be nonnegative, got {th}")));
        }
    }
    let mut out = vec![0.0; u_phys.len()];
    fill_slow_drift(spec, theta.unwrap_or(0.0), u_phys, v_phys, &mut out);
    Ok(out)
}

#[inline]
pub(crate) fn fill_slow_drift(
    spec: &ReactionSpec,
    theta: f64,
    u_phys: &[f64],
    v_phys: &[f64],
    out: &mut [f64],
) {
    for ((o, u), v) in out.iter_mut().zip(u_phys).zip(v_phys) {
        *o = truncate(spec.b_unchecked(*u, *v), theta);
    }
}

#[inline]
pub(crate) fn fill_fast_remainder(spec: &ReactionSpec, x_phys: &[f64], v_phys: &[f64], out: &mut [f64]) {
    for ((o, x), v) in out.iter_mut().zip(x_phys).zip(v_phys) {
        *o = spec.g_remainder(*x, *v);
    }
}

/// `V(x, y) = c_V(1 + ‖x‖^{2m₁}_{L^{4m₁}} + ‖y‖^{2m₂}_{L^{4m₂}} + ‖y‖^{κ₁m₁}_{L^{2κ₁m₁}})`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpec {
    pub c_v: f64,
    pub m1: f64,
    pub m2: f64,
    pub kappa1: f64,
    pub kappa2: f64,
}

impl LyapunovSpec {
    pub fn from_growth(c_v: f64, g: &GrowthConstants) -> Result<Self> {
        if !(c_v > 0.0) {
            return Err(Error::invalid(format!("c_V must be positive, got {c_v}")));
        }
        Ok(Self {
            c_v,
            m1: g.m1,
            m2: g.m2,
            kappa1: g.kappa1,
            kappa2: g.kappa2,
        })
    }

    /// `p̄ = 2κ₂m₁`.
    pub fn p_bar(&self) -> f64 {
        2.0 * self.kappa2 * self.m1
    }

    /// `q̄ = 2κ₁m₁ ∨ 4m₂`.
    pub fn q_bar(&self) -> f64 {
        (2.0 * self.kappa1 * self.m1).max(4.0 * self.m2)
    }

    /// The three Lᵖ exponents `4m₁`, `4m₂`, `2κ₁m₁`.
    pub fn exponents(&self) -> [f64; 3] {
        [4.0 * self.m1, 4.0 * self.m2, 2.0 * self.kappa1 * self.m1]
    }

    /// Pointwise integrand bounding the truncation gap:
    /// `c_V(1 + |σ|^{2m₁} + |λ|^{2m₂} + |λ|^{κ₁m₁})`.
    pub fn pointwise(&self, sigma: f64, lambda: f64) -> f64 {
        self.c_v
            * (1.0
                + sigma.abs().powf(2.0 * self.m1)
                + lambda.abs().powf(2.0 * self.m2)
                + if self.kappa1 * self.m1 > 0.0 {
                    lambda.abs().powf(self.kappa1 * self.m1)
                } else {
                    0.0
                })
    }
}

/// `‖f‖^{p/2}_{Lᵖ}` with a zero exponent contributing nothing.
fn half_power_term(values: &[f64], p: f64, grid: &GridSpec) -> f64 {
    if p == 0.0 {
        0.0
    } else {
        grid.lp_integral(values, p).sqrt()
    }
}

pub fn eval_v(u_phys: &[f64], v_phys: &[f64], lyap: &LyapunovSpec, grid: &GridSpec) -> f64 {
    let [pu, pv, pk] = lyap.exponents();
    lyap.c_v
        * (1.0
            + half_power_term(u_phys, pu, grid)
            + half_power_term(v_phys, pv, grid)
            + half_power_term(v_phys, pk, grid))
}

/// One lattice point `(t, ξ, σ, λ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint {
    pub t: f64,
    pub xi: f64,
    pub sigma: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationGap {
    /// `max |b − b_θ|` over the samples.
    pub max_gap: f64,
    /// `max |b − b_θ| / (θ · V-integrand)`.
    pub max_ratio: f64,
}

pub fn truncation_gap_bound(
    spec: &ReactionSpec,
    lyap: &LyapunovSpec,
    theta: f64,
    samples: &[SamplePoint],
) -> Result<TruncationGap> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::invalid(format!("θ must lie in (0, 1), got {theta}")));
    }
    let mut max_gap: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    for p in samples {
        let b = eval_b(spec, p.t, p.xi, p.sigma, p.lambda)?;
        let gap = (b - truncate(b, theta)).abs();
        max_gap = max_gap.max(gap);
        max_ratio = max_ratio.max(gap / (theta * lyap.pointwise(p.sigma, p.lambda)));
    }
    Ok(TruncationGap { max_gap, max_ratio })
}

/// `ω = α_{2,1} − L₂`, rejected unless strictly positive.
pub fn validate_dissipativity(alpha21: f64, l2: f64) -> Result<f64> {
    let omega = alpha21 - l2;
    if !(omega > 0.0) {
        return Err(Error::violated(
            Hypothesis::Dissipativity,
            format!("α_{{2,1}} = {alpha21}, L₂ = {l2}, ω = {omega}"),
        ));
    }
    Ok(omega)
}

/// Finite lattice of `(t, ξ, σ, ρ, λ)` values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    pub t: Vec<f64>,
    pub xi: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl SampleBox {
    /// `[−r, r]` in σ, ρ, λ with `n` points each, at one `(t, ξ)`.
    pub fn symmetric(radius: f64, n: usize) -> Self {
        let pts: Vec<f64> = (0..n)
            .map(|i| -radius + 2.0 * radius * i as f64 / (n - 1) as f64)
            .collect();
        Self {
            t: vec![0.0],
            xi: vec![0.5],
            sigma: pts.clone(),
            rho: pts.clone(),
            lambda: pts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InequalityCheck {
    pub passed: bool,
    /// Largest value of `lhs / envelope`, to be compared with the constant.
    pub worst_ratio: f64,
    pub constant: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowthReport {
    /// `|b| ≤ c₁(a₁ + |σ|^{m₁} + |λ|^{m₂})`.
    pub bound: InequalityCheck,
    /// `b(σ+ρ, λ)σ ≤ c₂(a₂ + σ² + |λ|^{κ₁} + |ρ|^{κ₂})`.
    pub one_sided: InequalityCheck,
}

impl GrowthReport {
    pub fn passed(&self) -> bool {
        self.bound.passed && self.one_sided.passed
    }

    pub fn into_result(self) -> Result<Self> {
        if !self.bound.passed {
            return Err(Error::violated(
                Hypothesis::PolynomialGrowth,
                format!(
                    "sampled ratio {} exceeds c₁ = {}",
                    self.bound.worst_ratio, self.bound.constant
                ),
            ));
        }
        if !self.one_sided.passed {
            return Err(Error::violated(
                Hypothesis::OneSidedGrowth,
                format!(
                    "sampled ratio {} exceeds c₂ = {}",
                    self.one_sided.worst_ratio, self.one_sided.constant
                ),
            ));
        }
        Ok(self)
    }
}

fn pow_or_one(x: f64, p: f64) -> f64 {
    if p == 0.0 {
        1.0
    } else {
        x.abs().powf(p)
    }
}

/// Numerical lattice check of both growth inequalities. Not a proof.
pub fn validate_growth(spec: &ReactionSpec, sample_box: &SampleBox) -> Result<GrowthReport> {
    if !spec.is_slow() {
        return Err(Error::invalid("growth checks apply to slow reactions"));
    }
    let g = spec.growth;
    let tol = 1e-9;
    let mut worst_bound: f64 = 0.0;
    let mut worst_one_sided = f64::NEG_INFINITY;
    for &t in &sample_box.t {
        for &xi in &sample_box.xi {
            for &s in &sample_box.sigma {
                for &l in &sample_box.lambda {
                    let b = eval_b(spec, t, xi, s, l)?;
                    let env = g.a1 + pow_or_one(s, g.m1) + pow_or_one(l, g.m2);
                    let ratio = if env > 0.0 {
                        b.abs() / env
                    } else if b == 0.0 {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                    worst_bound = worst_bound.max(ratio);
                    for &r in &sample_box.rho {
                        let lhs = eval_b(spec, t, xi, s + r, l)? * s;
                        let env = g.a2 + s * s + pow_or_one(l, g.kappa1) + pow_or_one(r, g.kappa2);
                        let ratio = if env > 0.0 {
                            lhs / env
                        } else if lhs <= 0.0 {
                            0.0
                        } else {
                            f64::INFINITY
                        };
                        worst_one_sided = worst_one_sided.max(ratio);
                    }
                }
            }
        }
    }
    Ok(GrowthReport {
        bound: InequalityCheck {
            passed: worst_bound <= g.c1 * (1.0 + tol),
            worst_ratio: worst_bound,
            constant: g.c1,
        },
        one_sided: InequalityCheck {
            passed: worst_one_sided <= g.c2 * (1.0 + tol),
            worst_ratio: worst_one_sided,
            constant: g.c2,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cubic_plus_lambda() -> ReactionSpec {
        // b = −σ³ + λ
        ReactionSpec::polynomial(
            0.0,
            vec![
                Monomial {
                    coef: -1.0,
                    sigma_pow: 3,
                    lambda_pow: 0,
                },
                Monomial {
                    coef: 1.0,
                    sigma_pow: 0,
                    lambda_pow: 1,
                },
            ],
            GrowthConstants {
                m1: 3.0,
                m2: 1.0,
                kappa1: 2.0,
                kappa2: 4.0,
                c1: 2.0,
                c2: 1.0,
                a1: 0.0,
                a2: 1.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn b_values() {
        assert_eq!(eval_b(&cubic_plus_lambda(), 0.0, 0.5, 2.0, 1.0).unwrap(), -7.0);
        assert_eq!(eval_b(&ReactionSpec::linear_slow(), 0.0, 0.5, 5.0, 0.3).unwrap(), 0.3);
        let zero = ReactionSpec::cubic_rough(1.0, 1.0);
        assert_eq!(eval_b(&zero, 0.0, 0.5, 0.0, 0.0).unwrap(), 0.0);
        assert!(eval_b(&ReactionSpec::linear_fast(1.0, 2.0), 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn g_values() {
        let g = ReactionSpec::linear_fast(1.0, 2.0);
        assert_eq!(eval_g(&g, 0.0, 0.0, 3.0, 1.0).unwrap(), 1.0);
        assert!(eval_g(&ReactionSpec::linear_slow(), 0.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn truncation_values() {
        let lin = ReactionSpec::linear_slow();
        assert_eq!(truncate_b(&lin, 0.5, 0.0, 0.0, 0.0, 2.0).unwrap(), 1.0);
        let v = truncate_b(&lin, 0.1, 0.0, 0.0, 0.0, -3.0).unwrap();
        assert!((v + 3.0 / 1.3).abs() < 1e-14);
        assert!((v + 2.307_69).abs() < 1e-5);
        assert!((truncate(7.0, 1e-12) - 7.0).abs() < 1e-9);
        assert!(truncate_b(&lin, 0.0, 0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn drift_fields() {
        let grid = GridSpec::new(2, 4, 1.0).unwrap();
        let zero = ReactionSpec::polynomial(0.0, vec![], ReactionSpec::linear_slow().growth).unwrap();
        let d = nemytskii_drift(&zero, None, 0.0, &[1.0; 4], &[2.0; 4], &grid).unwrap();
        assert!(d.iter().all(|x| *x == 0.0));
        let v = [0.1, -0.2, 0.3, 0.4];
        let d = nemytskii_drift(&ReactionSpec::linear_slow(), None, 0.0, &[9.0; 4], &v, &grid).unwrap();
        assert_eq!(d, v);
        let cubic = ReactionSpec::cubic_rough(0.5, 1.0);
        let d = nemytskii_drift(&cubic, None, 0.0, &[1.0; 4], &[0.0; 4], &grid).unwrap();
        assert!(d.iter().all(|x| *x == -0.5));
        assert!(nemytskii_drift(&cubic, None, 0.0, &[1.0; 3], &[0.0; 4], &grid).is_err());
    }

    #[test]
    fn lyapunov_values() {
        let grid = GridSpec::new(8, 512, 1.0).unwrap();
        let m = grid.n_quad();
        let lyap = LyapunovSpec {
            c_v: 3.0,
            m1: 2.0,
            m2: 1.0,
            kappa1: 2.0,
            kappa2: 0.0,
        };
        assert_eq!(eval_v(&vec![0.0; m], &vec![0.0; m], &lyap, &grid), 3.0);
        // u ≡ 1: ‖1‖⁴_{L⁸} = (∫1)^{1/2}; the interior-node rule integrates
        // a constant to M/(M+1)
        let val = eval_v(&vec![1.0; m], &vec![0.0; m], &lyap, &grid);
        let discrete = 3.0 * (1.0 + (m as f64 / (m + 1) as f64).sqrt());
        assert!((val - discrete).abs() < 1e-12);
        assert!((val - 6.0).abs() < 6.0 / m as f64);
    }

    #[test]
    fn lyapunov_homogeneity() {
        let grid = GridSpec::new(4, 16, 1.0).unwrap();
        let lyap = LyapunovSpec {
            c_v: 1.0,
            m1: 1.0,
            m2: 1.0,
            kappa1: 2.0,
            kappa2: 0.0,
        };
        let v: Vec<f64> = (0..16).map(|j| (j as f64 * 0.7).sin()).collect();
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let z = vec![0.0; 16];
        let base = eval_v(&z, &v, &lyap, &grid) - 1.0;
        let doubled = eval_v(&z, &v2, &lyap, &grid) - 1.0;
        assert!((doubled - 4.0 * base).abs() < 1e-12 * doubled);
    }

    #[test]
    fn derived_exponents() {
        let lyap = LyapunovSpec::from_growth(1.0, ReactionSpec::cubic_rough(1.0, 1.0).growth()).unwrap();
        assert_eq!(lyap.p_bar(), 24.0);
        assert_eq!(lyap.q_bar(), 24.0);
        let lyap = LyapunovSpec::from_growth(1.0, ReactionSpec::linear_slow().growth()).unwrap();
        assert_eq!(lyap.p_bar(), 0.0);
        assert_eq!(lyap.q_bar(), 4.0);
        assert!(lyap.q_bar() >= 4.0 * lyap.m2);
    }

    #[test]
    fn truncation_gap() {
        let lin = ReactionSpec::linear_slow();
        let lyap = LyapunovSpec::from_growth(1.0, lin.growth()).unwrap();
        let samples: Vec<SamplePoint> = (0..=20)
            .map(|i| SamplePoint {
                t: 0.0,
                xi: 0.5,
                sigma: 0.3,
                lambda: -1.0 + 0.1 * i as f64,
            })
            .collect();
        let gap = truncation_gap_bound(&lin, &lyap, 0.1, &samples).unwrap();
        assert!(gap.max_gap <= 0.1);
        assert!(gap.max_ratio <= 1.0);
        let tiny = truncation_gap_bound(&lin, &lyap, 1e-12, &samples).unwrap();
        assert!(tiny.max_gap < 1e-11);
        // bounded b: gap ≤ θ B²
        let cubic = ReactionSpec::cubic_rough(1.0, 1.0);
        let lyap = LyapunovSpec::from_growth(10.0, cubic.growth()).unwrap();
        let pts: Vec<SamplePoint> = (0..100)
            .map(|i| SamplePoint {
                t: 0.0,
                xi: 0.5,
                sigma: -2.0 + 0.04 * i as f64,
                lambda: 1.0 - 0.02 * i as f64,
            })
            .collect();
        let big_b = pts
            .iter()
            .map(|p| eval_b(&cubic, 0.0, 0.5, p.sigma, p.lambda).unwrap().abs())
            .fold(0.0, f64::max);
        let g = truncation_gap_bound(&cubic, &lyap, 0.05, &pts).unwrap();
        assert!(g.max_gap <= 0.05 * big_b * big_b);
        assert!(g.max_ratio <= 1.0);
    }

    #[test]
    fn dissipativity_gate() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((validate_dissipativity(pi2, 1.0).unwrap() - 8.869_604_401).abs() < 1e-8);
        let e = validate_dissipativity(1.0, 1.0).unwrap_err();
        assert!(e.to_string().contains("dissipativity"));
        assert!(validate_dissipativity(1.0, 2.0).is_err());
    }

    #[test]
    fn growth_checks() {
        let bx = SampleBox::symmetric(10.0, 21);
        let r = validate_growth(&cubic_plus_lambda(), &bx).unwrap();
        assert!(r.bound.passed && r.bound.worst_ratio <= 2.0);
        let r = validate_growth(&ReactionSpec::linear_slow(), &bx).unwrap();
        assert!(r.passed());
        for (cu, cv) in [(0.0, 0.0), (1.0, 0.5), (-2.0, 3.0)] {
            let r = validate_growth(&ReactionSpec::cubic_rough(cu, cv), &bx).unwrap();
            assert!(r.passed(), "cubic ({cu}, {cv}) {r:?}");
        }
        let anti = ReactionSpec::polynomial(
            0.0,
            vec![Monomial {
                coef: 1.0,
                sigma_pow: 3,
                lambda_pow: 0,
            }],
            GrowthConstants {
                m1: 3.0,
                m2: 1.0,
                kappa1: 2.0,
                kappa2: 4.0,
                c1: 1.0,
                c2: 1.0,
                a1: 0.0,
                a2: 1.0,
            },
        )
        .unwrap();
        let r = validate_growth(&anti, &bx).unwrap();
        assert!(r.bound.passed);
        assert!(!r.one_sided.passed);
        assert!(r.one_sided.worst_ratio > 10.0);
    }

    #[test]
    fn growth_exponent_gate() {
        let mut g = *ReactionSpec::linear_slow().growth();
        g.kappa1 = 3.0;
        let e = ReactionSpec::linear_slow().with_growth(g).unwrap_err();
        assert!(e.to_string().contains("κ₁ ≤ 2m₂"));
        let e = ReactionSpec::polynomial(
            0.0,
            vec![Monomial {
                coef: 1.0,
                sigma_pow: 2,
                lambda_pow: 2,
            }],
            *ReactionSpec::linear_slow().growth(),
        )
        .unwrap_err();
        assert!(e.to_string().contains("growth"));
    }

    #[test]
    fn lipschitz_declaration() {
        let g = ReactionSpec::lipschitz_fast(1.0, 0.5, 0.5);
        assert_eq!(g.lipschitz(), Some(1.0));
        assert!(g.clone().with_lipschitz(0.9).is_err());
        assert_eq!(g.with_lipschitz(2.0).unwrap().lipschitz(), Some(2.0));
    }

    proptest! {
        #[test]
        fn truncation_identities(b in -1e6f64..1e6, theta in 1e-6f64..1.0) {
            let bt = truncate(b, theta);
            prop_assert!(bt.abs() <= 1.0 / theta * (1.0 + 1e-12));
            prop_assert!(bt.abs() <= b.abs());
            prop_assert!(b == 0.0 || bt.signum() == b.signum());
            let lhs = (b - bt).abs() * (1.0 + theta * b.abs());
            let rhs = theta * b * b;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
        }

        #[test]
        fn lyapunov_sign_symmetry(seed in 0u64..1000) {
            let grid = GridSpec::new(4, 8, 1.0).unwrap();
            let lyap = LyapunovSpec::from_growth(2.0, ReactionSpec::cubic_rough(1.0, 1.0).growth()).unwrap();
            let u: Vec<f64> = (0..8).map(|j| ((seed + j) as f64 * 0.37).sin()).collect();
            let v: Vec<f64> = (0..8).map(|j| ((seed * 3 + j) as f64 * 0.91).cos()).collect();
            let nu: Vec<f64> = u.iter().map(|x| -x).collect();
            let nv: Vec<f64> = v.iter().map(|x| -x).collect();
            let base = eval_v(&u, &v, &lyap, &grid);
            prop_assert_eq!(base, eval_v(&nu, &v, &lyap, &grid));
            prop_assert_eq!(base, eval_v(&u, &nv, &lyap, &grid));
        }

        #[test]
        fn dissipativity_arithmetic(a in -10.0f64..10.0, l in -10.0f64..10.0) {
            match validate_dissipativity(a, l) {
                Ok(w) => { prop_assert!(w > 0.0); prop_assert_eq!(w, a - l); }
                Err(_) => prop_assert!(a - l <= 0.0),
            }
        }

        #[test]
        fn linear_drift_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, s in 0u64..100) {
            let grid = GridSpec::new(2, 6, 1.0).unwrap();
            let lin = ReactionSpec::linear_slow();
            let v1: Vec<f64> = (0..6).map(|j| ((s + j) as f64).sin()).collect();
            let v2: Vec<f64> = (0..6).map(|j| ((s + 2 * j) as f64).cos()).collect();
            let comb: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| a * x + b * y).collect();
            let u = vec![0.0; 6];
            let d = nemytskii_drift(&lin, None, 0.0, &u, &comb, &grid).unwrap();
            let d1 = nemytskii_drift(&lin, None, 0.0, &u, &v1, &grid).unwrap();
            let d2 = nemytskii_drift(&lin, None, 0.0, &u, &v2, &grid).unwrap();
            for j in 0..6 {
                prop_assert!((d[j] - (a * d1[j] + b * d2[j])).abs() <= 1e-12);
            }
        }
    }
}
