//! Sine-eigenbasis representation of fields on `(0, ℓ)` with homogeneous
//! Dirichlet boundary conditions.
//!
//! Fields are stored as modal coefficients against the orthonormal basis
//! `e_k(ξ) = √(2/ℓ) sin(kπξ/ℓ)`. Every operator in this crate is diagonal in
//! that basis, so semigroups, fractional powers and noise covariances act
//! mode by mode. Pointwise (Nemytskii) nonlinearities go through
//! [`synthesize`] / [`analyze`] on the interior nodes `ξ_j = jℓ/(M+1)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Hypothesis, Result};

/// Coefficients of a field in the sine eigenbasis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModalField {
    coeffs: Vec<f64>,
}

impl ModalField {
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            coeffs: vec![0.0; n_modes],
        }
    }

    pub fn from_coeffs(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::invalid("a modal field needs at least one mode"));
        }
        if let Some(k) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("coefficient {} is not finite", k + 1)));
        }
        Ok(Self { coeffs })
    }

    /// Unit vector `e_k` (1-based mode index).
    pub fn unit(n_modes: usize, k: usize) -> Self {
        assert!(k >= 1 && k <= n_modes, "mode index {k} out of 1..={n_modes}");
        let mut f = Self::zeros(n_modes);
        f.coeffs[k - 1] = 1.0;
        f
    }

    /// Truncates or zero-pads `coeffs` to exactly `n_modes` entries.
    pub fn padded(coeffs: &[f64], n_modes: usize) -> Result<Self> {
        let mut c = vec![0.0; n_modes];
        for (dst, src) in c.iter_mut().zip(coeffs) {
            *dst = *src;
        }
        Self::from_coeffs(c)
    }

    pub fn n_modes(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    /// Coefficient of mode `k` (1-based).
    pub fn mode(&self, k: usize) -> f64 {
        self.coeffs[k - 1]
    }

    /// L² norm, equal to the Euclidean norm of the coefficients.
    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn norm_squared(&self) -> f64 {
        self.coeffs.iter().map(|c| c * c).sum()
    }

    pub fn dot(&self, other: &ModalField) -> f64 {
        self.coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scaled(&self, factor: f64) -> ModalField {
        ModalField {
            coeffs: self.coeffs.iter().map(|c| c * factor).collect(),
        }
    }

    pub fn sub(&self, other: &ModalField) -> ModalField {
        ModalField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn add(&self, other: &ModalField) -> ModalField {
        ModalField {
            coeffs: self
                .coeffs
                .iter()
                .zip(&other.coeffs)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.is_finite())
    }

    pub(crate) fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if self.coeffs.len() != n {
            return Err(Error::invalid(format!(
                "{what}: expected {n} modes, got {}",
                self.coeffs.len()
            )));
        }
        Ok(())
    }
}

/// Diagonal generator `A e_k = −α_k e_k` together with the noise covariance
/// `Q e_k = λ_k e_k` acting on the same eigenvectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralOperator {
    alphas: Vec<f64>,
    lambdas: Vec<f64>,
    gamma_reg: f64,
}

impl SpectralOperator {
    pub fn new(alphas: Vec<f64>, lambdas: Vec<f64>, gamma_reg: f64) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("operator needs at least one mode"));
        }
        if alphas.len() != lambdas.len() {
            return Err(Error::invalid(format!(
                "{} eigenvalues but {} noise amplitudes",
                alphas.len(),
                lambdas.len()
            )));
        }
        if !(alphas[0] > 0.0) || alphas.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::violated(
                Hypothesis::Spectrum,
                format!("α = {:?}", &alphas[..alphas.len().min(4)]),
            ));
        }
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid("noise amplitudes must be finite and nonnegative"));
        }
        if !(gamma_reg > 0.0) {
            return Err(Error::invalid(format!(
                "regularity exponent γ must be positive, got {gamma_reg}"
            )));
        }
        Ok(Self {
            alphas,
            lambdas,
            gamma_reg,
        })
    }

    /// Dirichlet Laplacian `ν∂²_ξ` with power-law noise `λ_k = λ₀ k^{−s}`.
    ///
    /// The noise regularity exponent test is applied with `α_k ∝ k²`.
    pub fn dirichlet_power_law(
        n_modes: usize,
        diffusivity: f64,
        length: f64,
        noise_amplitude: f64,
        noise_decay: f64,
        gamma_reg: f64,
    ) -> Result<Self> {
        if !(noise_amplitude >= 0.0) || !(noise_decay >= 0.0) {
            return Err(Error::invalid(
                "noise amplitude and decay exponent must be nonnegative",
            ));
        }
        if noise_amplitude > 0.0 && !check_noise_regularity(2.0, noise_decay, gamma_reg) {
            return Err(Error::violated(
                Hypothesis::NoiseRegularity,
                format!(
                    "α_k ∝ k², λ_k ∝ k^(−{noise_decay}), γ = {gamma_reg}: \
                     series exponent {} is not < −1",
                    2.0 * (2.0 * gamma_reg - 1.0) - 2.0 * noise_decay
                ),
            ));
        }
        let alphas = dirichlet_eigenpairs(n_modes, diffusivity, length)?;
        let lambdas = (1..=n_modes)
            .map(|k| noise_amplitude * (k as f64).powf(-noise_decay))
            .collect();
        Self::new(alphas, lambdas, gamma_reg)
    }

    pub fn n_modes(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn gamma_reg(&self) -> f64 {
        self.gamma_reg
    }

    /// `γ* = γ ∧ 1/2`, the Hölder threshold of the stochastic convolution.
    pub fn gamma_star(&self) -> f64 {
        self.gamma_reg.min(0.5)
    }

    /// Same operator with every eigenvalue shifted by `shift` (absorbs a
    /// linear damping term `−shift·σ` of a reaction into the generator).
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        Self::new(
            self.alphas.iter().map(|a| a + shift).collect(),
            self.lambdas.clone(),
            self.gamma_reg,
        )
    }

    /// Same eigenvalues without noise.
    pub fn noiseless(&self) -> Self {
        Self {
            alphas: self.alphas.clone(),
            lambdas: vec![0.0; self.lambdas.len()],
            gamma_reg: self.gamma_reg,
        }
    }

    /// Stationary per-mode variance `λ_k²/(2α_k)` of the stochastic convolution.
    pub fn stationary_variances(&self) -> Vec<f64> {
        self.alphas
            .iter()
            .zip(&self.lambdas)
            .map(|(a, l)| l * l / (2.0 * a))
            .collect()
    }
}

/// Discretization of the interval: `N` modes evaluated on `M` interior nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    n_modes: usize,
    n_quad: usize,
    length: f64,
}

impl GridSpec {
    pub fn new(n_modes: usize, n_quad: usize, length: f64) -> Result<Self> {
        if n_modes == 0 {
            return Err(Error::invalid("grid needs at least one mode"));
        }
        if n_quad < 2 * n_modes {
            return Err(Error::invalid(format!(
                "n_quad = {n_quad} must be at least 2·n_modes = {}",
                2 * n_modes
            )));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::invalid(format!("domain length must be positive, got {length}")));
        }
        Ok(Self {
            n_modes,
            n_quad,
            length,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn n_quad(&self) -> usize {
        self.n_quad
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Interior node `ξ_j = jℓ/(M+1)` for `j = 1..=M`.
    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.length / (self.n_quad + 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (1..=self.n_quad).map(|j| self.node(j)).collect()
    }

    /// Quadrature weight `ℓ/(M+1)`: the trapezoid rule with vanishing
    /// boundary values.
    pub fn weight(&self) -> f64 {
        self.length / (self.n_quad + 1) as f64
    }

    /// `(∫ |f|^p dξ)` by collocation quadrature.
    pub fn lp_integral(&self, values: &[f64], p: f64) -> f64 {
        let w = self.weight();
        let s: f64 = if p == 2.0 {
            values.iter().map(|v| v * v).sum()
        } else {
            values.iter().map(|v| v.abs().powf(p)).sum()
        };
        w * s
    }

    pub fn lp_norm(&self, values: &[f64], p: f64) -> f64 {
        self.lp_integral(values, p).powf(1.0 / p)
    }
}

/// Precomputed basis matrix for repeated transforms on one grid.
#[derive(Debug, Clone)]
pub struct Transform {
    grid: GridSpec,
    // basis[j * N + k] = √(2/ℓ) sin((k+1)π ξ_j / ℓ)
    basis: Vec<f64>,
}

impl Transform {
    pub fn new(grid: GridSpec) -> Self {
        let n = grid.n_modes;
        let m = grid.n_quad;
        let scale = (2.0 / grid.length).sqrt();
        let mut basis = vec![0.0; n * m];
        for j in 1..=m {
            for k in 1..=n {
                // exact integer reduction keeps the argument small
                let arg = ((j * k) % (2 * (m + 1))) as f64 * PI / (m + 1) as f64;
                basis[(j - 1) * n + (k - 1)] = scale * arg.sin();
            }
        }
        Self { grid, basis }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn synthesize_into(&self, f: &[f64], out: &mut [f64]) {
        let n = self.grid.n_modes;
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.basis[j * n..(j + 1) * n];
            *o = row.iter().zip(f).map(|(b, c)| b * c).sum();
        }
    }

    pub fn analyze_into(&self, values: &[f64], out: &mut [f64]) {
        let n = self.grid.n_modes;
        let w = self.grid.weight();
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, v) in values.iter().enumerate() {
            let row = &self.basis[j * n..(j + 1) * n];
            for (o, b) in out.iter_mut().zip(row) {
                *o += b * v;
            }
        }
        out.iter_mut().for_each(|o| *o *= w);
    }

    pub fn synthesize(&self, f: &ModalField) -> Result<Vec<f64>> {
        f.check_len(self.grid.n_modes, "synthesize")?;
        let mut out = vec![0.0; self.grid.n_quad];
        self.synthesize_into(f.coeffs(), &mut out);
        Ok(out)
    }

    pub fn analyze(&self, values: &[f64]) -> Result<ModalField> {
        if values.len() != self.grid.n_quad {
            return Err(Error::invalid(format!(
                "analyze: expected {} nodal values, got {}",
                self.grid.n_quad,
                values.len()
            )));
        }
        let mut out = vec![0.0; self.grid.n_modes];
        self.analyze_into(values, &mut out);
        ModalField::from_coeffs(out)
    }
}

/// `α_k = ν(kπ/ℓ)²`, `k = 1..=N`.
pub fn dirichlet_eigenpairs(n_modes: usize, diffusivity: f64, length: f64) -> Result<Vec<f64>> {
    if n_modes == 0 {
        return Err(Error::invalid("need at least one mode"));
    }
    if !(diffusivity > 0.0) || !(length > 0.0) {
        return Err(Error::invalid(format!(
            "diffusivity ({diffusivity}) and length ({length}) must be positive"
        )));
    }
    Ok((1..=n_modes)
        .map(|k| {
            let w = k as f64 * PI / length;
            diffusivity * w * w
        })
        .collect())
}

/// Applies `S(t) = e^{tA}` mode by mode.
pub fn semigroup_apply(op: &SpectralOperator, t: f64, f: &ModalField) -> Result<ModalField> {
    if !(t >= 0.0) {
        return Err(Error::invalid(format!("semigroup time must be nonnegative, got {t}")));
    }
    f.check_len(op.n_modes(), "semigroup_apply")?;
    Ok(ModalField {
        coeffs: f
            .coeffs
            .iter()
            .zip(&op.alphas)
            .map(|(c, a)| (-a * t).exp() * c)
            .collect(),
    })
}

pub fn synthesize(f: &ModalField, grid: &GridSpec) -> Result<Vec<f64>> {
    Transform::new(*grid).synthesize(f)
}

pub fn analyze(values: &[f64], grid: &GridSpec) -> Result<ModalField> {
    Transform::new(*grid).analyze(values)
}

/// `‖(−A)^γ f‖ = (Σ α_k^{2γ} f_k²)^{1/2}`.
pub fn fractional_norm(f: &ModalField, op: &SpectralOperator, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("γ must be nonnegative, got {gamma}")));
    }
    f.check_len(op.n_modes(), "fractional_norm")?;
    Ok(f
        .coeffs
        .iter()
        .zip(&op.alphas)
        .map(|(c, a)| a.powf(2.0 * gamma) * c * c)
        .sum::<f64>()
        .sqrt())
}

/// Series test for `Σ λ_k² α_k^{2γ−1} < ∞` with `α_k ∝ k^a`, `λ_k ∝ k^{−s}`:
/// the summand decays like `k^{a(2γ−1) − 2s}`.
pub fn check_noise_regularity(alphas_exponent: f64, lambdas_exponent: f64, gamma: f64) -> bool {
    alphas_exponent * (2.0 * gamma - 1.0) - 2.0 * lambdas_exponent < -1.0
}
