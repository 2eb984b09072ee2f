//! The averaged drift `F̄₁(t, x) = ∫ F₁(t, x, y) μ^x(dy)`, the averaged slow
//! equation it drives, and `V̄(x) = ∫ V(x, y) μ^x(dy)`.
//!
//! `F̄₁` is estimated by running the frozen fast equation at `x` (a nested,
//! heterogeneous-multiscale estimate) and cached on quantized slow states.
//! For the linear benchmark the stationary law is Gaussian with mean
//! `a_c x_k/(α_{2,k} + b_c)` and the drift is available in closed form.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fast::{estimate_invariant_average, FrozenFastConfig};
use crate::noise::{make_plan, ou_apply, ou_noise, RngStream};
use crate::reaction::{eval_v, fill_slow_drift, truncate, ReactionKind, ReactionSpec};
use crate::slowfast::ModelSpec;
use crate::spectral::{ModalField, Transform};
use crate::stats::{CompensatedSum, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AveragedDriftParams {
    pub h_fast: f64,
    /// Defaults to `10/ω`.
    pub t_burn: Option<f64>,
    /// Defaults to `200/ω`.
    pub t_avg: Option<f64>,
    pub n_replicas: usize,
    pub cache_quantum: f64,
    /// Truncation level for `b` (0 = raw).
    pub theta: f64,
    pub master_seed: u64,
}

impl Default for AveragedDriftParams {
    fn default() -> Self {
        Self {
            h_fast: 0.01,
            t_burn: None,
            t_avg: None,
            n_replicas: 16,
            cache_quantum: 1e-3,
            theta: 0.0,
            master_seed: 0,
        }
    }
}

impl AveragedDriftParams {
    pub fn frozen_config(&self, model: &ModelSpec, x: ModalField) -> Result<FrozenFastConfig> {
        let mut cfg = FrozenFastConfig::new(
            x,
            model.op2.clone(),
            model.reaction_fast.clone(),
            model.grid,
            self.h_fast,
            self.n_replicas,
            self.master_seed,
        )?;
        if let Some(tb) = self.t_burn {
            cfg.t_burn = tb;
        }
        if let Some(ta) = self.t_avg {
            cfg.t_avg = ta;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedState {
    pub u: ModalField,
    pub t: f64,
}

fn check_bound(model: &ModelSpec, x: &ModalField, t: f64) -> Result<()> {
    let n = x.norm();
    if !(n <= model.explosion_bound) {
        return Err(Error::StateExplosion {
            t,
            u_norm: n,
            v_norm: f64::NAN,
        });
    }
    Ok(())
}

/// Nested Monte Carlo estimate of `F̄₁(t, x)` (or `F̄₁^θ` when
/// `params.theta > 0`) with per-mode standard errors.
pub fn estimate_fbar(
    t: f64,
    x: &ModalField,
    params: &AveragedDriftParams,
    model: &ModelSpec,
) -> Result<(ModalField, ModalField)> {
    x.check_len(model.grid.n_modes(), "slow state")?;
    check_bound(model, x, t)?;
    let cfg = params.frozen_config(model, x.clone())?;
    let transform = Transform::new(model.grid);
    let reaction = &model.reaction_slow;
    let theta = params.theta;
    let est = estimate_invariant_average(&cfg, |s| {
        let mut drift_phys = vec![0.0; s.v_phys.len()];
        fill_slow_drift(reaction, theta, s.x_phys, s.v_phys, &mut drift_phys);
        let mut out = vec![0.0; s.v.len()];
        transform.analyze_into(&drift_phys, &mut out);
        out
    })?;
    Ok((
        ModalField::from_coeffs(est.mean)?,
        ModalField::from_coeffs(est.std_error)?,
    ))
}

/// `(a_c x_k / (α_{2,k} + b_c))_k` for the linear benchmark.
pub fn analytic_fbar_linear(model: &ModelSpec, _t: f64, x: &ModalField) -> Result<ModalField> {
    let (a_c, b_c) = match (model.reaction_slow.kind(), model.reaction_fast.kind()) {
        (ReactionKind::LinearSlow, ReactionKind::LinearFast { a_c, b_c }) => (*a_c, *b_c),
        _ => {
            return Err(Error::invalid(
                "closed-form averaged drift needs the linear benchmark reactions",
            ))
        }
    };
    x.check_len(model.grid.n_modes(), "slow state")?;
    ModalField::from_coeffs(
        x.coeffs()
            .iter()
            .zip(model.op2.alphas())
            .map(|(xk, a)| a_c * xk / (a + b_c))
            .collect(),
    )
}

/// `F̄₁` with results cached on the lattice `cache_quantum · ℤ^N`. Each
/// entry is computed at its lattice point, so a cached value does not depend
/// on which nearby state populated it.
#[derive(Debug)]
pub struct FbarEstimator {
    model: ModelSpec,
    params: AveragedDriftParams,
    cache: Mutex<HashMap<Vec<i64>, (ModalField, ModalField)>>,
}

impl FbarEstimator {
    pub fn new(model: ModelSpec, params: AveragedDriftParams) -> Result<Self> {
        if !(params.cache_quantum > 0.0) {
            return Err(Error::invalid("cache quantum must be positive"));
        }
        params.frozen_config(&model, ModalField::zeros(model.grid.n_modes()))?;
        Ok(Self {
            model,
            params,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &AveragedDriftParams {
        &self.params
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    pub fn estimate(&self, t: f64, x: &ModalField) -> Result<(ModalField, ModalField)> {
        check_bound(&self.model, x, t)?;
        let q = self.params.cache_quantum;
        let key: Vec<i64> = x.coeffs().iter().map(|c| (c / q).round() as i64).collect();
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let xq = ModalField::from_coeffs(key.iter().map(|k| *k as f64 * q).collect())?;
        let val = estimate_fbar(t, &xq, &self.params, &self.model)?;
        // identical keys produce identical values, so a racing insert is harmless
        self.cache.lock().unwrap().insert(key, val.clone());
        Ok(val)
    }
}

/// Where the averaged drift comes from.
#[derive(Debug, Clone, Copy)]
pub enum DriftSource<'a> {
    /// Closed form for the linear benchmark.
    AnalyticLinear,
    /// `b` does not depend on the fast variable, so `F̄₁(x) = F₁(x, ·)`.
    FastIndependent,
    Gaussian(&'a GaussianDrift),
    Estimated(&'a FbarEstimator),
}

impl<'a> DriftSource<'a> {
    /// Analytic oracle when the model admits one, the exact shortcut when `b`
    /// ignores the fast variable, otherwise `None` (an estimator is needed).
    pub fn exact_for(model: &ModelSpec) -> Option<DriftSource<'static>> {
        let linear = matches!(model.reaction_slow.kind(), ReactionKind::LinearSlow)
            && matches!(model.reaction_fast.kind(), ReactionKind::LinearFast { .. });
        if linear && model.theta == 0.0 {
            Some(DriftSource::AnalyticLinear)
        } else if !model.reaction_slow.depends_on_fast() {
            Some(DriftSource::FastIndependent)
        } else {
            None
        }
    }

    /// `(F̄₁(t, x), standard error)` in modal coordinates.
    pub fn drift(&self, model: &ModelSpec, t: f64, x: &ModalField) -> Result<(ModalField, ModalField)> {
        let n = model.grid.n_modes();
        match self {
            DriftSource::AnalyticLinear => Ok((analytic_fbar_linear(model, t, x)?, ModalField::zeros(n))),
            DriftSource::FastIndependent => {
                let tr = Transform::new(model.grid);
                let xp = tr.synthesize(x)?;
                let zeros = vec![0.0; xp.len()];
                let mut d = vec![0.0; xp.len()];
                fill_slow_drift(&model.reaction_slow, model.theta, &xp, &zeros, &mut d);
                Ok((tr.analyze(&d)?, ModalField::zeros(n)))
            }
            DriftSource::Gaussian(g) => Ok((g.drift(x)?, ModalField::zeros(n))),
            DriftSource::Estimated(est) => est.estimate(t, x),
        }
    }
}

/// Number of points of the Gaussian quadrature rule in [`GaussianDrift`].
pub const GAUSS_POINTS: usize = 201;
const GAUSS_RANGE: f64 = 8.0;

/// `F̄₁^θ` for any slow reaction when the fast reaction is linear. Under the
/// Gaussian invariant law the value `v(ξ)` at each node is normal with mean
/// `Σ_k a_c x_k e_k(ξ)/(α_k + b_c)` and variance `Σ_k λ_k² e_k(ξ)²/(2(α_k + b_c))`,
/// and `b_θ(x(ξ), v(ξ))` depends on `v` only through `v(ξ)`. Each node is
/// integrated with a trapezoid rule on `±8` standard deviations.
#[derive(Debug, Clone)]
pub struct GaussianDrift {
    reaction: ReactionSpec,
    theta: f64,
    transform: Transform,
    gain: Vec<f64>,
    node_sd: Vec<f64>,
    z: Vec<f64>,
    w: Vec<f64>,
}

impl GaussianDrift {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let (a_c, b_c) = match model.reaction_fast.kind() {
            ReactionKind::LinearFast { a_c, b_c } => (*a_c, *b_c),
            _ => return Err(Error::invalid("Gaussian invariant law needs a linear fast reaction")),
        };
        let shifted = model.op2.shifted(b_c)?;
        let n = model.grid.n_modes();
        let transform = Transform::new(model.grid);
        let var = shifted.stationary_variances();
        let mut node_var = vec![0.0; model.grid.n_quad()];
        for (k, vk) in var.iter().enumerate() {
            let ek = transform.synthesize(&ModalField::unit(n, k + 1))?;
            for (nv, e) in node_var.iter_mut().zip(&ek) {
                *nv += vk * e * e;
            }
        }
        let dz = 2.0 * GAUSS_RANGE / (GAUSS_POINTS - 1) as f64;
        let z: Vec<f64> = (0..GAUSS_POINTS).map(|i| -GAUSS_RANGE + i as f64 * dz).collect();
        let raw: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let end = if i == 0 || i + 1 == GAUSS_POINTS { 0.5 } else { 1.0 };
                end * (-0.5 * z * z).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        Ok(Self {
            reaction: model.reaction_slow.clone(),
            theta: model.theta,
            transform,
            gain: shifted.alphas().iter().map(|a| a_c / a).collect(),
            node_sd: node_var.iter().map(|v| v.sqrt()).collect(),
            z,
            w: raw.iter().map(|r| r / total).collect(),
        })
    }

    pub fn drift(&self, x: &ModalField) -> Result<ModalField> {
        let xp = self.transform.synthesize(x)?;
        let mean = ModalField::from_coeffs(x.coeffs().iter().zip(&self.gain).map(|(a, g)| a * g).collect())?;
        let mp = self.transform.synthesize(&mean)?;
        let vals: Vec<f64> = xp
            .iter()
            .zip(&mp)
            .zip(&self.node_sd)
            .map(|((u, m), sd)| {
                if *sd == 0.0 {
                    return truncate(self.reaction.b_unchecked(*u, *m), self.theta);
                }
                let mut acc = CompensatedSum::new();
                for (z, w) in self.z.iter().zip(&self.w) {
                    acc.add(w * truncate(self.reaction.b_unchecked(*u, m + sd * z), self.theta));
                }
                acc.value()
            })
            .collect();
        self.transform.analyze(&vals)
    }
}

/// An owned averaged-drift source chosen for a model: closed form when
/// available, Gaussian quadrature for linear fast reactions, otherwise the
/// nested estimator.
#[derive(Debug)]
pub enum DriftProvider {
    Exact(DriftSource<'static>),
    Gaussian(GaussianDrift),
    Estimated(FbarEstimator),
}

impl DriftProvider {
    pub fn for_model(model: &ModelSpec, params: &AveragedDriftParams) -> Result<Self> {
        if let Some(src) = DriftSource::exact_for(model) {
            return Ok(DriftProvider::Exact(src));
        }
        if matches!(model.reaction_fast.kind(), ReactionKind::LinearFast { .. }) {
            return Ok(DriftProvider::Gaussian(GaussianDrift::new(model)?));
        }
        let p = AveragedDriftParams {
            theta: model.theta,
            ..*params
        };
        Ok(DriftProvider::Estimated(FbarEstimator::new(model.clone(), p)?))
    }

    pub fn source(&self) -> DriftSource<'_> {
        match self {
            DriftProvider::Exact(s) => *s,
            DriftProvider::Gaussian(g) => DriftSource::Gaussian(g),
            DriftProvider::Estimated(e) => DriftSource::Estimated(e),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriftProvider::Exact(DriftSource::AnalyticLinear) => "analytic",
            DriftProvider::Exact(_) => "fast_independent",
            DriftProvider::Gaussian(_) => "gaussian_quadrature",
            DriftProvider::Estimated(_) => "nested_estimator",
        }
    }
}

/// One exponential-Euler step of the averaged equation
/// `dū = [A₁ū + F̄₁(ū)]dt + Q₁dW`.
pub fn step_averaged(
    state: &AveragedState,
    model: &ModelSpec,
    source: DriftSource<'_>,
    stream: &mut RngStream,
    h: f64,
) -> Result<(AveragedState, ModalField)> {
    let plan = make_plan(&model.op1, h, 1.0)?;
    let (drift, se) = source.drift(model, state.t, &state.u)?;
    let mut noise = vec![0.0; plan.n_modes()];
    ou_noise(&plan, stream, &mut noise);
    let mut u = state.u.coeffs().to_vec();
    ou_apply(&plan, &mut u, drift.coeffs(), &noise);
    let next = AveragedState {
        u: ModalField::from_coeffs(u).map_err(|_| Error::StateExplosion {
            t: state.t + h,
            u_norm: f64::INFINITY,
            v_norm: f64::NAN,
        })?,
        t: state.t + h,
    };
    check_bound(model, &next.u, next.t)?;
    Ok((next, se))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedTrajectory {
    pub states: Vec<AveragedState>,
    /// `‖std_error‖` of the drift used at each step.
    pub drift_std_errors: Vec<f64>,
}

impl AveragedTrajectory {
    pub fn terminal(&self) -> &AveragedState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

pub fn simulate_averaged(
    model: &ModelSpec,
    source: DriftSource<'_>,
    u0: &ModalField,
    horizon: f64,
    h: f64,
    stream: &mut RngStream,
) -> Result<AveragedTrajectory> {
    if !(horizon >= 0.0) || !(h > 0.0) {
        return Err(Error::invalid(format!("need T ≥ 0 and h > 0, got {horizon}, {h}")));
    }
    u0.check_len(model.grid.n_modes(), "initial slow state")?;
    let n_steps = (horizon / h).round() as usize;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut ses = Vec::with_capacity(n_steps);
    states.push(AveragedState { u: u0.clone(), t: 0.0 });
    for i in 0..n_steps {
        let (mut next, se) = step_averaged(&states[i], model, source, stream, h)?;
        next.t = (i + 1) as f64 * h;
        states.push(next);
        ses.push(se.norm());
    }
    Ok(AveragedTrajectory {
        states,
        drift_std_errors: ses,
    })
}

/// Mean of `ū(T)` for the linear benchmark, solved mode by mode.
pub fn linear_averaged_mean(model: &ModelSpec, u0: &ModalField, horizon: f64) -> Result<ModalField> {
    let rates = linear_averaged_rates(model)?;
    ModalField::from_coeffs(
        u0.coeffs()
            .iter()
            .zip(&rates)
            .map(|(u, r)| u * (r * horizon).exp())
            .collect(),
    )
}

/// Variance of each mode of `ū(T)` for the linear benchmark.
pub fn linear_averaged_variance(model: &ModelSpec, horizon: f64) -> Result<Vec<f64>> {
    let rates = linear_averaged_rates(model)?;
    Ok(rates
        .iter()
        .zip(model.op1.lambdas())
        .map(|(r, l)| {
            if r.abs() < 1e-14 {
                l * l * horizon
            } else {
                l * l * (2.0 * r * horizon).exp_m1() / (2.0 * r)
            }
        })
        .collect())
}

/// `−α_{1,k} + a_c/(α_{2,k} + b_c)`.
pub fn linear_averaged_rates(model: &ModelSpec) -> Result<Vec<f64>> {
    let unit: Vec<f64> = vec![1.0; model.grid.n_modes()];
    let gain = analytic_fbar_linear(model, 0.0, &ModalField::from_coeffs(unit)?)?;
    Ok(model
        .op1
        .alphas()
        .iter()
        .zip(gain.coeffs())
        .map(|(a, g)| -a + g)
        .collect())
}

/// Time average of `V(x, v)` under the frozen fast dynamics at `x`.
pub fn estimate_vbar(x: &ModalField, model: &ModelSpec, params: &AveragedDriftParams) -> Result<Estimate> {
    let cfg = params.frozen_config(model, x.clone())?;
    let lyap = model.lyapunov;
    let grid = model.grid;
    let est = estimate_invariant_average(&cfg, |s| vec![eval_v(s.x_phys, s.v_phys, &lyap, &grid)])?;
    Ok(Estimate {
        mean: est.mean[0],
        std_error: est.std_error[0],
        n: est.n_effective as usize,
    })
}

/// `V̄(x)` by direct sampling of the Gaussian invariant law of a linear fast
/// reaction: mean `a_c x_k/(α_k + b_c)`, variance `λ_k²/(2(α_k + b_c))`.
pub fn sample_vbar_gaussian(
    x: &ModalField,
    model: &ModelSpec,
    n_samples: usize,
    stream: &mut RngStream,
) -> Result<Estimate> {
    let (a_c, b_c) = match model.reaction_fast.kind() {
        ReactionKind::LinearFast { a_c, b_c } => (*a_c, *b_c),
        _ => return Err(Error::invalid("Gaussian invariant law needs a linear fast reaction")),
    };
    let tr = Transform::new(model.grid);
    let xp = tr.synthesize(x)?;
    let shifted = model.op2.shifted(b_c)?;
    let mean: Vec<f64> = x
        .coeffs()
        .iter()
        .zip(shifted.alphas())
        .map(|(xk, a)| a_c * xk / a)
        .collect();
    let std: Vec<f64> = shifted.stationary_variances().iter().map(|v| v.sqrt()).collect();
    let mut y = vec![0.0; mean.len()];
    let mut yp = vec![0.0; xp.len()];
    let samples: Vec<f64> = (0..n_samples)
        .map(|_| {
            for k in 0..y.len() {
                y[k] = mean[k] + std[k] * stream.next_gaussian();
            }
            tr.synthesize_into(&y, &mut yp);
            eval_v(&xp, &yp, &model.lyapunov, &model.grid)
        })
        .collect();
    Ok(Estimate::from_samples(&samples))
}
