//! The coupled system
//!
//! ```text
//! du = [A₁u + F₁(u, v)] dt + Q₁ dW¹
//! dv = ε⁻¹[A₂v + F₂(u, v)] dt + ε^{−1/2} Q₂ dW²
//! ```
//!
//! integrated with an exponential-Euler macro step for `u` and exact-OU
//! substeps of size at most `ρε` for `v`, plus the Khasminskii auxiliary
//! processes obtained by freezing `u` on blocks of length `δ`.

use serde::{Deserialize, Serialize};

use crate::averaging::DriftSource;
use crate::error::{Error, Result};
use crate::fast::FastKernel;
use crate::noise::{derive_stream, make_plan, ou_apply, ou_noise, OUStepPlan, RngStream, RoleTag};
use crate::reaction::{
    eval_v, fill_slow_drift, validate_dissipativity, LyapunovSpec, ReactionKind, ReactionSpec,
};
use crate::spectral::{GridSpec, ModalField, SpectralOperator, Transform};
use crate::stats::{CompensatedSum, Estimate};

pub const DEFAULT_EXPLOSION_BOUND: f64 = 1e6;
pub const DEFAULT_SUBSTEP_RATIO: f64 = 0.2;
/// Truncation level used for non-benchmark slow reactions unless overridden.
pub const DEFAULT_THETA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub op1: SpectralOperator,
    pub op2: SpectralOperator,
    pub reaction_slow: ReactionSpec,
    pub reaction_fast: ReactionSpec,
    pub lyapunov: LyapunovSpec,
    pub grid: GridSpec,
    pub epsilon: f64,
    pub horizon: f64,
    pub u0: ModalField,
    pub v0: ModalField,
    /// Truncation level of `b` (0 = raw `b`).
    pub theta: f64,
    pub holder_beta: f64,
    /// Exponent `λ` of the block-length schedule.
    pub lambda_exp: f64,
    pub c_const: f64,
    pub h_macro: f64,
    /// Fast substeps are at most `substep_ratio · ε` long.
    pub substep_ratio: f64,
    /// Guard on `‖u‖ + ‖v‖`.
    pub explosion_bound: f64,
}

impl ModelSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        op1: SpectralOperator,
        op2: SpectralOperator,
        reaction_slow: ReactionSpec,
        reaction_fast: ReactionSpec,
        grid: GridSpec,
        epsilon: f64,
        horizon: f64,
        u0: ModalField,
        v0: ModalField,
    ) -> Result<Self> {
        let lyapunov = LyapunovSpec::from_growth(1.0, reaction_slow.growth())?;
        let theta = if matches!(reaction_slow.kind(), ReactionKind::LinearSlow) {
            0.0
        } else {
            DEFAULT_THETA
        };
        let m = Self {
            op1,
            op2,
            reaction_slow,
            reaction_fast,
            lyapunov,
            grid,
            epsilon,
            horizon,
            u0,
            v0,
            theta,
            holder_beta: 0.2,
            lambda_exp: 1.0,
            c_const: 2.0,
            h_macro: 1e-3,
            substep_ratio: DEFAULT_SUBSTEP_RATIO,
            explosion_bound: DEFAULT_EXPLOSION_BOUND,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn gamma1_star(&self) -> f64 {
        self.op1.gamma_star()
    }

    pub fn gamma2_star(&self) -> f64 {
        self.op2.gamma_star()
    }

    /// `ω = α_{2,1} − L₂`.
    pub fn omega(&self) -> Result<f64> {
        let l2 = self
            .reaction_fast
            .lipschitz()
            .ok_or_else(|| Error::invalid("fast reaction must be a Lipschitz fast reaction"))?;
        validate_dissipativity(self.op2.alphas()[0], l2)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self {
            epsilon,
            ..self.clone()
        }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self {
            theta,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::invalid(format!("ε must lie in (0, 1], got {}", self.epsilon)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !self.reaction_slow.is_slow() {
            return Err(Error::invalid("reaction_slow must be a slow reaction"));
        }
        if self.reaction_slow.is_slow() == self.reaction_fast.is_slow() {
            return Err(Error::invalid("reaction_fast must be a fast reaction"));
        }
        let n = self.grid.n_modes();
        if self.op1.n_modes() != n || self.op2.n_modes() != n {
            return Err(Error::invalid(format!(
                "operators have {} and {} modes but the grid has {n}",
                self.op1.n_modes(),
                self.op2.n_modes()
            )));
        }
        self.u0.check_len(n, "u0")?;
        self.v0.check_len(n, "v0")?;
        self.omega()?;
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::invalid(format!("θ must lie in [0, 1], got {}", self.theta)));
        }
        if !(self.h_macro > 0.0) || !(self.substep_ratio > 0.0) || !(self.explosion_bound > 0.0) {
            return Err(Error::invalid(
                "h_macro, substep_ratio and explosion_bound must be positive",
            ));
        }
        if !(self.holder_beta > 0.0) || !(self.c_const > 0.0) || !(self.lambda_exp >= 0.0) {
            return Err(Error::invalid(
                "need holder_beta > 0, c_const > 0 and lambda_exp ≥ 0",
            ));
        }
        Ok(())
    }

    /// Fast substeps per macro step, `⌈h/(ρε)⌉`.
    pub fn n_sub(&self, h_macro: f64) -> usize {
        ((h_macro / (self.substep_ratio * self.epsilon)) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.h_macro).round() as usize
    }

    pub fn initial_v(&self) -> f64 {
        let tr = Transform::new(self.grid);
        let u = tr.synthesize(&self.u0).expect("validated");
        let v = tr.synthesize(&self.v0).expect("validated");
        eval_v(&u, &v, &self.lyapunov, &self.grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlowFastState {
    pub u: ModalField,
    pub v: ModalField,
    pub t: f64,
}

impl SlowFastState {
    pub fn initial(model: &ModelSpec) -> Self {
        Self {
            u: model.u0.clone(),
            v: model.v0.clone(),
            t: 0.0,
        }
    }
}

/// Independent slow and fast noise streams of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowFastStreams {
    pub slow: RngStream,
    pub fast: RngStream,
}

impl SlowFastStreams {
    pub fn new(master_seed: u64, trajectory_id: u64) -> Self {
        Self {
            slow: derive_stream(master_seed, trajectory_id, RoleTag::SlowNoise),
            fast: derive_stream(master_seed, trajectory_id, RoleTag::FastNoise),
        }
    }
}

/// `ξ(t) = w(t) · modes` with `w(t) = Σ_j c_j t^j` (constant 1 when no
/// coefficients are given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestFunction {
    pub modes: Vec<f64>,
    #[serde(default)]
    pub time_weight: Vec<f64>,
}

impl TestFunction {
    pub fn constant(modes: Vec<f64>) -> Self {
        Self {
            modes,
            time_weight: Vec::new(),
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        if self.time_weight.is_empty() {
            return 1.0;
        }
        self.time_weight.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    fn project(&self, f: &[f64]) -> f64 {
        self.modes.iter().zip(f).map(|(a, b)| a * b).sum()
    }
}

/// `b_θ(u, v)` projected on the modes, with the identity shortcut for the
/// linear benchmark.
#[derive(Debug, Clone)]
struct SlowDriftEval {
    reaction: ReactionSpec,
    theta: f64,
    identity: bool,
    transform: Transform,
    drift_phys: Vec<f64>,
}

impl SlowDriftEval {
    fn new(model: &ModelSpec) -> Self {
        Self {
            reaction: model.reaction_slow.clone(),
            theta: model.theta,
            identity: matches!(model.reaction_slow.kind(), ReactionKind::LinearSlow) && model.theta == 0.0,
            transform: Transform::new(model.grid),
            drift_phys: vec![0.0; model.grid.n_quad()],
        }
    }

    /// Needs `v_phys` only when not on the identity path.
    fn needs_phys(&self) -> bool {
        !self.identity
    }

    fn eval(&mut self, u_phys: &[f64], v: &[f64], v_phys: &[f64], out: &mut [f64]) {
        if self.identity {
            out.copy_from_slice(v);
        } else {
            fill_slow_drift(&self.reaction, self.theta, u_phys, v_phys, &mut self.drift_phys);
            self.transform.analyze_into(&self.drift_phys, out);
        }
    }
}

/// Pre-built plans and scratch space for repeated coupled steps.
#[derive(Debug, Clone)]
pub(crate) struct CoupledStepper {
    slow_plan: OUStepPlan,
    fast: FastKernel,
    drift: SlowDriftEval,
    transform: Transform,
    n_sub: usize,
    h: f64,
    h_sub: f64,
    bound: f64,
    u_phys: Vec<f64>,
    v_phys: Vec<f64>,
    f1: Vec<f64>,
    noise_u: Vec<f64>,
}

/// What the step loop hands back for the running functionals.
struct StepTrace<'a> {
    /// `⟨F₁(u_n, v_j), ξ_i⟩` integrated against the ξ time weights over the
    /// step (trapezoid on the substep grid), one entry per test function.
    projections: &'a mut [f64],
    tests: &'a [TestFunction],
}

impl CoupledStepper {
    pub(crate) fn new(model: &ModelSpec, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid(format!("h_macro must be positive, got {h}")));
        }
        let n_sub = model.n_sub(h);
        let h_sub = h / n_sub as f64;
        let n = model.grid.n_modes();
        let m = model.grid.n_quad();
        Ok(Self {
            slow_plan: make_plan(&model.op1, h, 1.0)?,
            fast: FastKernel::new(&model.op2, &model.reaction_fast, &model.grid, h_sub, model.epsilon)?,
            drift: SlowDriftEval::new(model),
            transform: Transform::new(model.grid),
            n_sub,
            h,
            h_sub,
            bound: model.explosion_bound,
            u_phys: vec![0.0; m],
            v_phys: vec![0.0; m],
            f1: vec![0.0; n],
            noise_u: vec![0.0; n],
        })
    }

    pub(crate) fn n_sub(&self) -> usize {
        self.n_sub
    }

    /// Advances `(u, v)` over one macro step starting at time `t`. The slow
    /// noise increment is left in `noise_u`.
    fn step(
        &mut self,
        u: &mut [f64],
        v: &mut [f64],
        t: f64,
        streams: &mut SlowFastStreams,
        mut trace: Option<StepTrace<'_>>,
    ) -> Result<()> {
        self.transform.synthesize_into(u, &mut self.u_phys);
        if self.drift.needs_phys() {
            self.transform.synthesize_into(v, &mut self.v_phys);
        }
        let mut slow_drift = vec![0.0; u.len()];
        self.drift.eval(&self.u_phys, v, &self.v_phys, &mut slow_drift);
        ou_noise(&self.slow_plan, &mut streams.slow, &mut self.noise_u);

        if let Some(tr) = trace.as_mut() {
            for (p, xi) in tr.projections.iter_mut().zip(tr.tests) {
                *p = 0.5 * self.h_sub * xi.weight(t) * xi.project(&slow_drift);
            }
        }
        for j in 1..=self.n_sub {
            self.fast.step(v, u, &self.u_phys, &mut streams.fast);
            if let Some(tr) = trace.as_mut() {
                if self.drift.needs_phys() {
                    self.transform.synthesize_into(v, &mut self.v_phys);
                }
                let mut f1 = std::mem::take(&mut self.f1);
                self.drift.eval(&self.u_phys, v, &self.v_phys, &mut f1);
                let s = t + j as f64 * self.h_sub;
                let w = if j == self.n_sub { 0.5 } else { 1.0 };
                for (p, xi) in tr.projections.iter_mut().zip(tr.tests) {
                    *p += w * self.h_sub * xi.weight(s) * xi.project(&f1);
                }
                self.f1 = f1;
            }
        }
        ou_apply(&self.slow_plan, u, &slow_drift, &self.noise_u);

        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(un + vn <= self.bound) {
            return Err(Error::StateExplosion {
                t: t + self.h,
                u_norm: un,
                v_norm: vn,
            });
        }
        Ok(())
    }
}

pub fn step_coupled(
    state: &SlowFastState,
    model: &ModelSpec,
    h_macro: f64,
    streams: &mut SlowFastStreams,
) -> Result<SlowFastState> {
    model.validate()?;
    let mut stepper = CoupledStepper::new(model, h_macro)?;
    state.u.check_len(model.grid.n_modes(), "slow state")?;
    state.v.check_len(model.grid.n_modes(), "fast state")?;
    let mut u = state.u.coeffs().to_vec();
    let mut v = state.v.coeffs().to_vec();
    stepper.step(&mut u, &mut v, state.t, streams, None)?;
    Ok(SlowFastState {
        u: ModalField::from_coeffs(u)?,
        v: ModalField::from_coeffs(v)?,
        t: state.t + h_macro,
    })
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions<'a> {
    pub test_functions: Vec<TestFunction>,
    /// Averaged drift subtracted in the discrepancy functional. Required
    /// when `test_functions` is non-empty.
    pub fbar: Option<DriftSource<'a>>,
    /// Keep `u`, `v` and the fast stream position at every macro step.
    pub store_path: bool,
}

/// Running functionals of one trajectory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Functionals {
    /// `sup_t |∫₀ᵗ ⟨F₁(u, v) − F̄₁(u), ξ⟩ ds|` per test function.
    pub discrepancy_sup: Vec<f64>,
    /// The same integral at `T`.
    pub discrepancy_final: Vec<f64>,
    /// `∫₀ᵀ V(u, v) dt` (trapezoid on the macro grid).
    pub v_integral: f64,
    /// `sup_t ‖v‖²` on the macro grid.
    pub sup_v_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub master_seed: u64,
    pub trajectory_id: u64,
    pub h_macro: f64,
    pub n_sub: usize,
    pub times: Vec<f64>,
    /// Every macro step when the path is stored, otherwise the endpoints.
    pub u: Vec<ModalField>,
    pub v: Vec<ModalField>,
    /// Fast stream position at the start of each stored macro step.
    pub fast_counters: Vec<u64>,
    /// `W_{A₁}(T)`, the slow stochastic convolution sampled alongside.
    pub slow_convolution: ModalField,
    pub functionals: Functionals,
    pub path_stored: bool,
}

impl Trajectory {
    pub fn terminal(&self) -> SlowFastState {
        SlowFastState {
            u: self.u.last().unwrap().clone(),
            v: self.v.last().unwrap().clone(),
            t: *self.times.last().unwrap(),
        }
    }
}

/// Full coupled run over `[0, model.horizon]` with step `model.h_macro`.
pub fn simulate_slowfast(
    model: &ModelSpec,
    streams: &mut SlowFastStreams,
    options: &SimOptions<'_>,
) -> Result<Trajectory> {
    model.validate()?;
    let n = model.grid.n_modes();
    if !options.test_functions.is_empty() && options.fbar.is_none() {
        return Err(Error::invalid("discrepancy functional needs an averaged drift source"));
    }
    for xi in &options.test_functions {
        if xi.modes.len() > n {
            return Err(Error::invalid(format!(
                "test function has {} modes but the model has {n}",
                xi.modes.len()
            )));
        }
    }
    let h = model.h_macro;
    let n_steps = model.n_steps();
    let mut stepper = CoupledStepper::new(model, h)?;
    let slow_plan = stepper.slow_plan.clone();
    let transform = Transform::new(model.grid);

    let mut u = model.u0.coeffs().to_vec();
    let mut v = model.v0.coeffs().to_vec();
    let mut wa1 = vec![0.0; n];
    let zero = vec![0.0; n];
    let cap = if options.store_path { n_steps + 1 } else { 2 };
    let mut times = Vec::with_capacity(cap);
    let mut us = Vec::with_capacity(cap);
    let mut vs = Vec::with_capacity(cap);
    let mut counters = Vec::with_capacity(cap);
    times.push(0.0);
    us.push(model.u0.clone());
    vs.push(model.v0.clone());
    counters.push(streams.fast.counter());

    let n_tests = options.test_functions.len();
    let mut projections = vec![0.0; n_tests];
    let mut running: Vec<CompensatedSum> = vec![CompensatedSum::new(); n_tests];
    let mut d_sup = vec![0.0f64; n_tests];

    let mut up = vec![0.0; model.grid.n_quad()];
    let mut vp = vec![0.0; model.grid.n_quad()];
    let mut v_at = |u: &[f64], v: &[f64]| {
        transform.synthesize_into(u, &mut up);
        transform.synthesize_into(v, &mut vp);
        eval_v(&up, &vp, &model.lyapunov, &model.grid)
    };
    let mut v_int = CompensatedSum::new();
    let mut v_prev = v_at(&u, &v);
    let mut sup_v_sq = v.iter().map(|x| x * x).sum::<f64>();

    for i in 0..n_steps {
        let t = i as f64 * h;
        let fbar = match (&options.fbar, n_tests) {
            (Some(src), k) if k > 0 => Some(src.drift(model, t, &ModalField::from_coeffs(u.clone())?)?.0),
            _ => None,
        };
        let trace = (n_tests > 0).then(|| StepTrace {
            projections: &mut projections,
            tests: &options.test_functions,
        });
        stepper.step(&mut u, &mut v, t, streams, trace)?;
        ou_apply(&slow_plan, &mut wa1, &zero, &stepper.noise_u);

        if let Some(fb) = fbar {
            for (k, xi) in options.test_functions.iter().enumerate() {
                let p = xi.project(fb.coeffs());
                // trapezoid of the weight over the same substep grid
                let hs = stepper.h_sub;
                let mut wsum = 0.5 * (xi.weight(t) + xi.weight(t + h));
                for j in 1..stepper.n_sub {
                    wsum += xi.weight(t + j as f64 * hs);
                }
                running[k].add(projections[k] - p * wsum * hs);
                d_sup[k] = d_sup[k].max(running[k].value().abs());
            }
        }

        let v_next = v_at(&u, &v);
        v_int.add(0.5 * h * (v_prev + v_next));
        v_prev = v_next;
        sup_v_sq = sup_v_sq.max(v.iter().map(|x| x * x).sum::<f64>());

        if options.store_path || i + 1 == n_steps {
            times.push((i + 1) as f64 * h);
            us.push(ModalField::from_coeffs(u.clone())?);
            vs.push(ModalField::from_coeffs(v.clone())?);
            counters.push(streams.fast.counter());
        }
    }

    Ok(Trajectory {
        master_seed: streams.slow.master_seed(),
        trajectory_id: streams.slow.trajectory_id(),
        h_macro: h,
        n_sub: stepper.n_sub(),
        times,
        u: us,
        v: vs,
        fast_counters: counters,
        slow_convolution: ModalField::from_coeffs(wa1)?,
        functionals: Functionals {
            discrepancy_final: running.iter().map(|r| r.value()).collect(),
            discrepancy_sup: d_sup,
            v_integral: v_int.value(),
            sup_v_sq,
        },
        path_stored: options.store_path,
    })
}

/// `δ_ε = (2/c) ε |ln ε|^{λ/2}`.
pub fn khasminskii_delta(epsilon: f64, lambda_exp: f64, c_const: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid(format!("ε must lie in (0, 1), got {epsilon}")));
    }
    if !(c_const > 0.0) {
        return Err(Error::invalid(format!("c must be positive, got {c_const}")));
    }
    Ok(2.0 / c_const * epsilon * epsilon.ln().abs().powf(lambda_exp / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KhasminskiiPlan {
    /// Block length actually used: a whole number of macro steps.
    pub delta: f64,
    /// The requested block length before rounding to the macro grid.
    pub delta_requested: f64,
    pub blocks: usize,
    pub block_steps: usize,
    pub c_const: f64,
}

impl KhasminskiiPlan {
    /// Blocks of `δ` rounded to the nearest positive multiple of `h_macro`
    /// and capped at `T`.
    pub fn new(delta: f64, horizon: f64, h_macro: f64, c_const: f64) -> Result<Self> {
        if !(delta > 0.0) || !(horizon > 0.0) || !(h_macro > 0.0) {
            return Err(Error::invalid("δ, T and h must be positive"));
        }
        let n_steps = (horizon / h_macro).round().max(1.0) as usize;
        let block_steps = ((delta / h_macro).round().max(1.0) as usize).min(n_steps);
        Ok(Self {
            delta: block_steps as f64 * h_macro,
            delta_requested: delta,
            blocks: n_steps.div_ceil(block_steps),
            block_steps,
            c_const,
        })
    }

    /// The schedule `δ_ε` for `model`.
    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        let d = khasminskii_delta(model.epsilon, model.lambda_exp, model.c_const)?;
        Self::new(d, model.horizon, model.h_macro, model.c_const)
    }

    /// `δ/ε > 1`.
    pub fn separates(&self, epsilon: f64) -> bool {
        self.delta / epsilon > 1.0
    }
}

/// Khasminskii auxiliary paths on the macro grid. `v[i]` at a block
/// boundary holds the left limit of the preceding block.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPath {
    pub u: Vec<ModalField>,
    pub v: Vec<ModalField>,
}

pub fn build_auxiliary(traj: &Trajectory, plan: &KhasminskiiPlan, model: &ModelSpec) -> Result<AuxPath> {
    if !traj.path_stored || traj.fast_counters.len() != traj.u.len() {
        return Err(Error::invalid(
            "auxiliary processes need a run with stored path and fast stream positions",
        ));
    }
    if (traj.h_macro - model.h_macro).abs() > 0.0 {
        return Err(Error::invalid("trajectory and model disagree on the macro step"));
    }
    let n_steps = traj.u.len() - 1;
    let stepper_n_sub = model.n_sub(traj.h_macro);
    if stepper_n_sub != traj.n_sub {
        return Err(Error::invalid("trajectory and model disagree on the fast substep count"));
    }
    let h_sub = traj.h_macro / traj.n_sub as f64;
    let mut kernel = FastKernel::new(&model.op2, &model.reaction_fast, &model.grid, h_sub, model.epsilon)?;
    let transform = Transform::new(model.grid);
    let mut stream = derive_stream(traj.master_seed, traj.trajectory_id, RoleTag::FastNoise);

    let mut u_aux = Vec::with_capacity(n_steps + 1);
    let mut v_aux = Vec::with_capacity(n_steps + 1);
    u_aux.push(traj.u[0].clone());
    v_aux.push(traj.v[0].clone());
    let mut start = 0;
    while start < n_steps {
        let end = (start + plan.block_steps).min(n_steps);
        let frozen = traj.u[start].coeffs();
        let frozen_phys = transform.synthesize(&traj.u[start])?;
        let mut v = traj.v[start].coeffs().to_vec();
        stream.seek(traj.fast_counters[start]);
        for i in start..end {
            for _ in 0..traj.n_sub {
                kernel.step(&mut v, frozen, &frozen_phys, &mut stream);
            }
            // u_aux is constant on [kδ, (k+1)δ) and jumps at the boundary
            u_aux.push(if i + 1 == end {
                traj.u[end].clone()
            } else {
                traj.u[start].clone()
            });
            v_aux.push(ModalField::from_coeffs(v.clone())?);
        }
        start = end;
    }
    Ok(AuxPath { u: u_aux, v: v_aux })
}

/// Per-path errors of the auxiliary processes.
#[derive(Debug, Clone, PartialEq)]
pub struct PathAuxErrors {
    /// `‖u(t_i) − u_aux(t_i)‖²` at each macro time.
    pub slow_increment: Vec<f64>,
    /// `∫₀ᵀ ‖v_aux − v‖² dt` (right-endpoint sum; the two agree at block
    /// starts).
    pub fast_deviation: f64,
}

pub fn path_aux_errors(traj: &Trajectory, aux: &AuxPath) -> Result<PathAuxErrors> {
    if aux.u.len() != traj.u.len() || aux.v.len() != traj.v.len() {
        return Err(Error::invalid(format!(
            "auxiliary path has {} points but the trajectory has {}",
            aux.u.len(),
            traj.u.len()
        )));
    }
    if traj.u.len() < 2 {
        return Err(Error::invalid("trajectory has no macro steps"));
    }
    // left-closed blocks: the slow error at a boundary is the pre-jump one
    let mut slow = Vec::with_capacity(traj.u.len());
    slow.push(0.0);
    for i in 1..traj.u.len() {
        slow.push(traj.u[i].sub(&aux_u_left(aux, i)).norm_squared());
    }
    let h = traj.h_macro;
    let mut dev = CompensatedSum::new();
    for i in 1..traj.v.len() {
        dev.add(h * traj.v[i].sub(&aux.v[i]).norm_squared());
    }
    Ok(PathAuxErrors {
        slow_increment: slow,
        fast_deviation: dev.value(),
    })
}

fn aux_u_left(aux: &AuxPath, i: usize) -> ModalField {
    // at a block boundary u_aux has already jumped; its left limit is the
    // previous value
    if i > 0 && aux.u[i] != aux.u[i - 1] {
        aux.u[i - 1].clone()
    } else {
        aux.u[i].clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxErrorStats {
    /// `sup_t E‖u(t) − u_aux(t)‖²`; the error bar is taken at the maximizer.
    pub slow_increment: Estimate,
    /// `E ∫₀ᵀ ‖v_aux − v‖² dt`.
    pub fast_deviation: Estimate,
}

pub fn auxiliary_error_stats(paths: &[PathAuxErrors]) -> Result<AuxErrorStats> {
    let first = paths
        .first()
        .ok_or_else(|| Error::invalid("no matched trajectories"))?;
    let len = first.slow_increment.len();
    if paths.iter().any(|p| p.slow_increment.len() != len) {
        return Err(Error::invalid("matched trajectories have different grids"));
    }
    let mut best = Estimate::from_samples(&vec![0.0; paths.len()]);
    for i in 0..len {
        let col: Vec<f64> = paths.iter().map(|p| p.slow_increment[i]).collect();
        let e = Estimate::from_samples(&col);
        if e.mean > best.mean {
            best = e;
        }
    }
    let fast: Vec<f64> = paths.iter().map(|p| p.fast_deviation).collect();
    Ok(AuxErrorStats {
        slow_increment: best,
        fast_deviation: Estimate::from_samples(&fast),
    })
}

/// `ρ₀(s, t) = ln(t/s)² + (t−s)^β + (t−s)^{2γ₁*}`.
pub fn compute_rho0(s: f64, t: f64, beta: f64, gamma1_star: f64) -> Result<f64> {
    if !(s > 0.0) || !(t >= s) {
        return Err(Error::invalid(format!("need 0 < s ≤ t, got s = {s}, t = {t}")));
    }
    let d = t - s;
    Ok((t / s).ln().powi(2) + d.powf(beta) + d.powf(2.0 * gamma1_star))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::averaging::linear_averaged_mean;
    use proptest::prelude::*;
    use std::f64::consts::{E, PI};

    /// Linear benchmark on (0,1) with `α_{i,k} = π²k²` and flat noise
    /// amplitudes `slow_noise`, `fast_noise` decaying like `k^{-1}`.
    pub(crate) fn linear_model(n: usize, a_c: f64, b_c: f64, slow_noise: f64, fast_noise: f64) -> ModelSpec {
        let grid = GridSpec::new(n, 4 * n, 1.0).unwrap();
        let op1 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, slow_noise, 1.0, 0.25).unwrap();
        let op2 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, fast_noise, 1.0, 0.25).unwrap();
        ModelSpec::new(
            op1,
            op2,
            ReactionSpec::linear_slow(),
            ReactionSpec::linear_fast(a_c, b_c),
            grid,
            1.0,
            1.0,
            ModalField::zeros(n),
            ModalField::zeros(n),
        )
        .unwrap()
    }

    #[test]
    fn model_validation() {
        let m = linear_model(4, 1.0, 2.0, 0.1, 0.1);
        assert!(m.with_epsilon(0.0).validate().is_err());
        assert!(m.with_epsilon(1.5).validate().is_err());
        let mut bad = m.clone();
        bad.reaction_fast = ReactionSpec::linear_fast(1.0, -20.0);
        assert!(matches!(bad.validate(), Err(Error::HypothesisViolated { .. })));
        let mut swapped = m.clone();
        swapped.reaction_slow = ReactionSpec::linear_fast(1.0, 2.0);
        assert!(swapped.validate().is_err());
        assert_eq!(m.gamma1_star(), 0.25);
        assert_eq!(m.n_sub(1e-3), 1);
        assert_eq!(m.with_epsilon(0.004).n_sub(1e-2), 13);
    }

    #[test]
    fn decoupled_noiseless_decay() {
        let mut m = linear_model(3, 0.0, 0.0, 0.0, 0.0);
        m.reaction_slow = ReactionSpec::polynomial(0.0, vec![], *ReactionSpec::linear_slow().growth()).unwrap();
        let m = m.with_epsilon(0.1);
        let s0 = SlowFastState {
            u: ModalField::unit(3, 1),
            v: ModalField::unit(3, 2),
            t: 0.0,
        };
        let mut st = SlowFastStreams::new(0, 0);
        let h = 0.01;
        let s1 = step_coupled(&s0, &m, h, &mut st).unwrap();
        assert!((s1.u.mode(1) - (-PI * PI * h).exp()).abs() < 1e-14);
        let fast = (-4.0 * PI * PI * h / 0.1).exp();
        assert!((s1.v.mode(2) - fast).abs() < 1e-14);
        assert_eq!(st.slow.counter(), 0);
        assert_eq!(st.fast.counter(), 0);
    }

    /// `exp(tM)` of a 2×2 matrix.
    fn expm2(m: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
        let tr = m[0][0] + m[1][1];
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let mu = tr / 2.0;
        let disc = mu * mu - det;
        let (c0, c1) = if disc > 0.0 {
            let d = disc.sqrt();
            let (l1, l2) = (mu + d, mu - d);
            let (e1, e2) = ((l1 * t).exp(), (l2 * t).exp());
            ((l1 * e2 - l2 * e1) / (l1 - l2), (e1 - e2) / (l1 - l2))
        } else {
            unreachable!("test systems have real spectra")
        };
        [
            [c0 + c1 * m[0][0], c1 * m[0][1]],
            [c1 * m[1][0], c0 + c1 * m[1][1]],
        ]
    }

    #[test]
    fn coupled_linear_matches_matrix_exponential() {
        let mut m = linear_model(2, 1.0, 2.0, 0.0, 0.0);
        m.h_macro = 1e-4;
        m.u0 = ModalField::from_coeffs(vec![1.0, 0.5]).unwrap();
        m.v0 = ModalField::from_coeffs(vec![-0.3, 0.2]).unwrap();
        let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(1, 0), &SimOptions::default()).unwrap();
        let end = tr.terminal();
        for k in 0..2 {
            let a1 = m.op1.alphas()[k];
            let a2 = m.op2.alphas()[k];
            let e = expm2([[-a1, 1.0], [1.0, -(a2 + 2.0)]], m.horizon);
            let (u0, v0) = (m.u0.coeffs()[k], m.v0.coeffs()[k]);
            let u = e[0][0] * u0 + e[0][1] * v0;
            let v = e[1][0] * u0 + e[1][1] * v0;
            assert!((end.u.coeffs()[k] - u).abs() < 1e-6, "mode {k}: {} vs {u}", end.u.coeffs()[k]);
            assert!((end.v.coeffs()[k] - v).abs() < 1e-6, "v mode {k}: {} vs {v}", end.v.coeffs()[k]);
        }
    }

    #[test]
    fn macro_step_is_first_order() {
        let mut m = linear_model(2, 1.0, 2.0, 0.0, 0.0);
        m.horizon = 0.5;
        m.u0 = ModalField::from_coeffs(vec![1.0, 0.0]).unwrap();
        m.v0 = ModalField::from_coeffs(vec![1.0, 0.0]).unwrap();
        let a1 = m.op1.alphas()[0];
        let a2 = m.op2.alphas()[0];
        let e = expm2([[-a1, 1.0], [1.0, -(a2 + 2.0)]], m.horizon);
        let exact = e[0][0] + e[0][1];
        let err = |h: f64| {
            let mut mm = m.clone();
            mm.h_macro = h;
            let tr = simulate_slowfast(&mm, &mut SlowFastStreams::new(0, 0), &SimOptions::default()).unwrap();
            (tr.terminal().u.mode(1) - exact).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 2.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn zero_horizon_steps() {
        let mut m = linear_model(3, 1.0, 2.0, 0.1, 0.1);
        m.horizon = 1e-4;
        m.h_macro = 1e-3;
        let tr = simulate_slowfast(
            &m,
            &mut SlowFastStreams::new(0, 0),
            &SimOptions {
                store_path: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(tr.u.len(), 1);
        assert_eq!(tr.times, vec![0.0]);
    }

    #[test]
    fn cubic_rough_runs_without_explosion() {
        let n = 16;
        let grid = GridSpec::new(n, 64, 1.0).unwrap();
        let op1 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, 0.5, 1.0, 0.25).unwrap();
        let op2 = SpectralOperator::dirichlet_power_law(n, 1.0, 1.0, 0.5, 1.0, 0.25).unwrap();
        let mut m = ModelSpec::new(
            op1,
            op2,
            ReactionSpec::cubic_rough(1.0, 0.5),
            ReactionSpec::linear_fast(1.0, 2.0),
            grid,
            0.1,
            1.0,
            ModalField::unit(n, 1),
            ModalField::zeros(n),
        )
        .unwrap();
        assert_eq!(m.theta, DEFAULT_THETA);
        m.h_macro = 1e-3;
        let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(3, 0), &SimOptions::default()).unwrap();
        assert!(tr.functionals.v_integral.is_finite());
        assert!(tr.functionals.v_integral > 0.0);
    }

    #[test]
    fn explosion_guard_reports_state() {
        let mut m = linear_model(2, 1.0, 2.0, 0.0, 0.0);
        m.u0 = ModalField::from_coeffs(vec![10.0, 0.0]).unwrap();
        m.explosion_bound = 5.0;
        let r = simulate_slowfast(&m, &mut SlowFastStreams::new(0, 0), &SimOptions::default());
        match r {
            Err(Error::StateExplosion { t, u_norm, .. }) => {
                assert!(t > 0.0);
                assert!(u_norm > 5.0);
            }
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    #[test]
    fn slow_convolution_is_eps_independent() {
        let mut m = linear_model(4, 1.0, 2.0, 0.5, 0.5);
        m.horizon = 0.2;
        let a = simulate_slowfast(&m, &mut SlowFastStreams::new(11, 3), &SimOptions::default()).unwrap();
        let b = simulate_slowfast(&m.with_epsilon(0.5), &mut SlowFastStreams::new(11, 3), &SimOptions::default())
            .unwrap();
        assert_ne!(a.terminal().u, b.terminal().u);
        assert_eq!(a.slow_convolution, b.slow_convolution);
    }

    #[test]
    fn deterministic_trajectory() {
        let mut m = linear_model(4, 1.0, 2.0, 0.5, 0.5).with_epsilon(0.1);
        m.horizon = 0.1;
        let opts = SimOptions {
            test_functions: vec![TestFunction::constant(vec![1.0])],
            fbar: Some(DriftSource::AnalyticLinear),
            store_path: true,
        };
        let a = simulate_slowfast(&m, &mut SlowFastStreams::new(4, 2), &opts).unwrap();
        let b = simulate_slowfast(&m, &mut SlowFastStreams::new(4, 2), &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_means_track_averaged_limit() {
        let mut m = linear_model(2, 1.0, 2.0, 0.0, 0.0);
        m.u0 = ModalField::unit(2, 1);
        m.v0 = analytic_fbar(&m, &m.u0);
        m.h_macro = 1e-4;
        let ubar = linear_averaged_mean(&m, &m.u0, m.horizon).unwrap().mode(1);
        let err = |eps: f64| {
            let tr = simulate_slowfast(&m.with_epsilon(eps), &mut SlowFastStreams::new(0, 0), &SimOptions::default())
                .unwrap();
            (tr.terminal().u.mode(1) - ubar).abs()
        };
        let (e1, e2) = (err(0.1), err(0.01));
        assert!(e2 < e1, "{e1} {e2}");
    }

    fn analytic_fbar(m: &ModelSpec, x: &ModalField) -> ModalField {
        crate::averaging::analytic_fbar_linear(m, 0.0, x).unwrap()
    }

    #[test]
    fn discrepancy_vanishes_when_decoupled() {
        // b independent of λ: F₁ − F̄₁ ≡ 0 pathwise
        let n = 4;
        let mut m = linear_model(n, 0.0, 2.0, 0.3, 0.3).with_epsilon(0.1);
        m.reaction_slow = ReactionSpec::cubic_rough(1.0, 0.0);
        m.horizon = 0.2;
        m.u0 = ModalField::unit(n, 1);
        let tr = simulate_slowfast(
            &m,
            &mut SlowFastStreams::new(0, 0),
            &SimOptions {
                test_functions: vec![TestFunction::constant(vec![1.0, 0.5])],
                fbar: Some(DriftSource::FastIndependent),
                store_path: false,
            },
        )
        .unwrap();
        assert!(tr.functionals.discrepancy_sup[0] < 1e-12);
    }

    #[test]
    fn discrepancy_with_time_weight() {
        // noiseless linear system started at quasi-equilibrium of mode 1
        // stays near it for small ε, so the discrepancy is small
        let mut m = linear_model(2, 1.0, 2.0, 0.0, 0.0).with_epsilon(0.01);
        m.u0 = ModalField::unit(2, 1);
        m.v0 = analytic_fbar(&m, &m.u0);
        let opts = SimOptions {
            test_functions: vec![
                TestFunction::constant(vec![1.0]),
                TestFunction {
                    modes: vec![1.0],
                    time_weight: vec![0.0, 1.0],
                },
            ],
            fbar: Some(DriftSource::AnalyticLinear),
            store_path: false,
        };
        let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(0, 0), &opts).unwrap();
        let d = &tr.functionals.discrepancy_sup;
        assert!(d[0] < 1e-3, "{d:?}");
        assert!(d[1] <= d[0] + 1e-15);
    }

    #[test]
    fn delta_schedule() {
        let d = khasminskii_delta(0.01, 1.0, 2.0).unwrap();
        assert!((d - 0.01 * 4.605_170_185_988_091f64.sqrt()).abs() < 1e-15);
        assert!((d - 0.021_460).abs() < 1e-6);
        assert_eq!(khasminskii_delta(0.3, 0.0, 2.0).unwrap(), 0.3);
        assert_eq!(khasminskii_delta(0.3, 0.0, 4.0).unwrap(), 0.15);
        assert!(khasminskii_delta(1.0, 1.0, 2.0).is_err());
        assert!(khasminskii_delta(0.5, 1.0, 0.0).is_err());
        let eps = [0.1, 0.01, 0.001];
        let ds: Vec<f64> = eps.iter().map(|e| khasminskii_delta(*e, 1.0, 2.0).unwrap()).collect();
        assert!(ds.windows(2).all(|w| w[1] < w[0]));
        let ratios: Vec<f64> = ds.iter().zip(&eps).map(|(d, e)| d / e).collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn plan_rounds_to_grid() {
        let p = KhasminskiiPlan::new(0.021_46, 1.0, 1e-3, 2.0).unwrap();
        assert_eq!(p.block_steps, 21);
        assert!((p.delta - 0.021).abs() < 1e-15);
        assert_eq!(p.blocks, 48);
        let single = KhasminskiiPlan::new(5.0, 1.0, 1e-2, 2.0).unwrap();
        assert_eq!(single.blocks, 1);
        assert!((single.delta - 1.0).abs() < 1e-12);
        assert!(p.separates(0.01));
        assert!(!p.separates(0.05));
    }

    fn stored(m: &ModelSpec, seed: u64, id: u64) -> Trajectory {
        simulate_slowfast(
            m,
            &mut SlowFastStreams::new(seed, id),
            &SimOptions {
                store_path: true,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn replay_fidelity_one_step_blocks() {
        let mut m = linear_model(4, 1.0, 2.0, 0.5, 0.5).with_epsilon(0.05);
        m.reaction_fast = ReactionSpec::lipschitz_fast(1.0, 2.0, 0.5);
        m.horizon = 0.1;
        m.h_macro = 1e-3;
        let tr = stored(&m, 8, 1);
        let plan = KhasminskiiPlan::new(m.h_macro, m.horizon, m.h_macro, 2.0).unwrap();
        let aux = build_auxiliary(&tr, &plan, &m).unwrap();
        assert_eq!(aux.v, tr.v);
        let errs = path_aux_errors(&tr, &aux).unwrap();
        assert_eq!(errs.fast_deviation, 0.0);
    }

    #[test]
    fn single_block_with_x_independent_fast() {
        let mut m = linear_model(4, 0.0, 2.0, 0.5, 0.5).with_epsilon(0.1);
        m.horizon = 0.05;
        let tr = stored(&m, 2, 0);
        let plan = KhasminskiiPlan::new(10.0, m.horizon, m.h_macro, 2.0).unwrap();
        assert_eq!(plan.blocks, 1);
        let aux = build_auxiliary(&tr, &plan, &m).unwrap();
        assert_eq!(aux.v, tr.v);
        assert!(aux.u[..aux.u.len() - 1].iter().all(|u| *u == tr.u[0]));
        let again = build_auxiliary(&tr, &plan, &m).unwrap();
        assert_eq!(aux, again);
    }

    #[test]
    fn auxiliary_needs_stored_path() {
        let m = linear_model(3, 1.0, 2.0, 0.5, 0.5);
        let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(0, 0), &SimOptions::default()).unwrap();
        let plan = KhasminskiiPlan::for_model(&m.with_epsilon(0.1)).unwrap();
        assert!(build_auxiliary(&tr, &plan, &m).is_err());
    }

    #[test]
    fn slow_increment_grows_with_block_length() {
        let mut m = linear_model(4, 1.0, 2.0, 0.5, 0.5).with_epsilon(0.05);
        m.horizon = 0.2;
        let trajs: Vec<Trajectory> = (0..150).map(|i| stored(&m, 21, i)).collect();
        let stat = |delta: f64| {
            let plan = KhasminskiiPlan::new(delta, m.horizon, m.h_macro, 2.0).unwrap();
            let paths: Vec<PathAuxErrors> = trajs
                .iter()
                .map(|t| path_aux_errors(t, &build_auxiliary(t, &plan, &m).unwrap()).unwrap())
                .collect();
            auxiliary_error_stats(&paths).unwrap()
        };
        let (a, b) = (stat(0.02), stat(0.04));
        assert!(b.slow_increment.mean - a.slow_increment.mean > 3.0 * a.slow_increment.std_error.hypot(b.slow_increment.std_error));
        assert!(b.fast_deviation.mean > a.fast_deviation.mean);
    }

    #[test]
    fn stats_reject_mismatch() {
        let a = PathAuxErrors {
            slow_increment: vec![0.0, 1.0],
            fast_deviation: 0.0,
        };
        let b = PathAuxErrors {
            slow_increment: vec![0.0],
            fast_deviation: 0.0,
        };
        assert!(auxiliary_error_stats(&[a, b]).is_err());
        assert!(auxiliary_error_stats(&[]).is_err());
    }

    #[test]
    fn rho0_values() {
        assert_eq!(compute_rho0(0.5, 0.5, 0.2, 0.25).unwrap(), 0.0);
        let r = compute_rho0(1.0, E, 0.5, 0.5).unwrap();
        let oracle = 1.0 + (E - 1.0).sqrt() + (E - 1.0);
        assert!((r - oracle).abs() < 1e-12);
        assert!((r - 4.029_08).abs() < 1e-4, "{r}");
        assert!(compute_rho0(0.0, 1.0, 0.5, 0.5).is_err());
        assert!(compute_rho0(1.0, 0.5, 0.5, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn rho0_increasing_in_t(s in 0.01f64..1.0, d1 in 0.0f64..1.0, d2 in 1e-6f64..1.0, beta in 0.05f64..1.0, g in 0.05f64..0.5) {
            let a = compute_rho0(s, s + d1, beta, g).unwrap();
            let b = compute_rho0(s, s + d1 + d2, beta, g).unwrap();
            prop_assert!(b > a);
        }

        #[test]
        fn delta_formula(eps in 1e-6f64..0.99, lam in 0.0f64..3.0, c in 0.1f64..10.0) {
            let d = khasminskii_delta(eps, lam, c).unwrap();
            let oracle = (2.0 / c) * eps * (-eps.ln()).powf(lam / 2.0);
            prop_assert!((d - oracle).abs() <= 1e-12 * oracle.max(1.0));
        }
    }
}
