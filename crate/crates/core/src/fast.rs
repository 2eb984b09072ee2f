//! The fast equation with its slow argument frozen,
//! `dv = [A₂v + F₂(x, v)] dt + Q₂ dW`, and everything measured from it:
//! time averages against the invariant measure `μ^x`, invariant moments,
//! and coupled-trajectory contraction diagnostics.
//!
//! Integration is exponential Euler. The linear damping `−b_c σ` of the
//! fast reaction is folded into the generator, the Gaussian convolution is
//! sampled exactly per mode, and only the remaining nonlinear part of `g`
//! is frozen over a step. For the linear benchmark the remainder is
//! constant in `v`, so the scheme is exact in law.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{derive_stream, make_plan, ou_apply, ou_noise, OUStepPlan, RngStream, RoleTag};
use crate::reaction::{fill_fast_remainder, validate_dissipativity, ReactionKind, ReactionSpec};
use crate::spectral::{GridSpec, ModalField, SpectralOperator, Transform};
use crate::stats::{compensated_sum, ls_slope, CompensatedSum};

/// Number of batches per replica for batch-means error bars.
pub const N_BATCHES: usize = 20;

#[derive(Debug, Clone)]
pub struct FrozenFastConfig {
    pub x: ModalField,
    pub op2: SpectralOperator,
    pub reaction_fast: ReactionSpec,
    pub grid: GridSpec,
    pub h: f64,
    pub t_burn: f64,
    pub t_avg: f64,
    pub n_replicas: usize,
    pub master_seed: u64,
}

impl FrozenFastConfig {
    /// Defaults: burn-in `10/ω`, averaging horizon `200/ω`.
    pub fn new(
        x: ModalField,
        op2: SpectralOperator,
        reaction_fast: ReactionSpec,
        grid: GridSpec,
        h: f64,
        n_replicas: usize,
        master_seed: u64,
    ) -> Result<Self> {
        let mut cfg = Self {
            x,
            op2,
            reaction_fast,
            grid,
            h,
            t_burn: 0.0,
            t_avg: 0.0,
            n_replicas,
            master_seed,
        };
        let omega = cfg.omega()?;
        cfg.t_burn = 10.0 / omega;
        cfg.t_avg = 200.0 / omega;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Dissipativity gap `ω = α_{2,1} − L₂`.
    pub fn omega(&self) -> Result<f64> {
        let l2 = self
            .reaction_fast
            .lipschitz()
            .ok_or_else(|| Error::invalid("frozen fast equation needs a fast reaction"))?;
        validate_dissipativity(self.op2.alphas()[0], l2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !(self.t_avg > 0.0) || !(self.t_burn >= 0.0) {
            return Err(Error::invalid(format!(
                "need h > 0, t_avg > 0, t_burn ≥ 0 (got {}, {}, {})",
                self.h, self.t_avg, self.t_burn
            )));
        }
        if self.n_replicas == 0 {
            return Err(Error::invalid("need at least one replica"));
        }
        let n = self.grid.n_modes();
        self.x.check_len(n, "frozen slow state")?;
        if self.op2.n_modes() != n {
            return Err(Error::invalid("fast operator and grid disagree on mode count"));
        }
        self.omega()?;
        Ok(())
    }

    pub fn burn_in_short(&self) -> bool {
        self.omega().map(|w| self.t_burn < 5.0 / w).unwrap_or(true)
    }

    pub fn with_x(&self, x: ModalField) -> Self {
        Self { x, ..self.clone() }
    }
}

/// One exponential-Euler step of size `h` of `dv = ε⁻¹[A₂v + g(x, v)]dt +
/// ε^{−1/2}Q₂dW` with `x` frozen. Shared by the frozen equation (`ε = 1`)
/// and the coupled system.
#[derive(Debug, Clone)]
pub(crate) struct FastKernel {
    reaction: ReactionSpec,
    plan: OUStepPlan,
    transform: Transform,
    linear_coupling: Option<f64>,
    v_phys: Vec<f64>,
    rem_phys: Vec<f64>,
    forcing: Vec<f64>,
    noise: Vec<f64>,
}

impl FastKernel {
    pub(crate) fn new(
        op2: &SpectralOperator,
        reaction: &ReactionSpec,
        grid: &GridSpec,
        h: f64,
        eps: f64,
    ) -> Result<Self> {
        let (_, b_c) = reaction
            .fast_linear_part()
            .ok_or_else(|| Error::invalid("fast kernel needs a fast reaction"))?;
        let plan = make_plan(&op2.shifted(b_c)?, h, eps)?;
        let linear_coupling = match reaction.kind() {
            ReactionKind::LinearFast { a_c, .. } => Some(*a_c),
            _ => None,
        };
        let n = grid.n_modes();
        let m = grid.n_quad();
        Ok(Self {
            reaction: reaction.clone(),
            plan,
            transform: Transform::new(*grid),
            linear_coupling,
            v_phys: vec![0.0; m],
            rem_phys: vec![0.0; m],
            forcing: vec![0.0; n],
            noise: vec![0.0; n],
        })
    }

    /// Advances `v` in place. `x` and `x_phys` are the frozen slow state.
    pub(crate) fn step(&mut self, v: &mut [f64], x: &[f64], x_phys: &[f64], stream: &mut RngStream) {
        match self.linear_coupling {
            Some(a_c) => {
                for (f, xk) in self.forcing.iter_mut().zip(x) {
                    *f = a_c * xk;
                }
            }
            None => {
                self.transform.synthesize_into(v, &mut self.v_phys);
                fill_fast_remainder(&self.reaction, x_phys, &self.v_phys, &mut self.rem_phys);
                self.transform.analyze_into(&self.rem_phys, &mut self.forcing);
            }
        }
        ou_noise(&self.plan, stream, &mut self.noise);
        ou_apply(&self.plan, v, &self.forcing, &self.noise);
    }
}

pub fn step_frozen_fast(v: &ModalField, cfg: &FrozenFastConfig, stream: &mut RngStream) -> Result<ModalField> {
    cfg.validate()?;
    v.check_len(cfg.grid.n_modes(), "fast state")?;
    let mut kernel = FastKernel::new(&cfg.op2, &cfg.reaction_fast, &cfg.grid, cfg.h, 1.0)?;
    let x_phys = Transform::new(cfg.grid).synthesize(&cfg.x)?;
    let mut out = v.coeffs().to_vec();
    kernel.step(&mut out, cfg.x.coeffs(), &x_phys, stream);
    ModalField::from_coeffs(out)
}

/// What an observable sees at one sampling instant.
pub struct FastSample<'a> {
    pub v: &'a [f64],
    pub v_phys: &'a [f64],
    pub x: &'a [f64],
    pub x_phys: &'a [f64],
    pub grid: &'a GridSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvariantAverageEstimate {
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Sample variance over squared standard error, for the first component,
    /// capped at the number of samples taken.
    pub n_effective: f64,
    pub t_burn: f64,
    pub t_avg: f64,
    pub n_replicas: usize,
    /// Burn-in shorter than `5/ω`.
    pub burn_in_short: bool,
}

fn steps_for(t: f64, h: f64) -> usize {
    // tolerate t/h landing a hair above an integer
    ((t / h) * (1.0 - 1e-12)).ceil().max(0.0) as usize
}

/// Time average over `[t_burn, t_burn + t_avg]` pooled over replicas, with
/// batch-means standard errors.
pub fn estimate_invariant_average<F>(cfg: &FrozenFastConfig, observable: F) -> Result<InvariantAverageEstimate>
where
    F: Fn(&FastSample) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let n_burn = steps_for(cfg.t_burn, cfg.h);
    let per_batch = steps_for(cfg.t_avg, cfg.h).div_ceil(N_BATCHES).max(1);
    let x_phys = Transform::new(cfg.grid).synthesize(&cfg.x)?;

    let replica_batches: Vec<Result<(Vec<Vec<f64>>, f64)>> = (0..cfg.n_replicas)
        .into_par_iter()
        .map(|r| {
            let mut kernel = FastKernel::new(&cfg.op2, &cfg.reaction_fast, &cfg.grid, cfg.h, 1.0)?;
            let transform = Transform::new(cfg.grid);
            let mut stream = derive_stream(cfg.master_seed, r as u64, RoleTag::FrozenFastNoise);
            let mut v = vec![0.0; cfg.grid.n_modes()];
            let mut v_phys = vec![0.0; cfg.grid.n_quad()];
            for _ in 0..n_burn {
                kernel.step(&mut v, cfg.x.coeffs(), &x_phys, &mut stream);
            }
            let mut batches = Vec::with_capacity(N_BATCHES);
            let mut first_sq = CompensatedSum::new();
            for _ in 0..N_BATCHES {
                let mut acc: Vec<CompensatedSum> = Vec::new();
                for _ in 0..per_batch {
                    kernel.step(&mut v, cfg.x.coeffs(), &x_phys, &mut stream);
                    transform.synthesize_into(&v, &mut v_phys);
                    let obs = observable(&FastSample {
                        v: &v,
                        v_phys: &v_phys,
                        x: cfg.x.coeffs(),
                        x_phys: &x_phys,
                        grid: &cfg.grid,
                    });
                    if acc.is_empty() {
                        acc = vec![CompensatedSum::new(); obs.len()];
                    }
                    first_sq.add(obs[0] * obs[0]);
                    for (a, o) in acc.iter_mut().zip(&obs) {
                        a.add(*o);
                    }
                }
                batches.push(acc.iter().map(|a| a.value() / per_batch as f64).collect());
            }
            Ok((batches, first_sq.value()))
        })
        .collect();

    let mut all: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_replicas * N_BATCHES);
    let mut first_sq = CompensatedSum::new();
    for r in replica_batches {
        let (batches, sq) = r?;
        all.extend(batches);
        first_sq.add(sq);
    }
    let dim = all[0].len();
    let nb = all.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut std_error = vec![0.0; dim];
    for c in 0..dim {
        let col: Vec<f64> = all.iter().map(|b| b[c]).collect();
        let m = compensated_sum(&col) / nb;
        let mut ss = CompensatedSum::new();
        for x in &col {
            ss.add((x - m) * (x - m));
        }
        let var = if nb > 1.0 { ss.value() / (nb - 1.0) } else { 0.0 };
        mean[c] = m;
        std_error[c] = (var / nb).sqrt();
    }
    let n_samples = (cfg.n_replicas * N_BATCHES * per_batch) as f64;
    let sample_var = (first_sq.value() / n_samples - mean[0] * mean[0]).max(0.0);
    let n_effective = if std_error[0] > 0.0 {
        (sample_var / (std_error[0] * std_error[0])).min(n_samples)
    } else {
        n_samples
    };
    Ok(InvariantAverageEstimate {
        mean,
        std_error,
        n_effective,
        t_burn: cfg.t_burn,
        t_avg: cfg.t_avg,
        n_replicas: cfg.n_replicas,
        burn_in_short: cfg.burn_in_short(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentRow {
    pub x_norm: f64,
    pub moment: f64,
    pub std_error: f64,
    /// `E_μ‖v‖^p / (c_p (1 + ‖x‖^p))`.
    pub ratio: f64,
}

/// Invariant moments `E_{μ^x}‖v‖^p` along the ray `s·cfg.x`.
pub fn invariant_moment_check(cfg: &FrozenFastConfig, p: u32, scales: &[f64], c_p: f64) -> Result<Vec<MomentRow>> {
    if !(p == 2 || p == 4) {
        return Err(Error::invalid(format!("moment order must be 2 or 4, got {p}")));
    }
    if !(c_p > 0.0) {
        return Err(Error::invalid("moment constant must be positive"));
    }
    scales
        .iter()
        .map(|s| {
            let sub = cfg.with_x(cfg.x.scaled(*s));
            let est = estimate_invariant_average(&sub, |smp| {
                let n2: f64 = smp.v.iter().map(|c| c * c).sum();
                vec![n2.powi(p as i32 / 2)]
            })?;
            let xn = sub.x.norm();
            Ok(MomentRow {
                x_norm: xn,
                moment: est.mean[0],
                std_error: est.std_error[0],
                ratio: est.mean[0] / (c_p * (1.0 + xn.powi(p as i32))),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionFit {
    /// Least-squares slope of `ln ‖v₁(t) − v₂(t)‖`.
    pub rate: f64,
    pub omega: f64,
    pub times: Vec<f64>,
    pub log_distance: Vec<f64>,
}

/// Two copies of the frozen equation started at `y1`, `y2` and driven by
/// the same noise; fits the exponential rate over `[0, 5/ω]`.
pub fn contraction_diagnostic(cfg: &FrozenFastConfig, y1: &ModalField, y2: &ModalField) -> Result<ContractionFit> {
    cfg.validate()?;
    let n = cfg.grid.n_modes();
    y1.check_len(n, "y1")?;
    y2.check_len(n, "y2")?;
    if y1 == y2 {
        return Err(Error::UndefinedFit("identical initial data".into()));
    }
    let omega = cfg.omega()?;
    let x_phys = Transform::new(cfg.grid).synthesize(&cfg.x)?;
    let mut k1 = FastKernel::new(&cfg.op2, &cfg.reaction_fast, &cfg.grid, cfg.h, 1.0)?;
    let mut k2 = k1.clone();
    let mut s1 = derive_stream(cfg.master_seed, 0, RoleTag::FrozenFastNoise);
    let mut s2 = s1.clone();
    let mut a = y1.coeffs().to_vec();
    let mut b = y2.coeffs().to_vec();
    let n_steps = steps_for(5.0 / omega, cfg.h).max(2);
    let mut times = Vec::with_capacity(n_steps);
    let mut logd = Vec::with_capacity(n_steps);
    for i in 1..=n_steps {
        k1.step(&mut a, cfg.x.coeffs(), &x_phys, &mut s1);
        k2.step(&mut b, cfg.x.coeffs(), &x_phys, &mut s2);
        let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        if !(d > f64::MIN_POSITIVE) {
            break;
        }
        times.push(i as f64 * cfg.h);
        logd.push(d.ln());
    }
    if times.len() < 2 {
        return Err(Error::UndefinedFit("distance collapsed before two samples".into()));
    }
    Ok(ContractionFit {
        rate: ls_slope(&times, &logd),
        omega,
        times,
        log_distance: logd,
    })
}

/// `sup_t ‖v^{x₁,y}(t) − v^{x₂,y}(t)‖ / ‖x₁ − x₂‖` over `[0, t_burn + t_avg]`
/// under common noise.
pub fn frozen_lipschitz_in_x(cfg: &FrozenFastConfig, x1: &ModalField, x2: &ModalField, y: &ModalField) -> Result<f64> {
    cfg.validate()?;
    let n = cfg.grid.n_modes();
    x1.check_len(n, "x1")?;
    x2.check_len(n, "x2")?;
    y.check_len(n, "y")?;
    let dx = x1.sub(x2).norm();
    if !(dx > 0.0) {
        return Err(Error::UndefinedFit("identical slow arguments".into()));
    }
    let transform = Transform::new(cfg.grid);
    let p1 = transform.synthesize(x1)?;
    let p2 = transform.synthesize(x2)?;
    let mut k1 = FastKernel::new(&cfg.op2, &cfg.reaction_fast, &cfg.grid, cfg.h, 1.0)?;
    let mut k2 = k1.clone();
    let mut s1 = derive_stream(cfg.master_seed, 0, RoleTag::FrozenFastNoise);
    let mut s2 = s1.clone();
    let mut a = y.coeffs().to_vec();
    let mut b = y.coeffs().to_vec();
    let mut sup: f64 = 0.0;
    for _ in 0..steps_for(cfg.t_burn + cfg.t_avg, cfg.h) {
        k1.step(&mut a, x1.coeffs(), &p1, &mut s1);
        k2.step(&mut b, x2.coeffs(), &p2, &mut s2);
        let d: f64 = a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        sup = sup.max(d);
    }
    Ok(sup / dx)
}
