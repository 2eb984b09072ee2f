//! Counter-based random streams, Q-Wiener increments and exact per-mode
//! Ornstein–Uhlenbeck updates.
//!
//! Every stream is a ChaCha8 keystream keyed by the master seed, with the
//! 64-bit stream selector built from `(trajectory_id, role)`. Gaussians are
//! produced by Box–Muller from consecutive pairs of 53-bit uniforms, so the
//! `n`-th normal of a stream always comes from keystream words
//! `4⌊n/2⌋ .. 4⌊n/2⌋+4`. That makes [`RngStream::seek`] exact and lets
//! a recorded run replay its noise from any step.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{ModalField, SpectralOperator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    SlowNoise,
    FastNoise,
    FrozenFastNoise,
    Auxiliary,
}

impl RoleTag {
    fn index(self) -> u64 {
        match self {
            RoleTag::SlowNoise => 0,
            RoleTag::FastNoise => 1,
            RoleTag::FrozenFastNoise => 2,
            RoleTag::Auxiliary => 3,
        }
    }
}

const MAX_TRAJECTORY_ID: u64 = (1 << 62) - 1;

#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    trajectory_id: u64,
    role: RoleTag,
    counter: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl PartialEq for RngStream {
    fn eq(&self, other: &Self) -> bool {
        self.master_seed == other.master_seed
            && self.trajectory_id == other.trajectory_id
            && self.role == other.role
            && self.counter == other.counter
    }
}

/// Deterministic stream for `(master_seed, trajectory_id, role)`, positioned
/// at its first draw.
pub fn derive_stream(master_seed: u64, trajectory_id: u64, role: RoleTag) -> RngStream {
    assert!(
        trajectory_id <= MAX_TRAJECTORY_ID,
        "trajectory id {trajectory_id} exceeds 2^62 - 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream((trajectory_id << 2) | role.index());
    RngStream {
        master_seed,
        trajectory_id,
        role,
        counter: 0,
        rng,
        spare: None,
    }
}

impl RngStream {
    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn trajectory_id(&self) -> u64 {
        self.trajectory_id
    }

    pub fn role(&self) -> RoleTag {
        self.role
    }

    /// Number of standard normals drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    fn uniform_open(&mut self) -> f64 {
        // (0, 1]
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn uniform(&mut self) -> f64 {
        // [0, 1)
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        (r * c, r * s)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        self.counter += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z0, z1) = self.pair();
        self.spare = Some(z1);
        z0
    }

    pub fn fill_gaussian(&mut self, out: &mut [f64]) {
        for o in out.iter_mut() {
            *o = self.next_gaussian();
        }
    }

    /// Repositions the stream so that the next draw is normal number `counter`.
    pub fn seek(&mut self, counter: u64) {
        self.rng.set_word_pos(4 * u128::from(counter / 2));
        self.spare = None;
        self.counter = counter - counter % 2;
        if counter % 2 == 1 {
            self.next_gaussian();
        }
    }
}

/// Q-Wiener increment over a step `h`: mode `k` is `N(0, λ_k² h)`.
pub fn wiener_increment(op: &SpectralOperator, h: f64, stream: &mut RngStream) -> Result<ModalField> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("Wiener step must be positive, got {h}")));
    }
    let sqrt_h = h.sqrt();
    let coeffs = op
        .lambdas()
        .iter()
        .map(|l| {
            let z = stream.next_gaussian();
            l * sqrt_h * z
        })
        .collect();
    ModalField::from_coeffs(coeffs)
}

/// Per-mode coefficients of the exact exponential update of
/// `dz = eps⁻¹(−α z + f) dt + eps^{−1/2} λ dW` over a step `h` with `f`
/// held constant.
#[derive(Debug, Clone, PartialEq)]
pub struct OUStepPlan {
    decay: Vec<f64>,
    drift_weight: Vec<f64>,
    noise_std: Vec<f64>,
    h: f64,
    eps_eff: f64,
}

impl OUStepPlan {
    pub fn decay(&self) -> &[f64] {
        &self.decay
    }

    pub fn drift_weight(&self) -> &[f64] {
        &self.drift_weight
    }

    pub fn noise_std(&self) -> &[f64] {
        &self.noise_std
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn eps_eff(&self) -> f64 {
        self.eps_eff
    }

    pub fn n_modes(&self) -> usize {
        self.decay.len()
    }

    /// True when every mode has zero noise; such plans consume no draws.
    pub fn is_noiseless(&self) -> bool {
        self.noise_std.iter().all(|s| *s == 0.0)
    }
}

pub fn make_plan(op: &SpectralOperator, h: f64, eps_eff: f64) -> Result<OUStepPlan> {
    if !(h > 0.0) || !(eps_eff > 0.0) {
        return Err(Error::invalid(format!(
            "plan needs positive step and scale, got h = {h}, eps = {eps_eff}"
        )));
    }
    let n = op.n_modes();
    let mut decay = Vec::with_capacity(n);
    let mut drift_weight = Vec::with_capacity(n);
    let mut noise_std = Vec::with_capacity(n);
    for (a, l) in op.alphas().iter().zip(op.lambdas()) {
        let x = a * h / eps_eff;
        decay.push((-x).exp());
        // (1 − e^{−x})/α, the forcing enters as f/eps so eps cancels
        drift_weight.push(-(-x).exp_m1() / a);
        // λ²/eps · (1 − e^{−2x})/(2α/eps)
        noise_std.push((l * l * -(-2.0 * x).exp_m1() / (2.0 * a)).sqrt());
    }
    Ok(OUStepPlan {
        decay,
        drift_weight,
        noise_std,
        h,
        eps_eff,
    })
}

/// Draws the Gaussian part of one OU step. Noiseless plans draw nothing.
pub fn ou_noise(plan: &OUStepPlan, stream: &mut RngStream, out: &mut [f64]) {
    if plan.is_noiseless() {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    for (o, s) in out.iter_mut().zip(&plan.noise_std) {
        *o = s * stream.next_gaussian();
    }
}

/// Deterministic part `decay·z + drift_weight·forcing` plus a given noise
/// increment, in place.
pub fn ou_apply(plan: &OUStepPlan, z: &mut [f64], forcing: &[f64], noise: &[f64]) {
    for k in 0..z.len() {
        z[k] = plan.decay[k] * z[k] + plan.drift_weight[k] * forcing[k] + noise[k];
    }
}

/// One exact OU step with constant forcing.
pub fn ou_step(
    z: &ModalField,
    plan: &OUStepPlan,
    forcing: &ModalField,
    stream: &mut RngStream,
) -> Result<ModalField> {
    let n = plan.n_modes();
    z.check_len(n, "ou_step state")?;
    forcing.check_len(n, "ou_step forcing")?;
    let mut noise = vec![0.0; n];
    ou_noise(plan, stream, &mut noise);
    let mut out = z.coeffs().to_vec();
    ou_apply(plan, &mut out, forcing.coeffs(), &noise);
    ModalField::from_coeffs(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_op(alpha: f64, lambda: f64) -> SpectralOperator {
        SpectralOperator::new(vec![alpha], vec![lambda], 0.5).unwrap()
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    fn draws(mut s: RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| s.next_gaussian()).collect()
    }

    #[test]
    fn streams_are_deterministic() {
        let a = draws(derive_stream(7, 3, RoleTag::SlowNoise), 100);
        let b = draws(derive_stream(7, 3, RoleTag::SlowNoise), 100);
        assert_eq!(a, b);
    }

    #[test]
    fn trajectories_are_uncorrelated() {
        let a = draws(derive_stream(7, 0, RoleTag::SlowNoise), 10_000);
        let b = draws(derive_stream(7, 1, RoleTag::SlowNoise), 10_000);
        assert!(correlation(&a, &b).abs() < 0.03);
    }

    #[test]
    fn roles_are_uncorrelated() {
        let a = draws(derive_stream(7, 0, RoleTag::SlowNoise), 10_000);
        let b = draws(derive_stream(7, 0, RoleTag::FastNoise), 10_000);
        assert!(correlation(&a, &b).abs() < 0.03);
    }

    #[test]
    fn seek_matches_sequential() {
        let all = draws(derive_stream(11, 5, RoleTag::FastNoise), 41);
        for start in [0u64, 1, 2, 17, 40] {
            let mut s = derive_stream(11, 5, RoleTag::FastNoise);
            s.seek(start);
            assert_eq!(s.counter(), start);
            let rest: Vec<f64> = (start as usize..41).map(|_| s.next_gaussian()).collect();
            assert_eq!(&rest[..], &all[start as usize..]);
        }
    }

    #[test]
    fn wiener_variance_band() {
        let op = scalar_op(1.0, 1.0);
        let mut s = derive_stream(1, 0, RoleTag::SlowNoise);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| wiener_increment(&op, 0.25, &mut s).unwrap().mode(1))
            .collect();
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
        assert!((0.2450..=0.2551).contains(&var), "variance {var}");
    }

    #[test]
    fn wiener_small_step_scaling() {
        let op = scalar_op(1.0, 1.0);
        let h = 1e-12;
        let mut s = derive_stream(2, 0, RoleTag::SlowNoise);
        let n = 10_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| wiener_increment(&op, h, &mut s).unwrap().mode(1))
            .collect();
        let std = (xs.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        assert!(std <= 2e-6);
        assert!((std / h.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn wiener_degenerate_mode_and_errors() {
        let op = SpectralOperator::new(vec![1.0, 4.0], vec![1.0, 0.0], 0.5).unwrap();
        let mut s = derive_stream(3, 0, RoleTag::SlowNoise);
        for _ in 0..100 {
            assert_eq!(wiener_increment(&op, 0.1, &mut s).unwrap().mode(2), 0.0);
        }
        assert!(wiener_increment(&op, 0.0, &mut s).is_err());
    }

    #[test]
    fn ou_deterministic_decay() {
        let plan = make_plan(&scalar_op(1.0, 0.0), 2f64.ln(), 1.0).unwrap();
        let mut s = derive_stream(0, 0, RoleTag::SlowNoise);
        let z = ModalField::unit(1, 1);
        let out = ou_step(&z, &plan, &ModalField::zeros(1), &mut s).unwrap();
        assert!((out.mode(1) - 0.5).abs() < 1e-15);
        assert_eq!(s.counter(), 0);
    }

    #[test]
    fn ou_forcing_fixed_point() {
        let plan = make_plan(&scalar_op(1.0, 0.0), 50.0, 1.0).unwrap();
        let mut s = derive_stream(0, 0, RoleTag::SlowNoise);
        let out = ou_step(
            &ModalField::zeros(1),
            &plan,
            &ModalField::unit(1, 1),
            &mut s,
        )
        .unwrap();
        assert!((out.mode(1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ou_stationary_variance() {
        let plan = make_plan(&scalar_op(1.0, 1.0), 0.5, 1.0).unwrap();
        let mut s = derive_stream(4, 0, RoleTag::FastNoise);
        let mut z = ModalField::zeros(1);
        let f = ModalField::zeros(1);
        // steps of 0.5 at rate 1 decorrelate quickly; thin by 4
        for _ in 0..50 {
            z = ou_step(&z, &plan, &f, &mut s).unwrap();
        }
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for _ in 0..4 {
                z = ou_step(&z, &plan, &f, &mut s).unwrap();
            }
            acc += z.mode(1).powi(2);
        }
        let var = acc / n as f64;
        assert!((0.49..=0.51).contains(&var), "variance {var}");
    }

    #[test]
    fn plan_limits_and_eps_independence() {
        for eps in [1.0, 0.01] {
            let p = make_plan(&scalar_op(1.0, 1.0), 1e3, eps).unwrap();
            assert_eq!(p.decay()[0], 0.0);
            assert!((p.noise_std()[0] - 0.5f64.sqrt()).abs() < 1e-15);
        }
        assert!(make_plan(&scalar_op(1.0, 1.0), 0.0, 1.0).is_err());
        assert!(make_plan(&scalar_op(1.0, 1.0), 0.1, 0.0).is_err());
    }

    #[test]
    fn plan_variance_partition_example() {
        let (a, l, h) = (2.0, 3.0, 0.7);
        let p = make_plan(&scalar_op(a, l), h, 1.0).unwrap();
        let lhs = p.noise_std()[0].powi(2) + l * l * p.decay()[0].powi(2) / (2.0 * a);
        assert!((lhs - l * l / (2.0 * a)).abs() < 1e-12);
    }

    #[test]
    fn ou_step_dimension_mismatch() {
        let plan = make_plan(&scalar_op(1.0, 1.0), 0.1, 1.0).unwrap();
        let mut s = derive_stream(0, 0, RoleTag::SlowNoise);
        assert!(ou_step(&ModalField::zeros(2), &plan, &ModalField::zeros(1), &mut s).is_err());
    }

    proptest! {
        #[test]
        fn variance_partition_identity(
            a in 0.01f64..500.0,
            l in 0.0f64..10.0,
            h in 1e-6f64..5.0,
            eps in 1e-3f64..1.0,
        ) {
            let p = make_plan(&scalar_op(a, l), h, eps).unwrap();
            let stat = l * l / (2.0 * a);
            let lhs = p.noise_std()[0].powi(2) + l * l * p.decay()[0].powi(2) / (2.0 * a);
            prop_assert!((lhs - stat).abs() <= 1e-12 * stat.max(1.0));
        }
    }
}
