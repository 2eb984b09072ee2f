//! Monte Carlo invariants of the frozen fast equation, the averaged drift and
//! the coupled scheme.

use serde_json::{json, Value};
use slowfast_core::fast::{contraction_diagnostic, step_frozen_fast};
use slowfast_core::harness::experiments::run_convergence_study;
use slowfast_core::harness::parse_config_str;
use slowfast_core::stats::{ls_slope, Estimate};
use slowfast_core::{
    derive_stream, estimate_fbar, estimate_invariant_average, estimate_vbar, simulate_slowfast, AveragedDriftParams,
    FrozenFastConfig, ModalField, ModelSpec, ReactionSpec, RoleTag, SimOptions, SlowFastStreams,
};

fn config(slow: Value, fast: Value, patch: impl FnOnce(&mut Value)) -> Value {
    let mut v = json!({
        "model": {
            "n_modes": 4,
            "slow_operator": {"kind": "dirichlet", "diffusivity": 1.0, "noise_amplitude": 0.3, "noise_decay": 1.0, "gamma": 0.25},
            "fast_operator": {"kind": "dirichlet", "diffusivity": 1.0, "noise_amplitude": 0.5, "noise_decay": 1.0, "gamma": 0.25},
            "reaction_slow": slow,
            "reaction_fast": fast,
            "u0": [1.0]
        },
        "epsilon_grid": [0.1, 0.02, 0.004],
        "ensemble_size": 100,
        "test_functions": [{"modes": [1.0]}],
        "master_seed": 11
    });
    patch(&mut v);
    v
}

fn model(v: &Value) -> ModelSpec {
    parse_config_str(&v.to_string()).unwrap().model
}

fn linear(patch: impl FnOnce(&mut Value)) -> ModelSpec {
    model(&config(json!({"type": "linear_slow"}), json!({"type": "linear_fast", "a_c": 1.0, "b_c": 2.0}), patch))
}

fn frozen(m: &ModelSpec, x: ModalField, replicas: usize) -> FrozenFastConfig {
    FrozenFastConfig::new(x, m.op2.clone(), m.reaction_fast.clone(), m.grid, 0.01, replicas, 5).unwrap()
}

#[test]
fn time_and_ensemble_averages_agree() {
    let m = linear(|_| {});
    let cfg = frozen(&m, ModalField::unit(4, 1), 16);
    let time = estimate_invariant_average(&cfg, |s| vec![s.v[0]]).unwrap();
    let time = Estimate {
        mean: time.mean[0],
        std_error: time.std_error[0],
        n: 0,
    };
    // independent chains run past burn-in, one terminal sample each
    let steps = ((cfg.t_burn + 2.0) / cfg.h).ceil() as usize;
    let samples: Vec<f64> = (0..2000u64)
        .map(|r| {
            let mut s = derive_stream(99, r, RoleTag::Auxiliary);
            let mut v = ModalField::zeros(4);
            for _ in 0..steps {
                v = step_frozen_fast(&v, &cfg, &mut s).unwrap();
            }
            v.mode(1)
        })
        .collect();
    let ens = Estimate::from_samples(&samples);
    let sig = time.std_error.hypot(ens.std_error);
    assert!((time.mean - ens.mean).abs() <= 3.0 * sig, "{time:?} vs {ens:?}");
}

#[test]
fn contraction_is_monotone_after_smoothing() {
    for fast in [ReactionSpec::linear_fast(1.0, 2.0), ReactionSpec::lipschitz_fast(1.0, 2.0, 1.5)] {
        let m = linear(|_| {});
        let mut cfg = frozen(&m, ModalField::unit(4, 1), 1);
        cfg.reaction_fast = fast;
        cfg.h = 1e-3;
        assert!(cfg.omega().unwrap() > 0.0);
        let y1 = ModalField::zeros(4);
        let y2 = ModalField::from_coeffs(vec![1.0, -0.5, 0.25, 2.0]).unwrap();
        let fit = contraction_diagnostic(&cfg, &y1, &y2).unwrap();
        let w = 10;
        let smooth: Vec<f64> = fit.log_distance.windows(w).map(|x| x.iter().sum::<f64>() / w as f64).collect();
        assert!(smooth.windows(2).all(|p| p[1] <= p[0] + 1e-12), "{:?}", cfg.reaction_fast);
        assert!(fit.rate <= -fit.omega * (1.0 - 1e-9), "rate {} vs ω {}", fit.rate, fit.omega);
    }
}

#[test]
fn stationary_start_shows_no_drift() {
    let m = linear(|_| {});
    let cfg = frozen(&m, ModalField::unit(4, 1), 1);
    let burn = (cfg.t_burn / cfg.h).ceil() as usize;
    let len = (cfg.t_avg / cfg.h / 20.0).ceil() as usize;
    let times: Vec<f64> = (0..len).map(|i| i as f64 * cfg.h).collect();
    // one slope per independent stationary replica
    let slopes: Vec<f64> = (0..200u64)
        .map(|r| {
            let mut s = derive_stream(17, r, RoleTag::Auxiliary);
            let mut v = ModalField::zeros(4);
            for _ in 0..burn {
                v = step_frozen_fast(&v, &cfg, &mut s).unwrap();
            }
            let sq: Vec<f64> = times
                .iter()
                .map(|_| {
                    v = step_frozen_fast(&v, &cfg, &mut s).unwrap();
                    v.norm_squared()
                })
                .collect();
            ls_slope(&times, &sq)
        })
        .collect();
    let e = Estimate::from_samples(&slopes);
    assert!((e.mean / e.std_error).abs() < 2.5758, "slope {e:?}");
}

#[test]
fn estimator_matches_oracle_at_random_states() {
    let m = linear(|v| v["model"]["fast_operator"]["noise_amplitude"] = json!(0.3));
    let params = AveragedDriftParams {
        t_avg: Some(40.0),
        n_replicas: 8,
        master_seed: 3,
        ..Default::default()
    };
    let mut s = derive_stream(8, 0, RoleTag::Auxiliary);
    for _ in 0..20 {
        let mut x: Vec<f64> = (0..4).map(|_| s.next_gaussian()).collect();
        let r = 2.0 * s.next_gaussian().abs().min(1.0) / x.iter().map(|c| c * c).sum::<f64>().sqrt();
        x.iter_mut().for_each(|c| *c *= r);
        let x = ModalField::from_coeffs(x).unwrap();
        let (mean, se) = estimate_fbar(0.0, &x, &params, &m).unwrap();
        for k in 1..=4 {
            let oracle = x.mode(k) / (std::f64::consts::PI.powi(2) * (k * k) as f64 + 2.0);
            assert!((mean.mode(k) - oracle).abs() <= 3.0 * se.mode(k) + 1e-12, "x = {x:?}, mode {k}");
        }
    }
}

#[test]
fn truncation_gap_bounded_by_vbar() {
    let m = model(&config(
        json!({"type": "cubic_rough", "c_u": 1.0, "c_v": 0.5}),
        json!({"type": "linear_fast", "a_c": 1.0, "b_c": 2.0}),
        |_| {},
    ));
    let base = AveragedDriftParams {
        t_avg: Some(20.0),
        n_replicas: 4,
        master_seed: 21,
        ..Default::default()
    };
    for x in [ModalField::unit(4, 1), ModalField::from_coeffs(vec![0.5, -0.3, 0.2, 0.0]).unwrap()] {
        let (raw, _) = estimate_fbar(0.0, &x, &AveragedDriftParams { theta: 0.0, ..base }, &m).unwrap();
        let vbar = estimate_vbar(&x, &m, &base).unwrap();
        for theta in [0.1, 0.01] {
            let (tr, _) = estimate_fbar(0.0, &x, &AveragedDriftParams { theta, ..base }, &m).unwrap();
            let gap = raw.sub(&tr).norm_squared();
            assert!(gap <= theta * (vbar.mean + 3.0 * vbar.std_error), "θ = {theta}: {gap} vs V̄ = {vbar:?}");
        }
    }
}

#[test]
fn fast_clock_matches_eps_over_alpha() {
    let eps = 0.01;
    let m = linear(|v| {
        v["model"]["reaction_fast"] = json!({"type": "linear_fast", "a_c": 0.0, "b_c": 0.0});
        v["model"]["horizon"] = json!(10.0);
        v["model"]["h_macro"] = json!(1e-4);
        v["model"]["epsilon"] = json!(eps);
    });
    let alpha = m.op2.alphas()[0];
    let tau = eps / alpha;
    let opts = SimOptions {
        store_path: true,
        ..Default::default()
    };
    let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(4, 0), &opts).unwrap();
    let skip = (20.0 * tau / m.h_macro) as usize;
    let x: Vec<f64> = tr.v[skip..].iter().map(|v| v.mode(1)).collect();
    let lag = (tau / m.h_macro).round() as usize;
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|a| (a - mean).powi(2)).sum::<f64>();
    let cov: f64 = x.windows(lag + 1).map(|w| (w[0] - mean) * (w[lag] - mean)).sum();
    let rho = cov / var;
    let measured = lag as f64 * m.h_macro / -rho.ln();
    assert!((measured / tau - 1.0).abs() < 0.1, "τ = {measured} vs ε/α = {tau}");
}

fn sup_v_sq(m: &ModelSpec, eps: f64, n: u64) -> Estimate {
    let m = m.with_epsilon(eps);
    let xs: Vec<f64> = (0..n)
        .map(|id| {
            simulate_slowfast(&m, &mut SlowFastStreams::new(6, id), &SimOptions::default())
                .unwrap()
                .functionals
                .sup_v_sq
        })
        .collect();
    Estimate::from_samples(&xs)
}

#[test]
fn fast_moments_are_uniform_in_eps() {
    let m = linear(|v| {
        v["model"]["v0"] = json!([0.5]);
        v["model"]["h_macro"] = json!(1e-3);
    });
    let est: Vec<Estimate> = [0.1, 0.02, 0.004].iter().map(|e| sup_v_sq(&m, *e, 100)).collect();
    let max = est.iter().map(|e| e.mean).fold(0.0, f64::max);
    let min = est.iter().map(|e| e.mean).fold(f64::INFINITY, f64::min);
    assert!(max / min <= 2.0, "{est:?}");
    // one-sided 5% test against growth as ε shrinks
    let (a, b) = (&est[0], &est[2]);
    assert!((b.mean - a.mean) / a.std_error.hypot(b.std_error) < 1.645, "{est:?}");
}

#[test]
fn censoring_is_counted_in_every_row() {
    let mut v = config(json!({"type": "linear_slow"}), json!({"type": "linear_fast", "a_c": 1.0, "b_c": 2.0}), |v| {
        v["model"]["horizon"] = json!(0.5);
        v["model"]["h_macro"] = json!(1e-2);
        v["model"]["slow_operator"]["noise_amplitude"] = json!(1.0);
        v["ensemble_size"] = json!(200);
        v["observables"] = json!([{"type": "mode", "k": 1}, {"type": "norm_squared"}]);
    });
    // a guard just above the typical excursion censors a minority
    v["model"]["explosion_bound"] = json!(1.25);
    let l = parse_config_str(&v.to_string()).unwrap();
    let t = run_convergence_study(&l).unwrap();
    let mut censored_any = false;
    for r in t.rows.iter().filter(|r| r.epsilon.is_some() && r.n > 0) {
        assert_eq!(r.n + r.censored_count, 200, "{r:?}");
        censored_any |= r.censored_count > 0;
    }
    assert!(censored_any, "guard did not censor anything");
}
