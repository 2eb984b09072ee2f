//! Ensemble experiments over an ε grid. Trajectories run on a worker pool,
//! are collected in trajectory order and reduced with compensated sums, so
//! every table is independent of the worker count.

use std::path::PathBuf;

use rayon::prelude::*;

use crate::averaging::{
    linear_averaged_mean, linear_averaged_variance, estimate_fbar, estimate_vbar, sample_vbar_gaussian,
    AveragedDriftParams, DriftProvider, DriftSource,
};
use crate::error::{Error, Result};
use crate::fast::estimate_invariant_average;
use crate::harness::config::{LoadedConfig, Observable, MAX_CENSORED_FRACTION};
use crate::harness::results::{csv_bytes, emit_results, fmt_f64, write_csv_with_sidecar, ResultTable, RunMeta};
use crate::noise::{derive_stream, RoleTag};
use crate::reaction::{eval_v, ReactionKind};
use crate::slowfast::{
    auxiliary_error_stats, build_auxiliary, compute_rho0, khasminskii_delta, path_aux_errors, simulate_slowfast,
    KhasminskiiPlan, ModelSpec, PathAuxErrors, SimOptions, SlowFastStreams, Trajectory,
};
use crate::spectral::{ModalField, Transform};
use crate::stats::{CompensatedSum, Estimate};

/// Trajectory ids of fine-ε reference runs start here, keeping their noise
/// independent of the grid runs.
pub const REFERENCE_ID_BASE: u64 = 1 << 40;

pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Uncensored results in trajectory order.
#[derive(Debug, Clone)]
pub struct Ensemble<T> {
    pub values: Vec<T>,
    pub censored: usize,
    pub total: usize,
}

impl<T> Ensemble<T> {
    pub fn estimate(&self, f: impl Fn(&T) -> f64) -> Estimate {
        Estimate::from_samples(&self.values.iter().map(f).collect::<Vec<_>>())
    }
}

/// Runs `f(id)` for `id` in `base..base + n`. State explosions are counted
/// as censored; any other error aborts. More than 20% censoring is an error.
pub fn run_ensemble<T, F>(pool: &rayon::ThreadPool, base: u64, n: usize, f: F) -> Result<Ensemble<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = pool.install(|| (0..n as u64).into_par_iter().map(|i| f(base + i)).collect());
    let mut values = Vec::with_capacity(n);
    let mut censored = 0;
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(Error::StateExplosion { .. }) => censored += 1,
            Err(e) => return Err(e),
        }
    }
    if censored as f64 > MAX_CENSORED_FRACTION * n as f64 {
        return Err(Error::ExcessiveCensoring { censored, total: n });
    }
    Ok(Ensemble {
        values,
        censored,
        total: n,
    })
}

fn observables(loaded: &LoadedConfig) -> Vec<Observable> {
    if loaded.config.observables.is_empty() {
        vec![Observable::Mode { k: 1 }]
    } else {
        loaded.config.observables.clone()
    }
}

fn is_analytic_linear(model: &ModelSpec) -> bool {
    matches!(DriftSource::exact_for(model), Some(DriftSource::AnalyticLinear))
}

/// `E φ(ū(T))` in closed form for the linear benchmark.
pub fn analytic_reference(model: &ModelSpec, obs: &Observable) -> Result<f64> {
    let mean = linear_averaged_mean(model, &model.u0, model.horizon)?;
    Ok(match obs {
        Observable::Mode { k } => mean.mode(*k),
        Observable::NormSquared => {
            mean.norm_squared() + linear_averaged_variance(model, model.horizon)?.iter().sum::<f64>()
        }
    })
}

struct ConvergenceSample {
    obs: Vec<f64>,
    d_sup: Vec<f64>,
}

/// Discrepancy functional `D(ε)` and weak errors `e_φ(ε)` over the ε grid.
pub fn run_convergence_study(loaded: &LoadedConfig) -> Result<ResultTable> {
    const ID: &str = "convergence";
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let provider = DriftProvider::for_model(model, &cfg.averaged)?;
    let obs = observables(loaded);
    let n = cfg.ensemble_size;

    let run = |m: &ModelSpec, base: u64, with_tests: bool| -> Result<Ensemble<ConvergenceSample>> {
        let opts = SimOptions {
            test_functions: if with_tests { cfg.test_functions.clone() } else { Vec::new() },
            fbar: Some(provider.source()),
            store_path: false,
        };
        run_ensemble(&pool, base, n, |id| {
            let tr = simulate_slowfast(m, &mut SlowFastStreams::new(cfg.master_seed, id), &opts)?;
            let end = tr.terminal();
            Ok(ConvergenceSample {
                obs: obs.iter().map(|o| o.eval(&end.u)).collect(),
                d_sup: tr.functionals.discrepancy_sup,
            })
        })
    };

    let mut table = ResultTable::new();
    let reference: Vec<Estimate> = if is_analytic_linear(model) {
        obs.iter()
            .map(|o| {
                analytic_reference(model, o).map(|v| Estimate {
                    mean: v,
                    std_error: 0.0,
                    n: 0,
                })
            })
            .collect::<Result<_>>()?
    } else {
        let eps_ref = cfg.epsilon_grid.last().unwrap() / 5.0;
        let ens = run(&model.with_epsilon(eps_ref), REFERENCE_ID_BASE, false)?;
        (0..obs.len())
            .map(|k| {
                let e = ens.estimate(|s| s.obs[k]);
                table.push_estimate(ID, Some(eps_ref), format!("reference_run_{}", obs[k].id()), &e, ens.censored);
                e
            })
            .collect()
    };
    for (o, r) in obs.iter().zip(&reference) {
        table.push_estimate(ID, None, format!("reference_{}", o.id()), r, 0);
    }

    for &eps in &cfg.epsilon_grid {
        let ens = run(&model.with_epsilon(eps), 0, true)?;
        for i in 0..cfg.test_functions.len() {
            let d = ens.estimate(|s| s.d_sup[i]);
            table.push_estimate(ID, Some(eps), format!("D_xi{i}"), &d, ens.censored);
        }
        for (k, o) in obs.iter().enumerate() {
            let e = ens.estimate(|s| s.obs[k]);
            table.push_estimate(ID, Some(eps), format!("mean_{}", o.id()), &e, ens.censored);
            table.push(
                ID,
                Some(eps),
                format!("weak_{}", o.id()),
                (e.mean - reference[k].mean).abs(),
                e.std_error.hypot(reference[k].std_error),
                e.n,
                ens.censored,
            );
        }
    }
    Ok(table)
}

struct AuditSample {
    v_ratio: f64,
    u_mom: Vec<f64>,
    v_mom: Vec<f64>,
    vbar: Option<f64>,
}

fn sample_indices(n_steps: usize, k: usize) -> Vec<usize> {
    let k = k.min(n_steps + 1).max(2);
    let mut idx: Vec<usize> = (0..k)
        .map(|i| ((i as f64) * n_steps as f64 / (k - 1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

/// `sup_t` of the ensemble mean of a time series; error bar at the maximizer.
fn sup_of_means(ens: &Ensemble<AuditSample>, series: impl Fn(&AuditSample) -> &[f64]) -> Estimate {
    let len = ens.values.first().map(|s| series(s).len()).unwrap_or(0);
    let mut best: Option<Estimate> = None;
    for i in 0..len {
        let e = ens.estimate(|s| series(s)[i]);
        if best.map_or(true, |b| e.mean > b.mean) {
            best = Some(e);
        }
    }
    best.unwrap_or(Estimate {
        mean: f64::NAN,
        std_error: f64::NAN,
        n: 0,
    })
}

/// `V̄(x)`: exact Gaussian sampling for linear fast reactions, time averages
/// otherwise.
fn vbar_at(model: &ModelSpec, params: &AveragedDriftParams, x: &ModalField, samples: usize, id: u64, seed: u64, call: u64) -> Result<f64> {
    if matches!(model.reaction_fast.kind(), ReactionKind::LinearFast { .. }) {
        let mut s = derive_stream(seed, id, RoleTag::Auxiliary);
        // disjoint blocks of the auxiliary stream per evaluation point
        s.seek(call * 4 * samples as u64 * x.n_modes() as u64);
        Ok(sample_vbar_gaussian(x, model, samples, &mut s)?.mean)
    } else {
        let p = AveragedDriftParams {
            n_replicas: samples.max(1),
            master_seed: seed ^ id.rotate_left(17) ^ call,
            ..*params
        };
        Ok(estimate_vbar(x, model, &p)?.mean)
    }
}

/// Moment audit over the ε grid; passes when every statistic's max/min ratio
/// across ε is at most 3.
pub fn run_moment_audit(loaded: &LoadedConfig) -> Result<ResultTable> {
    const ID: &str = "moment_audit";
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let audit = cfg.audit;
    let lyap = model.lyapunov;
    let v0 = model.initial_v();
    let pu = 4.0 * lyap.m1;
    let pv = lyap.q_bar();
    let n_steps = model.n_steps();
    let t_idx = sample_indices(n_steps, audit.time_samples);
    let vb_idx = sample_indices(n_steps, audit.vbar_points);
    let opts = SimOptions {
        store_path: true,
        ..Default::default()
    };

    let mut table = ResultTable::new();
    let stats = ["v_integral_ratio", "u_moment_sup", "v_moment_sup", "vbar_integral"];
    let mut per_eps: Vec<[f64; 4]> = Vec::new();
    let mut censored_total = 0;
    for &eps in &cfg.epsilon_grid {
        let m = model.with_epsilon(eps);
        let tr = Transform::new(m.grid);
        let ens = run_ensemble(&pool, 0, cfg.ensemble_size, |id| {
            let path = simulate_slowfast(&m, &mut SlowFastStreams::new(cfg.master_seed, id), &opts)?;
            let mut up = vec![0.0; m.grid.n_quad()];
            let mut vp = vec![0.0; m.grid.n_quad()];
            let mut u_mom = Vec::with_capacity(t_idx.len());
            let mut v_mom = Vec::with_capacity(t_idx.len());
            for &i in &t_idx {
                tr.synthesize_into(path.u[i].coeffs(), &mut up);
                tr.synthesize_into(path.v[i].coeffs(), &mut vp);
                u_mom.push(m.grid.lp_integral(&up, pu));
                v_mom.push(m.grid.lp_integral(&vp, pv));
            }
            let vbar = if (id as usize) < audit.vbar_trajectories {
                let mut acc = CompensatedSum::new();
                for (c, w) in vb_idx.windows(2).enumerate() {
                    let a = vbar_at(&m, &cfg.averaged, &path.u[w[0]], audit.vbar_samples, id, cfg.master_seed, 2 * c as u64)?;
                    let b = vbar_at(&m, &cfg.averaged, &path.u[w[1]], audit.vbar_samples, id, cfg.master_seed, 2 * c as u64 + 1)?;
                    acc.add(0.5 * (a + b) * (path.times[w[1]] - path.times[w[0]]));
                }
                Some(acc.value())
            } else {
                None
            };
            Ok(AuditSample {
                v_ratio: path.functionals.v_integral / v0,
                u_mom,
                v_mom,
                vbar,
            })
        })?;
        censored_total += ens.censored;
        let vr = ens.estimate(|s| s.v_ratio);
        let um = sup_of_means(&ens, |s| &s.u_mom);
        let vm = sup_of_means(&ens, |s| &s.v_mom);
        let vb: Vec<f64> = ens.values.iter().filter_map(|s| s.vbar).collect();
        let vb = Estimate::from_samples(&vb);
        for (name, e) in stats.iter().zip([&vr, &um, &vm, &vb]) {
            table.push_estimate(ID, Some(eps), *name, e, ens.censored);
        }
        table.push(
            ID,
            Some(eps),
            "censored_fraction",
            ens.censored as f64 / ens.total as f64,
            0.0,
            ens.total,
            ens.censored,
        );
        per_eps.push([vr.mean, um.mean, vm.mean, vb.mean]);
    }
    let mut pass = true;
    for (k, name) in stats.iter().enumerate() {
        let col: Vec<f64> = per_eps.iter().map(|r| r[k]).collect();
        let ratio = max_min_ratio(&col);
        pass &= ratio <= 3.0;
        table.push(ID, None, format!("ratio_{name}"), ratio, 0.0, col.len(), censored_total);
    }
    table.push(ID, None, "audit_pass", if pass { 1.0 } else { 0.0 }, 0.0, per_eps.len(), censored_total);
    Ok(table)
}

pub fn max_min_ratio(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    if min > 0.0 {
        max / min
    } else if max == min {
        1.0
    } else {
        f64::INFINITY
    }
}

/// Dyadic pairs `(a, b)` of grid indices on `T·i/2^L` with `a ≥ 1` and
/// `b − a ∈ {0} ∪ {2^j}`.
pub fn dyadic_pairs(level: u32) -> Vec<(usize, usize)> {
    let m = 1usize << level;
    let mut out = Vec::new();
    for a in 1..=m {
        out.push((a, a));
        let mut d = 1;
        while a + d <= m {
            out.push((a, a + d));
            d *= 2;
        }
    }
    out
}

/// Empirical `E‖u(t) − u(s)‖²` over dyadic pairs against `c·ρ₀(s, t)` with
/// `c` fitted on the largest ε.
pub fn run_holder_stats(loaded: &LoadedConfig) -> Result<ResultTable> {
    const ID: &str = "holder";
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let level = cfg.audit.dyadic_level;
    let pairs = dyadic_pairs(level);
    let m = 1usize << level;
    let n_steps = model.n_steps();
    let h = model.h_macro;
    let grid_idx: Vec<usize> = (0..=m).map(|i| ((i * n_steps) as f64 / m as f64).round() as usize).collect();
    let opts = SimOptions {
        store_path: true,
        ..Default::default()
    };
    let rho: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| {
            compute_rho0(
                grid_idx[*a] as f64 * h,
                grid_idx[*b] as f64 * h,
                model.holder_beta,
                model.gamma1_star(),
            )
        })
        .collect::<Result<_>>()?;

    let mut table = ResultTable::new();
    let mut calibration: Option<f64> = None;
    for &eps in &cfg.epsilon_grid {
        let me = model.with_epsilon(eps);
        let ens = run_ensemble(&pool, 0, cfg.ensemble_size, |id| {
            let path = simulate_slowfast(&me, &mut SlowFastStreams::new(cfg.master_seed, id), &opts)?;
            Ok(pairs
                .iter()
                .map(|(a, b)| path.u[grid_idx[*b]].sub(&path.u[grid_idx[*a]]).norm_squared())
                .collect::<Vec<f64>>())
        })?;
        let means: Vec<Estimate> = (0..pairs.len()).map(|k| ens.estimate(|s| s[k])).collect();
        for ((a, b), e) in pairs.iter().zip(&means) {
            table.push_estimate(ID, Some(eps), format!("incr_s{a}_t{b}"), e, ens.censored);
        }
        let ratio_max = pairs
            .iter()
            .zip(&means)
            .zip(&rho)
            .filter(|(((a, b), _), _)| a != b)
            .map(|((_, e), r)| e.mean / r)
            .fold(0.0, f64::max);
        let c = *calibration.get_or_insert(ratio_max);
        table.push(ID, Some(eps), "headroom", if c > 0.0 { ratio_max / c } else { 0.0 }, 0.0, ens.values.len(), ens.censored);
    }
    for ((a, b), r) in pairs.iter().zip(&rho) {
        table.push(ID, None, format!("rho0_s{a}_t{b}"), *r, 0.0, 0, 0);
    }
    table.push(ID, None, "calibration", calibration.unwrap_or(f64::NAN), 0.0, 0, 0);
    Ok(table)
}

struct ThetaSample {
    v_int: Vec<f64>,
    dist: Vec<f64>,
}

/// Common-noise comparison of truncation levels at the model's ε.
pub fn run_theta_stability(loaded: &LoadedConfig, thetas: &[f64]) -> Result<ResultTable> {
    const ID: &str = "theta_stability";
    let cfg = &loaded.config;
    let model = &loaded.model;
    if thetas.len() < 2 {
        return Err(Error::Config("θ-stability needs at least two levels".into()));
    }
    if thetas.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(format!("θ sequence must be nonincreasing: {thetas:?}")));
    }
    let pool = worker_pool(cfg.worker_count)?;
    let opts = SimOptions {
        store_path: true,
        ..Default::default()
    };
    let ens = run_ensemble(&pool, 0, cfg.ensemble_size, |id| {
        let paths: Vec<Trajectory> = thetas
            .iter()
            .map(|th| simulate_slowfast(&model.with_theta(*th), &mut SlowFastStreams::new(cfg.master_seed, id), &opts))
            .collect::<Result<_>>()?;
        let dist = paths
            .windows(2)
            .map(|w| {
                w[0].u
                    .iter()
                    .zip(&w[1].u)
                    .map(|(a, b)| a.sub(b).norm())
                    .fold(0.0, f64::max)
            })
            .collect();
        Ok(ThetaSample {
            v_int: paths.iter().map(|p| p.functionals.v_integral).collect(),
            dist,
        })
    })?;
    let eps = Some(model.epsilon);
    let mut table = ResultTable::new();
    let mut vints = Vec::new();
    for (k, th) in thetas.iter().enumerate() {
        let e = ens.estimate(|s| s.v_int[k]);
        table.push_estimate(ID, eps, format!("v_integral_theta{}", fmt_f64(*th)), &e, ens.censored);
        vints.push(e.mean);
    }
    let mut dists = Vec::new();
    for k in 0..thetas.len() - 1 {
        let e = ens.estimate(|s| s.dist[k]);
        table.push_estimate(
            ID,
            eps,
            format!("distance_theta{}_theta{}", fmt_f64(thetas[k]), fmt_f64(thetas[k + 1])),
            &e,
            ens.censored,
        );
        dists.push(e.mean);
    }
    let decreasing = dists.windows(2).all(|w| w[1] < w[0]);
    let ratio = max_min_ratio(&vints);
    table.push(ID, eps, "v_integral_ratio", ratio, 0.0, vints.len(), ens.censored);
    table.push(ID, eps, "distances_decreasing", if decreasing { 1.0 } else { 0.0 }, 0.0, dists.len(), ens.censored);
    table.push(
        ID,
        eps,
        "stable",
        if decreasing && ratio <= 2.0 { 1.0 } else { 0.0 },
        0.0,
        dists.len(),
        ens.censored,
    );
    Ok(table)
}

/// Khasminskii auxiliary errors over the ε grid with `δ = δ_ε`.
pub fn run_khasminskii_study(loaded: &LoadedConfig) -> Result<ResultTable> {
    const ID: &str = "khasminskii";
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let opts = SimOptions {
        store_path: true,
        ..Default::default()
    };
    let mut table = ResultTable::new();
    for &eps in &cfg.epsilon_grid {
        let m = model.with_epsilon(eps);
        let delta = khasminskii_delta(eps, m.lambda_exp, m.c_const)?;
        let plan = KhasminskiiPlan::new(delta, m.horizon, m.h_macro, m.c_const)?;
        let ens = run_ensemble(&pool, 0, cfg.ensemble_size, |id| {
            let tr = simulate_slowfast(&m, &mut SlowFastStreams::new(cfg.master_seed, id), &opts)?;
            let aux = build_auxiliary(&tr, &plan, &m)?;
            path_aux_errors(&tr, &aux)
        })?;
        let paths: Vec<PathAuxErrors> = ens.values;
        let stats = auxiliary_error_stats(&paths)?;
        table.push(ID, Some(eps), "delta", delta, 0.0, 0, 0);
        table.push(ID, Some(eps), "delta_used", plan.delta, 0.0, 0, 0);
        table.push(ID, Some(eps), "delta_over_eps", delta / eps, 0.0, 0, 0);
        table.push_estimate(ID, Some(eps), "slow_increment_sup", &stats.slow_increment, ens.censored);
        table.push_estimate(ID, Some(eps), "fast_deviation", &stats.fast_deviation, ens.censored);
    }
    Ok(table)
}

fn meta(loaded: &LoadedConfig) -> RunMeta {
    RunMeta {
        seed: loaded.config.master_seed,
        config_hash: loaded.config.config_hash(),
    }
}

fn out_dir(loaded: &LoadedConfig) -> PathBuf {
    loaded.config.output_dir.clone()
}

/// Result of a CLI-level run: files written and the worst censoring seen.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub tables: Vec<ResultTable>,
}

/// Coupled ensemble at the model's ε: per-trajectory CSVs for the first few
/// trajectories and a summary of the recorded functionals.
pub fn run_simulate(loaded: &LoadedConfig) -> Result<RunReport> {
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let provider = DriftProvider::for_model(model, &cfg.averaged)?;
    let obs = observables(loaded);
    let opts = SimOptions {
        test_functions: cfg.test_functions.clone(),
        fbar: Some(provider.source()),
        store_path: true,
    };
    let sim = cfg.simulate;
    let k_dump = sim.k_dump.min(model.grid.n_modes());
    let results: Vec<Result<Trajectory>> = pool.install(|| {
        (0..cfg.ensemble_size as u64)
            .into_par_iter()
            .map(|id| {
                let mut tr = simulate_slowfast(model, &mut SlowFastStreams::new(cfg.master_seed, id), &opts)?;
                if id as usize >= sim.dump_trajectories {
                    // only the endpoints are needed for the summary
                    let last = tr.u.len() - 1;
                    for v in [&mut tr.u, &mut tr.v] {
                        let end = v.swap_remove(last);
                        v.truncate(1);
                        v.push(end);
                    }
                }
                Ok(tr)
            })
            .collect()
    });
    let dir = out_dir(loaded);
    let meta = meta(loaded);
    let mut report = RunReport::default();
    let mut header: Vec<String> = vec!["trajectory_id".into(), "censored".into(), "v_integral".into(), "sup_v_sq".into()];
    header.extend((0..cfg.test_functions.len()).map(|i| format!("D_xi{i}")));
    header.extend(obs.iter().map(|o| o.id()));
    let mut rows = Vec::new();
    let mut censored = 0;
    for (id, r) in results.into_iter().enumerate() {
        match r {
            Ok(tr) => {
                if id < sim.dump_trajectories {
                    let mut h: Vec<String> = vec!["t".into()];
                    h.extend((1..=k_dump).map(|k| format!("u{k}")));
                    h.extend((1..=k_dump).map(|k| format!("v{k}")));
                    let mut body = Vec::new();
                    for i in (0..tr.u.len()).step_by(sim.record_every) {
                        let mut row = vec![fmt_f64(tr.times[i])];
                        row.extend((1..=k_dump).map(|k| fmt_f64(tr.u[i].mode(k))));
                        row.extend((1..=k_dump).map(|k| fmt_f64(tr.v[i].mode(k))));
                        body.push(row);
                    }
                    let hr: Vec<&str> = h.iter().map(String::as_str).collect();
                    let name = format!("trajectory_{id}.csv");
                    report
                        .files
                        .push(write_csv_with_sidecar(&dir, &name, &csv_bytes(&hr, &body)?, body.len(), &meta)?);
                }
                let end = tr.terminal();
                let mut row = vec![
                    id.to_string(),
                    "0".into(),
                    fmt_f64(tr.functionals.v_integral),
                    fmt_f64(tr.functionals.sup_v_sq),
                ];
                row.extend(tr.functionals.discrepancy_sup.iter().map(|d| fmt_f64(*d)));
                row.extend(obs.iter().map(|o| fmt_f64(o.eval(&end.u))));
                rows.push(row);
            }
            Err(Error::StateExplosion { .. }) => {
                censored += 1;
                let mut row = vec![id.to_string(), "1".into()];
                row.resize(header.len(), String::new());
                rows.push(row);
            }
            Err(e) => return Err(e),
        }
    }
    let hr: Vec<&str> = header.iter().map(String::as_str).collect();
    report
        .files
        .push(write_csv_with_sidecar(&dir, "summary.csv", &csv_bytes(&hr, &rows)?, rows.len(), &meta)?);
    if censored as f64 > MAX_CENSORED_FRACTION * cfg.ensemble_size as f64 {
        return Err(Error::ExcessiveCensoring {
            censored,
            total: cfg.ensemble_size,
        });
    }
    Ok(report)
}

/// Stationary averages of the configured observables, applied to the fast
/// variable of the frozen equation at `x = u0`.
pub fn run_invariant(loaded: &LoadedConfig) -> Result<RunReport> {
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let obs = observables(loaded);
    let params = AveragedDriftParams {
        master_seed: cfg.master_seed,
        ..cfg.averaged
    };
    let fcfg = params.frozen_config(model, model.u0.clone())?;
    let est = pool.install(|| {
        estimate_invariant_average(&fcfg, |s| obs.iter().map(|o| o.eval_coeffs(s.v)).collect())
    })?;
    let rows: Vec<Vec<String>> = obs
        .iter()
        .enumerate()
        .map(|(i, o)| {
            vec![
                format!("v_{}", o.id()),
                fmt_f64(est.mean[i]),
                fmt_f64(est.std_error[i]),
                fmt_f64(est.t_burn),
                fmt_f64(est.t_avg),
                est.n_replicas.to_string(),
                cfg.master_seed.to_string(),
            ]
        })
        .collect();
    let header = ["observable_id", "mean", "std_error", "t_burn", "t_avg", "n_replicas", "seed"];
    let path = write_csv_with_sidecar(&out_dir(loaded), "invariant.csv", &csv_bytes(&header, &rows)?, rows.len(), &meta(loaded))?;
    Ok(RunReport {
        files: vec![path],
        tables: vec![],
    })
}

/// Nested estimate of `F̄(u0)` per mode, next to the closed form when the
/// model has one.
pub fn run_average(loaded: &LoadedConfig) -> Result<RunReport> {
    let cfg = &loaded.config;
    let model = &loaded.model;
    let pool = worker_pool(cfg.worker_count)?;
    let params = AveragedDriftParams {
        master_seed: cfg.master_seed,
        theta: model.theta,
        ..cfg.averaged
    };
    let x = &model.u0;
    let (mean, se) = pool.install(|| estimate_fbar(0.0, x, &params, model))?;
    let exact = match DriftSource::exact_for(model) {
        Some(src) => Some(src.drift(model, 0.0, x)?.0),
        None => None,
    };
    let rows: Vec<Vec<String>> = (1..=mean.n_modes())
        .map(|k| {
            vec![
                k.to_string(),
                fmt_f64(mean.mode(k)),
                fmt_f64(se.mode(k)),
                exact.as_ref().map(|e| fmt_f64(e.mode(k))).unwrap_or_default(),
            ]
        })
        .collect();
    let header = ["mode_k", "Fbar_estimate", "std_error", "analytic_value_or_blank"];
    let path = write_csv_with_sidecar(&out_dir(loaded), "average.csv", &csv_bytes(&header, &rows)?, rows.len(), &meta(loaded))?;
    Ok(RunReport {
        files: vec![path],
        tables: vec![],
    })
}

pub fn run_converge(loaded: &LoadedConfig) -> Result<RunReport> {
    let table = run_convergence_study(loaded)?;
    let path = emit_results(&table, &out_dir(loaded), "convergence.csv", &meta(loaded))?;
    Ok(RunReport {
        files: vec![path],
        tables: vec![table],
    })
}

/// Moment audit, Hölder statistics and θ-stability, one CSV each.
pub fn run_audit(loaded: &LoadedConfig) -> Result<RunReport> {
    let dir = out_dir(loaded);
    let meta = meta(loaded);
    let mut report = RunReport::default();
    for (name, table) in [
        ("moment_audit.csv", run_moment_audit(loaded)?),
        ("holder.csv", run_holder_stats(loaded)?),
        ("theta_stability.csv", run_theta_stability(loaded, &loaded.config.theta_sequence)?),
    ] {
        report.files.push(emit_results(&table, &dir, name, &meta)?);
        report.tables.push(table);
    }
    Ok(report)
}

/// Exact `E‖u(T) − u(s)‖²` is not available in general; this evaluates the
/// deterministic increments `‖(S₁(t) − S₁(s))u₀‖²` used as a noiseless check.
pub fn semigroup_increment(model: &ModelSpec, s: f64, t: f64) -> Result<f64> {
    let a = crate::spectral::semigroup_apply(&model.op1, s, &model.u0)?;
    let b = crate::spectral::semigroup_apply(&model.op1, t, &model.u0)?;
    Ok(b.sub(&a).norm_squared())
}

/// `V` at each stored time of a trajectory.
pub fn v_along(model: &ModelSpec, tr: &Trajectory) -> Vec<f64> {
    let t = Transform::new(model.grid);
    tr.u
        .iter()
        .zip(&tr.v)
        .map(|(u, v)| {
            let up = t.synthesize(u).unwrap();
            let vp = t.synthesize(v).unwrap();
            eval_v(&up, &vp, &model.lyapunov, &model.grid)
        })
        .collect()
}
