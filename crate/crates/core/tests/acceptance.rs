//! Acceptance suite. Runs every criterion at its stated tolerance, prints one
//! PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! `cargo test --release --test acceptance` (the desk-scale comparison alone
//! takes roughly a quarter of an hour on one core). Set `IRENS_ONLY=1,7` to
//! run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use irens::ensemble::{contract_violations, ensemble_mean, initial_ensemble, RunResult, StopReason};
use irens::experiment::{Experiment, ExperimentConfig, Method};
use irens::field::{
    build_spherical_covariance, factorize_prior, sample_prior_vectors, Field, GaussianPrior, GridGeometry,
    SphericalCovarianceSpec,
};
use irens::forward::LinearForward;
use irens::ir_enlm::{run_ensemble, run_members, IrEnlmParams};
use irens::ir_es::{ensemble_covariance, run_from, IrEsParams, SmootherOptions};
use irens::mcmc::{batch_means_se, psrf, run_chain, DataMisfit, Flat, PcnParams};
use irens::metrics::{prop1_bounds, prop2_bounds};
use irens::observations::{perturb, synthesize, synthesize_generic, NoiseDraw, ObservationSet};
use irens::reservoir::{JacobianMethod, ReservoirForward, ReservoirModelConfig, WellModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- fixtures

struct LinearFixture {
    a: DMatrix<f64>,
    c: DMatrix<f64>,
    gamma: DVector<f64>,
    prior: GaussianPrior,
    forward: LinearForward,
    obs: ObservationSet,
}

fn linear_fixture(seed: u64, n: usize, m: usize) -> LinearFixture {
    let mut rng = irens::rng::substream(seed, &[0xf1]);
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let c = &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.05;
    let gamma = DVector::from_fn(m, |_, _| rng.random_range(0.02..0.3));
    let mean = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let geometry = GridGeometry::new(n, 1, n as f64, 1.0).unwrap();
    let prior = factorize_prior(Field::new(geometry, mean).unwrap(), c.clone()).unwrap();
    let forward = LinearForward::new(a.clone()).unwrap();
    let truth = prior.draw(&mut rng);
    let obs = synthesize_generic(&forward, &truth, gamma.clone(), seed, NoiseDraw::Sampled).unwrap();
    LinearFixture { a, c, gamma, prior, forward, obs }
}

fn fixture_dims(k: u64) -> (usize, usize, usize) {
    let mut rng = irens::rng::substream(k, &[0xd1]);
    (rng.random_range(5..=30), rng.random_range(3..=15), rng.random_range(3..=12))
}

/// `u0 + C Aᵀ (A C Aᵀ + Γ)⁻¹ (y − A u0)` through an LU solve.
fn kalman_update(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    u0: &DVector<f64>,
    y: &DVector<f64>,
) -> DVector<f64> {
    let s = a * c * a.transpose() + DMatrix::from_diagonal(gamma);
    let x = s.lu().solve(&(y - a * u0)).expect("nonsingular");
    u0 + c * a.transpose() * x
}

struct Desk {
    prior: GaussianPrior,
    obs: ObservationSet,
    forward: ReservoirForward,
}

fn desk() -> Desk {
    let config = ReservoirModelConfig::desk(WellModel::A);
    let g = config.geometry;
    let cov = build_spherical_covariance(&g, &SphericalCovarianceSpec::default()).unwrap();
    let prior = factorize_prior(Field::constant(g, (5e-13f64).ln()), cov).unwrap();
    let truth = Field::new(g, prior.draw(&mut irens::rng::substream(77, &[]))).unwrap();
    let obs = synthesize(&truth, &config, 78, NoiseDraw::Sampled).unwrap();
    let forward = ReservoirForward::new(&config, JacobianMethod::Adjoint).unwrap();
    Desk { prior, obs, forward }
}

// ---------------------------------------------------------------- criteria

fn c1_prop1() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    let mut used = 0;
    let mut k = 0u64;
    while used < 20 {
        k += 1;
        let (n, m, n_e) = fixture_dims(k);
        let f = linear_fixture(k, n, m);
        let u0 = initial_ensemble(&f.prior, n_e, k);
        let pert = perturb(&f.obs, n_e, k).unwrap();
        let b = prop1_bounds(&f.a, &f.c, &f.gamma, &u0, &pert, f.obs.eta).unwrap();
        if !b.precondition_holds() {
            continue; // outside the hypotheses
        }
        used += 1;
        let rho = 0.5 * b.rho_max;
        let tau = 1.01 * b.tau_min(rho);
        let params = IrEnlmParams { rho, tau, n_e, ..Default::default() };
        let run = run_members(&u0, &pert, &f.gamma, &f.c, &params, &f.forward).unwrap();
        for (j, t) in run.member_traces.iter().enumerate() {
            if t.iterations != 1 || t.alphas != [1.0] || t.stop != Some(StopReason::Discrepancy) {
                problems.push(format!(
                    "fixture {k} member {j}: {} iterations, alphas {:?}, stop {:?}",
                    t.iterations, t.alphas, t.stop
                ));
            }
            let closed = kalman_update(&f.a, &f.c, &f.gamma, &u0[j], &pert.y[j]);
            worst = worst.max(rel(&run.members[j], &closed));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        problems.is_empty() && worst <= 1e-8 && secs < 10.0,
        format!(
            "20 fixtures (skipped {} outside the hypotheses), max rel. deviation {worst:.2e}, {secs:.2} s{}",
            k - 20,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn c2_prop2() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut problems = Vec::new();
    let mut used = 0;
    let mut k = 1000u64;
    while used < 20 {
        k += 1;
        let (n, m, n_e) = fixture_dims(k);
        let f = linear_fixture(k, n, m);
        let u0 = initial_ensemble(&f.prior, n_e, k);
        let pert = perturb(&f.obs, n_e, k).unwrap();
        let c0 = ensemble_covariance(&u0, false);
        let b = prop2_bounds(&f.a, &c0, &f.gamma, &ensemble_mean(&u0), &f.obs.y, f.obs.eta).unwrap();
        if !b.precondition_holds() {
            continue;
        }
        used += 1;
        let rho = 0.5 * b.rho_max;
        let tau = 1.01 * b.tau_min(rho);
        let params = IrEsParams { rho, tau, n_e, m_es: 1, ..Default::default() };
        let run = run_from(&u0, &pert, &f.obs, &params, SmootherOptions::default(), &f.forward).unwrap();
        let s = run.smoother.as_ref().unwrap();
        if s.alphas != [1.0] || s.stop != Some(StopReason::Discrepancy) {
            problems.push(format!("fixture {k}: alphas {:?}, stop {:?}", s.alphas, s.stop));
        }
        for j in 0..n_e {
            let closed = kalman_update(&f.a, &c0, &f.gamma, &u0[j], &pert.y[j]);
            worst = worst.max(rel(&run.members[j], &closed));
        }
    }

    // Large-ensemble limit against the analytic posterior.
    let n_e = 5000;
    let f = linear_fixture(4242, 30, 15);
    let u0 = initial_ensemble(&f.prior, n_e, 4242);
    let pert = perturb(&f.obs, n_e, 4242).unwrap();
    let c0 = ensemble_covariance(&u0, false);
    let b = prop2_bounds(&f.a, &c0, &f.gamma, &ensemble_mean(&u0), &f.obs.y, f.obs.eta).unwrap();
    let rho = 0.5 * b.rho_max;
    let params = IrEsParams { rho, tau: 1.01 * b.tau_min(rho), n_e, m_es: 1, ..Default::default() };
    let run = run_from(&u0, &pert, &f.obs, &params, SmootherOptions::default(), &f.forward).unwrap();
    let steps = run.smoother.as_ref().unwrap().iterations();
    let gi = DMatrix::from_diagonal(&f.gamma.map(|g| 1.0 / g));
    let c_inv = f.c.clone().try_inverse().unwrap();
    let post_cov = (f.a.transpose() * &gi * &f.a + &c_inv).try_inverse().unwrap();
    let post_mean = &post_cov * (f.a.transpose() * &gi * &f.obs.y + &c_inv * &f.prior.mean.values);
    let z = |v: &DVector<f64>| {
        (0..30)
            .map(|i| (v[i] - post_mean[i]).abs() / (post_cov[(i, i)].sqrt() / (n_e as f64).sqrt()))
            .fold(0.0, f64::max)
    };
    let worst_z = z(&ensemble_mean(&run.members));
    // Same draws through the exact (population) gain: separates Monte Carlo
    // error of the draws from the error of the sampled gain.
    let exact: Vec<DVector<f64>> =
        (0..n_e).map(|j| kalman_update(&f.a, &f.c, &f.gamma, &u0[j], &pert.y[j])).collect();
    let exact_z = z(&ensemble_mean(&exact));
    let cov = ensemble_covariance(&run.members, true);
    let cov_rel = (&cov - &post_cov).norm() / post_cov.norm();
    let secs = start.elapsed().as_secs_f64();
    check(
        problems.is_empty() && worst <= 1e-8 && steps == 1 && worst_z <= 5.0 && cov_rel <= 0.10 && secs < 60.0,
        format!(
            "20 fixtures: max rel. deviation {worst:.2e}; N_e = {n_e}: {steps} step(s), worst mean error \
             {worst_z:.2} posterior-std/sqrt(N_e) (bound 5; {exact_z:.2} with the exact gain), covariance rel. Frobenius error {cov_rel:.3}; {secs:.1} s{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

/// The literal contract on one run: discrepancy-stopped output within
/// `τ η_j`, the iterate before it outside; every α re-checked.
/// The initial iterate counts as inside only below `min(τ,1)·η_j`.
fn literal_contract(run: &RunResult, out: &mut Vec<String>, stats: &mut (usize, usize)) {
    for t in &run.member_traces {
        let Some(th) = t.threshold else { continue };
        match t.stop {
            Some(StopReason::Discrepancy) => {
                stats.0 += 1;
                // iterate 0 is held to min(τ,1)·η_j, later iterates to τη_j
                let bound = |i: usize| if i == 0 { t.initial_threshold.unwrap_or(th) } else { th };
                let n = t.misfits.len();
                if t.misfits[n - 1] > bound(n - 1) {
                    out.push(format!("{}: member {} ends above its bound", run.method, t.member));
                }
                if n >= 2 && t.misfits[n - 2] <= bound(n - 2) {
                    out.push(format!("{}: member {} already inside one iteration earlier", run.method, t.member));
                }
            }
            _ => stats.1 += 1,
        }
    }
    if let Some(s) = &run.smoother {
        stats.0 += 1;
        if s.stop != Some(StopReason::Discrepancy) || s.mean_misfits.last().is_none_or(|m| *m > s.threshold) {
            out.push(format!("{}: smoother ended with {:?} above τη", run.method, s.stop));
        }
    }
    out.extend(contract_violations(run).into_iter().map(|v| format!("{}: {v}", run.method)));
}

fn c3_contract(d: &Desk, es_runs: &[RunResult]) -> Outcome {
    let mut problems = Vec::new();
    let mut stats = (0, 0);
    for (k, (rho, tau)) in [(0.8, 1.0), (0.5, 2.0), (0.7, 1.0 / 0.7), (0.9, 1.0 / 0.9)].into_iter().enumerate() {
        let run = run_ensemble(&d.prior, &d.obs, &IrEnlmParams::new(rho, tau, 10), &d.forward, 300 + k as u64)
            .map_err(|e| e.to_string())?;
        literal_contract(&run, &mut problems, &mut stats);
    }
    for run in es_runs {
        literal_contract(run, &mut problems, &mut stats);
    }
    check(
        problems.is_empty(),
        format!(
            "{} discrepancy-stopped members/runs checked, {} members at the iteration cap{}",
            stats.0,
            stats.1,
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

fn c4_physics() -> Outcome {
    let mut worst_balance = 0.0f64;
    let mut worst_sat = 0.0f64;
    let mut worst_res = 0.0f64;
    let mut slowest = 0.0f64;
    for model in [WellModel::A, WellModel::B] {
        let config = ReservoirModelConfig::desk(model);
        let g = config.geometry;
        let cov = build_spherical_covariance(&g, &SphericalCovarianceSpec::default()).unwrap();
        let prior = factorize_prior(Field::constant(g, (5e-13f64).ln()), cov).unwrap();
        let mut fields = vec![prior.mean.values.clone()];
        fields.extend(sample_prior_vectors(&prior, 9, 3));
        for u in fields {
            let t = Instant::now();
            let traj = irens::reservoir::simulate(&Field::new(g, u).unwrap(), &config).map_err(|e| e.to_string())?;
            slowest = slowest.max(t.elapsed().as_secs_f64());
            for s in 0..config.n_steps {
                let inj: f64 = traj.well_rates.iter().map(|r| r[s].max(0.0)).sum();
                let net: f64 = traj.well_rates.iter().map(|r| r[s]).sum();
                worst_balance = worst_balance.max(net.abs() / inj);
                for v in traj.saturations[s].values.iter() {
                    worst_sat = worst_sat.max(-v).max(v - 1.0);
                }
            }
            worst_res = traj.pressure_residuals.iter().cloned().fold(worst_res, f64::max);
        }
    }
    // Eight symmetries of the square on the centred pattern.
    let n = 21;
    let config = ReservoirModelConfig::symmetric_five_spot(n, WellModel::A);
    let g = config.geometry;
    let traj = irens::reservoir::simulate(&Field::constant(g, (5e-13f64).ln()), &config).map_err(|e| e.to_string())?;
    let maps: [fn(usize, usize, usize) -> (usize, usize); 7] = [
        |i, j, _| (j, i),
        |i, j, n| (n - 1 - i, j),
        |i, j, n| (i, n - 1 - j),
        |i, j, n| (n - 1 - i, n - 1 - j),
        |i, j, n| (n - 1 - j, n - 1 - i),
        |i, j, n| (j, n - 1 - i),
        |i, j, n| (n - 1 - j, i),
    ];
    let mut worst_sym = 0.0f64;
    for p in &traj.pressures {
        let scale = p.values.amax();
        for map in maps {
            for j in 0..n {
                for i in 0..n {
                    let (a, b) = map(i, j, n);
                    worst_sym = worst_sym.max((p.at(i, j) - p.at(a, b)).abs() / scale);
                }
            }
        }
    }
    check(
        worst_balance <= 1e-8 && worst_sat <= 1e-12 && worst_res <= 1e-10 && worst_sym <= 1e-8 && slowest < 30.0,
        format!(
            "rate imbalance {worst_balance:.1e} of injection, saturation excursion {worst_sat:.1e}, \
             pressure residual {worst_res:.1e}, pattern asymmetry {worst_sym:.1e}, slowest simulation {slowest:.2} s"
        ),
    )
}

fn c5_sensitivities() -> Outcome {
    let start = Instant::now();
    let mut worst = [0.0f64; 2];
    let mut min_order = f64::INFINITY;
    let mut lines = Vec::new();
    for model in [WellModel::A, WellModel::B] {
        let config = ReservoirModelConfig::desk(model);
        let g = config.geometry;
        let cov = build_spherical_covariance(&g, &SphericalCovarianceSpec::default()).unwrap();
        let prior = factorize_prior(Field::constant(g, (5e-13f64).ln()), cov).unwrap();
        let forward = ReservoirForward::new(&config, JacobianMethod::Adjoint).unwrap();
        let u = sample_prior_vectors(&prior, 5, 1).remove(0);
        let (_, jac) = forward.adjoint_jacobian(&u).map_err(|e| e.to_string())?;
        let schedule = forward.schedule(&u).map_err(|e| e.to_string())?;
        let mut rng = irens::rng::substream(55, &[model as u64]);
        let u_inf = u.amax();
        for dir in 0..5 {
            let d = DVector::from_fn(u.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            // unit Euclidean direction; h carries the scale of u
            let d = &d / d.norm();
            let jd = &jac * &d;
            let mut errs = [0.0; 2];
            for (k, c) in [1e-3, 1e-4].into_iter().enumerate() {
                let h = c * u_inf;
                let gp = forward.evaluate_pinned(&(&u + &d * h), &schedule).map_err(|e| e.to_string())?;
                let gm = forward.evaluate_pinned(&(&u - &d * h), &schedule).map_err(|e| e.to_string())?;
                errs[k] = rel(&((gp - gm) / (2.0 * h)), &jd);
                worst[k] = worst[k].max(errs[k]);
            }
            let order = (errs[0] / errs[1]).log10();
            min_order = min_order.min(order);
            lines.push(format!("{model:?}/{dir}: {:.1e}->{:.1e}", errs[0], errs[1]));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst[0] <= 1e-4 && worst[1] <= 1e-4 && min_order >= 1.5 && secs < 300.0,
        format!(
            "max rel. error {:.1e} (h = 1e-3·|u|inf), {:.1e} (h = 1e-4·|u|inf), smallest observed order {min_order:.2}, \
             {secs:.1} s [{}]",
            worst[0],
            worst[1],
            lines.join(", ")
        ),
    )
}

fn c6_pcn() -> Outcome {
    let start = Instant::now();
    // Prior invariance on a 3×3 grid.
    let g = GridGeometry::new(3, 3, 300.0, 300.0).unwrap();
    let spec = SphericalCovarianceSpec { range_max: 250.0, range_min: 150.0, ..Default::default() };
    let cov = build_spherical_covariance(&g, &spec).unwrap();
    let mean = DVector::from_fn(9, |i, _| 0.1 * i as f64 - 0.4);
    let prior = factorize_prior(Field::new(g, mean.clone()).unwrap(), cov.clone()).unwrap();
    let params = PcnParams { chain_length: 100_000, thin: 1, tune: false, ..Default::default() };
    let chain = run_chain(0, &prior, &Flat, &params, 0.3, 61, None).map_err(|e| e.to_string())?;
    let mut worst_z = 0.0f64;
    for k in 0..9 {
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[k]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean[k]).powi(2)).collect();
        let v = sq.iter().sum::<f64>() / sq.len() as f64;
        let z_m = (m - mean[k]).abs() / batch_means_se(&xs, 50).map_err(|e| e.to_string())?;
        let z_v = (v - cov[(k, k)]).abs() / batch_means_se(&sq, 50).map_err(|e| e.to_string())?;
        worst_z = worst_z.max(z_m).max(z_v);
    }

    // Scalar linear-Gaussian target.
    let g1 = GridGeometry::new(1, 1, 1.0, 1.0).unwrap();
    let (m0, c0, a, gm, y) = (0.5, 2.0, 1.5, 0.5, 1.2);
    let prior1 = factorize_prior(Field::constant(g1, m0), DMatrix::from_element(1, 1, c0)).unwrap();
    let lin = LinearForward::new(DMatrix::from_element(1, 1, a)).unwrap();
    let obs = ObservationSet::new(
        DVector::from_element(1, y),
        DVector::from_element(1, gm),
        1.0,
        irens::observations::MeasurementLayout::generic(1),
    )
    .unwrap();
    let pot = DataMisfit::new(&lin, &obs);
    let params = PcnParams { chain_length: 100_000, thin: 1, tune: false, ..Default::default() };
    let chain = run_chain(0, &prior1, &pot, &params, 0.5, 62, None).map_err(|e| e.to_string())?;
    let xs: Vec<f64> = chain.samples.iter().skip(1000).map(|s| s[0]).collect();
    let post_var = 1.0 / (1.0 / c0 + a * a / gm);
    let post_mean = post_var * (m0 / c0 + a * y / gm);
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let se = batch_means_se(&xs, 50).map_err(|e| e.to_string())?;
    let z = (m - post_mean).abs() / se;
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_z <= 4.0 && z <= 3.0 && secs < 300.0,
        format!(
            "prior invariance: worst moment deviation {worst_z:.2} batch-means SE (bound 4); linear-Gaussian \
             mean {m:.4} vs {post_mean:.4} = {z:.2} SE (bound 3), acceptance {:.2}; {secs:.1} s",
            chain.acceptance_rate()
        ),
    )
}

fn brute_psrf(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1.0))
        .sum::<f64>()
        / m;
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

fn c7_psrf() -> Outcome {
    let mut rng = irens::rng::substream(70, &[]);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(2..=6);
        let n = rng.random_range(10..=500);
        let chains: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                let (mu, sd) = (rng.random_range(-3.0..3.0), rng.random_range(0.1..5.0));
                (0..n).map(|_| mu + sd * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let got = psrf(&chains).map_err(|e| e.to_string())?;
        let want = brute_psrf(&chains);
        worst = worst.max((got - want).abs() / want);
    }
    let same: Vec<Vec<f64>> =
        (0..2).map(|_| (0..10_000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    let r = psrf(&same).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-12 && r < 1.05,
        format!("max rel. difference from brute force {worst:.1e} over 50 sets; same-distribution PSRF {r:.4}"),
    )
}

fn c8_trends(root: &Path) -> Outcome {
    let start = Instant::now();
    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/desk.toml");
    let config = ExperimentConfig::load(&cfg_path)?;
    let out = root.join("desk");
    let mut exp = Experiment::open(config.clone(), &out).map_err(|e| e.to_string())?;
    let go = |e: irens::experiment::StageError| e.to_string();
    exp.generate_truth().map_err(go)?;
    exp.synthesize().map_err(go)?;
    for m in Method::ALL {
        exp.run_method(m).map_err(go)?;
    }
    exp.evaluate().map_err(go)?;
    let (_, _, gold) = exp.gold().map_err(go)?;
    let table = exp.comparison().map_err(go)?;
    let secs = start.elapsed().as_secs_f64();

    let rows: BTreeMap<String, Vec<f64>> = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let nums = [f[5], f[6], f[7]].iter().map(|x| x.parse::<f64>().unwrap()).collect();
            (f[0].to_string(), nums)
        })
        .collect();
    let row = |k: &str| rows.get(k).cloned().ok_or_else(|| format!("missing row {k}"));
    let (ir, rml) = (row("ir-enlm:rho0.8-tau1.0")?, row("rml:lm")?);
    let (ires, es) = (row("ir-es:rho0.8")?, row("es:es")?);
    let iters: Vec<f64> = ["rho0.5", "rho0.7", "rho0.9"]
        .iter()
        .map(|l| row(&format!("ir-enlm:{l}")).map(|r| r[2]))
        .collect::<Result<_, _>>()?;
    let psrf_ok = gold.max_psrf.is_some_and(|p| p < 1.1);
    let a = ir[0] < rml[0] && ir[1] < rml[1];
    let b = ires[0] < es[0] && ires[1] < es[1];
    let c = iters.windows(2).all(|w| w[0] <= w[1]);
    let reps = config.replications;
    check(
        psrf_ok && a && b && c && reps >= 5 && secs < 45.0 * 60.0,
        format!(
            "reference PSRF {:?} (gate 1.1) {}; {reps} seeds, N_e = 25; (a) IR-enLM eps_u/eps_sigma {:.3}/{:.3} vs RML \
             {:.3}/{:.3} {}; (b) IR-ES {:.3}/{:.3} vs ES {:.3}/{:.3} {}; (c) IR-enLM iterations at rho 0.5/0.7/0.9 = \
             {:.2}/{:.2}/{:.2} {}; {:.1} min",
            gold.max_psrf.map(|p| (p * 1e4).round() / 1e4),
            ok(psrf_ok),
            ir[0],
            ir[1],
            rml[0],
            rml[1],
            ok(a),
            ires[0],
            ires[1],
            es[0],
            es[1],
            ok(b),
            iters[0],
            iters[1],
            iters[2],
            ok(c),
            secs / 60.0
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "NOT MET"
    }
}

fn c9_costs(d: &Desk, es_runs: &mut Vec<RunResult>) -> Outcome {
    let n_e = 15;
    let mut lines = Vec::new();
    let mut good = true;
    for m_es in [1, 5, 10] {
        let params = IrEsParams::new(0.8, 1.25, n_e, m_es);
        let initial = initial_ensemble(&d.prior, n_e, 900);
        let pert = perturb(&d.obs, n_e, 900).unwrap();
        let run = run_from(&initial, &pert, &d.obs, &params, SmootherOptions::default(), &d.forward)
            .map_err(|e| e.to_string())?;
        let j = run.smoother.as_ref().unwrap().iterations();
        let want = (n_e * (1 + j / m_es)) as u64;
        good &= run.forward_calls == want;
        lines.push(format!("M_ES={m_es}: J={j}, calls {} (formula {want})", run.forward_calls));
        es_runs.push(run);
    }
    // Linear map: linearized predictions are exact, so M_ES is immaterial.
    let f = linear_fixture(999, 25, 12);
    let n_e = 20;
    let u0 = initial_ensemble(&f.prior, n_e, 5);
    let pert = perturb(&f.obs, n_e, 5).unwrap();
    let mut runs = Vec::new();
    for m_es in [1, 5, 10] {
        let params = IrEsParams::new(0.95, 1.0 / 0.95, n_e, m_es);
        runs.push(run_from(&u0, &pert, &f.obs, &params, SmootherOptions::default(), &f.forward).unwrap());
    }
    let j_lin = runs[0].smoother.as_ref().unwrap().iterations();
    let same_j = runs.iter().all(|r| r.smoother.as_ref().unwrap().iterations() == j_lin);
    let dev = runs[1..]
        .iter()
        .flat_map(|r| r.members.iter().zip(&runs[0].members).map(|(a, b)| rel(a, b)))
        .fold(0.0, f64::max);
    check(
        good && same_j && j_lin >= 2 && dev <= 1e-10,
        format!(
            "desk N_e = {}: {}; linear map, J = {j_lin}: max member deviation across M_ES {dev:.1e}",
            15,
            lines.join(", ")
        ),
    )
}

fn c10_determinism(root: &Path) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_irens");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs/smoke.toml");
    let stages: [&[&str]; 9] = [
        &["generate-truth"],
        &["synthesize"],
        &["run", "ir-enlm"],
        &["run", "ir-es"],
        &["run", "es"],
        &["run", "rml"],
        &["run", "mcmc"],
        &["evaluate"],
        &["report"],
    ];
    let mut trees = Vec::new();
    for (k, jobs) in ["1", "8", "8"].into_iter().enumerate() {
        let out = root.join(format!("det{k}"));
        for s in stages {
            let status = Command::new(bin)
                .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--jobs", jobs])
                .args(s)
                .env("RUST_LOG", "error")
                .status()
                .map_err(|e| e.to_string())?;
            if !status.success() {
                return Err(format!("`irens {}` with --jobs {jobs} exited with {status}", s.join(" ")));
            }
        }
        let files = irens::experiment::manifest::list_files(&out).map_err(|e| e.to_string())?;
        let tree: BTreeMap<String, Vec<u8>> =
            files.into_iter().map(|f| (f.clone(), std::fs::read(out.join(&f)).unwrap())).collect();
        trees.push(tree);
    }
    let mut diffs = Vec::new();
    for (k, t) in trees.iter().enumerate().skip(1) {
        if t.keys().ne(trees[0].keys()) {
            diffs.push(format!("run {k}: different file set"));
        }
        for (f, bytes) in t {
            if trees[0].get(f) != Some(bytes) {
                diffs.push(format!("run {k}: {f}"));
            }
        }
    }
    check(
        diffs.is_empty(),
        format!(
            "{} artifacts compared across --jobs 1, --jobs 8 and a repeat{}",
            trees[0].len(),
            if diffs.is_empty() { String::new() } else { format!("; differing: {}", diffs.join(", ")) }
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("IRENS_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let root = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let mut run = |k: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let r = f();
        let d = t.elapsed();
        let (tag, detail) = match &r {
            Ok(s) => ("PASS", s),
            Err(s) => ("FAIL", s),
        };
        println!("{tag} criterion {k:>2} ({name}): {detail}");
        results.push((k, name, r, d));
    };
    let desk_problem = if wanted(3) || wanted(9) { Some(desk()) } else { None };
    let mut es_runs = Vec::new();
    run(1, "linear IR-enLM exactness", &mut c1_prop1);
    run(2, "linear IR-ES exactness and limit", &mut c2_prop2);
    run(9, "IR-ES cost accounting", &mut || c9_costs(desk_problem.as_ref().unwrap(), &mut es_runs));
    run(3, "discrepancy contract", &mut || c3_contract(desk_problem.as_ref().unwrap(), &es_runs));
    run(4, "simulator physics", &mut c4_physics);
    run(5, "sensitivities", &mut c5_sensitivities);
    run(6, "pCN validity", &mut c6_pcn);
    run(7, "PSRF oracle", &mut c7_psrf);
    run(10, "determinism", &mut || c10_determinism(root.path()));
    run(8, "desk-scale trends", &mut || c8_trends(root.path()));
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" (criteria {failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
