//! On a linear-Gaussian problem with ρ and τ chosen from the theoretical
//! bounds, IR-enLM and IR-ES stop after one step with α = 1 and coincide
//! with the closed-form updates.

use irens::ensemble::initial_ensemble;
use irens::field::{factorize_prior, Field, GridGeometry};
use irens::forward::LinearForward;
use irens::ir_enlm::{run_members, IrEnlmParams};
use irens::ir_es::{ensemble_covariance, run_from, IrEsParams, SmootherOptions};
use irens::metrics::{prop1_bounds, prop2_bounds};
use irens::observations::{perturb, synthesize_generic, NoiseDraw};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn main() -> irens::Result<()> {
    let (n, m, n_e) = (12, 6, 8);
    let mut rng = irens::rng::substream(5, &[]);
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let c = &b * b.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    let gamma = DVector::from_fn(m, |_, _| rng.random_range(0.05..0.2));
    let geometry = GridGeometry::new(n, 1, n as f64, 1.0)?;
    let prior = factorize_prior(Field::constant(geometry, 0.0), c.clone())?;
    let g = LinearForward::new(a.clone())?;
    let truth = prior.draw(&mut rng);
    let obs = synthesize_generic(&g, &truth, gamma.clone(), 9, NoiseDraw::Sampled)?;

    let u0 = initial_ensemble(&prior, n_e, 17);
    let pert = perturb(&obs, n_e, 17)?;
    let b1 = prop1_bounds(&a, &c, &gamma, &u0, &pert, obs.eta)?;
    let rho = 0.5 * b1.rho_max.min(0.99);
    let tau = 1.01 * b1.tau_min(rho);
    println!("IR-enLM bounds: rho_max {:.4}, tau_min(rho={rho:.4}) {tau:.4}", b1.rho_max);
    let params = IrEnlmParams { rho, tau, n_e, ..Default::default() };
    let run = run_members(&u0, &pert, &gamma, &c, &params, &g)?;
    let k_inv = (&a * &c * a.transpose() + DMatrix::from_diagonal(&gamma))
        .try_inverse()
        .unwrap();
    let gain = &c * a.transpose() * k_inv;
    let mut worst = 0.0f64;
    for (j, u) in run.members.iter().enumerate() {
        let closed = &u0[j] + &gain * (&pert.y[j] - &a * &u0[j]);
        worst = worst.max((u - &closed).norm() / closed.norm());
    }
    let iters: Vec<usize> = run.member_traces.iter().map(|t| t.iterations).collect();
    let alphas: Vec<f64> = run.member_traces.iter().flat_map(|t| t.alphas.clone()).collect();
    println!("  iterations {iters:?}, alphas {alphas:?}; max rel. deviation from closed form {worst:.2e}");

    let c0 = ensemble_covariance(&u0, false);
    let mean0 = irens::ensemble::ensemble_mean(&u0);
    let b2 = prop2_bounds(&a, &c0, &gamma, &mean0, &obs.y, obs.eta)?;
    let rho = 0.5 * b2.rho_max.min(0.99);
    let tau = 1.01 * b2.tau_min(rho);
    println!("IR-ES bounds: rho_max {:.4}, tau_min(rho={rho:.4}) {tau:.4}", b2.rho_max);
    let params = IrEsParams { rho, tau, n_e, m_es: 1, ..Default::default() };
    let run = run_from(&u0, &pert, &obs, &params, SmootherOptions::default(), &g)?;
    let s = run.smoother.as_ref().unwrap();
    let k_inv = (&a * &c0 * a.transpose() + DMatrix::from_diagonal(&gamma))
        .try_inverse()
        .unwrap();
    let gain = &c0 * a.transpose() * k_inv;
    let worst = run
        .members
        .iter()
        .enumerate()
        .map(|(j, u)| {
            let closed = &u0[j] + &gain * (&pert.y[j] - &a * &u0[j]);
            (u - &closed).norm() / closed.norm()
        })
        .fold(0.0, f64::max);
    println!(
        "  smoother: {} step(s), alphas {:?}; max rel. deviation from closed form {worst:.2e}",
        s.iterations(),
        s.alphas
    );
    Ok(())
}
