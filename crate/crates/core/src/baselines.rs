//! Unregularized comparison methods: the single-pass ensemble smoother and
//! randomized maximum likelihood minimized by the standard
//! Levenberg–Marquardt schedule.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{initial_ensemble, MemberTrace, RunResult, StopReason};
use crate::error::{ensure_len, Error, Result};
use crate::field::GaussianPrior;
use crate::forward::ForwardModel;
use crate::ir_enlm::solve_shifted;
use crate::ir_es::{run_from, IrEsParams, SmootherOptions};
use crate::observations::{perturb, weighted_diag_norm, ObservationSet, PerturbedObservations};

/// The ensemble smoother: one Kalman-type update with `α = 1`.
pub fn standard_es_from<F: ForwardModel + ?Sized>(
    initial: &[DVector<f64>],
    perturbed: &PerturbedObservations,
    obs: &ObservationSet,
    forward: &F,
) -> Result<RunResult> {
    let params = IrEsParams {
        n_e: initial.len(),
        m_es: 1,
        ..Default::default()
    };
    let options = SmootherOptions {
        fixed_alpha: Some(1.0),
        fixed_steps: Some(1),
    };
    let mut run = run_from(initial, perturbed, obs, &params, options, forward)?;
    run.method = "es".into();
    Ok(run)
}

pub fn standard_es<F: ForwardModel + ?Sized>(
    prior: &GaussianPrior,
    obs: &ObservationSet,
    n_e: usize,
    seed: u64,
    forward: &F,
) -> Result<RunResult> {
    if n_e < 2 {
        return Err(Error::InvalidInput("ensemble smoothers need at least 2 members".into()));
    }
    let initial = initial_ensemble(prior, n_e, seed);
    let perturbed = perturb(obs, n_e, seed)?;
    standard_es_from(&initial, &perturbed, obs, forward)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmlLmParams {
    pub n_e: usize,
    /// `λ₀ = lambda0_scale · Λ₀`.
    pub lambda0_scale: f64,
    pub kappa: f64,
    /// Relative objective change tolerance.
    pub eps0: f64,
    /// Relative step tolerance.
    pub eps1: f64,
    /// Cap on attempted steps.
    pub max_outer: usize,
    /// Rejections stop once `λ` exceeds this.
    pub lambda_max: f64,
}

impl Default for RmlLmParams {
    fn default() -> Self {
        Self {
            n_e: 25,
            lambda0_scale: 1.0,
            kappa: 10.0,
            eps0: 1e-3,
            eps1: 1e-2,
            max_outer: 50,
            lambda_max: 1e16,
        }
    }
}

impl RmlLmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 1.0) {
            return Err(Error::InvalidInput(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        if !(self.eps0 > 0.0 && self.eps1 > 0.0) {
            return Err(Error::InvalidInput("eps0 and eps1 must be positive".into()));
        }
        if !(self.lambda0_scale > 0.0 && self.lambda0_scale.is_finite()) {
            return Err(Error::InvalidInput("lambda0_scale must be positive".into()));
        }
        if self.n_e == 0 || self.max_outer == 0 {
            return Err(Error::InvalidInput("n_e and max_outer must be at least 1".into()));
        }
        Ok(())
    }
}

/// `½‖Γ^{-1/2}(y_j − g)‖² + ½‖C^{-1/2}(u − u_j)‖²` for a known `g = G(u)`.
pub fn rml_objective_at(
    g: &DVector<f64>,
    u: &DVector<f64>,
    u_j: &DVector<f64>,
    y_j: &DVector<f64>,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
) -> Result<f64> {
    ensure_len("perturbed data", y_j.len(), g.len())?;
    let data = weighted_diag_norm(&(y_j - g), gamma);
    let white = prior.whiten(&(u - u_j))?;
    Ok(0.5 * data * data + 0.5 * white.norm_squared())
}

pub fn rml_objective<F: ForwardModel + ?Sized>(
    u: &DVector<f64>,
    u_j: &DVector<f64>,
    y_j: &DVector<f64>,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
    forward: &F,
) -> Result<f64> {
    rml_objective_at(&forward.evaluate(u)?, u, u_j, y_j, prior, gamma)
}

/// The LM step solving
/// `[DGᵀΓ⁻¹DG + (1+λ)C⁻¹] Δu = DGᵀΓ⁻¹ r − C⁻¹(u − u_j)`
/// through its data-space (Woodbury) form: with `C' = C/(1+λ)` and
/// `b' = C' DGᵀΓ⁻¹ r − (u − u_j)/(1+λ)`,
/// `Δu = b' − C' DGᵀ (Γ + DG C' DGᵀ)⁻¹ DG b'`. No `C⁻¹` is formed.
pub fn rml_step(
    dg: &DMatrix<f64>,
    r: &DVector<f64>,
    u: &DVector<f64>,
    u_j: &DVector<f64>,
    c: &DMatrix<f64>,
    gamma: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>> {
    ensure_len("residual", dg.nrows(), r.len())?;
    ensure_len("iterate", dg.ncols(), u.len())?;
    let s = 1.0 / (1.0 + lambda);
    let cdgt = c * dg.transpose() * s;
    let b = &cdgt * r.component_div(gamma) - (u - u_j) * s;
    let mut k = dg * &cdgt;
    k = 0.5 * (&k + k.transpose());
    let x = solve_shifted(&k, gamma, 1.0, &(dg * &b))?;
    Ok(b - cdgt * x)
}

/// `J ≤ N_D + 5√(2 N_D)`.
pub fn objective_bound(n_data: usize) -> f64 {
    let nd = n_data as f64;
    nd + 5.0 * (2.0 * nd).sqrt()
}

#[derive(Debug, Clone)]
pub struct RmlOutcome {
    pub u: DVector<f64>,
    pub prediction: Option<DVector<f64>>,
    pub trace: MemberTrace,
    pub forward_calls: u64,
    pub jacobian_calls: u64,
}

/// Minimizes one member's RML objective from its prior draw `u_j`.
///
/// A step is accepted iff it lowers `J`; accepted steps divide `λ` by `κ`,
/// rejected ones multiply it. Iteration stops when an accepted step meets
/// both relative tolerances, at a stationary point, at the attempt cap, or
/// when `λ` overflows its guard.
#[allow(clippy::too_many_arguments)]
pub fn rml_member<F: ForwardModel + ?Sized>(
    member: usize,
    u_j: &DVector<f64>,
    y_j: &DVector<f64>,
    params: &RmlLmParams,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
    forward: &F,
) -> RmlOutcome {
    let mut out = RmlOutcome {
        u: u_j.clone(),
        prediction: None,
        trace: MemberTrace::new(member),
        forward_calls: 0,
        jacobian_calls: 0,
    };
    match iterate_rml(&mut out, u_j, y_j, params, prior, gamma, forward) {
        Ok(j) => out.trace.objective_bound_met = Some(j <= objective_bound(y_j.len())),
        Err(e) => {
            out.trace.stop = Some(StopReason::Failed);
            out.trace.error = Some(e.to_string());
        }
    }
    out
}

/// Returns the objective at the returned iterate.
fn iterate_rml<F: ForwardModel + ?Sized>(
    out: &mut RmlOutcome,
    u_j: &DVector<f64>,
    y_j: &DVector<f64>,
    params: &RmlLmParams,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
    forward: &F,
) -> Result<f64> {
    ensure_len("perturbed data", forward.n_data(), y_j.len())?;
    ensure_len("prior draw", forward.n_params(), u_j.len())?;
    let c = &prior.covariance;
    let nd = y_j.len() as f64;
    out.forward_calls += 1;
    let mut g = forward.evaluate(&out.u)?;
    let mut j = rml_objective_at(&g, &out.u, u_j, y_j, prior, gamma)?;
    out.trace.objectives.push(j);
    out.trace.misfits.push(weighted_diag_norm(&(y_j - &g), gamma));
    out.prediction = Some(g.clone());
    let mut lambda = params.lambda0_scale * (j / nd).sqrt().min(j / nd);
    out.jacobian_calls += 1;
    let mut dg = forward.jacobian(&out.u)?;
    loop {
        if out.trace.iterations == params.max_outer {
            out.trace.stop = Some(StopReason::MaxIterations);
            return Ok(j);
        }
        let r = y_j - &g;
        if stationary(&dg, &r, &out.u, u_j, prior, gamma)? {
            out.trace.stop = Some(StopReason::Stationary);
            return Ok(j);
        }
        let du = rml_step(&dg, &r, &out.u, u_j, c, gamma, lambda)?;
        let cand = &out.u + &du;
        out.trace.iterations += 1;
        out.trace.lambdas.push(lambda);
        out.forward_calls += 1;
        // a candidate the simulator cannot run counts as a rejection
        let trial = match forward.evaluate(&cand) {
            Ok(gc) => {
                let jc = rml_objective_at(&gc, &cand, u_j, y_j, prior, gamma)?;
                Some((gc, jc))
            }
            Err(e) => {
                log::debug!("member {}: candidate rejected, {e}", out.trace.member);
                None
            }
        };
        match trial {
            Some((gc, jc)) if jc < j => {
                out.trace.accepted.push(true);
                let rel_j = (j - jc).abs() / jc;
                let rel_step = du.norm() / cand.norm();
                out.u = cand;
                g = gc;
                j = jc;
                out.trace.objectives.push(j);
                out.trace.misfits.push(weighted_diag_norm(&(y_j - &g), gamma));
                out.prediction = Some(g.clone());
                lambda /= params.kappa;
                if rel_j <= params.eps0 && rel_step <= params.eps1 {
                    out.trace.stop = Some(StopReason::Converged);
                    return Ok(j);
                }
                out.jacobian_calls += 1;
                dg = forward.jacobian(&out.u)?;
            }
            _ => {
                out.trace.accepted.push(false);
                lambda *= params.kappa;
                if lambda > params.lambda_max {
                    out.trace.stop = Some(StopReason::LambdaOverflow);
                    return Ok(j);
                }
            }
        }
    }
}

/// Whether `DGᵀΓ⁻¹r − C⁻¹(u − u_j)` vanishes to roundoff.
fn stationary(
    dg: &DMatrix<f64>,
    r: &DVector<f64>,
    u: &DVector<f64>,
    u_j: &DVector<f64>,
    prior: &GaussianPrior,
    gamma: &DVector<f64>,
) -> Result<bool> {
    let data = dg.transpose() * r.component_div(gamma);
    let reg = prior.precision_mul(&(u - u_j))?;
    let scale = data.norm() + reg.norm();
    Ok((data - reg).norm() <= 1e-14 * scale)
}

pub fn rml_members<F: ForwardModel + ?Sized>(
    initial: &[DVector<f64>],
    perturbed: &PerturbedObservations,
    gamma: &DVector<f64>,
    prior: &GaussianPrior,
    params: &RmlLmParams,
    forward: &F,
) -> Result<RunResult> {
    params.validate()?;
    ensure_len("perturbed data sets", initial.len(), perturbed.len())?;
    let outcomes: Vec<RmlOutcome> = (0..initial.len())
        .into_par_iter()
        .map(|j| rml_member(j, &initial[j], &perturbed.y[j], params, prior, gamma, forward))
        .collect();
    let mut run = RunResult {
        method: "rml".into(),
        members: Vec::new(),
        predictions: Vec::new(),
        member_traces: Vec::new(),
        smoother: None,
        forward_calls: 0,
        jacobian_calls: 0,
        diagnostic_calls: 0,
    };
    for o in outcomes {
        run.forward_calls += o.forward_calls;
        run.jacobian_calls += o.jacobian_calls;
        run.members.push(o.u);
        run.predictions.push(o.prediction);
        run.member_traces.push(o.trace);
    }
    let failed = run.failures().len();
    if failed > 0 {
        log::warn!("{failed} of {} RML members failed", run.members.len());
    }
    Ok(run)
}

/// RML ensemble with the same member draws and perturbations as the other
/// methods for a given `seed`.
pub fn rml_ensemble<F: ForwardModel + ?Sized>(
    prior: &GaussianPrior,
    obs: &ObservationSet,
    params: &RmlLmParams,
    seed: u64,
    forward: &F,
) -> Result<RunResult> {
    params.validate()?;
    let initial = initial_ensemble(prior, params.n_e, seed);
    let perturbed = perturb(obs, params.n_e, seed)?;
    rml_members(&initial, &perturbed, &obs.gamma_diag, prior, params, forward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{factorize_prior, Field, GridGeometry};
    use crate::forward::LinearForward;
    use crate::ir_es::IrEsParams;
    use crate::observations::MeasurementLayout;
    use proptest::prelude::*;

    fn prior_from(c: DMatrix<f64>) -> GaussianPrior {
        let n = c.nrows();
        let g = GridGeometry::new(n, 1, n as f64, 1.0).unwrap();
        factorize_prior(Field::constant(g, 0.0), c).unwrap()
    }

    fn s(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn objective_examples() {
        let prior = prior_from(DMatrix::from_element(1, 1, 1.0));
        let id = LinearForward::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let j = rml_objective(&s(0.0), &s(2.0), &s(1.0), &prior, &s(1.0), &id).unwrap();
        assert!((j - 2.5).abs() < 1e-15);
        let j0 = rml_objective(&s(2.0), &s(2.0), &s(2.0), &prior, &s(1.0), &id).unwrap();
        assert_eq!(j0, 0.0);

        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p2 = prior_from(c);
        let zero = LinearForward::new(DMatrix::zeros(1, 2)).unwrap();
        let e1 = p2.factor.column(0).into_owned();
        let uj = DVector::from_vec(vec![0.3, -0.2]);
        let j = rml_objective(&(&uj + e1), &uj, &s(0.0), &p2, &s(1.0), &zero).unwrap();
        assert!((j - 0.5).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn woodbury_step_matches_parameter_space(seed in 0u64..100, lambda in 0.0f64..50.0) {
            use rand::SeedableRng;
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let mut g = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x
            });
            let (n, nd) = (6, 4);
            let dg = g(nd, n);
            let b = g(n, n);
            let c = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
            let r = g(nd, 1).column(0).into_owned();
            let u = g(n, 1).column(0).into_owned();
            let uj = g(n, 1).column(0).into_owned();
            let gamma = DVector::from_fn(nd, |i, _| 0.2 + 0.1 * i as f64);
            let step = rml_step(&dg, &r, &u, &uj, &c, &gamma, lambda).unwrap();
            let ci = c.clone().try_inverse().unwrap();
            let gi = DMatrix::from_diagonal(&gamma.map(|v| 1.0 / v));
            let h = dg.transpose() * &gi * &dg + &ci * (1.0 + lambda);
            let rhs = dg.transpose() * &gi * &r - &ci * (&u - &uj);
            let direct = h.lu().solve(&rhs).unwrap();
            prop_assert!((&step - &direct).norm() <= 1e-8 * direct.norm().max(1e-12));
        }
    }

    #[test]
    fn scalar_linear_member_reaches_minimizer() {
        // J = ½(y − a u)²/γ + ½(u − u_j)²/c is minimized at
        // u* = (a y/γ + u_j/c)/(a²/γ + 1/c)
        let (a, cv, gv, y, uj) = (2.0, 1.5, 0.3, 1.2, -0.4);
        let prior = prior_from(DMatrix::from_element(1, 1, cv));
        let g = LinearForward::new(DMatrix::from_element(1, 1, a)).unwrap();
        let p = RmlLmParams {
            eps0: 1e-14,
            eps1: 1e-12,
            ..Default::default()
        };
        let o = rml_member(0, &s(uj), &s(y), &p, &prior, &s(gv), &g);
        let exact = (a * y / gv + uj / cv) / (a * a / gv + 1.0 / cv);
        assert!((o.u[0] - exact).abs() <= 1e-6 * exact.abs(), "{} vs {exact}", o.u[0]);
        let t = &o.trace;
        assert!(t.stop.is_some() && !t.failed());
        // objective nonincreasing over accepted steps, λ bookkeeping exact
        assert!(t.objectives.windows(2).all(|w| w[1] <= w[0]));
        for k in 1..t.lambdas.len() {
            let expect = if t.accepted[k - 1] {
                t.lambdas[k - 1] / p.kappa
            } else {
                t.lambdas[k - 1] * p.kappa
            };
            assert!((t.lambdas[k] - expect).abs() <= 1e-15 * expect);
        }
        let j0 = t.objectives[0];
        let lam0 = (j0 / 1.0).sqrt().min(j0 / 1.0);
        assert!((t.lambdas[0] - lam0).abs() <= 1e-15 * lam0);
    }

    #[test]
    fn stationary_start_takes_no_step() {
        // zero sensitivity and u = u_j: the gradient vanishes
        let prior = prior_from(DMatrix::identity(2, 2));
        let g = LinearForward::new(DMatrix::zeros(1, 2)).unwrap();
        let uj = DVector::from_vec(vec![0.7, -0.1]);
        let o = rml_member(0, &uj, &s(1.0), &RmlLmParams::default(), &prior, &s(1.0), &g);
        assert_eq!(o.trace.stop, Some(StopReason::Stationary));
        assert!(o.trace.accepted.is_empty());
        assert_eq!(o.u, uj);
    }

    #[test]
    fn lambda_guard_stops_rejections() {
        // a Jacobian that points the wrong way makes every step uphill
        struct Liar;
        impl ForwardModel for Liar {
            fn n_params(&self) -> usize {
                1
            }
            fn n_data(&self) -> usize {
                1
            }
            fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(u * 3.0)
            }
            fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
                Ok((u * 3.0, DMatrix::from_element(1, 1, -3.0)))
            }
        }
        let prior = prior_from(DMatrix::from_element(1, 1, 1e-6));
        let p = RmlLmParams {
            max_outer: 1000,
            ..Default::default()
        };
        let o = rml_member(0, &s(0.0), &s(5.0), &p, &prior, &s(1.0), &Liar);
        assert_eq!(o.trace.stop, Some(StopReason::LambdaOverflow));
        assert!(o.trace.accepted.iter().all(|a| !a));
        assert!(*o.trace.lambdas.last().unwrap() <= p.lambda_max);
    }

    #[test]
    fn es_is_one_fixed_smoother_step() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, -0.3]);
        let g = LinearForward::new(a).unwrap();
        let obs = ObservationSet::new(
            DVector::from_vec(vec![2.0, -1.5]),
            DVector::from_vec(vec![0.1, 0.2]),
            2f64.sqrt(),
            MeasurementLayout::generic(2),
        )
        .unwrap();
        let init: Vec<_> = (0..9)
            .map(|j| DVector::from_fn(3, |i, _| ((i * 3 + j * 5) as f64 * 0.7).sin()))
            .collect();
        let pert = perturb(&obs, 9, 1).unwrap();
        let es = standard_es_from(&init, &pert, &obs, &g).unwrap();
        let ir = run_from(
            &init,
            &pert,
            &obs,
            &IrEsParams {
                n_e: 9,
                m_es: 1,
                ..Default::default()
            },
            SmootherOptions {
                fixed_alpha: Some(1.0),
                fixed_steps: Some(1),
            },
            &g,
        )
        .unwrap();
        assert_eq!(es.smoother.as_ref().unwrap().iterations(), 1);
        for (x, y) in es.members.iter().zip(&ir.members) {
            assert!((x - y).amax() <= 1e-12 * x.amax().max(1.0));
        }
        // y_j = w_j leaves the ensemble unchanged
        let exact = crate::observations::perturb_with(
            &obs,
            init.iter().map(|u| g.evaluate(u).unwrap() - &obs.y).collect(),
        )
        .unwrap();
        let same = standard_es_from(&init, &exact, &obs, &g).unwrap();
        for (x, y) in same.members.iter().zip(&init) {
            assert!((x - y).amax() <= 1e-12);
        }
    }
}
