//! Reverse-mode sensitivities of the discrete forward map.
//!
//! The sweep differentiates exactly the arithmetic performed by
//! [`super::sim::run`] for a fixed sub-step schedule and fixed upwind
//! directions: all data components are carried at once as the columns of
//! the adjoint matrices, so one backward pass yields the full Jacobian.

use nalgebra::{DMatrix, DVector};

use super::sim::{run, PreparedControl, Prepared, StepTape};
use super::{mobility, WellKind, WellModel, SECONDS_PER_DAY};
use crate::error::Result;

/// `(G(u), DG(u))` from one forward run plus one reverse sweep.
pub(crate) fn jacobian(prep: &Prepared, u: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let out = run(prep, u, None, true)?;
    let tape = out.tape.expect("tape requested");
    let traj = out.trajectory;
    let cfg = &prep.config;
    let fluids = &cfg.fluids;
    let n = prep.n_cells();
    let nd = cfg.n_data();
    let n_steps = cfg.n_steps;
    let perm: Vec<f64> = u.iter().map(|v| v.exp()).collect();

    let mut data_pos = vec![0usize; prep.wells.len()];
    for (pos, &w) in cfg.measurement_order().iter().enumerate() {
        data_pos[w] = pos * n_steps;
    }

    // row-major (cell, data) adjoint blocks
    let mut sbar = vec![0.0; n * nd];
    let mut ubar = vec![0.0; n * nd];
    let mut pbar = vec![0.0; n * nd];
    let mut z = vec![0.0; n * nd];
    let nf = prep.faces.len();
    let mut fbar = vec![0.0; nf * nd];
    let mut tbar = vec![0.0; nf * nd];
    let nw = prep.wells.len();
    let mut qbar = vec![0.0; nw * nd];
    let mut jbar = vec![0.0; nw * nd];
    let mut col = vec![0.0; n];

    for step in (0..n_steps).rev() {
        let tp: &StepTape = &tape[step];
        let s_now = traj.saturations[step].values.as_slice();
        let p = &tp.p;
        pbar.iter_mut().for_each(|v| *v = 0.0);

        // measurement functionals at (p^n, s^n)
        for (k, w) in prep.wells.iter().enumerate() {
            let d = data_pos[k] + step;
            let c = w.cell;
            let wk = w.omega * perm[c];
            let s = s_now[c];
            let (lw, l) = mobility(s, fluids);
            let idx = c * nd + d;
            match (cfg.model, w.kind, w.control) {
                (WellModel::A, WellKind::Injector, PreparedControl::Rate(q)) => {
                    pbar[idx] += 1.0;
                    sbar[idx] += -q * fluids.d_lambda(s) / (wk * l * l);
                    ubar[idx] += -q / (wk * l);
                }
                (WellModel::A, WellKind::Producer, PreparedControl::Bhp(pbh)) => {
                    pbar[idx] += wk * lw * SECONDS_PER_DAY;
                    sbar[idx] += wk * fluids.d_lambda_w(s) * (p[c] - pbh) * SECONDS_PER_DAY;
                    ubar[idx] += wk * lw * (p[c] - pbh) * SECONDS_PER_DAY;
                }
                (WellModel::B, WellKind::Injector, PreparedControl::Bhp(pbh)) => {
                    let jw = wk * prep.well_mobility(w, s);
                    pbar[idx] += -jw * SECONDS_PER_DAY;
                    ubar[idx] += jw * (pbh - p[c]) * SECONDS_PER_DAY;
                }
                (WellModel::B, WellKind::Producer, PreparedControl::Rate(q)) => {
                    sbar[idx] += fluids.d_frac_flow(s) * (-q * SECONDS_PER_DAY);
                }
                _ => unreachable!("controls validated against the well model"),
            }
        }

        // saturation sub-steps, last to first
        fbar.iter_mut().for_each(|v| *v = 0.0);
        qbar.iter_mut().for_each(|v| *v = 0.0);
        let up: Vec<usize> = prep
            .faces
            .iter()
            .enumerate()
            .map(|(e, f)| if tp.flux[e] > 0.0 { f.a } else { f.b })
            .collect();
        for sub in (0..tp.sub_states.len()).rev() {
            let sb = &tp.sub_states[sub];
            for &c in &tp.clamped[sub] {
                sbar[c * nd..(c + 1) * nd].iter_mut().for_each(|v| *v = 0.0);
            }
            for c in 0..n {
                let coef = tp.dt_sub / prep.pore_volume[c];
                for d in 0..nd {
                    z[c * nd + d] = coef * sbar[c * nd + d];
                }
            }
            for (e, f) in prep.faces.iter().enumerate() {
                let su = sb[up[e]];
                let fw = fluids.frac_flow(su);
                let dfw = fluids.d_frac_flow(su) * tp.flux[e];
                let (za, zb) = (f.a * nd, f.b * nd);
                let uo = up[e] * nd;
                let fo = e * nd;
                for d in 0..nd {
                    let diff = z[zb + d] - z[za + d];
                    sbar[uo + d] += dfw * diff;
                    fbar[fo + d] += fw * diff;
                }
            }
            for (k, w) in prep.wells.iter().enumerate() {
                let c = w.cell;
                let (co, qo) = (c * nd, k * nd);
                match w.kind {
                    WellKind::Injector => {
                        for d in 0..nd {
                            qbar[qo + d] += z[co + d];
                        }
                    }
                    WellKind::Producer => {
                        let fw = fluids.frac_flow(sb[c]);
                        let dfw = fluids.d_frac_flow(sb[c]) * tp.well_q[k];
                        for d in 0..nd {
                            sbar[co + d] += dfw * z[co + d];
                            qbar[qo + d] += fw * z[co + d];
                        }
                    }
                }
            }
        }

        // fluxes F_e = t_e (p_a - p_b)
        for (e, f) in prep.faces.iter().enumerate() {
            let t = tp.trans[e] * tp.lam_face[e];
            let dp = p[f.a] - p[f.b];
            let (fo, ao, bo) = (e * nd, f.a * nd, f.b * nd);
            for d in 0..nd {
                let g = fbar[fo + d];
                tbar[fo + d] = g * dp;
                pbar[ao + d] += g * t;
                pbar[bo + d] -= g * t;
            }
        }
        // BHP well rates q = J (P_bh - p_c)
        jbar.iter_mut().for_each(|v| *v = 0.0);
        for (k, w) in prep.wells.iter().enumerate() {
            if let PreparedControl::Bhp(pbh) = w.control {
                let c = w.cell;
                for d in 0..nd {
                    let g = qbar[k * nd + d];
                    jbar[k * nd + d] += g * (pbh - p[c]);
                    pbar[c * nd + d] -= g * tp.well_j[k];
                }
            }
        }

        // pressure solve A p = b: λ = A⁻¹ p̄, Ā = -λ pᵀ, b̄ = λ
        let lam = &mut z;
        for d in 0..nd {
            for c in 0..n {
                col[c] = pbar[c * nd + d];
            }
            if col.iter().any(|v| *v != 0.0) {
                tp.factor.solve_in_place(&mut col);
            }
            for c in 0..n {
                lam[c * nd + d] = col[c];
            }
        }
        for (e, f) in prep.faces.iter().enumerate() {
            let dp = p[f.a] - p[f.b];
            let (fo, ao, bo) = (e * nd, f.a * nd, f.b * nd);
            for d in 0..nd {
                tbar[fo + d] -= (lam[ao + d] - lam[bo + d]) * dp;
            }
        }
        for (k, w) in prep.wells.iter().enumerate() {
            if let PreparedControl::Bhp(pbh) = w.control {
                let c = w.cell;
                for d in 0..nd {
                    jbar[k * nd + d] += lam[c * nd + d] * (pbh - p[c]);
                }
            }
        }

        // t_e = geom · H(K_a, K_b) · λ_face(s^{n-1})
        let s_prev = &tp.s_prev;
        for (e, f) in prep.faces.iter().enumerate() {
            let (ka, kb) = (perm[f.a], perm[f.b]);
            let sum2 = (ka + kb) * (ka + kb);
            let dha = f.geom * 2.0 * ka * kb * kb / sum2 * tp.lam_face[e];
            let dhb = f.geom * 2.0 * kb * ka * ka / sum2 * tp.lam_face[e];
            let (fo, ao, bo) = (e * nd, f.a * nd, f.b * nd);
            for d in 0..nd {
                ubar[ao + d] += tbar[fo + d] * dha;
                ubar[bo + d] += tbar[fo + d] * dhb;
            }
            match &tp.upwind_a {
                Some(upw) => {
                    let cu = if upw[e] { f.a } else { f.b };
                    let g = tp.trans[e] * fluids.d_lambda(s_prev[cu]);
                    let uo = cu * nd;
                    for d in 0..nd {
                        sbar[uo + d] += tbar[fo + d] * g;
                    }
                }
                None => {
                    let ga = 0.5 * tp.trans[e] * fluids.d_lambda(s_prev[f.a]);
                    let gb = 0.5 * tp.trans[e] * fluids.d_lambda(s_prev[f.b]);
                    for d in 0..nd {
                        sbar[ao + d] += tbar[fo + d] * ga;
                        sbar[bo + d] += tbar[fo + d] * gb;
                    }
                }
            }
        }
        // J_w = ω K_c λ_well(s^{n-1})
        for (k, w) in prep.wells.iter().enumerate() {
            if let PreparedControl::Bhp(_) = w.control {
                let c = w.cell;
                let ds = match w.kind {
                    WellKind::Producer => w.omega * perm[c] * fluids.d_lambda(s_prev[c]),
                    WellKind::Injector => 0.0,
                };
                for d in 0..nd {
                    let g = jbar[k * nd + d];
                    ubar[c * nd + d] += g * tp.well_j[k];
                    sbar[c * nd + d] += g * ds;
                }
            }
        }
    }

    let y = traj.data_vector(cfg);
    let jac = DMatrix::from_fn(nd, n, |d, c| ubar[c * nd + d]);
    Ok((y, jac))
}
