//! Sequential IMPES: one two-point-flux pressure solve per report step, then
//! explicit upwind saturation transport in CFL-limited sub-steps.

use nalgebra::DVector;

use super::{mobility, ReservoirModelConfig, WellControl, WellKind, WellModel, SECONDS_PER_DAY};
use crate::error::{ensure_len, Error, Result};
use crate::field::Field;
use crate::linalg::{BandedCholesky, SymBanded};

#[derive(Debug, Clone)]
pub struct SimTrajectory {
    /// Report times (s), one per step.
    pub times_s: Vec<f64>,
    pub pressures: Vec<Field>,
    pub saturations: Vec<Field>,
    /// Per well (configuration order), per step: the measured quantity of
    /// the well model (Pa for BHP, m³/day for water rates).
    pub well_records: Vec<Vec<f64>>,
    /// Per well, per step: total volumetric rate used in the pressure solve
    /// (m³/day, positive for injection).
    pub well_rates: Vec<Vec<f64>>,
    /// Per well, per step: magnitude of the total well rate at the report
    /// state (m³/day). For rate-controlled wells this is the prescribed rate.
    pub nominal_rates: Vec<Vec<f64>>,
    /// Saturation sub-steps taken in each step.
    pub substeps: Vec<usize>,
    /// `‖A p − b‖ / ‖b‖` of each pressure solve.
    pub pressure_residuals: Vec<f64>,
    /// Largest saturation correction applied by clamping to `[0, 1]`.
    pub max_clamp: f64,
}

impl SimTrajectory {
    /// Data vector in measurement order (well-major, time-minor, injectors
    /// first).
    pub fn data_vector(&self, config: &ReservoirModelConfig) -> DVector<f64> {
        let order = config.measurement_order();
        DVector::from_iterator(
            config.n_data(),
            order
                .iter()
                .flat_map(|&w| self.well_records[w].iter().copied()),
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Face {
    pub a: usize,
    pub b: usize,
    /// Thickness × cross-section length / centre distance (m).
    pub geom: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum PreparedControl {
    /// Total rate (m³/s, positive for injection).
    Rate(f64),
    /// Bottom-hole pressure (Pa).
    Bhp(f64),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedWell {
    pub cell: usize,
    pub omega: f64,
    pub kind: WellKind,
    pub control: PreparedControl,
}

/// Grid- and config-derived quantities that do not depend on `u`.
#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub config: ReservoirModelConfig,
    pub faces: Vec<Face>,
    pub wells: Vec<PreparedWell>,
    pub pore_volume: Vec<f64>,
    pub fprime_max: f64,
    pub dt: f64,
    pub bw: usize,
}

impl Prepared {
    pub fn new(config: &ReservoirModelConfig) -> Result<Self> {
        config.validate()?;
        let g = &config.geometry;
        let (nx, ny) = (g.nx, g.ny);
        let (dx, dy) = (g.dx(), g.dy());
        let h = config.thickness;
        let mut faces = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let c = g.index(i, j);
                if i + 1 < nx {
                    faces.push(Face { a: c, b: c + 1, geom: h * dy / dx });
                }
                if j + 1 < ny {
                    faces.push(Face { a: c, b: c + nx, geom: h * dx / dy });
                }
            }
        }
        let wells = config
            .wells
            .iter()
            .map(|w| {
                let control = match w.control {
                    WellControl::Rate { m3_per_day } => {
                        let q = m3_per_day / SECONDS_PER_DAY;
                        PreparedControl::Rate(if w.kind == WellKind::Injector { q } else { -q })
                    }
                    WellControl::Bhp { pa } => PreparedControl::Bhp(pa),
                };
                PreparedWell {
                    cell: g.index(w.cell.0, w.cell.1),
                    omega: config.well_index(w),
                    kind: w.kind,
                    control,
                }
            })
            .collect();
        let cell_volume = dx * dy * h;
        let pore_volume = (0..g.n_cells())
            .map(|c| config.porosity.at(c) * cell_volume)
            .collect();
        Ok(Self {
            config: config.clone(),
            faces,
            wells,
            pore_volume,
            fprime_max: config.fluids.max_frac_flow_slope(),
            dt: config.dt_seconds(),
            bw: if ny > 1 { nx } else { 1 },
        })
    }

    pub fn n_cells(&self) -> usize {
        self.pore_volume.len()
    }

    /// Mobility entering a BHP well's productivity `ω K λ`.
    #[inline]
    pub fn well_mobility(&self, w: &PreparedWell, s_cell: f64) -> f64 {
        match w.kind {
            WellKind::Producer => mobility(s_cell, &self.config.fluids).1,
            // the injected stream is pure water
            WellKind::Injector => mobility(1.0, &self.config.fluids).1,
        }
    }
}

#[inline]
pub(crate) fn harmonic(ka: f64, kb: f64) -> f64 {
    2.0 * ka * kb / (ka + kb)
}

/// Smallest value of `{1, 2, 3, 4, 6, 8, 12, 16, ...}` that is `>= n`.
///
/// Rounding sub-step counts to this coarse ladder makes the count (and with
/// it the discrete forward map) locally constant under small perturbations
/// of the permeability.
pub(crate) fn ladder(n: usize) -> usize {
    let mut p = 1usize;
    loop {
        if p >= n {
            return p;
        }
        if p >= 2 && p + p / 2 >= n {
            return p + p / 2;
        }
        p *= 2;
    }
}

/// Everything the reverse sweep needs from one report step.
#[derive(Debug, Clone)]
pub(crate) struct StepTape {
    pub s_prev: Vec<f64>,
    /// Per face, whether `a` is upstream for the face mobility; `None` on
    /// the first step (arithmetic average).
    pub upwind_a: Option<Vec<bool>>,
    /// `g_e · H(K_a, K_b)`.
    pub trans: Vec<f64>,
    /// Face mobility.
    pub lam_face: Vec<f64>,
    /// Per well productivity `ω K λ` (zero for rate wells).
    pub well_j: Vec<f64>,
    pub p: Vec<f64>,
    pub flux: Vec<f64>,
    /// Per well total rate (m³/s).
    pub well_q: Vec<f64>,
    pub factor: BandedCholesky,
    pub dt_sub: f64,
    /// Saturation before each sub-step.
    pub sub_states: Vec<Vec<f64>>,
    /// Cells clamped after each sub-step.
    pub clamped: Vec<Vec<usize>>,
}

pub(crate) struct RunOutput {
    pub trajectory: SimTrajectory,
    pub tape: Option<Vec<StepTape>>,
}

pub(crate) fn run(
    prep: &Prepared,
    u: &[f64],
    schedule: Option<&[usize]>,
    keep_tape: bool,
) -> Result<RunOutput> {
    let cfg = &prep.config;
    let g = cfg.geometry;
    let n = prep.n_cells();
    ensure_len("log-permeability", n, u.len())?;
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("log-permeability must be finite".into()));
    }
    if let Some(s) = schedule {
        ensure_len("sub-step schedule", cfg.n_steps, s.len())?;
    }
    let fluids = &cfg.fluids;
    let perm: Vec<f64> = u.iter().map(|v| v.exp()).collect();
    let trans: Vec<f64> = prep
        .faces
        .iter()
        .map(|f| f.geom * harmonic(perm[f.a], perm[f.b]))
        .collect();
    let n_wells = prep.wells.len();

    let mut s = vec![cfg.initial_saturation; n];
    let mut p_prev: Option<Vec<f64>> = None;
    let mut mat = SymBanded::zeros(n, prep.bw);
    let mut factor = BandedCholesky::default();
    let mut rhs = vec![0.0; n];
    let mut flux = vec![0.0; prep.faces.len()];
    let mut lam_face = vec![0.0; prep.faces.len()];
    let mut resid = vec![0.0; n];
    let mut frac = vec![0.0; n];
    let mut ax = vec![0.0; n];

    let mut traj = SimTrajectory {
        times_s: Vec::with_capacity(cfg.n_steps),
        pressures: Vec::with_capacity(cfg.n_steps),
        saturations: Vec::with_capacity(cfg.n_steps),
        well_records: vec![Vec::with_capacity(cfg.n_steps); n_wells],
        well_rates: vec![Vec::with_capacity(cfg.n_steps); n_wells],
        nominal_rates: vec![Vec::with_capacity(cfg.n_steps); n_wells],
        substeps: Vec::with_capacity(cfg.n_steps),
        pressure_residuals: Vec::with_capacity(cfg.n_steps),
        max_clamp: 0.0,
    };
    let mut tape = keep_tape.then(|| Vec::with_capacity(cfg.n_steps));

    for step in 0..cfg.n_steps {
        // pressure system
        mat.clear();
        rhs.iter_mut().for_each(|v| *v = 0.0);
        let upwind_a: Option<Vec<bool>> = p_prev
            .as_ref()
            .map(|pp| prep.faces.iter().map(|f| pp[f.a] >= pp[f.b]).collect());
        for (e, f) in prep.faces.iter().enumerate() {
            let lam = match &upwind_a {
                None => 0.5 * (mobility(s[f.a], fluids).1 + mobility(s[f.b], fluids).1),
                Some(up) => mobility(if up[e] { s[f.a] } else { s[f.b] }, fluids).1,
            };
            lam_face[e] = lam;
            let t = trans[e] * lam;
            mat.add(f.a, f.a, t);
            mat.add(f.b, f.b, t);
            mat.add(f.b, f.a, -t);
        }
        let mut well_j = vec![0.0; n_wells];
        for (k, w) in prep.wells.iter().enumerate() {
            match w.control {
                PreparedControl::Rate(q) => rhs[w.cell] += q,
                PreparedControl::Bhp(pbh) => {
                    let j = w.omega * perm[w.cell] * prep.well_mobility(w, s[w.cell]);
                    well_j[k] = j;
                    mat.add(w.cell, w.cell, j);
                    rhs[w.cell] += j * pbh;
                }
            }
        }
        mat.factorize(&mut factor)
            .map_err(|e| Error::PressureSolve(format!("step {}: {e}", step + 1)))?;
        let mut p = rhs.clone();
        factor.solve_in_place(&mut p);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::PressureSolve(format!("step {}: non-finite pressure", step + 1)));
        }
        mat.mul_vec(&p, &mut ax);
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rnorm = ax
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        traj.pressure_residuals
            .push(if bnorm > 0.0 { rnorm / bnorm } else { rnorm });

        // fluxes and well rates
        for (e, f) in prep.faces.iter().enumerate() {
            flux[e] = trans[e] * lam_face[e] * (p[f.a] - p[f.b]);
        }
        let well_q: Vec<f64> = prep
            .wells
            .iter()
            .enumerate()
            .map(|(k, w)| match w.control {
                PreparedControl::Rate(q) => q,
                PreparedControl::Bhp(pbh) => well_j[k] * (pbh - p[w.cell]),
            })
            .collect();
        for k in 0..n_wells {
            traj.well_rates[k].push(well_q[k] * SECONDS_PER_DAY);
        }

        // CFL-limited sub-step count
        let mut out = vec![0.0; n];
        for (e, f) in prep.faces.iter().enumerate() {
            if flux[e] > 0.0 {
                out[f.a] += flux[e];
            } else {
                out[f.b] -= flux[e];
            }
        }
        for (k, w) in prep.wells.iter().enumerate() {
            out[w.cell] += (-well_q[k]).max(0.0);
        }
        let rate = (0..n)
            .map(|c| out[c] / prep.pore_volume[c])
            .fold(0.0, f64::max);
        let need = (prep.dt * prep.fprime_max * rate / cfg.cfl_target).ceil() as usize;
        let m = match schedule {
            Some(sch) => sch[step],
            None => ladder(need.max(1)),
        };
        if m > cfg.substep_cap || need > cfg.substep_cap {
            return Err(Error::SubstepCap {
                step: step + 1,
                required: m.max(need),
                cap: cfg.substep_cap,
            });
        }
        let dt_sub = prep.dt / m as f64;
        traj.substeps.push(m);

        let s_prev = s.clone();
        let mut sub_states = Vec::new();
        let mut clamped_log = Vec::new();
        let up_sub: Vec<usize> = prep
            .faces
            .iter()
            .enumerate()
            .map(|(e, f)| if flux[e] > 0.0 { f.a } else { f.b })
            .collect();
        for _ in 0..m {
            if keep_tape {
                sub_states.push(s.clone());
            }
            resid.iter_mut().for_each(|v| *v = 0.0);
            for (fc, sc) in frac.iter_mut().zip(&s) {
                *fc = fluids.frac_flow(*sc);
            }
            for (e, f) in prep.faces.iter().enumerate() {
                let w = frac[up_sub[e]] * flux[e];
                resid[f.a] -= w;
                resid[f.b] += w;
            }
            for (k, w) in prep.wells.iter().enumerate() {
                resid[w.cell] += match w.kind {
                    WellKind::Injector => well_q[k],
                    WellKind::Producer => frac[w.cell] * well_q[k],
                };
            }
            let mut clamped = Vec::new();
            for c in 0..n {
                let v = s[c] + dt_sub * resid[c] / prep.pore_volume[c];
                let cv = v.clamp(0.0, 1.0);
                if cv != v {
                    traj.max_clamp = traj.max_clamp.max((cv - v).abs());
                    if keep_tape {
                        clamped.push(c);
                    }
                }
                s[c] = cv;
            }
            if keep_tape {
                clamped_log.push(clamped);
            }
        }

        // report-time measurements from (p^n, s^n)
        for (k, w) in prep.wells.iter().enumerate() {
            let c = w.cell;
            let (lw, l) = mobility(s[c], fluids);
            let wk = w.omega * perm[c];
            let (record, nominal) = match (cfg.model, w.kind, w.control) {
                (WellModel::A, WellKind::Injector, PreparedControl::Rate(q)) => {
                    (q / (wk * l) + p[c], q * SECONDS_PER_DAY)
                }
                (WellModel::A, WellKind::Producer, PreparedControl::Bhp(pbh)) => (
                    wk * lw * (p[c] - pbh) * SECONDS_PER_DAY,
                    (wk * l * (p[c] - pbh)).abs() * SECONDS_PER_DAY,
                ),
                (WellModel::B, WellKind::Injector, PreparedControl::Bhp(pbh)) => {
                    let v = wk * prep.well_mobility(w, s[c]) * (pbh - p[c]) * SECONDS_PER_DAY;
                    (v, v.abs())
                }
                (WellModel::B, WellKind::Producer, PreparedControl::Rate(q)) => {
                    let qd = -q * SECONDS_PER_DAY;
                    ((lw / l) * qd, qd)
                }
                _ => unreachable!("controls validated against the well model"),
            };
            traj.well_records[k].push(record);
            traj.nominal_rates[k].push(nominal);
        }
        traj.times_s.push(prep.dt * (step + 1) as f64);
        traj.pressures.push(Field {
            geometry: g,
            values: DVector::from_vec(p.clone()),
        });
        traj.saturations.push(Field {
            geometry: g,
            values: DVector::from_vec(s.clone()),
        });

        if let Some(t) = tape.as_mut() {
            t.push(StepTape {
                s_prev,
                upwind_a,
                trans: trans.clone(),
                lam_face: lam_face.clone(),
                well_j,
                p: p.clone(),
                flux: flux.clone(),
                well_q,
                factor: factor.clone(),
                dt_sub,
                sub_states,
                clamped: clamped_log,
            });
        }
        p_prev = Some(p);
    }
    if traj.max_clamp > 1e-12 {
        log::debug!("saturation clamp applied, max correction {:.3e}", traj.max_clamp);
    }
    Ok(RunOutput {
        trajectory: traj,
        tape,
    })
}

/// Simulate the waterflood for log-permeability `u`.
pub fn simulate(u: &Field, config: &ReservoirModelConfig) -> Result<SimTrajectory> {
    if u.geometry != config.geometry {
        return Err(Error::InvalidInput("field grid differs from the model grid".into()));
    }
    let prep = Prepared::new(config)?;
    Ok(run(&prep, u.values.as_slice(), None, false)?.trajectory)
}

/// Simulate with a prescribed number of saturation sub-steps per step.
pub fn simulate_with_schedule(
    u: &Field,
    config: &ReservoirModelConfig,
    schedule: &[usize],
) -> Result<SimTrajectory> {
    if u.geometry != config.geometry {
        return Err(Error::InvalidInput("field grid differs from the model grid".into()));
    }
    let prep = Prepared::new(config)?;
    Ok(run(&prep, u.values.as_slice(), Some(schedule), false)?.trajectory)
}
