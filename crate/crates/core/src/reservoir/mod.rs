//! Incompressible two-phase (oil–water) reservoir model: configuration,
//! IMPES simulator, well models A and B, and the measurement map.

mod adjoint;
mod export;
mod model;
mod sim;

pub use export::{write_trajectory, write_well_records_csv};
pub use model::{JacobianMethod, ReservoirForward};
pub use sim::{simulate, simulate_with_schedule, SimTrajectory};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::GridGeometry;
use crate::observations::{MeasurementEntry, MeasurementKind, MeasurementLayout};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidSpec {
    /// Water viscosity (Pa·s).
    pub mu_w: f64,
    /// Oil viscosity (Pa·s).
    pub mu_o: f64,
    pub krw_coeff: f64,
}

impl Default for FluidSpec {
    fn default() -> Self {
        Self {
            mu_w: 5.0e-4,
            mu_o: 1.0e-2,
            krw_coeff: 0.3,
        }
    }
}

impl FluidSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu_w > 0.0 && self.mu_o > 0.0 && self.krw_coeff > 0.0) {
            return Err(Error::InvalidInput("fluid parameters must be positive".into()));
        }
        Ok(())
    }

    /// `d/ds` of the water mobility.
    #[inline]
    pub(crate) fn d_lambda_w(&self, s: f64) -> f64 {
        2.0 * self.krw_coeff * s / self.mu_w
    }

    /// `d/ds` of the total mobility.
    #[inline]
    pub(crate) fn d_lambda(&self, s: f64) -> f64 {
        -2.0 * (1.0 - s) / self.mu_o + self.d_lambda_w(s)
    }

    #[inline]
    pub(crate) fn frac_flow(&self, s: f64) -> f64 {
        let (lw, l) = mobility(s, self);
        lw / l
    }

    #[inline]
    pub(crate) fn d_frac_flow(&self, s: f64) -> f64 {
        let (lw, l) = mobility(s, self);
        (self.d_lambda_w(s) * l - lw * self.d_lambda(s)) / (l * l)
    }

    /// Upper bound on `f'(s)` over `[0, 1]`, used for the CFL condition.
    pub fn max_frac_flow_slope(&self) -> f64 {
        let n = 20_000;
        let coarse = (0..=n)
            .map(|k| self.d_frac_flow(k as f64 / n as f64))
            .fold(0.0, f64::max);
        // the grid resolves the smooth maximum to well under this margin
        coarse * 1.001
    }
}

/// Water and total mobility `(λ_w, λ)` at saturation `s` (clamped to `[0,1]`).
#[inline]
pub fn mobility(s: f64, fluids: &FluidSpec) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let lw = fluids.krw_coeff * s * s / fluids.mu_w;
    let lo = (1.0 - s) * (1.0 - s) / fluids.mu_o;
    (lw, lo + lw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WellKind {
    Injector,
    Producer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WellControl {
    /// Prescribed total volumetric rate (m³/day, positive magnitude).
    Rate { m3_per_day: f64 },
    /// Prescribed bottom-hole pressure (Pa).
    Bhp { pa: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WellSpec {
    pub name: String,
    pub kind: WellKind,
    /// Cell coordinates `(i, j)`.
    pub cell: (usize, usize),
    /// Peaceman index ω (m); computed from the grid when absent.
    #[serde(default)]
    pub well_index: Option<f64>,
    pub control: WellControl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WellModel {
    /// Rate-controlled injectors, BHP-controlled producers.
    A,
    /// BHP-controlled injectors, rate-controlled producers.
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Porosity {
    Constant(f64),
    Field(Vec<f64>),
}

impl Porosity {
    pub fn at(&self, cell: usize) -> f64 {
        match self {
            Porosity::Constant(v) => *v,
            Porosity::Field(v) => v[cell],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirModelConfig {
    pub geometry: GridGeometry,
    #[serde(default)]
    pub fluids: FluidSpec,
    pub porosity: Porosity,
    /// Reservoir thickness (m).
    pub thickness: f64,
    pub wells: Vec<WellSpec>,
    pub model: WellModel,
    pub horizon_days: f64,
    pub n_steps: usize,
    pub initial_pressure: f64,
    pub initial_saturation: f64,
    #[serde(default = "default_cfl")]
    pub cfl_target: f64,
    #[serde(default = "default_substep_cap")]
    pub substep_cap: usize,
}

fn default_cfl() -> f64 {
    0.9
}

fn default_substep_cap() -> usize {
    10_000
}

/// Peaceman well index `2π Δz / ln(r_e / r_w)` with `r_e = 0.14 √(dx² + dy²)`.
pub fn peaceman_index(geometry: &GridGeometry, dz: f64, r_w: f64) -> f64 {
    let r_e = 0.14 * (geometry.dx().powi(2) + geometry.dy().powi(2)).sqrt();
    2.0 * std::f64::consts::PI * dz / (r_e / r_w).ln()
}

pub const DEFAULT_WELL_RADIUS: f64 = 0.1;

impl ReservoirModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.fluids.validate()?;
        let n = self.geometry.n_cells();
        match &self.porosity {
            Porosity::Constant(p) if !(*p > 0.0 && *p < 1.0) => {
                return Err(Error::InvalidInput("porosity must lie in (0, 1)".into()))
            }
            Porosity::Field(v) => {
                if v.len() != n {
                    return Err(Error::DimensionMismatch {
                        context: "porosity field",
                        expected: n,
                        actual: v.len(),
                    });
                }
                if v.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
                    return Err(Error::InvalidInput("porosity must lie in (0, 1)".into()));
                }
            }
            _ => {}
        }
        if !(self.thickness > 0.0) {
            return Err(Error::InvalidInput("thickness must be positive".into()));
        }
        if self.n_steps == 0 || !(self.horizon_days > 0.0) {
            return Err(Error::InvalidInput("need n_steps >= 1 and a positive horizon".into()));
        }
        if !(0.0..=1.0).contains(&self.initial_saturation) {
            return Err(Error::InvalidInput("initial saturation must lie in [0, 1]".into()));
        }
        if !(self.cfl_target > 0.0 && self.cfl_target <= 1.0) || self.substep_cap == 0 {
            return Err(Error::InvalidInput("cfl_target must lie in (0, 1], substep_cap >= 1".into()));
        }
        let n_inj = self.wells.iter().filter(|w| w.kind == WellKind::Injector).count();
        if n_inj == 0 || n_inj == self.wells.len() {
            return Err(Error::InvalidInput(
                "need at least one injector and one producer".into(),
            ));
        }
        for w in &self.wells {
            if w.cell.0 >= self.geometry.nx || w.cell.1 >= self.geometry.ny {
                return Err(Error::InvalidInput(format!("well {} outside the grid", w.name)));
            }
            if let Some(wi) = w.well_index {
                if !(wi > 0.0) {
                    return Err(Error::InvalidInput(format!("well {} has ω <= 0", w.name)));
                }
            }
            let bhp_expected = matches!(
                (self.model, w.kind),
                (WellModel::A, WellKind::Producer) | (WellModel::B, WellKind::Injector)
            );
            match (w.control, bhp_expected) {
                (WellControl::Bhp { pa }, true) if pa.is_finite() => {}
                (WellControl::Rate { m3_per_day }, false) if m3_per_day >= 0.0 => {}
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "well {} carries the wrong control for model {:?}",
                        w.name, self.model
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn dt_seconds(&self) -> f64 {
        self.horizon_days * SECONDS_PER_DAY / self.n_steps as f64
    }

    pub fn well_index(&self, w: &WellSpec) -> f64 {
        w.well_index
            .unwrap_or_else(|| peaceman_index(&self.geometry, self.thickness, DEFAULT_WELL_RADIUS))
    }

    /// Wells in measurement order: injectors first, then producers, each in
    /// configuration order.
    pub fn measurement_order(&self) -> Vec<usize> {
        let inj = (0..self.wells.len()).filter(|&k| self.wells[k].kind == WellKind::Injector);
        let prod = (0..self.wells.len()).filter(|&k| self.wells[k].kind == WellKind::Producer);
        inj.chain(prod).collect()
    }

    pub fn n_data(&self) -> usize {
        self.wells.len() * self.n_steps
    }

    pub fn measurement_kind(&self, w: &WellSpec) -> MeasurementKind {
        match (self.model, w.kind) {
            (WellModel::A, WellKind::Injector) => MeasurementKind::Bhp,
            _ => MeasurementKind::WaterRate,
        }
    }

    /// Well-major, time-minor layout of the data vector.
    pub fn measurement_layout(&self) -> MeasurementLayout {
        let dt = self.dt_seconds();
        let mut entries = Vec::with_capacity(self.n_data());
        for k in self.measurement_order() {
            let w = &self.wells[k];
            for step in 0..self.n_steps {
                entries.push(MeasurementEntry {
                    source: Some(k),
                    label: w.name.clone(),
                    step,
                    time_s: dt * (step + 1) as f64,
                    kind: self.measurement_kind(w),
                });
            }
        }
        MeasurementLayout { entries }
    }

    /// The reference desk problem: 20×20 cells over 2 km × 2 km, one central
    /// rate-controlled injector and four BHP producers, ten report steps
    /// over three years.
    pub fn desk(model: WellModel) -> Self {
        Self::five_spot(20, 20, 2000.0, 10, (10, 10), [(2, 2), (17, 2), (2, 17), (17, 17)], model)
    }

    /// Desk layout on an odd grid with the injector in the exact centre and
    /// producers in the corners: the pattern is invariant under all eight
    /// symmetries of the square.
    pub fn symmetric_five_spot(n: usize, model: WellModel) -> Self {
        let c = n / 2;
        let e = n - 3;
        Self::five_spot(n, n, 2000.0, 10, (c, c), [(2, 2), (e, 2), (2, e), (e, e)], model)
    }

    fn five_spot(
        nx: usize,
        ny: usize,
        extent: f64,
        n_steps: usize,
        injector: (usize, usize),
        producers: [(usize, usize); 4],
        model: WellModel,
    ) -> Self {
        let rate = 2.6e3;
        let bhp = 2.7e7;
        let (inj_control, prod_control) = match model {
            WellModel::A => (
                WellControl::Rate { m3_per_day: rate },
                WellControl::Bhp { pa: bhp },
            ),
            WellModel::B => (
                WellControl::Bhp { pa: bhp },
                WellControl::Rate { m3_per_day: rate / 4.0 },
            ),
        };
        let mut wells = vec![WellSpec {
            name: "I1".into(),
            kind: WellKind::Injector,
            cell: injector,
            well_index: None,
            control: inj_control,
        }];
        for (k, cell) in producers.iter().enumerate() {
            wells.push(WellSpec {
                name: format!("P{}", k + 1),
                kind: WellKind::Producer,
                cell: *cell,
                well_index: None,
                control: prod_control,
            });
        }
        Self {
            geometry: GridGeometry {
                nx,
                ny,
                lx: extent,
                ly: extent,
            },
            fluids: FluidSpec::default(),
            porosity: Porosity::Constant(0.2),
            thickness: 10.0,
            wells,
            model,
            horizon_days: 3.0 * 365.0,
            n_steps,
            initial_pressure: 2.5e7,
            initial_saturation: 0.0,
            cfl_target: 0.9,
            substep_cap: 10_000,
        }
    }
}
