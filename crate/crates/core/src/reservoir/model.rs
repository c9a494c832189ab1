use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sim::{run, Prepared, SimTrajectory};
use super::{adjoint, ReservoirModelConfig};
use crate::error::Result;
use crate::forward::{fd_jacobian, FdScheme, ForwardModel};

/// How [`ReservoirForward`] produces `DG`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum JacobianMethod {
    /// Column-wise finite differences with step `step` in log-permeability.
    FiniteDifference { scheme: FdScheme, step: f64 },
    /// One reverse sweep through the recorded simulation.
    Adjoint,
}

impl Default for JacobianMethod {
    fn default() -> Self {
        JacobianMethod::FiniteDifference {
            scheme: FdScheme::Forward,
            step: 1e-6,
        }
    }
}

/// The measurement map `u ↦ G(u)` of a reservoir configuration.
#[derive(Debug, Clone)]
pub struct ReservoirForward {
    prep: Prepared,
    method: JacobianMethod,
}

impl ReservoirForward {
    pub fn new(config: &ReservoirModelConfig, method: JacobianMethod) -> Result<Self> {
        Ok(Self {
            prep: Prepared::new(config)?,
            method,
        })
    }

    pub fn config(&self) -> &ReservoirModelConfig {
        &self.prep.config
    }

    pub fn method(&self) -> JacobianMethod {
        self.method
    }

    pub fn with_method(mut self, method: JacobianMethod) -> Self {
        self.method = method;
        self
    }

    pub fn simulate(&self, u: &DVector<f64>) -> Result<SimTrajectory> {
        Ok(run(&self.prep, u.as_slice(), None, false)?.trajectory)
    }

    /// Sub-step counts the adaptive CFL rule picks for `u`.
    pub fn schedule(&self, u: &DVector<f64>) -> Result<Vec<usize>> {
        Ok(self.simulate(u)?.substeps)
    }

    /// `G(u)` with the sub-step counts fixed to `schedule`.
    pub fn evaluate_pinned(&self, u: &DVector<f64>, schedule: &[usize]) -> Result<DVector<f64>> {
        let t = run(&self.prep, u.as_slice(), Some(schedule), false)?.trajectory;
        Ok(t.data_vector(&self.prep.config))
    }

    /// Finite-difference Jacobian. Perturbed runs reuse the sub-step schedule
    /// of the base run, so the differences see one smooth discrete map.
    pub fn fd_jacobian(
        &self,
        u: &DVector<f64>,
        scheme: FdScheme,
        step: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let base = self.simulate(u)?;
        let g0 = base.data_vector(&self.prep.config);
        let schedule = base.substeps;
        let j = fd_jacobian(
            |v| self.evaluate_pinned(v, &schedule),
            u,
            Some(&g0),
            scheme,
            step,
        )?;
        Ok((g0, j))
    }

    pub fn adjoint_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        adjoint::jacobian(&self.prep, u.as_slice())
    }
}

impl ForwardModel for ReservoirForward {
    fn n_params(&self) -> usize {
        self.prep.n_cells()
    }

    fn n_data(&self) -> usize {
        self.prep.config.n_data()
    }

    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.simulate(u)?.data_vector(&self.prep.config))
    }

    fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self.method {
            JacobianMethod::FiniteDifference { scheme, step } => self.fd_jacobian(u, scheme, step),
            JacobianMethod::Adjoint => self.adjoint_jacobian(u),
        }
    }
}
