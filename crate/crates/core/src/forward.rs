//! The forward-map interface shared by every inversion method, a linear
//! test operator, and finite-difference sensitivities.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};

/// `G : R^n -> R^N` with sensitivities.
///
/// Implementations must be pure: the same `u` always gives the same output,
/// so that members can be evaluated in any order on any thread.
pub trait ForwardModel: Send + Sync {
    fn n_params(&self) -> usize;
    fn n_data(&self) -> usize;

    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// `(G(u), DG(u))`. Implementations may share work between the two.
    fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;

    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.evaluate_with_jacobian(u)?.1)
    }
}

impl<T: ForwardModel + ?Sized> ForwardModel for &T {
    fn n_params(&self) -> usize {
        (**self).n_params()
    }
    fn n_data(&self) -> usize {
        (**self).n_data()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).evaluate(u)
    }
    fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (**self).evaluate_with_jacobian(u)
    }
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(u)
    }
}

/// `G(u) = A u` with the exact Jacobian `A`.
#[derive(Debug, Clone)]
pub struct LinearForward {
    a: DMatrix<f64>,
}

impl LinearForward {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("linear operator has non-finite entries".into()));
        }
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl ForwardModel for LinearForward {
    fn n_params(&self) -> usize {
        self.a.ncols()
    }
    fn n_data(&self) -> usize {
        self.a.nrows()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("linear forward input", self.a.ncols(), u.len())?;
        Ok(&self.a * u)
    }
    fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.evaluate(u)?, self.a.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FdScheme {
    #[default]
    Forward,
    Central,
}

/// Column-by-column finite-difference Jacobian of `f` at `u`.
///
/// Columns are evaluated in parallel and assembled in index order, so the
/// result does not depend on the thread schedule. `base` may carry an
/// already computed `f(u)` for the forward scheme.
pub fn fd_jacobian<F>(
    f: F,
    u: &DVector<f64>,
    base: Option<&DVector<f64>>,
    scheme: FdScheme,
    h: f64,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let n = u.len();
    let g0 = match (scheme, base) {
        (FdScheme::Forward, Some(b)) => Some(b.clone()),
        (FdScheme::Forward, None) => Some(f(u)?),
        (FdScheme::Central, _) => None,
    };
    let cols: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut up = u.clone();
            up[k] += h;
            let gp = f(&up)?;
            match &g0 {
                Some(g0) => Ok((gp - g0) / h),
                None => {
                    let mut um = u.clone();
                    um[k] -= h;
                    let gm = f(&um)?;
                    Ok((gp - gm) / (2.0 * h))
                }
            }
        })
        .collect::<Result<_>>()?;
    let m = cols.first().map_or(base.map_or(0, |b| b.len()), |c| c.len());
    let mut j = DMatrix::zeros(m, n);
    for (k, c) in cols.into_iter().enumerate() {
        j.set_column(k, &c);
    }
    Ok(j)
}

/// Wraps a forward model and counts evaluations and Jacobian requests.
pub struct Counted<F> {
    inner: F,
    evaluations: AtomicU64,
    jacobians: AtomicU64,
}

impl<F: ForwardModel> Counted<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            evaluations: AtomicU64::new(0),
            jacobians: AtomicU64::new(0),
        }
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn jacobians(&self) -> u64 {
        self.jacobians.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: ForwardModel> ForwardModel for Counted<F> {
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }
    fn n_data(&self) -> usize {
        self.inner.n_data()
    }
    fn evaluate(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(u)
    }
    fn evaluate_with_jacobian(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.jacobians.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate_with_jacobian(u)
    }
    fn jacobian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.jacobians.fetch_add(1, Ordering::Relaxed);
        self.inner.jacobian(u)
    }
}
