//! Grid geometry, cell fields and the Gaussian prior with an anisotropic
//! spherical covariance.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::rng;

/// Uniform rectangular 2D grid. Cells are indexed row-major with `y` outer:
/// `index = j * nx + i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    /// Physical extent along x (m).
    pub lx: f64,
    /// Physical extent along y (m).
    pub ly: f64,
}

impl GridGeometry {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        let g = Self { nx, ny, lx, ly };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidInput("grid needs nx >= 1 and ny >= 1".into()));
        }
        if !(self.lx > 0.0 && self.ly > 0.0) || !self.lx.is_finite() || !self.ly.is_finite() {
            return Err(Error::InvalidInput("grid extents must be positive".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.nx, index / self.nx)
    }

    pub fn cell_center(&self, index: usize) -> (f64, f64) {
        let (i, j) = self.coords(index);
        ((i as f64 + 0.5) * self.dx(), (j as f64 + 0.5) * self.dy())
    }
}

/// A scalar per cell: log-permeability, pressure or saturation.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub geometry: GridGeometry,
    pub values: DVector<f64>,
}

impl Field {
    pub fn new(geometry: GridGeometry, values: DVector<f64>) -> Result<Self> {
        ensure_len("field values", geometry.n_cells(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field values must be finite".into()));
        }
        Ok(Self { geometry, values })
    }

    pub fn constant(geometry: GridGeometry, value: f64) -> Self {
        Self {
            geometry,
            values: DVector::from_element(geometry.n_cells(), value),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.geometry.index(i, j)]
    }
}

/// Parameters of the anisotropic spherical variogram model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalCovarianceSpec {
    pub sigma2: f64,
    /// Correlation range along the major axis (m).
    pub range_max: f64,
    /// Correlation range along the minor axis (m).
    pub range_min: f64,
    /// Major-axis orientation, counterclockwise from +x (rad).
    pub angle: f64,
}

impl Default for SphericalCovarianceSpec {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            range_max: 1.0e3,
            range_min: 5.0e2,
            angle: std::f64::consts::FRAC_PI_2,
        }
    }
}

impl SphericalCovarianceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::InvalidInput("sigma2 must be positive".into()));
        }
        if !(self.range_min > 0.0) || !(self.range_max >= self.range_min) {
            return Err(Error::InvalidInput(
                "ranges must satisfy range_max >= range_min > 0".into(),
            ));
        }
        Ok(())
    }

    /// Anisotropic scaled distance of a separation vector.
    pub fn scaled_distance(&self, dx: f64, dy: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        ((along / self.range_max).powi(2) + (across / self.range_min).powi(2)).sqrt()
    }
}

/// Spherical correlation `1 - 1.5 h + 0.5 h³` on `[0, 1]`, zero beyond.
pub fn spherical_correlation(h: f64) -> f64 {
    if h >= 1.0 {
        0.0
    } else {
        1.0 - 1.5 * h + 0.5 * h * h * h
    }
}

pub fn build_spherical_covariance(
    geometry: &GridGeometry,
    spec: &SphericalCovarianceSpec,
) -> Result<DMatrix<f64>> {
    geometry.validate()?;
    spec.validate()?;
    let n = geometry.n_cells();
    let centers: Vec<(f64, f64)> = (0..n).map(|k| geometry.cell_center(k)).collect();
    let mut c = DMatrix::zeros(n, n);
    for a in 0..n {
        c[(a, a)] = spec.sigma2;
        for b in 0..a {
            let h = spec.scaled_distance(centers[b].0 - centers[a].0, centers[b].1 - centers[a].1);
            let v = spec.sigma2 * spherical_correlation(h);
            c[(a, b)] = v;
            c[(b, a)] = v;
        }
    }
    Ok(c)
}

/// Gaussian prior `N(mean, C)` with a stored lower-triangular factor.
#[derive(Debug, Clone)]
pub struct GaussianPrior {
    pub mean: Field,
    pub covariance: DMatrix<f64>,
    /// Lower-triangular `L` with `L Lᵀ = C + jitter I`.
    pub factor: DMatrix<f64>,
    pub jitter: f64,
}

const PSD_EPS: f64 = 1e-10;

pub fn factorize_prior(mean: Field, covariance: DMatrix<f64>) -> Result<GaussianPrior> {
    let n = mean.geometry.n_cells();
    if covariance.nrows() != n || covariance.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "prior covariance",
            expected: n,
            actual: covariance.nrows(),
        });
    }
    let scale = covariance.trace() / n as f64;
    for jitter in [0.0, 1e-12 * scale, PSD_EPS * scale] {
        let mut m = covariance.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = crate::linalg::cholesky(&m) {
            return Ok(GaussianPrior {
                mean,
                covariance,
                factor: ch.l(),
                jitter,
            });
        }
    }
    Err(Error::Factorization(
        "prior covariance not positive definite after maximal jitter".into(),
    ))
}

impl GaussianPrior {
    pub fn geometry(&self) -> GridGeometry {
        self.mean.geometry
    }

    pub fn dim(&self) -> usize {
        self.mean.values.len()
    }

    /// `mean + L z`.
    pub fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.mean.values + &self.factor * z
    }

    /// `L⁻¹ v` by forward substitution.
    pub fn whiten(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        ensure_len("whiten", self.dim(), v.len())?;
        self.factor
            .solve_lower_triangular(v)
            .ok_or_else(|| Error::Factorization("singular prior factor".into()))
    }

    /// `C⁻¹ v` through two triangular solves with the stored factor.
    pub fn precision_mul(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w = self.whiten(v)?;
        self.factor
            .tr_solve_lower_triangular(&w)
            .ok_or_else(|| Error::Factorization("singular prior factor".into()))
    }

    /// One standard-normal draw pushed through the prior.
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        self.transform(&z)
    }
}

pub fn standard_normal_vector<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

/// Draw `count` prior samples. Sample `i` uses its own substream `(seed, i)`.
pub fn sample_prior(prior: &GaussianPrior, seed: u64, count: usize) -> Vec<Field> {
    sample_prior_vectors(prior, seed, count)
        .into_iter()
        .map(|values| Field {
            geometry: prior.geometry(),
            values,
        })
        .collect()
}

pub fn sample_prior_vectors(prior: &GaussianPrior, seed: u64, count: usize) -> Vec<DVector<f64>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::substream(seed, &[rng::tag::PRIOR_SAMPLE, i as u64]);
            prior.draw(&mut r)
        })
        .collect()
}

/// Weight operator for [`weighted_norm`].
#[derive(Debug, Clone, Copy)]
pub enum NormWeight<'a> {
    /// Diagonal `W` given by its entries.
    Diagonal(&'a DVector<f64>),
    /// `W = L Lᵀ` given by the lower-triangular factor.
    Factored(&'a DMatrix<f64>),
}

/// `‖W^{-1/2} v‖₂`.
pub fn weighted_norm(v: &DVector<f64>, weight: NormWeight<'_>) -> Result<f64> {
    match weight {
        NormWeight::Diagonal(w) => {
            ensure_len("weighted norm", w.len(), v.len())?;
            if w.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::InvalidInput("weight must be positive definite".into()));
            }
            Ok(v.iter().zip(w.iter()).map(|(a, b)| a * a / b).sum::<f64>().sqrt())
        }
        NormWeight::Factored(l) => {
            ensure_len("weighted norm", l.nrows(), v.len())?;
            if l.diagonal().iter().any(|d| *d == 0.0) {
                return Err(Error::InvalidInput("singular weight factor".into()));
            }
            let x = l
                .solve_lower_triangular(v)
                .ok_or_else(|| Error::InvalidInput("singular weight factor".into()))?;
            Ok(x.norm())
        }
    }
}
