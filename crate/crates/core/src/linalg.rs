//! Small dense and banded linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Symmetric banded matrix stored as its lower band, row by row.
///
/// Entry `(i, j)` with `i - bw <= j <= i` lives at `i * (bw + 1) + (i - j)`.
#[derive(Debug, Clone)]
pub struct SymBanded {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            band: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn clear(&mut self) {
        self.band.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bw);
        i * (self.bw + 1) + (i - j)
    }

    /// Add `v` to entry `(i, j)` (and implicitly `(j, i)`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        let k = self.idx(r, c);
        self.band[k] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        if r - c > self.bw {
            0.0
        } else {
            self.band[self.idx(r, c)]
        }
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        let w = self.bw + 1;
        out[..self.n].iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let row = &self.band[i * w..(i + 1) * w];
            out[i] += row[0] * x[i];
            for (d, a) in row.iter().enumerate().skip(1).take(i.min(self.bw)) {
                let j = i - d;
                out[i] += a * x[j];
                out[j] += a * x[i];
            }
        }
    }

    /// In-place Cholesky factorization `A = L Lᵀ` restricted to the band.
    pub fn factorize(&self, into: &mut BandedCholesky) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        into.n = n;
        into.bw = bw;
        into.band.clear();
        into.band.extend_from_slice(&self.band);
        let l = &mut into.band;
        let w = bw + 1;
        // row r keeps L[r, k] at r*w + (r - k): for a fixed row the entries
        // with k = j-1, j-2, .. sit contiguously, so dot products over the
        // shared column range are plain slice zips
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let len = j - lo;
            let rj = j * w;
            let row = &l[rj + 1..rj + 1 + len];
            let s = l[rj] - dot(row, row);
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Factorization(format!(
                    "banded matrix not positive definite at row {j} (pivot {s:e})"
                )));
            }
            let d = s.sqrt();
            l[rj] = d;
            let hi = (j + bw).min(n - 1);
            for i in (j + 1)..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let m = j - lo_i;
                let ri = i * w + (i - j);
                let (head, tail) = l.split_at_mut(ri);
                let dot = dot(&tail[1..1 + m], &head[rj + 1..rj + 1 + m]);
                tail[0] = (tail[0] - dot) / d;
            }
        }
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Default)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    /// Solve `L Lᵀ x = b` in place.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw) = (self.n, self.bw);
        let w = bw + 1;
        let l = &self.band;
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &l[i * w + 1..i * w + 1 + (i - lo)];
            let dot: f64 = row.iter().zip(x[lo..i].iter().rev()).map(|(a, b)| a * b).sum();
            x[i] = (x[i] - dot) / l[i * w];
        }
        // Lᵀ solve as row-wise axpys so L is read contiguously
        for i in (0..n).rev() {
            let lo = i.saturating_sub(bw);
            let xi = x[i] / l[i * w];
            x[i] = xi;
            let row = &l[i * w + 1..i * w + 1 + (i - lo)];
            for (a, xk) in row.iter().zip(x[lo..i].iter_mut().rev()) {
                *xk -= a * xi;
            }
        }
    }
}

/// Dense Cholesky of a symmetric matrix, `None` if not positive definite.
pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let c = Cholesky::new(m.clone())?;
    if c.l_dirty().diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(c)
    } else {
        None
    }
}

/// `m + alpha * diag(gamma)`.
pub fn add_scaled_diag(m: &DMatrix<f64>, alpha: f64, gamma: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, g) in gamma.iter().enumerate() {
        out[(i, i)] += alpha * g;
    }
    out
}

/// Largest and smallest eigenvalue of a symmetric matrix.
pub fn sym_extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let sym = 0.5 * (m + m.transpose());
    let eig = SymmetricEigen::new(sym);
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    (max, min)
}

/// `diag(s) * m * diag(s)`.
pub fn diag_sandwich(m: &DMatrix<f64>, s: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| s[i] * m[(i, j)] * s[j])
}
