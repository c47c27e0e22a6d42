//! Small dense complex matrices for the spatial (channel) dimension.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative diagonal loading applied when elimination meets a tiny pivot.
pub const DIAGONAL_LOADING: f64 = 1e-10;
/// Pivot magnitude, relative to the trace magnitude, that triggers loading.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix<R> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<R>>,
}

impl<R: Real> ComplexMatrix<R> {
    pub fn new(rows: usize, cols: usize, data: Vec<Complex<R>>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}×{cols} complex matrix given {} values", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex::new(R::zero(), R::zero()); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(R::one(), R::zero());
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<R>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column vector.
    pub fn column(v: &[Complex<R>]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// `v vᴴ`.
    pub fn outer(v: &[Complex<R>]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex<R>] {
        &self.data
    }

    pub fn conj_transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn trace(&self) -> Complex<R> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!("complex matmul {}×{} by {}×{}", self.rows, self.cols, other.rows, other.cols)));
        }
        Ok(Self::from_fn(self.rows, other.cols, |i, j| (0..self.cols).map(|k| self[(i, k)] * other[(k, j)]).sum()))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Shape("complex add of mismatched matrices".into()));
        }
        Ok(Self { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect() })
    }

    pub fn scale(&self, s: Complex<R>) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn max_abs(&self) -> R {
        self.data.iter().map(|z| z.norm()).fold(R::zero(), R::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> R {
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).norm()).fold(R::zero(), R::max)
    }

    pub fn is_hermitian(&self, tol: R) -> bool {
        self.rows == self.cols && self.max_abs_diff(&self.conj_transpose()) <= tol
    }

    /// Replaces the matrix by `(M + Mᴴ)/2`.
    pub fn symmetrize(&mut self) {
        let h = self.conj_transpose();
        let half = R::lit(0.5);
        self.data.iter_mut().zip(&h.data).for_each(|(a, &b)| *a = (*a + b) * half);
    }

    /// Eigenvalues of a Hermitian matrix, ascending.
    ///
    /// Uses the real symmetric embedding `[[A, -B], [B, A]]` of `A + iB`,
    /// whose spectrum is that of the Hermitian matrix with every eigenvalue
    /// doubled in multiplicity.
    pub fn hermitian_eigenvalues(&self) -> Vec<R> {
        let n = self.rows;
        let mut s = vec![R::zero(); 4 * n * n];
        let m = 2 * n;
        for i in 0..n {
            for j in 0..n {
                let z = self[(i, j)];
                s[i * m + j] = z.re;
                s[(i + n) * m + j + n] = z.re;
                s[i * m + j + n] = -z.im;
                s[(i + n) * m + j] = z.im;
            }
        }
        let mut ev = symmetric_eigenvalues(s, m);
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        ev.into_iter().step_by(2).collect()
    }
}

impl<R> std::ops::Index<(usize, usize)> for ComplexMatrix<R> {
    type Output = Complex<R>;
    fn index(&self, (i, j): (usize, usize)) -> &Complex<R> {
        &self.data[i * self.cols + j]
    }
}

impl<R> std::ops::IndexMut<(usize, usize)> for ComplexMatrix<R> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<R> {
        &mut self.data[i * self.cols + j]
    }
}

/// Cyclic Jacobi eigenvalue iteration on a dense symmetric `n×n` matrix.
fn symmetric_eigenvalues<R: Real>(mut a: Vec<R>, n: usize) -> Vec<R> {
    let eps = R::epsilon();
    for _sweep in 0..100 {
        let off: R = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j] * a[i * n + j]).sum();
        let diag: R = (0..n).map(|i| a[i * n + i] * a[i * n + i]).sum();
        if off <= eps * eps * (diag + off) || off == R::zero() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == R::zero() {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (R::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + R::one()).sqrt());
                let c = R::one() / (t * t + R::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Gaussian elimination with partial pivoting. Returns the solution and the
/// smallest pivot magnitude met, or `None` when a pivot is exactly zero.
fn eliminate<R: Real>(m: &ComplexMatrix<R>, b: &ComplexMatrix<R>) -> Option<(ComplexMatrix<R>, R)> {
    let n = m.rows;
    let k = b.cols;
    let mut a = m.clone();
    let mut x = b.clone();
    let mut min_pivot = R::infinity();
    for col in 0..n {
        let (piv, mag) = (col..n).map(|r| (r, a[(r, col)].norm())).fold((col, R::lit(-1.0)), |best, cur| if cur.1 > best.1 { cur } else { best });
        if mag == R::zero() || !mag.is_finite() {
            return None;
        }
        min_pivot = min_pivot.min(mag);
        if piv != col {
            for j in 0..n {
                a.data.swap(col * n + j, piv * n + j);
            }
            for j in 0..k {
                x.data.swap(col * k + j, piv * k + j);
            }
        }
        let inv = a[(col, col)].inv();
        for r in col + 1..n {
            let f = a[(r, col)] * inv;
            if f == Complex::new(R::zero(), R::zero()) {
                continue;
            }
            for j in col..n {
                let v = a[(col, j)];
                a[(r, j)] -= f * v;
            }
            for j in 0..k {
                let v = x[(col, j)];
                x[(r, j)] -= f * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = a[(col, col)].inv();
        for j in 0..k {
            let mut s = x[(col, j)];
            for c in col + 1..n {
                s -= a[(col, c)] * x[(c, j)];
            }
            x[(col, j)] = s * inv;
        }
    }
    Some((x, min_pivot))
}

/// Outcome of [`hermitian_solve_detailed`].
#[derive(Clone, Debug)]
pub struct Solution<R> {
    pub x: ComplexMatrix<R>,
    /// Amount added to the diagonal, zero when no loading was needed.
    pub loading: R,
}

/// Solves `m·x = b` for Hermitian `m`, diagonally loading `m` by
/// `δ·tr(m)/C` when the smallest pivot is tiny relative to the trace.
pub fn hermitian_solve<R: Real>(m: &ComplexMatrix<R>, b: &ComplexMatrix<R>) -> Result<ComplexMatrix<R>> {
    hermitian_solve_detailed(m, b).map(|s| s.x)
}

pub fn hermitian_solve_detailed<R: Real>(m: &ComplexMatrix<R>, b: &ComplexMatrix<R>) -> Result<Solution<R>> {
    let n = m.rows;
    if m.cols != n || b.rows != n {
        return Err(Error::Shape(format!("hermitian_solve of {}×{} with right-hand side {}×{}", m.rows, m.cols, b.rows, b.cols)));
    }
    let tr = m.trace();
    let tr_mag = tr.norm();
    if !(tr_mag > R::min_positive_value()) {
        return Err(Error::Singular(format!("trace magnitude {tr_mag} of a {n}×{n} system")));
    }
    let threshold = R::lit(PIVOT_TOLERANCE) * tr_mag;
    if let Some((x, min_pivot)) = eliminate(m, b) {
        if min_pivot >= threshold {
            return Ok(Solution { x, loading: R::zero() });
        }
    }
    let loading = R::lit(DIAGONAL_LOADING) * tr_mag / R::from_usize_lossy(n);
    let mut loaded = m.clone();
    for i in 0..n {
        loaded[(i, i)].re += loading;
    }
    match eliminate(&loaded, b) {
        Some((x, _)) => Ok(Solution { x, loading }),
        None => Err(Error::Singular(format!("{n}×{n} system singular after diagonal loading"))),
    }
}
