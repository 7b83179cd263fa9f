//! Dense row-major matrices and vectors, plus the exact factorizations the
//! rest of the crate leans on (one-sided Jacobi SVD, power iteration).
//!
//! Everything here is a pure function of its inputs. Sizes are desk scale
//! (at most a few hundred per side), so the kernels favour clarity and
//! bit-reproducibility over blocking or SIMD.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};

/// Relative threshold below which a Jacobi rotation is skipped.
const JACOBI_TOL: f64 = 1e-12;
/// Maximum number of cyclic sweeps before the SVD reports non-convergence.
const JACOBI_MAX_SWEEPS: usize = 60;

/// Dense `rows x cols` matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Square diagonal matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equally sized rows.
    ///
    /// Panics on ragged input; intended for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows[0].as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn gaussian<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Gram matrix `self * self^T`.
    pub fn gram(&self) -> Matrix {
        let n = self.rows;
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = dot_slices(self.row(i), self.row(j));
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(rhs)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// `self += c * x`
    pub fn axpy(&mut self, c: f64, x: &Matrix) -> Result<()> {
        self.check_same_shape(x)?;
        for (s, &v) in self.data.iter_mut().zip(&x.data) {
            *s += c * v;
        }
        Ok(())
    }

    /// Frobenius inner product `<self, rhs> = sum_ij self_ij * rhs_ij`.
    pub fn dot(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs)?;
        Ok(dot_slices(&self.data, &rhs.data))
    }

    fn check_same_shape(&self, rhs: &Matrix) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(())
    }

    fn col_to_vec(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense real vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { data: vec![0.0; dim] }
    }

    pub fn gaussian<R: rand::Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        Self {
            data: (0..dim).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn norm2(&self) -> f64 {
        dot_slices(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

/// Thin SVD `a = u * diag(s) * vt` with `k = min(rows, cols)`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vector,
    pub vt: Matrix,
}

impl SvdResult {
    /// Reassembles `u * diag(s) * vt`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        let k = self.s.dim();
        for i in 0..us.rows() {
            for j in 0..k {
                us[(i, j)] *= self.s.data()[j];
            }
        }
        us.matmul(&self.vt).expect("svd factors are conformant")
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    dot_slices(&a.data, &a.data).sqrt()
}

/// One-sided (Hestenes) Jacobi SVD with cyclic sweeps.
///
/// Wide inputs are transposed, factorized, and the factors swapped back.
/// Singular values come out sorted descending (stable, so ties keep the
/// Jacobi order). Columns of `u` belonging to numerically zero singular
/// values are filled in by Gram-Schmidt so that `u` stays orthonormal.
pub fn jacobi_svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("jacobi_svd input".into()));
    }
    if a.rows < a.cols {
        let t = jacobi_svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        });
    }
    jacobi_svd_tall(a)
}

/// Singular values only, sorted descending. Skips accumulating `V` and
/// building `U`, so it is cheaper than [`jacobi_svd`].
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    let t;
    let a = if a.rows < a.cols {
        t = a.transpose();
        &t
    } else {
        a
    };
    let cols = jacobi_orthogonalize(a, None)?;
    let mut s: Vec<f64> = cols.iter().map(|c| dot_slices(c, c).sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Rotates the columns of a tall `a` until they are mutually orthogonal,
/// applying the same rotations to `v` when given.
fn jacobi_orthogonalize(a: &Matrix, mut v: Option<&mut Vec<Vec<f64>>>) -> Result<Vec<Vec<f64>>> {
    let (m, n) = a.shape();
    // Columns stored contiguously for locality.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col_to_vec(j)).collect();
    if n < 2 {
        return Ok(cols);
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        // Squared column norms, refreshed each sweep and updated in closed
        // form after every rotation.
        let mut sq: Vec<f64> = cols.iter().map(|c| dot_slices(c, c)).collect();
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta) = (sq[i], sq[j]);
                let gamma = dot_slices(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                if let Some(v) = v.as_deref_mut() {
                    rotate_pair(v, i, j, c, s);
                }
                sq[i] = alpha - t * gamma;
                sq[j] = beta + t * gamma;
            }
        }
        if !rotated {
            return Ok(cols);
        }
    }
    Err(Error::SvdNoConvergence {
        rows: m,
        cols: n,
        sweeps: JACOBI_MAX_SWEEPS,
    })
}

fn jacobi_svd_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let cols = jacobi_orthogonalize(a, Some(&mut v))?;

    let norms: Vec<f64> = cols.iter().map(|c| dot_slices(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps Jacobi order among ties.
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let s_max = norms[order[0]];
    let cutoff = s_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &idx) in order.iter().enumerate() {
        if norms[idx] > cutoff && norms[idx] > 0.0 {
            u_cols.push(cols[idx].iter().map(|x| x / norms[idx]).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient, m);

    let mut u = Matrix::zeros(m, n);
    let mut vt = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (slot, &idx) in order.iter().enumerate() {
        s.push(norms[idx]);
        for i in 0..m {
            u[(i, slot)] = u_cols[slot][i];
        }
        for k in 0..n {
            vt[(slot, k)] = v[idx][k];
        }
    }
    Ok(SvdResult {
        u,
        s: Vector::new(s),
        vt,
    })
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Replaces the columns listed in `slots` with unit vectors orthogonal to
/// every other column, drawing candidates from the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize], m: usize) {
    let mut basis = 0;
    for &slot in slots {
        while basis < m {
            let mut cand = vec![0.0; m];
            cand[basis] = 1.0;
            basis += 1;
            // Two passes of modified Gram-Schmidt for stability.
            for _ in 0..2 {
                for (k, other) in cols.iter().enumerate() {
                    if k == slot || (slots.contains(&k) && other.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let p = dot_slices(&cand, other);
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= p * o;
                    }
                }
            }
            let nrm = dot_slices(&cand, &cand).sqrt();
            if nrm > 1e-8 {
                cols[slot] = cand.iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Power-iteration estimate of the largest singular value.
///
/// The returned value is `|A v|` for a unit vector `v`, so it never exceeds
/// the true spectral norm beyond rounding.
pub fn spectral_norm_power(a: &Matrix, iters: usize, seed: u64) -> f64 {
    if a.is_zero() {
        return 0.0;
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = a.cols;
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let av = mat_vec(a, &v);
        let mut atav = mat_t_vec(a, &av);
        sigma = dot_slices(&av, &av).sqrt();
        if normalize(&mut atav) == 0.0 {
            break;
        }
        v = atav;
    }
    let av = mat_vec(a, &v);
    sigma.max(dot_slices(&av, &av).sqrt())
}

fn normalize(v: &mut [f64]) -> f64 {
    let nrm = dot_slices(v, v).sqrt();
    if nrm > 0.0 {
        v.iter_mut().for_each(|x| *x /= nrm);
    }
    nrm
}

fn mat_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..a.rows).map(|i| dot_slices(a.row(i), v)).collect()
}

fn mat_t_vec(a: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(a.row(i)) {
            *o += vi * x;
        }
    }
    out
}

/// Random matrix with orthonormal columns (`rows >= cols`), from
/// Gram-Schmidt on a Gaussian draw.
pub fn random_orthonormal<R: rand::Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    assert!(rows >= cols, "need rows >= cols for orthonormal columns");
    let g = Matrix::gaussian(rows, cols, rng);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    for j in 0..cols {
        let mut c = g.col_to_vec(j);
        for _ in 0..2 {
            for prev in &q {
                let p = dot_slices(&c, prev);
                for (x, y) in c.iter_mut().zip(prev) {
                    *x -= p * y;
                }
            }
        }
        normalize(&mut c);
        q.push(c);
    }
    let mut out = Matrix::zeros(rows, cols);
    for (j, c) in q.iter().enumerate() {
        for i in 0..rows {
            out[(i, j)] = c[i];
        }
    }
    out
}
