//! Dense linear algebra for the editors.
//!
//! Everything is `f64`, row-major, and allocation-per-result. Matrices here
//! are at most a few hundred on a side, so the kernels are the textbook ones:
//! Cholesky for SPD systems, partially pivoted LU for general square systems,
//! one-sided Jacobi SVD (or column-pivoted QR for large inputs) for rank.

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{EditError, Result};

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

const SYMMETRY_TOL: f64 = 1e-10;
const SINGULAR_PIVOT_TOL: f64 = 1e-12;
const SVD_MAX_DIM: usize = 64;

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EditError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(EditError::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from a slice of equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), n_cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: n_rows,
            cols: n_cols,
            data,
        }
    }

    /// Stacks vectors as columns. Panics on ragged input.
    pub fn from_columns<C: AsRef<[f64]>>(cols: &[C]) -> Self {
        let n_cols = cols.len();
        let n_rows = cols.first().map_or(0, |c| c.as_ref().len());
        let mut m = Self::zeros(n_rows, n_cols);
        for (j, c) in cols.iter().enumerate() {
            let c = c.as_ref();
            assert_eq!(c.len(), n_rows, "ragged columns");
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// `u · vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(EditError::DimensionMismatch(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
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

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(EditError::DimensionMismatch(format!(
                "matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn t_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(EditError::DimensionMismatch(format!(
                "transposed matvec {}x{} by vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    fn zip_with(&self, rhs: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != rhs.shape() {
            return Err(EditError::DimensionMismatch(format!(
                "elementwise {}x{} with {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Adds `eps` to every diagonal entry.
    pub fn add_diagonal(&mut self, eps: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += eps;
        }
    }

    /// `self · selfᵀ`
    pub fn gram_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..=i {
                let v = dot(self.row(i), self.row(j));
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance between two equal-length vectors.
pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
///
/// Factor once and reuse across right-hand sides; the editors solve against
/// the same preservation covariance many times in a sequential run.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(EditError::DimensionMismatch(format!(
                "Cholesky of a {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        if !a.is_symmetric(SYMMETRY_TOL) {
            return Err(EditError::NotSpd("matrix is not symmetric".into()));
        }
        let n = a.rows();
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) {
                return Err(EditError::NotSpd(format!("pivot {j} is {d:e}")));
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / d;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Diagonal of `L`; every entry is strictly positive.
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.lower[i * self.n + i]).collect()
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(EditError::DimensionMismatch(format!(
                "Cholesky solve of order {n} with rhs of length {}",
                b.len()
            )));
        }
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        Ok(y)
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows() != self.n {
            return Err(EditError::DimensionMismatch(format!(
                "Cholesky solve of order {} with {}x{} rhs",
                self.n,
                b.rows(),
                b.cols()
            )));
        }
        let mut x = Matrix::zeros(b.rows(), b.cols());
        for c in 0..b.cols() {
            let col = self.solve_vec(&b.column(c))?;
            for (r, v) in col.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        Ok(x)
    }
}

/// Solves `A·X = B` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(EditError::DimensionMismatch(format!(
            "solve_spd with {}x{} system and {}x{} rhs",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Cholesky::factor(a)?.solve(b)
}

/// Solves `A·X = B` for square nonsingular `A` by LU with partial pivoting.
pub fn solve_general(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() || a.rows() != b.rows() {
        return Err(EditError::DimensionMismatch(format!(
            "solve_general with {}x{} system and {}x{} rhs",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.rows();
    let m = b.cols();
    let threshold = SINGULAR_PIVOT_TOL * a.max_abs();
    let mut lu = a.clone();
    let mut x = b.clone();
    for k in 0..n {
        let (p, pivot_abs) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= threshold || pivot_abs == 0.0 {
            return Err(EditError::Singular(format!(
                "pivot {k} is {pivot_abs:e} (threshold {threshold:e})"
            )));
        }
        if p != k {
            for c in 0..n {
                lu.data.swap(k * n + c, p * n + c);
            }
            for c in 0..m {
                x.data.swap(k * m + c, p * m + c);
            }
        }
        let pivot = lu[(k, k)];
        for i in (k + 1)..n {
            let f = lu[(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            lu[(i, k)] = f;
            for c in (k + 1)..n {
                lu[(i, c)] -= f * lu[(k, c)];
            }
            for c in 0..m {
                x[(i, c)] -= f * x[(k, c)];
            }
        }
    }
    for c in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Singular values in descending order (one-sided Jacobi).
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Orthogonalise the columns of the taller orientation.
    let a = if m.rows() >= m.cols() {
        m.clone()
    } else {
        m.transpose()
    };
    let (rows, cols) = a.shape();
    let mut colv: Vec<Vec<f64>> = (0..cols).map(|c| a.column(c)).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha = dot(&colv[p], &colv[p]);
                let beta = dot(&colv[q], &colv[q]);
                let gamma = dot(&colv[p], &colv[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let xp = colv[p][r];
                    let xq = colv[q][r];
                    colv[p][r] = c * xp - s * xq;
                    colv[q][r] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = colv.iter().map(|c| norm(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Absolute diagonal of `R` from Householder QR with column pivoting.
fn pivoted_qr_diagonal(m: &Matrix) -> Vec<f64> {
    let (rows, cols) = m.shape();
    let mut a = m.clone();
    let mut col_norms: Vec<f64> = (0..cols).map(|c| norm(&a.column(c))).collect();
    let steps = rows.min(cols);
    let mut diag = Vec::with_capacity(steps);
    for k in 0..steps {
        let p = (k..cols)
            .max_by(|&i, &j| col_norms[i].total_cmp(&col_norms[j]).then(j.cmp(&i)))
            .unwrap_or(k);
        if p != k {
            for r in 0..rows {
                a.data.swap(r * cols + k, r * cols + p);
            }
            col_norms.swap(k, p);
        }
        let x: Vec<f64> = (k..rows).map(|r| a[(r, k)]).collect();
        let alpha = norm(&x);
        diag.push(alpha);
        if alpha == 0.0 {
            break;
        }
        let mut v = x;
        v[0] += if v[0] >= 0.0 { alpha } else { -alpha };
        let vnorm2 = dot(&v, &v);
        for c in k..cols {
            let s: f64 = (k..rows).map(|r| v[r - k] * a[(r, c)]).sum();
            let f = 2.0 * s / vnorm2;
            for r in k..rows {
                a[(r, c)] -= f * v[r - k];
            }
        }
        // Recompute trailing norms from scratch; cheap at these sizes and
        // avoids the cancellation of downdating.
        for c in (k + 1)..cols {
            col_norms[c] = (k + 1..rows).map(|r| a[(r, c)] * a[(r, c)]).sum::<f64>().sqrt();
        }
    }
    diag
}

/// Count of singular values above `tol · σ_max`.
///
/// Uses the SVD when both dimensions are at most 64, pivoted QR otherwise.
pub fn numerical_rank(m: &Matrix, tol: f64) -> usize {
    if m.rows() == 0 || m.cols() == 0 {
        return 0;
    }
    let values = if m.rows().max(m.cols()) <= SVD_MAX_DIM {
        singular_values(m)
    } else {
        pivoted_qr_diagonal(m)
    };
    let largest = values.iter().cloned().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    values.iter().filter(|&&s| s > tol * largest).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
        let g = random_matrix(rng, n, n);
        let mut a = g.gram_rows();
        a.add_diagonal(0.5);
        a
    }

    #[test]
    fn spd_identity_and_diagonal() {
        let x = solve_spd(&Matrix::identity(2), &Matrix::from_rows(&[[5.0], [7.0]])).unwrap();
        assert_eq!(x, Matrix::from_rows(&[[5.0], [7.0]]));
        let a = Matrix::from_rows(&[[2.0, 0.0], [0.0, 4.0]]);
        let x = solve_spd(&a, &Matrix::from_rows(&[[2.0], [8.0]])).unwrap();
        assert!(x.sub(&Matrix::from_rows(&[[1.0], [2.0]])).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn spd_recovers_constructed_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_spd(&mut rng, 6);
        let x0 = random_matrix(&mut rng, 6, 3);
        let b = a.matmul(&x0).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!(x.sub(&x0).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn spd_residual_and_self_solve_up_to_256() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for n in [1, 7, 32, 100, 256] {
            let a = random_spd(&mut rng, n);
            let b = random_matrix(&mut rng, n, 2);
            let a_before = a.clone();
            let x = solve_spd(&a, &b).unwrap();
            assert_eq!(a, a_before);
            let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
            assert!(resid <= 1e-9 * (1.0 + b.frobenius_norm()), "n={n} resid={resid:e}");
            let eye = solve_spd(&a, &a).unwrap();
            assert!(eye.sub(&Matrix::identity(n)).unwrap().max_abs() <= 1e-9, "n={n}");
        }
    }

    #[test]
    fn spd_rejects_indefinite_and_bad_shapes() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            solve_spd(&a, &Matrix::identity(2)),
            Err(EditError::NotSpd(_))
        ));
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]);
        assert!(matches!(
            solve_spd(&asym, &Matrix::identity(2)),
            Err(EditError::NotSpd(_))
        ));
        assert!(matches!(
            solve_spd(&Matrix::identity(2), &Matrix::identity(3)),
            Err(EditError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn general_permutation_identity_and_constructed() {
        let p = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let x = solve_general(&p, &Matrix::from_rows(&[[1.0], [2.0]])).unwrap();
        assert_eq!(x, Matrix::from_rows(&[[2.0], [1.0]]));

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = random_matrix(&mut rng, 3, 4);
        assert_eq!(solve_general(&Matrix::identity(3), &b).unwrap(), b);

        let a = random_matrix(&mut rng, 5, 5);
        let x0 = random_matrix(&mut rng, 5, 2);
        let rhs = a.matmul(&x0).unwrap();
        let x = solve_general(&a, &rhs).unwrap();
        assert!(x.sub(&x0).unwrap().max_abs() < 1e-9);
        let resid = a.matmul(&x).unwrap().sub(&rhs).unwrap().frobenius_norm();
        assert!(resid <= 1e-8 * (1.0 + rhs.frobenius_norm()));
    }

    #[test]
    fn general_rejects_singular() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0]]);
        assert!(matches!(
            solve_general(&a, &Matrix::identity(2)),
            Err(EditError::Singular(_))
        ));
    }

    /// Independent rank count: modified Gram–Schmidt with a relative cutoff.
    fn gram_schmidt_rank(m: &Matrix, tol: f64) -> usize {
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let scale = (0..m.cols()).map(|c| norm(&m.column(c))).fold(0.0, f64::max);
        for c in 0..m.cols() {
            let mut v = m.column(c);
            for b in &basis {
                let proj = dot(&v, b);
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= proj * bi;
                }
            }
            let n = norm(&v);
            if n > tol * scale {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        basis.len()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(numerical_rank(&Matrix::zeros(3, 3), DEFAULT_RANK_TOL), 0);
        let uv = Matrix::outer(&[1.0, -2.0, 0.5], &[3.0, 1.0]);
        assert_eq!(numerical_rank(&uv, DEFAULT_RANK_TOL), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut sum = Matrix::zeros(8, 8);
        for _ in 0..3 {
            let u: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            sum = sum.add(&Matrix::outer(&u, &v)).unwrap();
        }
        assert_eq!(gram_schmidt_rank(&sum, 1e-8), 3);
        assert_eq!(numerical_rank(&sum, DEFAULT_RANK_TOL), 3);
    }

    #[test]
    fn rank_large_uses_qr_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let left = random_matrix(&mut rng, 90, 5);
        let right = random_matrix(&mut rng, 5, 70);
        let m = left.matmul(&right).unwrap();
        assert_eq!(numerical_rank(&m, DEFAULT_RANK_TOL), 5);
        assert_eq!(numerical_rank(&random_matrix(&mut rng, 80, 66), DEFAULT_RANK_TOL), 66);
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = Matrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, -5.0, 0.0]]);
        let sv = singular_values(&m);
        assert!((sv[0] - 5.0).abs() < 1e-12 && (sv[1] - 3.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn rank_is_permutation_invariant(seed in 0u64..10_000, r in 1usize..4, swap in 0usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let left = random_matrix(&mut rng, 6, r);
                let right = random_matrix(&mut rng, r, 5);
                let m = left.matmul(&right).unwrap();
                let rank = numerical_rank(&m, DEFAULT_RANK_TOL);
                let row_perm: Vec<usize> = (0..6).map(|i| (i + swap) % 6).collect();
                let col_perm: Vec<usize> = (0..5).rev().collect();
                let permuted = Matrix::from_fn(6, 5, |i, j| m[(row_perm[i], col_perm[j])]);
                prop_assert_eq!(rank, r);
                prop_assert_eq!(numerical_rank(&permuted, DEFAULT_RANK_TOL), rank);
            }

            #[test]
            fn spd_residual_is_small(seed in 0u64..10_000, n in 1usize..24) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random_spd(&mut rng, n);
                let b = random_matrix(&mut rng, n, 3);
                let x = solve_spd(&a, &b).unwrap();
                let resid = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
                prop_assert!(resid <= 1e-9 * (1.0 + b.frobenius_norm()));
            }
        }
    }
}
