//! Dense row-major linear algebra used by the solvers, derivatives and baselines.
//!
//! Problem sizes in this crate never exceed a few hundred rows, so everything
//! is stored densely and factorized directly.

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::{Index, IndexMut};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is numerically singular at column {0}")]
    Singular(usize),
    #[error("Jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("matrix has zero Frobenius norm")]
    ZeroMatrix,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix file: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Dense matrix in row-major order.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
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

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
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

    /// A single column.
    pub fn column_vector(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |S_ij - S_ji| relative to max(1, max|S|).
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / self.max_abs().max(1.0)
    }

    /// ½(S + Sᵀ).
    pub fn symmetrized(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scaled(-1.0))
    }

    /// self += c * other
    pub fn axpy(&mut self, c: f64, other: &Self) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    /// self += c * u vᵀ
    pub fn add_outer(&mut self, c: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = c * ui;
            if s == 0.0 {
                continue;
            }
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a += s * vj;
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// Aᵀx without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec dimension");
        let mut out = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// AᵀA.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                let a = row[i];
                if a == 0.0 {
                    continue;
                }
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += a * row[j];
                }
            }
        }
        out
    }

    /// Reads a headerless CSV matrix.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| LinalgError::Io(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line.map_err(|e| LinalgError::Io(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| LinalgError::Io(format!("{}: {e}", path.display())))?;
            rows.push(row);
        }
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinalgError::Io(format!("{}: ragged rows", path.display())));
        }
        Ok(Self::from_rows(&rows))
    }

    /// Writes one row per line, no header, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| LinalgError::Io(format!("{}: {e}", path.display())))?,
        );
        for i in 0..self.rows {
            let line = self.row(i).iter().map(|v| fmt_real(*v)).collect::<Vec<_>>().join(",");
            writeln!(out, "{line}").map_err(|e| LinalgError::Io(e.to_string()))?;
        }
        out.flush().map_err(|e| LinalgError::Io(e.to_string()))
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Round-trippable decimal formatting used by every CSV writer in the crate.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn axpy(y: &mut [f64], c: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += c * b;
    }
}

/// Cholesky factor L (lower) with S = L Lᵀ.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

impl Cholesky {
    pub fn factor(s: &DenseMatrix) -> Result<Self> {
        if !s.is_square() {
            return Err(LinalgError::DimensionMismatch("Cholesky of non-square matrix".into()));
        }
        let n = s.rows();
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = s[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(LinalgError::NotPositiveDefinite { row: j, pivot: d });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in (j + 1)..n {
                let mut v = s[(i, j)];
                for k in 0..j {
                    v -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = v / d;
            }
        }
        Ok(Self { l })
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.l.rows();
        assert_eq!(rhs.len(), n);
        let mut z = rhs.to_vec();
        for i in 0..n {
            let mut v = z[i];
            for k in 0..i {
                v -= self.l[(i, k)] * z[k];
            }
            z[i] = v / self.l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut v = z[i];
            for k in (i + 1)..n {
                v -= self.l[(k, i)] * z[k];
            }
            z[i] = v / self.l[(i, i)];
        }
        z
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.l
    }
}

/// Solves S z = rhs for symmetric positive definite S.
pub fn chol_solve(s: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != s.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs length {} vs matrix dim {}",
            rhs.len(),
            s.rows()
        )));
    }
    Ok(Cholesky::factor(s)?.solve(rhs))
}

/// LU factorization with partial pivoting, P K = L U.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(k: &DenseMatrix) -> Result<Self> {
        Self::factor_owned(k.clone())
    }

    /// Factors in place, reusing `k`'s storage.
    pub fn factor_owned(k: DenseMatrix) -> Result<Self> {
        if !k.is_square() {
            return Err(LinalgError::DimensionMismatch("LU of non-square matrix".into()));
        }
        let n = k.rows();
        let threshold = 1e-13 * k.max_abs();
        let mut lu = k;
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let (piv, best) = (col..n)
                .map(|r| (r, lu[(r, col)].abs()))
                .fold((col, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best <= threshold || best == 0.0 || !best.is_finite() {
                return Err(LinalgError::Singular(col));
            }
            if piv != col {
                perm.swap(piv, col);
                for j in 0..n {
                    lu.data.swap(piv * n + j, col * n + j);
                }
            }
            let (upper, lower) = lu.data.split_at_mut((col + 1) * n);
            let pivot_row = &upper[col * n..];
            let d = pivot_row[col];
            for row in lower.chunks_exact_mut(n) {
                let f = row[col] / d;
                row[col] = f;
                if f == 0.0 {
                    continue;
                }
                for (x, u) in row[col + 1..].iter_mut().zip(&pivot_row[col + 1..]) {
                    *x -= f * u;
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n);
        let mut z: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let s: f64 = row[..i].iter().zip(&z[..i]).map(|(a, b)| a * b).sum();
            z[i] -= s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let s: f64 = row[i + 1..].iter().zip(&z[i + 1..]).map(|(a, b)| a * b).sum();
            z[i] = (z[i] - s) / row[i];
        }
        z
    }

    /// Solves Kᵀ z = rhs with the same factorization.
    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(rhs.len(), n);
        // Kᵀ = Uᵀ Lᵀ P, so solve Uᵀ w = rhs, Lᵀ v = w, z = Pᵀ v.
        let mut w = rhs.to_vec();
        for i in 0..n {
            let mut s = w[i];
            for k in 0..i {
                s -= self.lu[(k, i)] * w[k];
            }
            w[i] = s / self.lu[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = w[i];
            for k in (i + 1)..n {
                s -= self.lu[(k, i)] * w[k];
            }
            w[i] = s;
        }
        let mut z = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            z[p] = w[i];
        }
        z
    }
}

/// Solves K z = rhs with partial pivoting.
pub fn lu_solve(k: &DenseMatrix, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != k.rows() {
        return Err(LinalgError::DimensionMismatch(format!(
            "rhs length {} vs matrix dim {}",
            rhs.len(),
            k.rows()
        )));
    }
    Ok(Lu::factor(k)?.solve(rhs))
}

/// Symmetric eigendecomposition S = Q diag(w) Qᵀ, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct EigDecomposition {
    pub eigenvalues: Vec<f64>,
    /// Eigenvectors stored as columns.
    pub eigenvectors: DenseMatrix,
}

impl EigDecomposition {
    /// Q diag(f(w)) Qᵀ.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let fw: Vec<f64> = self.eigenvalues.iter().map(|&w| f(w)).collect();
        DenseMatrix::from_fn(n, n, |i, j| (0..n).map(|k| q[(i, k)] * fw[k] * q[(j, k)]).sum())
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.reconstruct_with(|w| w)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn sym_eig(s: &DenseMatrix) -> Result<EigDecomposition> {
    if !s.is_square() {
        return Err(LinalgError::DimensionMismatch("eigendecomposition of non-square matrix".into()));
    }
    let n = s.rows();
    let mut a = s.symmetrized();
    let mut q = DenseMatrix::identity(n);
    let scale = s.frobenius_norm();
    let target = 1e-12 * scale;
    let off = |a: &DenseMatrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a[(i, j)] * a[(i, j)];
                }
            }
        }
        acc.sqrt()
    };

    let mut converged = off(&a) <= target;
    let mut sweeps = 0;
    while !converged {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - sn * akr;
                    a[(k, r)] = sn * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - sn * ark;
                    a[(r, k)] = sn * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - sn * qkr;
                    q[(k, r)] = sn * qkp + c * qkr;
                }
            }
        }
        converged = off(&a) <= target;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let eigenvectors = DenseMatrix::from_fn(n, n, |i, j| q[(i, order[j])]);
    Ok(EigDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

const POWER_ITERS: usize = 200;

/// Largest singular value by power iteration on AᵀA.
pub fn spectral_norm_estimate(a: &DenseMatrix, iters: usize) -> f64 {
    let n = a.cols();
    // Deterministic start that is generically not orthogonal to the top singular vector.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i as f64) * 0.7).sin()).collect();
    let nv = norm2(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let av = a.matvec(&v);
        let mut w = a.tr_matvec(&av);
        let nw = norm2(&w);
        if nw == 0.0 {
            return 0.0;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        v = w;
        sigma = norm2(&a.matvec(&v));
    }
    sigma
}

/// Rescales A so its spectral norm equals `target`.
pub fn spectral_scale(a: &DenseMatrix, target: f64) -> Result<DenseMatrix> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch("spectral_scale needs a square matrix".into()));
    }
    if a.frobenius_norm() == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let sigma = spectral_norm_estimate(a, POWER_ITERS);
    Ok(a.scaled(target / sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::from_fn(r, c, |_, _| rng.normal())
    }

    fn spd(rng: &mut Rng, n: usize) -> DenseMatrix {
        let r = random_matrix(rng, n, n);
        r.gram().add(&DenseMatrix::identity(n))
    }

    #[test]
    fn chol_identity_and_diagonal() {
        let z = chol_solve(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(z, vec![1.0, 2.0, 3.0]);
        let z = chol_solve(&DenseMatrix::from_diag(&[4.0, 9.0]), &[8.0, 27.0]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15 && (z[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn chol_random_residual() {
        let mut rng = Rng::seed_from_u64(1);
        let s = spd(&mut rng, 8);
        let rhs: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let z = chol_solve(&s, &rhs).unwrap();
        let r = s.matvec(&z);
        let res = r.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res <= 1e-9 * (1.0 + norm_inf(&rhs)));
    }

    #[test]
    fn chol_rejects_indefinite() {
        let s = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            chol_solve(&s, &[1.0, 1.0]),
            Err(LinalgError::NotPositiveDefinite { row: 1, .. })
        ));
    }

    #[test]
    fn lu_trivial_and_permutation() {
        assert_eq!(lu_solve(&DenseMatrix::identity(2), &[5.0, -1.0]).unwrap(), vec![5.0, -1.0]);
        let k = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(lu_solve(&k, &[3.0, 7.0]).unwrap(), vec![7.0, 3.0]);
    }

    #[test]
    fn lu_random_residual_and_transpose() {
        let mut rng = Rng::seed_from_u64(2);
        let k = random_matrix(&mut rng, 10, 10).add(&DenseMatrix::identity(10).scaled(4.0));
        let rhs: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let lu = Lu::factor(&k).unwrap();
        let z = lu.solve(&rhs);
        let res = k.matvec(&z).iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res <= 1e-8 * (1.0 + norm_inf(&rhs)));
        let zt = lu.solve_transpose(&rhs);
        let res = k.tr_matvec(&zt).iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(res <= 1e-8 * (1.0 + norm_inf(&rhs)));
    }

    #[test]
    fn lu_singular() {
        let k = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(matches!(lu_solve(&k, &[1.0, 1.0]), Err(LinalgError::Singular(1))));
    }

    #[test]
    fn eig_small_cases() {
        let e = sym_eig(&DenseMatrix::from_diag(&[2.0, 5.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![2.0, 5.0]);
        for i in 0..2 {
            assert!((e.eigenvectors[(i, i)].abs() - 1.0).abs() < 1e-15);
        }
        let e = sym_eig(&DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]])).unwrap();
        assert!((e.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((e.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn eig_random_reconstruction() {
        let mut rng = Rng::seed_from_u64(3);
        let s = random_matrix(&mut rng, 6, 6).symmetrized();
        let e = sym_eig(&s).unwrap();
        let rec = e.reconstruct();
        assert!(rec.sub(&s).frobenius_norm() <= 1e-10 * s.frobenius_norm());
        let qtq = e.eigenvectors.gram();
        assert!(qtq.sub(&DenseMatrix::identity(6)).frobenius_norm() <= 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn spectral_scale_analytic() {
        let a = DenseMatrix::identity(3).scaled(2.0);
        let s = spectral_scale(&a, 0.95).unwrap();
        assert!(s.sub(&DenseMatrix::identity(3).scaled(0.95)).max_abs() < 1e-12);
        let s = spectral_scale(&DenseMatrix::from_diag(&[1.0, 3.0]), 1.0).unwrap();
        assert!((s[(0, 0)] - 1.0 / 3.0).abs() < 1e-9 && (s[(1, 1)] - 1.0).abs() < 1e-9);
        assert_eq!(spectral_scale(&DenseMatrix::zeros(2, 2), 1.0), Err(LinalgError::ZeroMatrix));
    }

    #[test]
    fn spectral_scale_random_against_eigen_oracle() {
        // σ_max² is the top eigenvalue of AᵀA, computed independently by Jacobi.
        let mut rng = Rng::seed_from_u64(4);
        let a = random_matrix(&mut rng, 10, 10);
        let scaled = spectral_scale(&a, 0.95).unwrap();
        let top = *sym_eig(&scaled.gram()).unwrap().eigenvalues.last().unwrap();
        assert!((top.sqrt() - 0.95).abs() <= 0.01 * 0.95);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = DenseMatrix::from_rows(&[vec![1.0 / 3.0, -2.5e-17], vec![1e300, 0.0]]);
        m.write_csv(&p).unwrap();
        assert_eq!(DenseMatrix::read_csv(&p).unwrap(), m);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn chol_recovers_v(seed in any::<u64>(), n in 1usize..30) {
                let mut rng = Rng::seed_from_u64(seed);
                let s = spd(&mut rng, n);
                let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                let z = chol_solve(&s, &s.matvec(&v)).unwrap();
                let err = z.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                prop_assert!(err <= 1e-8 * (1.0 + norm_inf(&v)));
            }

            #[test]
            fn eigenvalues_invariant_under_rotation(seed in any::<u64>(), n in 2usize..10) {
                let mut rng = Rng::seed_from_u64(seed);
                let s = random_matrix(&mut rng, n, n).symmetrized();
                let q = sym_eig(&random_matrix(&mut rng, n, n).symmetrized()).unwrap().eigenvectors;
                let rotated = q.transpose().matmul(&s).matmul(&q);
                let w1 = sym_eig(&s).unwrap().eigenvalues;
                let w2 = sym_eig(&rotated).unwrap().eigenvalues;
                for (a, b) in w1.iter().zip(&w2) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + s.frobenius_norm()));
                }
            }

            #[test]
            fn spectral_scale_idempotent(seed in any::<u64>(), n in 2usize..10) {
                let mut rng = Rng::seed_from_u64(seed);
                let a = random_matrix(&mut rng, n, n);
                let once = spectral_scale(&a, 0.9).unwrap();
                let twice = spectral_scale(&once, 0.9).unwrap();
                prop_assert!(twice.sub(&once).frobenius_norm() <= 0.02 * once.frobenius_norm());
            }
        }
    }
}
