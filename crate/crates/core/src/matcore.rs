//! Small dense matrices and symmetric eigen-utilities.
//!
//! Everything here works on row-major `f64` storage and targets the sizes the
//! rest of the crate needs (a handful of rows, a few hundred at most). The
//! eigensolver is cyclic Jacobi, which is accurate for symmetric input and
//! keeps the eigenvectors orthonormal to machine precision.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Eigenvalues in `[-PSD_TOL, 0]` are treated as rounding noise and clamped.
pub const PSD_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be positive");
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::DimensionMismatch(
                "matrix must have at least one row and column".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::DimensionMismatch("ragged matrix rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn column_vector(v: &[f64]) -> Result<Self> {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} for a matrix with {} columns",
                v.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `self · selfᵀ`.
    pub fn gram_rows(&self) -> Matrix {
        self.matmul(&self.transpose()).expect("conformant by construction")
    }

    /// `selfᵀ · self`.
    pub fn gram_cols(&self) -> Matrix {
        self.transpose().matmul(self).expect("conformant by construction")
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn relative_asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    fn symmetrized(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        let asym = self.relative_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::NonSymmetric(asym));
        }
        let t = self.transpose();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&t.data)
                .map(|(a, b)| 0.5 * (a + b))
                .collect(),
        })
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix dimensions must agree")
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix{:?}", self.to_rows())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

/// Eigen-decomposition `m = V diag(λ) Vᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    /// Sorted in descending order.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

impl SpectralDecomposition {
    pub fn min_eigenvalue(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eigenvalues[0]
    }

    /// `V diag(g(λ)) Vᵀ`.
    pub fn map_eigenvalues(&self, g: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| g(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v[(i, k)] * mapped[k] * v[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map_eigenvalues(|l| l)
    }
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
pub fn spectral_decompose(m: &Matrix) -> Result<SpectralDecomposition> {
    let mut a = m.symmetrized()?;
    let n = a.rows;
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn psd_spectrum(m: &Matrix) -> Result<SpectralDecomposition> {
    let mut sd = spectral_decompose(m)?;
    let min = sd.min_eigenvalue();
    if min < -PSD_TOL {
        return Err(Error::NotPsd(min));
    }
    for l in &mut sd.eigenvalues {
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(sd)
}

/// Principal square root of a PSD matrix.
pub fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    Ok(psd_spectrum(m)?.map_eigenvalues(f64::sqrt))
}

/// Inverse principal square root of a positive definite matrix.
pub fn psd_inv_sqrt(m: &Matrix) -> Result<Matrix> {
    let sd = spectral_decompose(m)?;
    let min = sd.min_eigenvalue();
    if min <= PSD_TOL {
        return Err(Error::Singular(min));
    }
    Ok(sd.map_eigenvalues(|l| 1.0 / l.sqrt()))
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    let sd = spectral_decompose(m)?;
    let min = sd.min_eigenvalue();
    if min <= PSD_TOL {
        return Err(Error::Singular(min));
    }
    Ok(sd.map_eigenvalues(|l| 1.0 / l))
}

/// Determinant of a symmetric matrix as the product of its eigenvalues.
pub fn sym_det(m: &Matrix) -> Result<f64> {
    Ok(spectral_decompose(m)?.eigenvalues.iter().product())
}

/// `Cᵀ(CCᵀ)⁻¹` for a matrix with full row rank.
pub fn moore_penrose_pinv(c: &Matrix) -> Result<Matrix> {
    let cct = c.gram_rows();
    let inv = match spd_inverse(&cct) {
        Ok(inv) => inv,
        Err(Error::Singular(min)) => return Err(Error::RankDeficient(min)),
        Err(e) => return Err(e),
    };
    c.transpose().matmul(&inv)
}

/// `(ΨᵀΨ)⁻¹Ψᵀ` for a matrix with full column rank.
pub fn left_pinv(psi: &Matrix) -> Result<Matrix> {
    let gram = psi.gram_cols();
    let inv = match spd_inverse(&gram) {
        Ok(inv) => inv,
        Err(Error::Singular(min)) => return Err(Error::RankDeficient(min)),
        Err(e) => return Err(e),
    };
    inv.matmul(&psi.transpose())
}
