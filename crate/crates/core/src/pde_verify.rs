//! Finite-difference residual checks of the optimality conditions.
//!
//! Each check samples the amplitude `u = √γ` on a uniform grid, applies
//! second-order central differences on interior points, and compares the
//! residual with the truncation error expected from the grid spacing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::densities::{tilted_new, CosSqDensity, Interval, ScalarDensity, WeightFunction};
use crate::error::{Error, Result};
use crate::fisher::{fisher_scalar_quadrature, DEFAULT_GRID};
use crate::matcore::{spd_inverse, spectral_decompose, Matrix};

/// Relative residual accepted by the Lagrange-multiplier fit.
pub const FIT_TOL: f64 = 1e-2;
/// Ratio window for second-order convergence when `h` halves.
pub const CONVERGENCE_RANGE: (f64, f64) = (3.2, 4.8);
const MIN_POINTS: usize = 65;
// truncation estimates are doubled before they are used as a pass threshold
const FD_SAFETY: f64 = 2.0;

/// Uniform grid with an odd number of points, so the midpoint is a node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    lo: f64,
    hi: f64,
    points: usize,
}

impl Grid1D {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        Interval::new(lo, hi)?;
        if points < MIN_POINTS || points % 2 == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid needs an odd point count >= {MIN_POINTS}, got {points}"
            )));
        }
        Ok(Self { lo, hi, points })
    }

    pub fn over(support: Interval, points: usize) -> Result<Self> {
        Self::new(support.lo(), support.hi(), points)
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.points - 1 {
            self.hi
        } else {
            self.lo + i as f64 * self.spacing()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.points).map(|i| self.node(i)).collect()
    }

    /// The grid with spacing halved.
    pub fn refined(&self) -> Self {
        Self {
            points: 2 * self.points - 1,
            ..*self
        }
    }

    /// Nodes checked by the residuals: one cell is dropped next to each end.
    fn interior(&self) -> std::ops::Range<usize> {
        2..self.points - 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_abs_residual: f64,
    pub interior_points_checked: usize,
    pub mu_used: f64,
    /// `|u|` at the two grid ends.
    pub boundary_values: (f64, f64),
    /// Threshold the residual is judged against.
    pub tolerance: f64,
    pub passed: bool,
}

fn second_difference(u: &[f64], i: usize, h: f64) -> f64 {
    (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (h * h)
}

fn first_difference(u: &[f64], i: usize, h: f64) -> f64 {
    (u[i + 1] - u[i - 1]) / (2.0 * h)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `u″ + μ u` for an amplitude given pointwise.
pub fn helmholtz_residual_fn(u: impl Fn(f64) -> f64, grid: Grid1D, mu: f64) -> ResidualReport {
    let h = grid.spacing();
    let vals: Vec<f64> = grid.nodes().into_iter().map(&u).collect();
    let res: Vec<f64> = grid
        .interior()
        .map(|i| second_difference(&vals, i, h) + mu * vals[i])
        .collect();
    // leading truncation term h² u⁗ / 12 with u⁗ = μ² u for the exact solution
    let tolerance = FD_SAFETY * h * h * mu * mu * max_abs(&vals) / 12.0;
    let max_abs_residual = max_abs(&res);
    ResidualReport {
        max_abs_residual,
        interior_points_checked: res.len(),
        mu_used: mu,
        boundary_values: (vals[0].abs(), vals[vals.len() - 1].abs()),
        tolerance,
        passed: max_abs_residual <= tolerance,
    }
}

/// `u″ + (π/L)² u` for `u = √γ` of the cos² density.
pub fn helmholtz_residual(d: &CosSqDensity, grid: Grid1D) -> ResidualReport {
    let l = d.support_interval().length();
    helmholtz_residual_fn(|w| d.pdf(w).sqrt(), grid, (PI / l).powi(2))
}

/// Residual ratio between `grid` and the grid with half the spacing.
pub fn convergence_ratio(grid: Grid1D, report: impl Fn(Grid1D) -> ResidualReport) -> f64 {
    report(grid).max_abs_residual / report(grid.refined()).max_abs_residual
}

pub fn is_second_order(ratio: f64) -> bool {
    (CONVERGENCE_RANGE.0..=CONVERGENCE_RANGE.1).contains(&ratio)
}

/// Scalar form `I⁻² C² u″ + μ u = 0` with `μ` fitted by least squares.
///
/// Passing is judged on the residual relative to the size of the
/// derivative term, which makes the verdict independent of `C`.
pub fn scalar_stationarity_residual(d: &dyn ScalarDensity, c: &Matrix, grid: Grid1D) -> Result<ResidualReport> {
    if c.rows() != 1 || c.cols() != 1 {
        return Err(Error::DimensionMismatch("scalar check needs a 1x1 query".into()));
    }
    let c2 = c[(0, 0)] * c[(0, 0)];
    let info = c2 * fisher_scalar_quadrature(d, DEFAULT_GRID)?;
    if !(info > 0.0) {
        return Err(Error::Singular(info));
    }
    let coef = c2 / (info * info);
    let h = grid.spacing();
    let u: Vec<f64> = grid.nodes().into_iter().map(|w| d.pdf(w).sqrt()).collect();
    let idx: Vec<usize> = grid.interior().collect();
    let t: Vec<f64> = idx.iter().map(|&i| coef * second_difference(&u, i, h)).collect();
    let tu: f64 = idx.iter().zip(&t).map(|(&i, ti)| ti * u[i]).sum();
    let uu: f64 = idx.iter().map(|&i| u[i] * u[i]).sum();
    let mu = -tu / uu;
    let res: Vec<f64> = idx.iter().zip(&t).map(|(&i, ti)| ti + mu * u[i]).collect();
    let max_abs_residual = max_abs(&res);
    let tolerance = FIT_TOL * max_abs(&t);
    Ok(ResidualReport {
        max_abs_residual,
        interior_points_checked: res.len(),
        mu_used: mu,
        boundary_values: (u[0], u[u.len() - 1]),
        tolerance,
        passed: max_abs_residual < tolerance,
    })
}

/// `u_vv + a u_v + μ(x) u` in the response variable `v = x + w`, with
/// `a = p'(x)/p(x)` and `μ(x) = a²/4 + (π/L)²`. `grid` spans the noise support.
pub fn weighted_residual_scalar(
    support: Interval,
    weight: &WeightFunction,
    x: f64,
    grid: Grid1D,
) -> Result<ResidualReport> {
    let d = tilted_new(support, weight, x)?;
    let a = d.tilt();
    let k = PI / support.length();
    let mu = a * a / 4.0 + k * k;
    let h = grid.spacing();
    // u(v) = √γ(v - x); differencing in v on the shifted nodes is the same as in w
    let u: Vec<f64> = grid.nodes().into_iter().map(|w| d.pdf(w).sqrt()).collect();
    let res: Vec<f64> = grid
        .interior()
        .map(|i| second_difference(&u, i, h) + a * first_difference(&u, i, h) + mu * u[i])
        .collect();
    // u is an exponential envelope times a cosine; each derivative costs at most |a|/2 + k
    let envelope = grid
        .nodes()
        .into_iter()
        .map(|w| (0.5 * (d.pdf(support.midpoint()).ln() - a * (w - support.midpoint()))).exp())
        .fold(0.0, f64::max);
    let r = a.abs() / 2.0 + k;
    let tolerance = FD_SAFETY * h * h * envelope * (r.powi(4) / 12.0 + a.abs() * r.powi(3) / 6.0);
    let max_abs_residual = max_abs(&res);
    Ok(ResidualReport {
        max_abs_residual,
        interior_points_checked: res.len(),
        mu_used: mu,
        boundary_values: (u[0], u[u.len() - 1]),
        tolerance,
        passed: max_abs_residual <= tolerance,
    })
}

/// Residual of `Tr(CCᵀ D²u) + (μ - β wᵀw) u` for a Gaussian amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStationarityReport {
    /// Residual with `β = ρ/4` and `μ` fitted.
    pub residual: ResidualReport,
    /// Least-squares `β` when both `μ` and `β` are free.
    pub beta_fitted: f64,
    pub beta_expected: f64,
    /// `(ρ/4) / β_fitted`; 1 when `Σ` solves the equation.
    pub mismatch_factor: f64,
    /// Factor `s` such that `s Σ` solves the equation.
    pub sigma_scale: f64,
}

/// Checks `u = exp(-wᵀΣ⁻¹w/4)` against the quadratic-penalty condition on a
/// tensor grid spanning ±8 standard deviations, `points` nodes per axis.
pub fn gaussian_stationarity_residual(c: &Matrix, rho: f64, sigma: &Matrix, points: usize) -> Result<GaussianStationarityReport> {
    let m = sigma.rows();
    if !(1..=2).contains(&m) || !sigma.is_square() || c.rows() != m {
        return Err(Error::DimensionMismatch("Gaussian residual supports m = 1 or 2".into()));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("rho = {rho} must be positive")));
    }
    let cct = c.gram_rows();
    let prec = spd_inverse(sigma)?;
    let eig = spectral_decompose(sigma)?;
    let spread = 8.0 * eig.max_eigenvalue().sqrt();
    let grid = Grid1D::new(-spread, spread, points)?;
    let h = grid.spacing();
    let nodes = grid.nodes();
    let amp = |w: &[f64]| {
        let pw = prec.mul_vec(w).expect("dimension checked");
        (-0.25 * pw.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).exp()
    };

    // samples (operator term, u, wᵀw u) on interior nodes
    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    let mut boundary = 0.0_f64;
    if m == 1 {
        let u: Vec<f64> = nodes.iter().map(|&w| amp(&[w])).collect();
        boundary = u[0].max(u[u.len() - 1]);
        for i in grid.interior() {
            let w = nodes[i];
            rows.push((cct[(0, 0)] * second_difference(&u, i, h), u[i], w * w * u[i]));
        }
    } else {
        let n = nodes.len();
        let u: Vec<Vec<f64>> = nodes
            .iter()
            .map(|&a| nodes.iter().map(|&b| amp(&[a, b])).collect())
            .collect();
        for i in 0..n {
            boundary = boundary.max(u[i][0]).max(u[i][n - 1]).max(u[0][i]).max(u[n - 1][i]);
        }
        for i in grid.interior() {
            for j in grid.interior() {
                let d00 = (u[i + 1][j] - 2.0 * u[i][j] + u[i - 1][j]) / (h * h);
                let d11 = (u[i][j + 1] - 2.0 * u[i][j] + u[i][j - 1]) / (h * h);
                let d01 = (u[i + 1][j + 1] - u[i + 1][j - 1] - u[i - 1][j + 1] + u[i - 1][j - 1]) / (4.0 * h * h);
                let op = cct[(0, 0)] * d00 + 2.0 * cct[(0, 1)] * d01 + cct[(1, 1)] * d11;
                let r2 = nodes[i] * nodes[i] + nodes[j] * nodes[j];
                rows.push((op, u[i][j], r2 * u[i][j]));
            }
        }
    }

    // free fit: op + μ u - β r²u ≈ 0
    let (mut suu, mut sur, mut srr, mut stu, mut str_) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, u, r) in &rows {
        suu += u * u;
        sur += u * r;
        srr += r * r;
        stu += t * u;
        str_ += t * r;
    }
    // normal equations for (μ, -β): [suu sur; sur srr] [μ; -β] = -[stu; str]
    let det = suu * srr - sur * sur;
    let neg_beta = (-str_ * suu + stu * sur) / det;
    let beta_fitted = -neg_beta;

    // fixed β = ρ/4, μ fitted
    let beta_expected = rho / 4.0;
    let mu = -(stu - beta_expected * sur) / suu;
    let res: Vec<f64> = rows.iter().map(|&(t, u, r)| t + mu * u - beta_expected * r).collect();
    let max_abs_residual = max_abs(&res);

    // u = exp(-w²/(2τ²)) along each principal axis with τ² = 2λ; |u⁗| ≤ 3/τ⁴
    let tau4 = (2.0 * eig.min_eigenvalue()).powi(2);
    let weight: f64 = cct.as_slice().iter().map(|v| v.abs()).sum();
    let tolerance = FD_SAFETY * h * h * weight * 3.0 / tau4 / 12.0 * m as f64;
    let mismatch_factor = beta_expected / beta_fitted;
    Ok(GaussianStationarityReport {
        residual: ResidualReport {
            max_abs_residual,
            interior_points_checked: rows.len(),
            mu_used: mu,
            boundary_values: (boundary, boundary),
            tolerance,
            passed: max_abs_residual <= tolerance,
        },
        beta_fitted,
        beta_expected,
        mismatch_factor,
        sigma_scale: 1.0 / mismatch_factor.sqrt(),
    })
}

/// Whether a bounded density vanishes exactly at both ends of its support.
pub fn boundary_check(d: &dyn ScalarDensity) -> bool {
    let (lo, hi) = d.support();
    d.is_bounded() && d.pdf(lo) == 0.0 && d.pdf(hi) == 0.0
}
