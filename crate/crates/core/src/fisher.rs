//! Fisher information of additive noise and the Cramér–Rao bound chain.
//!
//! For a response `y = f(x) + w` with noise density `γ` independent of `x`,
//! the Fisher information about `x` is `Fᵀ I_w F`, where `F` is the query
//! Jacobian and `I_w = ∫ γ (∇ log γ)(∇ log γ)ᵀ dw`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{NoiseDensity, ScalarDensity, TiltedCosSqDensity};
use crate::error::{Error, Result};
use crate::matcore::{moore_penrose_pinv, spd_inverse, spectral_decompose, Matrix};
use crate::mechanisms::{NoiseFamily, Query};
use crate::densities::{Interval, WeightFunction};
use crate::quad::pairwise_sum;

/// Smallest accepted quadrature grid.
pub const MIN_GRID: usize = 2049;
/// Grid used when callers do not choose one.
pub const DEFAULT_GRID: usize = 4097;
/// A cell whose density falls below this fraction of the peak makes the
/// score integral ill-conditioned.
pub const SINGULAR_PDF: f64 = 1e-14;
const INVERTIBLE_TOL: f64 = 1e-10;

/// How the score `d/dw log γ` is evaluated inside the quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMethod {
    /// Analytic score where the density provides one, else finite differences.
    Auto,
    /// Central differences of `log γ` with step `L · 2⁻¹⁶`.
    FiniteDifference,
}

/// Fisher matrix together with the scalar summaries of the bound chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherReport {
    pub matrix: Matrix,
    pub trace: f64,
    /// `Tr(I⁻¹)`, absent when `I` is singular.
    pub trace_inverse: Option<f64>,
    /// `n² / Tr(I)`.
    pub lower_bound: f64,
    /// `1 / Tr(I)`, a floor on the error of the best-estimated entry.
    pub worst_case_entry_bound: f64,
}

impl FisherReport {
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch("Fisher matrix must be square".into()));
        }
        let n = matrix.rows() as f64;
        let trace = matrix.trace();
        let trace_inverse = invert_if_regular(&matrix)?.map(|inv| inv.trace());
        Ok(Self {
            trace,
            trace_inverse,
            lower_bound: n * n / trace,
            worst_case_entry_bound: 1.0 / trace,
            matrix,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }
}

fn invert_if_regular(m: &Matrix) -> Result<Option<Matrix>> {
    let min = spectral_decompose(m)?.min_eigenvalue();
    if min <= INVERTIBLE_TOL {
        return Ok(None);
    }
    spd_inverse(m).map(Some)
}

fn regular_inverse(r: &FisherReport) -> Result<Matrix> {
    let min = spectral_decompose(&r.matrix)?.min_eigenvalue();
    if min <= INVERTIBLE_TOL {
        return Err(Error::Singular(min));
    }
    spd_inverse(&r.matrix)
}

fn central_difference_score(d: &dyn ScalarDensity, w: f64, h: f64) -> f64 {
    (d.pdf(w + h).ln() - d.pdf(w - h).ln()) / (2.0 * h)
}

/// Midpoint cells of the density's window. An even cell count on a window
/// symmetric about a kink keeps every midpoint off the kink.
fn cells(d: &dyn ScalarDensity, grid: usize) -> Result<(Vec<f64>, f64)> {
    if grid < MIN_GRID {
        return Err(Error::InvalidParameter(format!("Fisher grid {grid} < {MIN_GRID}")));
    }
    let (lo, hi) = d.window();
    let n = grid - 1;
    let h = (hi - lo) / n as f64;
    let mids: Vec<f64> = (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect();
    Ok((mids, h))
}

/// Integrates `γ · score(w)²` by the midpoint rule on the interior cells.
fn score_integral(
    d: &dyn ScalarDensity,
    grid: usize,
    method: ScoreMethod,
    score: impl Fn(f64, f64) -> f64,
) -> Result<f64> {
    let (mids, h) = cells(d, grid)?;
    let (lo, hi) = d.window();
    let fd_step = (hi - lo) * 2f64.powi(-16);
    let peak = mids.iter().map(|&w| d.pdf(w)).fold(0.0, f64::max);
    let mut terms = Vec::with_capacity(mids.len());
    for &w in &mids {
        let p = d.pdf(w);
        if p < SINGULAR_PDF * peak || p <= 0.0 {
            return Err(Error::SingularDensity(w));
        }
        let s_w = match method {
            ScoreMethod::Auto => d.score(w).unwrap_or_else(|| central_difference_score(d, w, fd_step)),
            ScoreMethod::FiniteDifference => central_difference_score(d, w, fd_step),
        };
        let s = score(w, s_w);
        terms.push(p * s * s * h);
    }
    Ok(pairwise_sum(&terms))
}

/// `∫ (γ')² / γ` for a scalar density, by midpoint quadrature on `grid` points.
pub fn fisher_scalar_quadrature(d: &dyn ScalarDensity, grid: usize) -> Result<f64> {
    fisher_scalar_with(d, grid, ScoreMethod::Auto)
}

pub fn fisher_scalar_with(d: &dyn ScalarDensity, grid: usize, method: ScoreMethod) -> Result<f64> {
    score_integral(d, grid, method, |_, s| s)
}

/// Fisher information about `x` carried by one response `x + w`, where
/// `w ~ γ(·|x)` is the tilted density evaluated at `x` and `tilt_slope` is
/// `d/dx [p'(x)/p(x)]`.
///
/// The density moves with `x` through its tilt, so the score picks up
/// `a'(x) (E[w] - w)` on top of the location term.
pub fn fisher_tilted(d: &TiltedCosSqDensity, tilt_slope: f64, grid: usize) -> Result<f64> {
    let mean = d.mean()?;
    score_integral(d, grid, ScoreMethod::Auto, |w, s_w| -s_w + tilt_slope * (mean - w))
}

/// Fisher matrix `I_w` of the noise vector.
pub fn noise_fisher(d: &NoiseDensity, grid: usize) -> Result<Matrix> {
    match d {
        NoiseDensity::Gaussian(g) => Ok(g.precision().clone()),
        NoiseDensity::ProductCosSq(p) => {
            let diag = p
                .factors()
                .iter()
                .map(|f| fisher_scalar_quadrature(f, grid))
                .collect::<Result<Vec<_>>>()?;
            Ok(Matrix::from_diag(&diag))
        }
        d => {
            let s = d.as_scalar().ok_or(Error::NotScalar)?;
            Ok(Matrix::from_diag(&[fisher_scalar_quadrature(s, grid)?]))
        }
    }
}

/// `I = Fᵀ I_w F` for noise that does not depend on `x`.
pub fn fisher_matrix(d: &NoiseDensity, jacobian: &Matrix) -> Result<FisherReport> {
    if jacobian.rows() != d.dim() {
        return Err(Error::DimensionMismatch(format!(
            "Jacobian has {} rows, noise has dimension {}",
            jacobian.rows(),
            d.dim()
        )));
    }
    let iw = noise_fisher(d, DEFAULT_GRID)?;
    let ft = jacobian.transpose();
    FisherReport::from_matrix(ft.matmul(&iw)?.matmul(jacobian)?)
}

/// `Tr(I⁻¹)`, the Cramér–Rao floor on the MSE of any unbiased estimator.
pub fn crb_unbiased(r: &FisherReport) -> Result<f64> {
    Ok(regular_inverse(r)?.trace())
}

/// `Tr(Gᵀ I⁻¹ G) + ‖x - g(x)‖²` for an estimator with mean `g(x)` and
/// Jacobian `G`.
pub fn crb_biased(r: &FisherReport, g_jacobian: &Matrix, bias: &[f64]) -> Result<f64> {
    let inv = regular_inverse(r)?;
    if g_jacobian.rows() != inv.rows() || bias.len() != inv.rows() {
        return Err(Error::DimensionMismatch("G and bias must match the Fisher dimension".into()));
    }
    let core = g_jacobian.transpose().matmul(&inv)?.matmul(g_jacobian)?;
    Ok(core.trace() + bias.iter().map(|b| b * b).sum::<f64>())
}

/// Bound for the least-squares estimate `C† y` under a linear query:
/// `‖(I - C†C) x‖² + Tr(I_w⁻¹ (CCᵀ)⁻¹)`.
///
/// The query Fisher `CᵀI_wC` is singular when `C` has fewer rows than
/// columns, so the bound is assembled from the noise Fisher directly.
pub fn crb_least_squares(c: &Matrix, noise_fisher: &Matrix, x: &[f64]) -> Result<f64> {
    let pinv = moore_penrose_pinv(c)?;
    let proj = pinv.matmul(c)?;
    let px = proj.mul_vec(x)?;
    let residual: f64 = x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum();
    let iw_inv = spd_inverse(noise_fisher)?;
    let cct_inv = spd_inverse(&c.gram_rows())?;
    Ok(residual + iw_inv.matmul(&cct_inv)?.trace())
}

/// `(n²/Tr(I), 1/Tr(I))`; checks `Tr(I⁻¹) ≥ n²/Tr(I)` when `I` is regular.
pub fn bound_chain(r: &FisherReport) -> Result<(f64, f64)> {
    if r.trace <= 0.0 {
        return Err(Error::ZeroTrace);
    }
    if let Some(ti) = r.trace_inverse {
        if ti < r.lower_bound * (1.0 - 1e-10) {
            return Err(Error::InvalidParameter(format!(
                "Tr(I⁻¹) = {ti} below n²/Tr(I) = {}",
                r.lower_bound
            )));
        }
    }
    Ok((r.lower_bound, r.worst_case_entry_bound))
}

/// Evaluation points over the database domain with quadrature weights
/// `p(xᵢ) Δᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightGrid {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl WeightGrid {
    /// Midpoint grid of `count` cells on a scalar domain.
    pub fn midpoint(domain: Interval, weight: &WeightFunction, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("empty weight grid".into()));
        }
        let h = domain.length() / count as f64;
        let points: Vec<Vec<f64>> = (0..count).map(|i| vec![domain.lo() + (i as f64 + 0.5) * h]).collect();
        let weights = points.iter().map(|p| weight.value(p[0]) * h).collect();
        Ok(Self { points, weights })
    }

    /// Replicates each scalar point across `n` coordinates.
    pub fn broadcast(&self, n: usize) -> Self {
        Self {
            points: self.points.iter().map(|p| vec![p[0]; n]).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }
}

/// Weighted privacy objectives over the database domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    /// `Σ Tr(I(xᵢ)⁻¹) p(xᵢ) Δᵢ` over the regular points.
    pub j_bar: f64,
    /// `Σ Tr(I(xᵢ)) p(xᵢ) Δᵢ`.
    pub j: f64,
    pub weight_grid: WeightGrid,
    /// Indices of grid points with singular `I(xᵢ)`, left out of `j_bar`.
    pub excluded: Vec<usize>,
}

impl ObjectiveReport {
    pub fn has_singular_points(&self) -> bool {
        !self.excluded.is_empty()
    }
}

pub fn objectives(family: &NoiseFamily, query: &Query, grid: &WeightGrid) -> Result<ObjectiveReport> {
    let per_point: Vec<Result<FisherReport>> = grid
        .points
        .par_iter()
        .map(|x| FisherReport::from_matrix(family.fisher_at(x, query)?))
        .collect();
    let mut j_terms = Vec::with_capacity(per_point.len());
    let mut jbar_terms = Vec::with_capacity(per_point.len());
    let mut excluded = Vec::new();
    for (i, (r, &w)) in per_point.into_iter().zip(&grid.weights).enumerate() {
        let r = r?;
        j_terms.push(r.trace * w);
        match r.trace_inverse {
            Some(ti) => jbar_terms.push(ti * w),
            None => {
                log::warn!("singular Fisher information at grid point {i}; excluded from j_bar");
                excluded.push(i);
            }
        }
    }
    Ok(ObjectiveReport {
        j_bar: pairwise_sum(&jbar_terms),
        j: pairwise_sum(&j_terms),
        weight_grid: grid.clone(),
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{CosSqDensity, GaussianDensity, LaplaceDensity};
    use crate::matcore::psd_sqrt;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cos_sq(lo: f64, hi: f64) -> CosSqDensity {
        CosSqDensity::new(Interval::new(lo, hi).unwrap())
    }

    #[test]
    fn scalar_fisher_oracles() {
        let g = GaussianDensity::scalar(2.0).unwrap();
        assert!((fisher_scalar_quadrature(&g, MIN_GRID).unwrap() - 0.5).abs() < 1e-6);
        let c = fisher_scalar_quadrature(&cos_sq(0.0, 1.0), MIN_GRID).unwrap();
        assert!((c - 4.0 * PI * PI).abs() < 1e-3);
        assert!((c - 39.478).abs() < 1e-3);
        let c2 = fisher_scalar_quadrature(&cos_sq(0.0, 2.0), MIN_GRID).unwrap();
        assert!((c2 - PI * PI).abs() < 1e-3);
    }

    #[test]
    fn finite_difference_score_agrees_with_analytic() {
        let densities: Vec<Box<dyn ScalarDensity>> = vec![
            Box::new(cos_sq(-1.0, 2.0)),
            Box::new(GaussianDensity::scalar(0.3).unwrap()),
            Box::new(LaplaceDensity::new(1.3).unwrap()),
            Box::new(TiltedCosSqDensity::with_tilt(Interval::new(0.0, 1.0).unwrap(), -2.0, 1.0).unwrap()),
        ];
        for d in &densities {
            let a = fisher_scalar_with(d.as_ref(), DEFAULT_GRID, ScoreMethod::Auto).unwrap();
            let f = fisher_scalar_with(d.as_ref(), DEFAULT_GRID, ScoreMethod::FiniteDifference).unwrap();
            assert!(((a - f) / a).abs() < 1e-4, "{a} vs {f}");
        }
    }

    #[test]
    fn laplace_fisher_matches_inverse_scale_squared() {
        for b in [0.25, 1.0, 3.0] {
            let v = fisher_scalar_quadrature(&LaplaceDensity::new(b).unwrap(), MIN_GRID).unwrap();
            let exact = 1.0 / (b * b);
            assert!(((v - exact) / exact).abs() < 1e-4, "b={b}: {v}");
        }
    }

    #[test]
    fn grid_too_small_and_singular_density() {
        assert!(fisher_scalar_quadrature(&cos_sq(0.0, 1.0), 100).is_err());

        struct Gap;
        impl ScalarDensity for Gap {
            fn pdf(&self, w: f64) -> f64 {
                if (0.4..0.6).contains(&w) || !(0.0..=1.0).contains(&w) {
                    0.0
                } else {
                    1.25
                }
            }
            fn cdf(&self, _w: f64) -> f64 {
                unimplemented!()
            }
            fn support(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
        }
        assert!(matches!(
            fisher_scalar_quadrature(&Gap, MIN_GRID),
            Err(Error::SingularDensity(_))
        ));
    }

    #[test]
    fn fisher_matrix_examples() {
        let d = NoiseDensity::CosSq(cos_sq(0.0, 1.0));
        let r = fisher_matrix(&d, &Matrix::identity(1)).unwrap();
        assert!((r.matrix[(0, 0)] - 4.0 * PI * PI).abs() < 1e-3);

        let g = NoiseDensity::Gaussian(GaussianDensity::scalar(1.0).unwrap());
        let c = Matrix::row_vector(&[0.5, 0.5]).unwrap();
        let r = fisher_matrix(&g, &c).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((r.matrix[(i, j)] - 0.25).abs() < 1e-15);
            }
        }
        assert!(r.trace_inverse.is_none());
        // quadrature route for the same Gaussian
        let q = fisher_scalar_quadrature(g.as_scalar().unwrap(), MIN_GRID).unwrap();
        assert!((q * 0.25 - 0.25).abs() < 1e-6);

        let r = fisher_matrix(&d, &Matrix::zeros(1, 3)).unwrap();
        assert_eq!(r.matrix, Matrix::zeros(3, 3));
        assert!(matches!(bound_chain(&r), Err(Error::ZeroTrace)));

        assert!(matches!(
            fisher_matrix(&d, &Matrix::identity(2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cramer_rao_examples() {
        let r = FisherReport::from_matrix(Matrix::from_diag(&[4.0 * PI * PI])).unwrap();
        assert!((crb_unbiased(&r).unwrap() - 0.025330).abs() < 1e-6);
        let r = FisherReport::from_matrix(Matrix::from_diag(&[1.0, 4.0])).unwrap();
        assert!((crb_unbiased(&r).unwrap() - 1.25).abs() < 1e-15);
        let (lb, wc) = bound_chain(&r).unwrap();
        assert!((lb - 0.8).abs() < 1e-15 && (wc - 0.2).abs() < 1e-15);
        let rank1 = FisherReport::from_matrix(Matrix::from_rows(&[vec![0.25, 0.25], vec![0.25, 0.25]]).unwrap()).unwrap();
        assert!(matches!(crb_unbiased(&rank1), Err(Error::Singular(_))));

        let b = crb_biased(&r, &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert!((b - 1.25).abs() < 1e-15);
        let b = crb_biased(&r, &Matrix::zeros(2, 2), &[1.0, 2.0]).unwrap();
        assert!((b - 5.0).abs() < 1e-15);

        let scalar = FisherReport::from_matrix(Matrix::identity(3).scale(2.5)).unwrap();
        assert!((scalar.trace_inverse.unwrap() - scalar.lower_bound).abs() < 1e-14);
    }

    #[test]
    fn least_squares_bound_for_averaging() {
        let c = Matrix::row_vector(&[0.5, 0.5]).unwrap();
        let v = crb_least_squares(&c, &Matrix::identity(1), &[1.0, 0.0]).unwrap();
        assert!((v - 2.5).abs() < 1e-12);
        // agrees with the general biased bound through the pseudo-inverse of CᵀI_wC
        let g = moore_penrose_pinv(&c).unwrap().matmul(&c).unwrap();
        let qf = c.gram_cols();
        let spec = spectral_decompose(&qf).unwrap();
        let pinv_q = spec.map_eigenvalues(|l| if l > 1e-12 { 1.0 / l } else { 0.0 });
        let core = g.transpose().matmul(&pinv_q).unwrap().matmul(&g).unwrap();
        assert!((core.trace() + 0.5 - v).abs() < 1e-12);
    }

    fn fixed(d: NoiseDensity) -> NoiseFamily {
        NoiseFamily::Fixed(d)
    }

    #[test]
    fn objectives_constant_density() {
        let grid = WeightGrid::midpoint(Interval::new(0.0, 1.0).unwrap(), &WeightFunction::uniform(), 16).unwrap();
        let fam = fixed(NoiseDensity::CosSq(cos_sq(0.0, 1.0)));
        let q = Query::Identity { n: 1 };
        let r = objectives(&fam, &q, &grid).unwrap();
        assert!((r.j - 4.0 * PI * PI).abs() < 1e-3);
        assert!((r.j_bar - 1.0 / (4.0 * PI * PI)).abs() < 1e-7);
        assert!(r.j_bar >= 1.0 / r.j - 1e-6);
        let r2 = objectives(&fam, &q, &grid.scaled(2.0)).unwrap();
        assert!((r2.j - 2.0 * r.j).abs() < 1e-9 && (r2.j_bar - 2.0 * r.j_bar).abs() < 1e-12);
        // scaling p itself, rather than the grid
        let g2 = WeightGrid::midpoint(Interval::new(0.0, 1.0).unwrap(), &WeightFunction::uniform().scaled(2.0), 16).unwrap();
        assert_eq!(g2.weights, grid.scaled(2.0).weights);
    }

    #[test]
    fn objectives_flag_singular_points() {
        let grid = WeightGrid::midpoint(Interval::new(0.0, 1.0).unwrap(), &WeightFunction::uniform(), 4)
            .unwrap()
            .broadcast(2);
        let fam = fixed(NoiseDensity::Gaussian(GaussianDensity::scalar(1.0).unwrap()));
        let q = Query::WeightedAverage { weights: vec![0.5, 0.5] };
        let r = objectives(&fam, &q, &grid).unwrap();
        assert_eq!(r.excluded, vec![0, 1, 2, 3]);
        assert_eq!(r.j_bar, 0.0);
        assert!((r.j - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tilted_family_objective_is_flat_for_exponential_weight() {
        let support = Interval::new(0.0, 1.0).unwrap();
        let weight = WeightFunction::exponential(1.0);
        let grid = WeightGrid::midpoint(Interval::new(0.0, 4.0).unwrap(), &weight, 9).unwrap();
        let fam = NoiseFamily::Tilted { support, weight };
        let q = Query::Identity { n: 1 };
        let values: Vec<f64> = grid
            .points
            .iter()
            .map(|x| fam.fisher_at(x, &q).unwrap()[(0, 0)])
            .collect();
        for v in &values {
            assert!((v - values[0]).abs() < 1e-9 * values[0]);
        }
        let r = objectives(&fam, &q, &grid).unwrap();
        assert!(r.excluded.is_empty());
    }

    #[test]
    fn tilted_fisher_matches_finite_difference_in_x() {
        // Fisher about x of y = x + w, w ~ γ(·|x), from the x-derivative of log p(y|x).
        let support = Interval::new(0.0, 1.0).unwrap();
        let weight = WeightFunction::squared_exponential(1.0);
        let x = 0.8;
        let d = crate::densities::tilted_new(support, &weight, x).unwrap();
        let analytic = fisher_tilted(&d, weight.log_ratio_slope(x), DEFAULT_GRID).unwrap();
        let hx = 1e-5;
        let dp = crate::densities::tilted_new(support, &weight, x + hx).unwrap();
        let dm = crate::densities::tilted_new(support, &weight, x - hx).unwrap();
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut acc = Vec::with_capacity(n);
        for i in 0..n {
            let y = x + (i as f64 + 0.5) * h;
            let s = (dp.pdf(y - x - hx).ln() - dm.pdf(y - x + hx).ln()) / (2.0 * hx);
            let p = d.pdf(y - x);
            if p > 0.0 && s.is_finite() {
                acc.push(p * s * s * h);
            }
        }
        let numeric = pairwise_sum(&acc);
        assert!(((numeric - analytic) / analytic).abs() < 1e-3, "{numeric} vs {analytic}");
    }

    /// Fisher about `x` of `z = φ(x + w)`, computed on the z axis.
    fn pushforward_fisher(
        d: &dyn ScalarDensity,
        phi: impl Fn(f64) -> f64,
        phi_inv: impl Fn(f64) -> f64,
        dphi: impl Fn(f64) -> f64,
        x: f64,
    ) -> f64 {
        let (lo, hi) = d.window();
        let (zlo, zhi) = (phi(x + lo), phi(x + hi));
        let n = 40_000;
        let h = (zhi - zlo) / n as f64;
        let hx = 1e-6;
        let q = |z: f64, x: f64| {
            let y = phi_inv(z);
            d.pdf(y - x) / dphi(y)
        };
        let mut acc = Vec::with_capacity(n);
        for i in 1..n - 1 {
            let z = zlo + (i as f64 + 0.5) * h;
            let p = q(z, x);
            if p <= 0.0 {
                continue;
            }
            let s = (q(z, x + hx).ln() - q(z, x - hx).ln()) / (2.0 * hx);
            if s.is_finite() {
                acc.push(p * s * s * h);
            }
        }
        pairwise_sum(&acc)
    }

    fn cubic_inverse(z: f64) -> f64 {
        let mut y = z.cbrt();
        for _ in 0..60 {
            y -= (y * y * y + y - z) / (3.0 * y * y + 1.0);
        }
        y
    }

    #[test]
    fn post_processing_never_lowers_the_bound() {
        let d = GaussianDensity::scalar(0.5).unwrap();
        let base = fisher_scalar_quadrature(&d, DEFAULT_GRID).unwrap();
        let x = 0.3;
        let affine = pushforward_fisher(&d, |y| 2.0 * y + 1.0, |z| (z - 1.0) / 2.0, |_| 2.0, x);
        assert!((1.0 / affine - 1.0 / base).abs() < 1e-6);
        let cubic = pushforward_fisher(&d, |y| y * y * y + y, cubic_inverse, |y| 3.0 * y * y + 1.0, x);
        assert!(1.0 / cubic >= 1.0 / base - 1e-6, "{} < {}", 1.0 / cubic, 1.0 / base);
    }

    fn psd_strategy(n: usize) -> impl Strategy<Value = Matrix> {
        proptest::collection::vec(-2.0f64..2.0, n * n).prop_map(move |v| {
            let b = Matrix::from_vec(n, n, v).unwrap();
            &b.gram_cols() + &Matrix::identity(n).scale(1e-3)
        })
    }

    proptest! {
        #[test]
        fn chain_holds_for_random_psd(m in psd_strategy(4)) {
            let r = FisherReport::from_matrix(m).unwrap();
            let (lb, wc) = bound_chain(&r).unwrap();
            let ti = r.trace_inverse.unwrap();
            prop_assert!(ti >= lb * (1.0 - 1e-12));
            prop_assert!(lb == 16.0 * wc || (lb - 16.0 * wc).abs() < 1e-12 * lb);
            let min = spectral_decompose(&r.matrix).unwrap().min_eigenvalue();
            prop_assert!(min >= -1e-8);
        }

        #[test]
        fn gaussian_fisher_is_precision(m in psd_strategy(3)) {
            let cov = &m + &Matrix::identity(3);
            let d = NoiseDensity::Gaussian(GaussianDensity::new(cov.clone()).unwrap());
            let r = fisher_matrix(&d, &Matrix::identity(3)).unwrap();
            let prod = r.matrix.matmul(&cov).unwrap();
            prop_assert!((&prod - &Matrix::identity(3)).frobenius_norm() < 1e-8);
            let _ = psd_sqrt(&r.matrix).unwrap();
        }
    }
}
