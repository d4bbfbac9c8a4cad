//! Comparisons with differential privacy: (ε, δ) certification of the
//! Gaussian optimum, entropy and Fisher comparisons against Laplace at equal
//! quality, the strength factor, and a numerical ε-DP audit.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::densities::{GaussianDensity, Interval, LaplaceDensity, NoiseDensity};
use crate::error::{Error, Result};
use crate::fisher::{fisher_scalar_quadrature, DEFAULT_GRID};
use crate::matcore::{moore_penrose_pinv, Matrix};
use crate::mechanisms::{Mechanism, NoiseFamily};

/// Probe count used by default for the ε-DP audit.
pub const AUDIT_PROBES: usize = 2049;
/// Half-width of the audit probe window, in Laplace scales.
pub const AUDIT_SPAN: f64 = 20.0;
const AUDIT_SLACK: f64 = 1e-9;
// beyond this many entries the audit varies one coordinate at a time
const MAX_CORNER_ENTRIES: usize = 12;

pub const REGION_CSV_HEADER: &str = "epsilon,delta,satisfied";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpKind {
    Epsilon,
    EpsilonDelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpCertificate {
    pub kind: DpKind,
    pub epsilon: f64,
    pub delta: f64,
    pub satisfied: bool,
    /// Right-hand side of the governing inequality.
    pub binding_value: f64,
}

fn sensitivity(entry_domain: Interval, c: &Matrix) -> Result<f64> {
    if c.rows() != 1 {
        return Err(Error::DimensionMismatch("query must be 1 x n".into()));
    }
    Ok(entry_domain.length() * c.max_abs())
}

/// Whether the Gaussian optimum with quality `theta` is (ε, δ)-private:
/// `ϑ ≥ Δ (√(2 ln(1/(2δ)))/ε + 1/√(2ε))` with `Δ = (x̄ - x̲) max|cᵢ|`.
pub fn check_eps_delta(theta: f64, entry_domain: Interval, c: &Matrix, epsilon: f64, delta: f64) -> Result<DpCertificate> {
    if !(delta > 0.0 && delta <= 0.5) {
        return Err(Error::DeltaOutOfRange(delta));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
    }
    let d = sensitivity(entry_domain, c)?;
    let k = (2.0 * (1.0 / (2.0 * delta)).ln()).sqrt();
    let rhs = d * (k / epsilon + 1.0 / (2.0 * epsilon).sqrt());
    Ok(DpCertificate {
        kind: DpKind::EpsilonDelta,
        epsilon,
        delta,
        satisfied: theta >= rhs,
        binding_value: rhs,
    })
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == count - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect()
}

/// Outcome of the (ε, δ) check over a grid; `None` where `δ > ½` puts the
/// cell outside the check's precondition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub epsilons: Vec<f64>,
    pub deltas: Vec<f64>,
    /// `cells[i][j]` for `epsilons[i]`, `deltas[j]`.
    pub cells: Vec<Vec<Option<bool>>>,
}

impl RegionGrid {
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::with_capacity(self.epsilons.len() * self.deltas.len());
        for (i, e) in self.epsilons.iter().enumerate() {
            for (j, d) in self.deltas.iter().enumerate() {
                let s = match self.cells[i][j] {
                    Some(true) => "true",
                    Some(false) => "false",
                    None => "na",
                };
                rows.push(format!("{e},{d},{s}"));
            }
        }
        rows
    }

    /// Satisfaction never switches off as ε or δ grows (grids ascending).
    pub fn is_monotone(&self) -> bool {
        let ok = |seq: &mut dyn Iterator<Item = Option<bool>>| {
            let mut seen = false;
            for v in seq.flatten() {
                if seen && !v {
                    return false;
                }
                seen |= v;
            }
            true
        };
        let (ne, nd) = (self.epsilons.len(), self.deltas.len());
        (0..nd).all(|j| ok(&mut (0..ne).map(|i| self.cells[i][j])))
            && (0..ne).all(|i| ok(&mut (0..nd).map(|j| self.cells[i][j])))
    }

    /// Value of the defined cell nearest `(epsilon, delta)` in log distance.
    pub fn at(&self, epsilon: f64, delta: f64) -> Option<bool> {
        let mut best: Option<(f64, bool)> = None;
        for (i, e) in self.epsilons.iter().enumerate() {
            for (j, d) in self.deltas.iter().enumerate() {
                if let Some(v) = self.cells[i][j] {
                    let dist = (e.ln() - epsilon.ln()).powi(2) + (d.ln() - delta.ln()).powi(2);
                    if best.is_none_or(|(b, _)| dist < b) {
                        best = Some((dist, v));
                    }
                }
            }
        }
        best.map(|(_, v)| v)
    }
}

pub fn eps_delta_region(
    theta: f64,
    entry_domain: Interval,
    c: &Matrix,
    eps_grid: &[f64],
    delta_grid: &[f64],
) -> Result<RegionGrid> {
    let mut cells = Vec::with_capacity(eps_grid.len());
    for &e in eps_grid {
        let mut row = Vec::with_capacity(delta_grid.len());
        for &d in delta_grid {
            row.push(match check_eps_delta(theta, entry_domain, c, e, d) {
                Ok(cert) => Some(cert.satisfied),
                Err(Error::DeltaOutOfRange(_)) => None,
                Err(err) => return Err(err),
            });
        }
        cells.push(row);
    }
    Ok(RegionGrid {
        epsilons: eps_grid.to_vec(),
        deltas: delta_grid.to_vec(),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyComparison {
    pub theta: f64,
    pub laplace_bits: f64,
    pub gaussian_bits: f64,
    pub gaussian_ge_laplace: bool,
}

/// Entropies of Laplace and Gaussian noise with `E w² = ϑ`.
pub fn entropy_compare(theta: f64) -> Result<EntropyComparison> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("theta = {theta} must be positive")));
    }
    let laplace_bits = (E * (2.0 * theta).sqrt()).log2();
    let gaussian_bits = (E * 2.0 * PI * theta).sqrt().log2();
    Ok(EntropyComparison {
        theta,
        laplace_bits,
        gaussian_bits,
        gaussian_ge_laplace: gaussian_bits >= laplace_bits,
    })
}

/// `½ log₂(π/e)`, the entropy gap at equal quality.
pub fn entropy_gap() -> f64 {
    0.5 * (PI / E).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherComparison {
    pub laplace: f64,
    pub gaussian: f64,
}

/// Fisher information of the released scalar for Laplace and Gaussian
/// noise of equal quality: `2CCᵀ/ϑ` and `CCᵀ/ϑ`.
pub fn fisher_compare(c: &Matrix, theta: f64) -> Result<FisherComparison> {
    if c.rows() != 1 {
        return Err(Error::DimensionMismatch("query must be 1 x n".into()));
    }
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("theta = {theta} must be positive")));
    }
    let cct = c.gram_rows()[(0, 0)];
    Ok(FisherComparison {
        laplace: 2.0 * cct / theta,
        gaussian: cct / theta,
    })
}

/// The same comparison with both noise Fisher values taken by quadrature.
pub fn fisher_compare_quadrature(c: &Matrix, theta: f64) -> Result<FisherComparison> {
    let cct = c.gram_rows()[(0, 0)];
    let lap = LaplaceDensity::new((theta / 2.0).sqrt())?;
    let gauss = GaussianDensity::scalar(theta)?;
    Ok(FisherComparison {
        laplace: cct * fisher_scalar_quadrature(&lap, DEFAULT_GRID)?,
        gaussian: cct * fisher_scalar_quadrature(&gauss, DEFAULT_GRID)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrengthFactor {
    /// `max ‖(I - C†C) x‖²` over the box.
    pub max_projection: f64,
    pub kappa: f64,
    /// `1 + κ`.
    pub factor: f64,
}

fn corners(n: usize, domain: Interval) -> impl Iterator<Item = Vec<f64>> {
    (0u64..1 << n).map(move |mask| {
        (0..n)
            .map(|j| if mask >> j & 1 == 1 { domain.hi() } else { domain.lo() })
            .collect()
    })
}

/// `1 + κ` with `κ = 1 / (1 + 2 (CCᵀ)² max‖(I - C†C)x‖² / ϑ)`; the convex
/// maximum over the box is found among its corners.
pub fn strength_factor(c: &Matrix, entry_domain: Interval, theta: f64) -> Result<StrengthFactor> {
    if c.rows() != 1 {
        return Err(Error::DimensionMismatch("query must be 1 x n".into()));
    }
    let n = c.cols();
    if n > 24 {
        return Err(Error::InvalidParameter(format!("corner enumeration over {n} entries")));
    }
    let proj = moore_penrose_pinv(c)?.matmul(c)?;
    let mut max_projection: f64 = 0.0;
    for x in corners(n, entry_domain) {
        let px = proj.mul_vec(&x)?;
        let r: f64 = x.iter().zip(&px).map(|(a, b)| (a - b) * (a - b)).sum();
        max_projection = max_projection.max(r);
    }
    let cct = c.gram_rows()[(0, 0)];
    let kappa = 1.0 / (1.0 + 2.0 * cct * cct * max_projection / theta);
    Ok(StrengthFactor {
        max_projection,
        kappa,
        factor: 1.0 + kappa,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditResult {
    pub epsilon: f64,
    pub sup_log_ratio: f64,
    pub passed: bool,
}

/// Largest `log p(y - a) / p(y - b)` for Laplace noise of scale `b` over
/// `probes` points spanning both centres by `AUDIT_SPAN · b`.
pub fn laplace_log_ratio_sup(scale: f64, a: f64, b: f64, probes: usize) -> f64 {
    let lo = a.min(b) - AUDIT_SPAN * scale;
    let hi = a.max(b) + AUDIT_SPAN * scale;
    let step = (hi - lo) / (probes.max(2) - 1) as f64;
    (0..probes.max(2))
        .map(|i| {
            let y = lo + i as f64 * step;
            ((y - b).abs() - (y - a).abs()) / scale
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Audits a Laplace mechanism for ε-DP over neighbouring databases that
/// differ in one entry, entries taking the domain extremes.
pub fn epsilon_dp_audit(mech: &Mechanism, entry_domain: Interval, epsilon: f64, probes: usize) -> Result<AuditResult> {
    let NoiseFamily::Fixed(NoiseDensity::Laplace(lap)) = &mech.noise else {
        return Err(Error::IncompatibleQuery("audit needs a Laplace mechanism".into()));
    };
    let c = mech
        .query
        .linear_matrix()
        .filter(|c| c.rows() == 1)
        .ok_or_else(|| Error::IncompatibleQuery("audit needs a scalar linear query".into()))?;
    let n = c.cols();
    let bases: Vec<Vec<f64>> = if n <= MAX_CORNER_ENTRIES {
        corners(n, entry_domain).collect()
    } else {
        vec![vec![entry_domain.lo(); n]]
    };
    let mut sup = f64::NEG_INFINITY;
    for x in &bases {
        let cx = c.mul_vec(x)?[0];
        for j in 0..n {
            let mut x2 = x.clone();
            x2[j] = if x[j] == entry_domain.lo() { entry_domain.hi() } else { entry_domain.lo() };
            let cx2 = c.mul_vec(&x2)?[0];
            sup = sup
                .max(laplace_log_ratio_sup(lap.scale(), cx, cx2, probes))
                .max(laplace_log_ratio_sup(lap.scale(), cx2, cx, probes));
        }
    }
    Ok(AuditResult {
        epsilon,
        sup_log_ratio: sup,
        passed: sup <= epsilon + AUDIT_SLACK,
    })
}
