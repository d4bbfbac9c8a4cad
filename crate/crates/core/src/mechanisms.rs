//! Queries, budgets, and the optimal-noise constructors.
//!
//! A mechanism answers `y = f(x) + w`. Bounded budgets use the cos² family,
//! quadratic budgets (`rho`, `theta`) use a Gaussian shaped by `(CCᵀ)^{1/2}`,
//! and `epsilon` budgets use the Laplace baseline.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::{
    tilted_new, CosSqDensity, GaussianDensity, Interval, LaplaceDensity, NoiseDensity, NoiseSpec,
    ProductCosSqDensity, WeightFunction,
};
use crate::error::{Error, Result};
use crate::fisher::{self, fisher_tilted, FisherReport, DEFAULT_GRID};
use crate::matcore::{psd_sqrt, Matrix};

const WEIGHT_SUM_TOL: f64 = 1e-12;
const TILTED_REPORT_POINTS: usize = 9;

static RESPONSE_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A scalar query `f: ℝⁿ → ℝ` with its gradient.
#[derive(Clone)]
pub struct ScalarFunction {
    n: usize,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    grad: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
    description: String,
}

impl ScalarFunction {
    pub fn new(
        n: usize,
        description: impl Into<String>,
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            n,
            f: Arc::new(f),
            grad: Arc::new(grad),
            description: description.into(),
        }
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

impl fmt::Debug for ScalarFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarFunction({}, n = {})", self.description, self.n)
    }
}

/// Database-to-response maps.
#[derive(Debug, Clone)]
pub enum Query {
    Identity { n: usize },
    /// `Σ cᵢ xᵢ` with `Σ cᵢ = 1`.
    WeightedAverage { weights: Vec<f64> },
    /// Unbiased sample variance of the entries.
    Variance { n: usize },
    Linear { matrix: Matrix },
    ScalarNonlinear(ScalarFunction),
}

impl Query {
    pub fn weighted_average(weights: Vec<f64>) -> Result<Self> {
        let q = Query::WeightedAverage { weights };
        q.validate()?;
        Ok(q)
    }

    pub fn mean(n: usize) -> Self {
        Query::WeightedAverage {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Query::Identity { n } if *n == 0 => Err(Error::InvalidParameter("identity query over zero entries".into())),
            Query::Variance { n } if *n < 2 => Err(Error::InvalidParameter("variance needs at least two entries".into())),
            Query::WeightedAverage { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::InvalidParameter("average weights must be finite and non-empty".into()));
                }
                let s: f64 = weights.iter().sum();
                if (s - 1.0).abs() > WEIGHT_SUM_TOL {
                    return Err(Error::InvalidParameter(format!("average weights sum to {s}, not 1")));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Query::Identity { .. } => "identity",
            Query::WeightedAverage { .. } => "average",
            Query::Variance { .. } => "variance",
            Query::Linear { .. } => "linear",
            Query::ScalarNonlinear(_) => "scalar_nonlinear",
        }
    }

    /// Number of database entries.
    pub fn n(&self) -> usize {
        match self {
            Query::Identity { n } | Query::Variance { n } => *n,
            Query::WeightedAverage { weights } => weights.len(),
            Query::Linear { matrix } => matrix.cols(),
            Query::ScalarNonlinear(f) => f.n,
        }
    }

    /// Dimension of the response.
    pub fn m(&self) -> usize {
        match self {
            Query::Identity { n } => *n,
            Query::Linear { matrix } => matrix.rows(),
            _ => 1,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} query over {} entries applied to {}",
                self.kind(),
                self.n(),
                x.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("query input".into()));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(match self {
            Query::Identity { .. } => x.to_vec(),
            Query::WeightedAverage { weights } => vec![weights.iter().zip(x).map(|(c, v)| c * v).sum()],
            Query::Variance { n } => {
                let mean = x.iter().sum::<f64>() / *n as f64;
                vec![x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (*n as f64 - 1.0)]
            }
            Query::Linear { matrix } => matrix.mul_vec(x)?,
            Query::ScalarNonlinear(f) => vec![(f.f)(x)],
        })
    }

    /// `F(x) = ∂f/∂x`, an `m × n` matrix.
    pub fn jacobian(&self, x: &[f64]) -> Result<Matrix> {
        self.check_input(x)?;
        match self {
            Query::Identity { n } => Ok(Matrix::identity(*n)),
            Query::WeightedAverage { weights } => Matrix::row_vector(weights),
            Query::Variance { n } => {
                let mean = x.iter().sum::<f64>() / *n as f64;
                let g: Vec<f64> = x.iter().map(|v| 2.0 * (v - mean) / (*n as f64 - 1.0)).collect();
                Matrix::row_vector(&g)
            }
            Query::Linear { matrix } => Ok(matrix.clone()),
            Query::ScalarNonlinear(f) => Matrix::row_vector(&(f.grad)(x)),
        }
    }

    /// The constant Jacobian of a linear query.
    pub fn linear_matrix(&self) -> Option<Matrix> {
        match self {
            Query::Identity { n } => Some(Matrix::identity(*n)),
            Query::WeightedAverage { weights } => Matrix::row_vector(weights).ok(),
            Query::Linear { matrix } => Some(matrix.clone()),
            _ => None,
        }
    }

    pub fn to_spec(&self) -> Option<QuerySpec> {
        Some(match self {
            Query::Identity { n } => QuerySpec::Identity { n: Some(*n) },
            Query::WeightedAverage { weights } => QuerySpec::Average {
                weights: Some(weights.clone()),
            },
            Query::Variance { n } => QuerySpec::Variance { n: Some(*n) },
            Query::Linear { matrix } => QuerySpec::Linear { matrix: matrix.clone() },
            Query::ScalarNonlinear(_) => return None,
        })
    }

    fn same_as(&self, other: &Query) -> bool {
        match (self.to_spec(), other.to_spec()) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

/// Wire form of a query. Sizes left out are filled from the database.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum QuerySpec {
    Identity {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    },
    /// A plain mean when `weights` is absent.
    Average {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        weights: Option<Vec<f64>>,
    },
    Variance {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    },
    Linear { matrix: Matrix },
}

impl QuerySpec {
    /// Builds the query for a database with `n` entries.
    pub fn resolve(&self, n: usize) -> Result<Query> {
        let check = |declared: usize| {
            if declared != n {
                Err(Error::IncompatibleQuery(format!(
                    "query over {declared} entries, database has {n}"
                )))
            } else {
                Ok(())
            }
        };
        let q = match self {
            QuerySpec::Identity { n: k } => {
                check(k.unwrap_or(n))?;
                Query::Identity { n }
            }
            QuerySpec::Average { weights: None } => Query::mean(n),
            QuerySpec::Average { weights: Some(w) } => {
                check(w.len())?;
                Query::WeightedAverage { weights: w.clone() }
            }
            QuerySpec::Variance { n: k } => {
                check(k.unwrap_or(n))?;
                Query::Variance { n }
            }
            QuerySpec::Linear { matrix } => {
                check(matrix.cols())?;
                Query::Linear { matrix: matrix.clone() }
            }
        };
        q.validate().map_err(|e| Error::IncompatibleQuery(e.to_string()))?;
        Ok(q)
    }
}

/// Privacy/quality budget parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Budget {
    /// Noise confined to `[lo, hi]` per coordinate.
    Bounded { lo: f64, hi: f64 },
    /// Weight `ρ` on quality in the penalized objective.
    Rho { rho: f64 },
    /// `E‖w‖² ≤ ϑ`.
    Theta { theta: f64 },
    /// ε-differential privacy with entries in `[lo, hi]`.
    Epsilon { epsilon: f64, lo: f64, hi: f64 },
}

impl Budget {
    pub fn bounded(support: Interval) -> Self {
        Budget::Bounded {
            lo: support.lo(),
            hi: support.hi(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Budget::Bounded { lo, hi } => Interval::new(lo, hi).map(|_| ()),
            Budget::Rho { rho } if !(rho > 0.0 && rho.is_finite()) => {
                Err(Error::InvalidParameter(format!("rho = {rho} must be positive")))
            }
            Budget::Theta { theta } if !(theta > 0.0 && theta.is_finite()) => {
                Err(Error::InvalidParameter(format!("theta = {theta} must be positive")))
            }
            Budget::Epsilon { epsilon, lo, hi } => {
                if !(epsilon > 0.0) {
                    return Err(Error::InvalidParameter(format!("epsilon = {epsilon} must be positive")));
                }
                Interval::new(lo, hi).map(|_| ())
            }
            _ => Ok(()),
        }
    }
}

/// Noise that is either fixed or re-derived at each database value.
#[derive(Debug, Clone)]
pub enum NoiseFamily {
    Fixed(NoiseDensity),
    /// The tilted cos² optimum for a non-uniform weight, scalar identity query.
    Tilted { support: Interval, weight: WeightFunction },
}

impl NoiseFamily {
    pub fn at(&self, x: &[f64]) -> Result<NoiseDensity> {
        match self {
            NoiseFamily::Fixed(d) => Ok(d.clone()),
            NoiseFamily::Tilted { support, weight } => {
                if x.len() != 1 {
                    return Err(Error::DimensionMismatch("tilted family is scalar".into()));
                }
                Ok(NoiseDensity::TiltedCosSq(tilted_new(*support, weight, x[0])?))
            }
        }
    }

    /// `I(x)` for the response `f(x) + w`.
    pub fn fisher_at(&self, x: &[f64], query: &Query) -> Result<Matrix> {
        match self {
            NoiseFamily::Fixed(d) => Ok(fisher::fisher_matrix(d, &query.jacobian(x)?)?.matrix),
            NoiseFamily::Tilted { support, weight } => {
                if !matches!(query, Query::Identity { n: 1 }) {
                    return Err(Error::IncompatibleQuery("tilted family needs a scalar identity query".into()));
                }
                let d = tilted_new(*support, weight, x[0])?;
                let v = fisher_tilted(&d, weight.log_ratio_slope(x[0]), DEFAULT_GRID)?;
                Ok(Matrix::from_diag(&[v]))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseFamily::Fixed(d) => d.dim(),
            NoiseFamily::Tilted { .. } => 1,
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            NoiseFamily::Fixed(d) => d.is_bounded(),
            NoiseFamily::Tilted { .. } => true,
        }
    }
}

/// Where the support constraint applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Constraint {
    /// Noise lies in a fixed box `W`.
    NoiseSupport,
    /// Responses lie in `[lo, hi]`; the noise support becomes `[lo, hi] - f(x)`.
    Output { lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
pub struct Mechanism {
    pub id: String,
    pub query: Query,
    pub noise: NoiseFamily,
    pub budget: Budget,
    pub constraint: Constraint,
    /// Per-entry domain of the database, checked on every response.
    pub domain: Option<Interval>,
}

/// A released response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub value: Vec<f64>,
    pub mechanism_id: String,
    pub timestamp: u64,
}

impl Mechanism {
    fn new(id: impl Into<String>, query: Query, noise: NoiseFamily, budget: Budget) -> Self {
        Self {
            id: id.into(),
            query,
            noise,
            budget,
            constraint: Constraint::NoiseSupport,
            domain: None,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    pub fn with_domain(mut self, domain: Interval) -> Self {
        self.domain = Some(domain);
        self
    }

    /// Bounded scalar mechanism whose responses are confined to `output`.
    pub fn output_constrained(query: Query, output: Interval) -> Result<Self> {
        if query.m() != 1 {
            return Err(Error::IncompatibleQuery("output constraint needs a scalar query".into()));
        }
        let mut m = optimal_bounded_scalar(query, output)?;
        m.constraint = Constraint::Output {
            lo: output.lo(),
            hi: output.hi(),
        };
        m.id = "output_constrained".into();
        Ok(m)
    }

    fn check_domain(&self, x: &[f64]) -> Result<()> {
        if let Some(d) = self.domain {
            if let Some(i) = x.iter().position(|&v| !d.contains(v)) {
                return Err(Error::DomainViolation(format!(
                    "entry {i} = {} outside [{}, {}]",
                    x[i],
                    d.lo(),
                    d.hi()
                )));
            }
        }
        Ok(())
    }

    /// The noise actually used for a response at `x` with query value `fx`.
    fn noise_for(&self, x: &[f64], fx: &[f64]) -> Result<NoiseDensity> {
        match self.constraint {
            Constraint::NoiseSupport => self.noise.at(x),
            Constraint::Output { lo, hi } => {
                let shifted = Interval::new(lo - fx[0], hi - fx[0])?;
                Ok(NoiseDensity::CosSq(CosSqDensity::new(shifted)))
            }
        }
    }

    /// `y = f(x) + w` for this mechanism's own query.
    pub fn respond<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<Response> {
        self.respond_to(&self.query, x, rng)
    }

    /// Answers `query`, which may differ from the configured one only when
    /// the noise does not depend on the query (bounded supports).
    pub fn respond_to<R: Rng + ?Sized>(&self, query: &Query, x: &[f64], rng: &mut R) -> Result<Response> {
        self.check_compatible(query)?;
        self.check_domain(x)?;
        let fx = query.eval(x)?;
        let noise = self.noise_for(x, &fx)?;
        let w = noise.sample_one(rng);
        if noise.is_bounded() && !noise.contains(&w) {
            return Err(Error::DomainViolation("sampled noise left its support".into()));
        }
        let value: Vec<f64> = fx.iter().zip(&w).map(|(a, b)| a + b).collect();
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("response".into()));
        }
        Ok(Response {
            value,
            mechanism_id: self.id.clone(),
            timestamp: RESPONSE_COUNTER.fetch_add(1, Ordering::Relaxed) + 1,
        })
    }

    pub fn check_compatible(&self, query: &Query) -> Result<()> {
        if query.m() != self.noise.dim() {
            return Err(Error::IncompatibleQuery(format!(
                "{} query has {} outputs, mechanism `{}` adds {}-dimensional noise",
                query.kind(),
                query.m(),
                self.id,
                self.noise.dim()
            )));
        }
        if query.n() != self.query.n() {
            return Err(Error::IncompatibleQuery(format!(
                "query over {} entries, mechanism `{}` was built for {}",
                query.n(),
                self.id,
                self.query.n()
            )));
        }
        if !self.noise.is_bounded() && !query.same_as(&self.query) {
            return Err(Error::IncompatibleQuery(format!(
                "mechanism `{}` is calibrated to its own {} query",
                self.id,
                self.query.kind()
            )));
        }
        Ok(())
    }

    /// Whether `y` lies in `{f(x)} ⊕ W` for a bounded mechanism.
    pub fn response_in_support(&self, query: &Query, x: &[f64], y: &[f64]) -> Result<bool> {
        let fx = query.eval(x)?;
        let noise = self.noise_for(x, &fx)?;
        let w: Vec<f64> = y.iter().zip(&fx).map(|(a, b)| a - b).collect();
        Ok(match noise.support_box() {
            None => true,
            Some(b) => {
                b.len() == w.len()
                    && b.iter().zip(&w).zip(&fx).all(|((i, &wi), &f)| {
                        // allow for rounding in f(x) + w
                        let slack = 4.0 * f64::EPSILON * (f.abs() + i.lo().abs().max(i.hi().abs()));
                        wi >= i.lo() - slack && wi <= i.hi() + slack
                    })
            }
        })
    }
}

/// The product cos² optimum for the identity query.
pub fn optimal_bounded_identity(n: usize, support: Interval) -> Result<Mechanism> {
    if n == 0 {
        return Err(Error::InvalidParameter("identity query over zero entries".into()));
    }
    let noise = if n == 1 {
        NoiseDensity::CosSq(CosSqDensity::new(support))
    } else {
        NoiseDensity::ProductCosSq(ProductCosSqDensity::identical(support, n)?)
    };
    Ok(Mechanism::new(
        "bounded_identity",
        Query::Identity { n },
        NoiseFamily::Fixed(noise),
        Budget::bounded(support),
    ))
}

/// The cos² optimum for any scalar query; the query's weights and
/// nonlinearity do not enter the density.
pub fn optimal_bounded_scalar(query: Query, support: Interval) -> Result<Mechanism> {
    query.validate()?;
    if query.m() != 1 {
        return Err(Error::IncompatibleQuery(format!("{} query is not scalar", query.kind())));
    }
    if let Query::Linear { matrix } = &query {
        if matrix.max_abs() == 0.0 {
            return Err(Error::ZeroQuery);
        }
    }
    Ok(Mechanism::new(
        "bounded_scalar",
        query,
        NoiseFamily::Fixed(NoiseDensity::CosSq(CosSqDensity::new(support))),
        Budget::bounded(support),
    ))
}

/// The tilted family for a non-uniform weight on a scalar identity query.
pub fn optimal_bounded_weighted(support: Interval, weight: WeightFunction) -> Result<Mechanism> {
    // fail early if the family cannot be built
    tilted_new(support, &weight, 0.0)?;
    Ok(Mechanism::new(
        "bounded_weighted",
        Query::Identity { n: 1 },
        NoiseFamily::Tilted { support, weight },
        Budget::bounded(support),
    ))
}

/// Gaussian optimum for a linear query under a quadratic budget.
pub fn optimal_unbounded_linear(c: &Matrix, budget: Budget) -> Result<Mechanism> {
    budget.validate()?;
    let root = psd_sqrt(&c.gram_rows())?;
    // full row rank is required for the Gaussian to be non-degenerate
    crate::matcore::moore_penrose_pinv(c)?;
    let sigma = match budget {
        Budget::Rho { rho } => root.scale(2.0 / rho.sqrt()),
        Budget::Theta { theta } => root.scale(theta / root.trace()),
        _ => {
            return Err(Error::InvalidParameter(
                "unbounded linear mechanisms take a rho or theta budget".into(),
            ))
        }
    };
    Ok(Mechanism::new(
        "gaussian_linear",
        Query::Linear { matrix: c.clone() },
        NoiseFamily::Fixed(NoiseDensity::Gaussian(GaussianDensity::new(sigma)?)),
        budget,
    ))
}

/// Laplace baseline with scale `b = (x̄ - x̲) max|cᵢ| / ε`.
pub fn laplace_dp(c: &Matrix, entry_domain: Interval, epsilon: f64) -> Result<Mechanism> {
    if c.rows() != 1 {
        return Err(Error::IncompatibleQuery("Laplace mechanism needs a 1 x n query".into()));
    }
    let budget = Budget::Epsilon {
        epsilon,
        lo: entry_domain.lo(),
        hi: entry_domain.hi(),
    };
    budget.validate()?;
    let sensitivity = entry_domain.length() * c.max_abs();
    if sensitivity == 0.0 {
        return Err(Error::ZeroQuery);
    }
    Ok(Mechanism::new(
        "laplace_dp",
        Query::Linear { matrix: c.clone() },
        NoiseFamily::Fixed(NoiseDensity::Laplace(LaplaceDensity::new(sensitivity / epsilon)?)),
        budget,
    )
    .with_domain(entry_domain))
}

/// Fisher information and quality at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub x: Vec<f64>,
    pub fisher: FisherReport,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismReport {
    pub mechanism: String,
    /// Report at the representative point.
    pub representative: PointReport,
    /// Per-point reports for noise that depends on `x`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<PointReport>>,
}

impl MechanismReport {
    pub fn trace_inverse(&self) -> Option<f64> {
        self.representative.fisher.trace_inverse
    }

    pub fn quality(&self) -> f64 {
        self.representative.quality
    }
}

fn point_report(m: &Mechanism, x: Vec<f64>) -> Result<PointReport> {
    let fisher = FisherReport::from_matrix(m.noise.fisher_at(&x, &m.query)?)?;
    let quality = m.noise.at(&x)?.quality()?;
    Ok(PointReport { x, fisher, quality })
}

/// Fisher report and quality at the domain midpoint, plus a grid report for
/// the tilted family.
pub fn mechanism_report(m: &Mechanism) -> Result<MechanismReport> {
    let domain = m.domain.or(match m.budget {
        Budget::Epsilon { lo, hi, .. } => Interval::new(lo, hi).ok(),
        _ => None,
    });
    let mid = domain.map_or(0.0, |d| d.midpoint());
    let representative = point_report(m, vec![mid; m.query.n()])?;
    let grid = match &m.noise {
        NoiseFamily::Tilted { .. } => {
            let d = domain.unwrap_or(Interval::new(0.0, 1.0)?);
            let h = d.length() / (TILTED_REPORT_POINTS - 1) as f64;
            Some(
                (0..TILTED_REPORT_POINTS)
                    .map(|i| point_report(m, vec![d.lo() + i as f64 * h]))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        NoiseFamily::Fixed(_) => None,
    };
    Ok(MechanismReport {
        mechanism: m.id.clone(),
        representative,
        grid,
    })
}

/// Shared CLI/server schema: `{"query": {...}, "noise": {...}, "budget": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    pub query: QuerySpec,
    /// Derived from the budget when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    pub budget: Budget,
}

impl MechanismConfig {
    /// Builds the mechanism for a database of `n` entries.
    pub fn build(&self, id: &str, n: usize) -> Result<Mechanism> {
        self.budget.validate()?;
        let query = self.query.resolve(n)?;
        let mech = match (&self.noise, self.budget) {
            (Some(spec), budget) => {
                let noise = NoiseDensity::try_from(spec.clone())?;
                if noise.dim() != query.m() {
                    return Err(Error::Config(format!(
                        "mechanism `{id}`: noise dimension {} does not match query output {}",
                        noise.dim(),
                        query.m()
                    )));
                }
                Mechanism::new(id, query, NoiseFamily::Fixed(noise), budget)
            }
            (None, Budget::Bounded { lo, hi }) => {
                let support = Interval::new(lo, hi)?;
                match query {
                    Query::Identity { n } => optimal_bounded_identity(n, support)?,
                    q => optimal_bounded_scalar(q, support)?,
                }
            }
            (None, budget @ (Budget::Rho { .. } | Budget::Theta { .. })) => {
                let c = query.linear_matrix().ok_or_else(|| {
                    Error::Config(format!("mechanism `{id}`: Gaussian noise needs a linear query"))
                })?;
                let mut m = optimal_unbounded_linear(&c, budget)?;
                m.query = query;
                m
            }
            (None, Budget::Epsilon { epsilon, lo, hi }) => {
                let c = query
                    .linear_matrix()
                    .filter(|c| c.rows() == 1)
                    .ok_or_else(|| Error::Config(format!("mechanism `{id}`: Laplace noise needs a scalar linear query")))?;
                let mut m = laplace_dp(&c, Interval::new(lo, hi)?, epsilon)?;
                m.query = query;
                m
            }
        };
        Ok(mech.with_id(id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn unit() -> Interval {
        Interval::new(0.0, 1.0).unwrap()
    }

    fn fixed_noise(m: &Mechanism) -> &NoiseDensity {
        match &m.noise {
            NoiseFamily::Fixed(d) => d,
            _ => panic!("expected fixed noise"),
        }
    }

    #[test]
    fn bounded_identity_quality() {
        let m = optimal_bounded_identity(1, unit()).unwrap();
        assert!(matches!(fixed_noise(&m), NoiseDensity::CosSq(_)));
        let m3 = optimal_bounded_identity(3, unit()).unwrap();
        let q = fixed_noise(&m3).quality().unwrap();
        assert!((q - 3.0 * (2.0 * PI * PI - 3.0) / (6.0 * PI * PI)).abs() < 1e-12);
        assert!((q - 0.848).abs() < 1e-3);
        let m2 = optimal_bounded_identity(2, Interval::new(-1.0, 1.0).unwrap()).unwrap();
        let (_, cov) = fixed_noise(&m2).moments().unwrap();
        assert!((cov[(0, 0)] - 0.13069).abs() < 1e-5);
        assert!((cov[(1, 1)] - 0.13069).abs() < 1e-5);
    }

    #[test]
    fn scalar_queries_share_one_density() {
        let a = optimal_bounded_scalar(Query::weighted_average(vec![0.3, 0.7]).unwrap(), unit()).unwrap();
        let b = optimal_bounded_scalar(Query::weighted_average(vec![0.5, 0.5]).unwrap(), unit()).unwrap();
        let v = optimal_bounded_scalar(Query::Variance { n: 4 }, unit()).unwrap();
        assert_eq!(fixed_noise(&a), fixed_noise(&b));
        assert_eq!(fixed_noise(&a), fixed_noise(&v));
        let zero = Query::Linear {
            matrix: Matrix::zeros(1, 3),
        };
        assert!(matches!(optimal_bounded_scalar(zero, unit()), Err(Error::ZeroQuery)));
        assert!(optimal_bounded_scalar(Query::Identity { n: 2 }, unit()).is_err());
    }

    #[test]
    fn gaussian_linear_examples() {
        let c = Matrix::row_vector(&[0.5, 0.5]).unwrap();
        let m = optimal_unbounded_linear(&c, Budget::Theta { theta: 0.7 }).unwrap();
        assert!((fixed_noise(&m).quality().unwrap() - 0.7).abs() < 1e-15);
        let m = optimal_unbounded_linear(&Matrix::identity(2), Budget::Rho { rho: 4.0 }).unwrap();
        let (_, cov) = fixed_noise(&m).moments().unwrap();
        assert!((&cov - &Matrix::identity(2)).max_abs() < 1e-14);
        let m = optimal_unbounded_linear(&Matrix::identity(1), Budget::Theta { theta: 1.0 }).unwrap();
        assert!((fixed_noise(&m).quality().unwrap() - 1.0).abs() < 1e-15);
        let rank1 = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(matches!(
            optimal_unbounded_linear(&rank1, Budget::Rho { rho: 1.0 }),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn laplace_scale() {
        let c = Matrix::row_vector(&[0.3, 0.7]).unwrap();
        let m = laplace_dp(&c, unit(), 0.5).unwrap();
        let NoiseDensity::Laplace(l) = fixed_noise(&m) else { panic!() };
        assert!((l.scale() - 1.4).abs() < 1e-15);
        assert!((fixed_noise(&m).quality().unwrap() - 3.92).abs() < 1e-12);
        let m = laplace_dp(&Matrix::identity(1), unit(), 1.0).unwrap();
        let NoiseDensity::Laplace(l) = fixed_noise(&m) else { panic!() };
        assert_eq!(l.scale(), 1.0);
        let m = laplace_dp(&Matrix::identity(1), unit(), 1e12).unwrap();
        let NoiseDensity::Laplace(l) = fixed_noise(&m) else { panic!() };
        assert!(l.scale() < 1e-11);
    }

    #[test]
    fn responses_stay_in_shifted_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = optimal_bounded_identity(1, unit()).unwrap();
        for _ in 0..100_000 {
            let y = m.respond(&[3.0], &mut rng).unwrap().value[0];
            assert!((3.0..=4.0).contains(&y));
        }
        let avg = optimal_bounded_scalar(Query::mean(2), unit()).unwrap();
        for _ in 0..1000 {
            let y = avg.respond(&[2.0, 4.0], &mut rng).unwrap().value[0];
            assert!((3.0..=4.0).contains(&y));
        }
        let var = optimal_bounded_scalar(Query::Variance { n: 4 }, unit()).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let y = var.respond(&[0.0; 4], &mut a).unwrap().value[0];
        let w = fixed_noise(&var).sample_one(&mut b)[0];
        assert_eq!(y, w);
    }

    #[test]
    fn output_constraint_keeps_responses_in_range() {
        let out = Interval::new(0.0, 10.0).unwrap();
        let m = Mechanism::output_constrained(Query::mean(3), out).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let y = m.respond(&[2.0, 9.0, 4.0], &mut rng).unwrap().value[0];
            assert!(out.contains(y));
        }
    }

    #[test]
    fn domain_violation_and_counter() {
        let c = Matrix::identity(1);
        let m = laplace_dp(&c, unit(), 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(m.respond(&[1.5], &mut rng), Err(Error::DomainViolation(_))));
        let a = m.respond(&[0.5], &mut rng).unwrap();
        let b = m.respond(&[0.5], &mut rng).unwrap();
        assert!(b.timestamp > a.timestamp);
    }

    #[test]
    fn query_compatibility() {
        let g = optimal_unbounded_linear(&Matrix::row_vector(&[0.5, 0.5]).unwrap(), Budget::Theta { theta: 1.0 }).unwrap();
        assert!(g.check_compatible(&Query::Variance { n: 2 }).is_err());
        let b = optimal_bounded_scalar(Query::mean(2), unit()).unwrap();
        assert!(b.check_compatible(&Query::Variance { n: 2 }).is_ok());
        assert!(b.check_compatible(&Query::Identity { n: 2 }).is_err());
    }

    #[test]
    fn report_examples() {
        let r1 = mechanism_report(&optimal_bounded_identity(1, unit()).unwrap()).unwrap();
        let ti = r1.trace_inverse().unwrap();
        assert!((ti - 1.0 / (4.0 * PI * PI)).abs() < 1e-8);
        assert!((r1.quality() - 0.28267).abs() < 1e-5);
        let r2 = mechanism_report(&optimal_bounded_identity(1, Interval::new(0.0, 2.0).unwrap()).unwrap()).unwrap();
        assert!((r2.trace_inverse().unwrap() / ti - 4.0).abs() < 1e-6);
        assert!((r2.quality() / r1.quality() - 4.0).abs() < 1e-12);
        assert!((r1.quality() / ti - r2.quality() / r2.trace_inverse().unwrap()).abs() < 1e-5);
        let g = mechanism_report(&optimal_unbounded_linear(&Matrix::identity(1), Budget::Theta { theta: 1.0 }).unwrap()).unwrap();
        assert!((g.trace_inverse().unwrap() - 1.0).abs() < 1e-12);
        assert!((g.quality() - 1.0).abs() < 1e-12);
        let t = mechanism_report(&optimal_bounded_weighted(unit(), WeightFunction::squared_exponential(1.0)).unwrap()).unwrap();
        assert_eq!(t.grid.unwrap().len(), TILTED_REPORT_POINTS);
    }

    #[test]
    fn config_round_trip_and_build() {
        let json = r#"{"query":{"type":"average"},"budget":{"type":"bounded","lo":0.0,"hi":1.0}}"#;
        let cfg: MechanismConfig = serde_json::from_str(json).unwrap();
        assert_eq!(serde_json::to_string(&cfg).unwrap(), json);
        let m = cfg.build("avg", 4).unwrap();
        assert_eq!(m.id, "avg");
        assert!(matches!(fixed_noise(&m), NoiseDensity::CosSq(_)));

        let json = r#"{"query":{"type":"linear","matrix":[[0.3,0.7]]},"budget":{"type":"epsilon","epsilon":0.5,"lo":0.0,"hi":1.0}}"#;
        let m: MechanismConfig = serde_json::from_str(json).unwrap();
        let NoiseDensity::Laplace(l) = fixed_noise(&m.build("lap", 2).unwrap()).clone() else { panic!() };
        assert!((l.scale() - 1.4).abs() < 1e-15);

        let json = r#"{"query":{"type":"identity"},"noise":{"kind":"gaussian","covariance":[[1.0]]},"budget":{"type":"theta","theta":1.0}}"#;
        let m: MechanismConfig = serde_json::from_str(json).unwrap();
        assert!(m.build("g", 1).is_ok());
        assert!(matches!(m.build("g", 2), Err(Error::Config(_))));
        assert!(serde_json::from_str::<MechanismConfig>(r#"{"query":{"type":"mode"},"budget":{"type":"rho","rho":1}}"#).is_err());
    }

    proptest! {
        #[test]
        fn bounded_identity_scales_quadratically(lo in -5.0f64..5.0, len in 0.1f64..4.0, alpha in 0.2f64..5.0) {
            let s = Interval::new(lo, lo + len).unwrap();
            let r = mechanism_report(&optimal_bounded_identity(1, s).unwrap()).unwrap();
            let rs = mechanism_report(&optimal_bounded_identity(1, s.scaled(alpha).unwrap()).unwrap()).unwrap();
            let ti = r.trace_inverse().unwrap();
            let tis = rs.trace_inverse().unwrap();
            prop_assert!((tis / ti - alpha * alpha).abs() < 1e-6 * alpha * alpha);
            let (_, cov) = NoiseDensity::CosSq(CosSqDensity::new(s)).moments().unwrap();
            let (_, covs) = NoiseDensity::CosSq(CosSqDensity::new(s.scaled(alpha).unwrap())).moments().unwrap();
            prop_assert!((covs.trace() / cov.trace() - alpha * alpha).abs() < 1e-9 * alpha * alpha);
        }

        #[test]
        fn query_irrelevance(raw in proptest::collection::vec(0.01f64..1.0, 2..6), w in 0.0f64..1.0) {
            let total: f64 = raw.iter().sum();
            let weights: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let sum: f64 = weights.iter().sum();
            let mut weights = weights;
            weights[0] += 1.0 - sum;
            let a = optimal_bounded_scalar(Query::WeightedAverage { weights }, unit()).unwrap();
            let b = optimal_bounded_scalar(Query::Variance { n: 3 }, unit()).unwrap();
            let (NoiseFamily::Fixed(da), NoiseFamily::Fixed(db)) = (&a.noise, &b.noise) else { unreachable!() };
            prop_assert_eq!(da.as_scalar().unwrap().pdf(w), db.as_scalar().unwrap().pdf(w));
        }

        #[test]
        fn theta_budget_is_tight(c in proptest::collection::vec(0.1f64..2.0, 1..5), theta in 0.01f64..10.0) {
            let m = optimal_unbounded_linear(&Matrix::row_vector(&c).unwrap(), Budget::Theta { theta }).unwrap();
            let NoiseFamily::Fixed(d) = &m.noise else { unreachable!() };
            prop_assert!((d.quality().unwrap() - theta).abs() < 1e-8);
        }
    }
}
