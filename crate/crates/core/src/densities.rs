//! Noise densities: the bounded cos² family, its exponentially tilted
//! variant, Gaussian, and Laplace.
//!
//! Bounded densities vanish on the closed boundary of their support, so
//! `pdf(lo) == pdf(hi) == 0.0` holds exactly rather than up to the rounding
//! of `cos(π/2)`.

use std::f64::consts::{E, LN_2, PI};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{psd_sqrt, spd_inverse, sym_det, Matrix};
use crate::quad::{adaptive_simpson, adaptive_simpson_pieces, DEFAULT_TOL};

/// Number of grid points used to bound the tilted density for rejection sampling.
pub const ENVELOPE_GRID: usize = 4097;
/// Inflation applied to the grid maximum.
pub const ENVELOPE_INFLATION: f64 = 1.01;

/// A closed interval `[lo, hi]` with `lo < hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub struct Interval {
    lo: f64,
    hi: f64,
}

#[derive(Serialize, Deserialize)]
struct IntervalRepr {
    lo: f64,
    hi: f64,
}

impl TryFrom<IntervalRepr> for Interval {
    type Error = Error;
    fn try_from(r: IntervalRepr) -> Result<Self> {
        Interval::new(r.lo, r.hi)
    }
}

impl From<Interval> for IntervalRepr {
    fn from(i: Interval) -> Self {
        IntervalRepr { lo: i.lo, hi: i.hi }
    }
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInterval { lo, hi });
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn length(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn shifted(&self, by: f64) -> Self {
        Self {
            lo: self.lo + by,
            hi: self.hi + by,
        }
    }

    pub fn scaled(&self, by: f64) -> Result<Self> {
        Self::new(self.lo * by, self.hi * by)
    }
}

/// Univariate density interface shared by the Fisher and PDE checks.
pub trait ScalarDensity: Send + Sync {
    fn pdf(&self, w: f64) -> f64;
    fn cdf(&self, w: f64) -> f64;
    /// Closed support; infinite endpoints for unbounded densities.
    fn support(&self) -> (f64, f64);
    /// Finite window that carries all but a negligible amount of mass.
    fn window(&self) -> (f64, f64) {
        self.support()
    }
    /// Points where the density is not smooth, strictly inside the window.
    fn kinks(&self) -> Vec<f64> {
        Vec::new()
    }
    /// Analytic `d/dw log pdf(w)` when available.
    fn score(&self, _w: f64) -> Option<f64> {
        None
    }
    fn is_bounded(&self) -> bool {
        let (lo, hi) = self.support();
        lo.is_finite() && hi.is_finite()
    }
}

/// `(2/L) cos²(π (w - mid) / L)` on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosSqDensity {
    support: Interval,
}

impl CosSqDensity {
    pub fn new(support: Interval) -> Self {
        Self { support }
    }

    pub fn support_interval(&self) -> Interval {
        self.support
    }

    fn wavenumber(&self) -> f64 {
        PI / self.support.length()
    }

    /// `√pdf`, the amplitude that solves the Helmholtz boundary problem.
    pub fn amplitude(&self, w: f64) -> f64 {
        self.pdf(w).sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.support.midpoint()
    }

    pub fn variance(&self) -> f64 {
        let l = self.support.length();
        (PI * PI - 6.0) * l * l / (12.0 * PI * PI)
    }

    /// Draws one value by rejection from the uniform proposal; returns the
    /// sample and the number of proposals it took.
    pub fn sample_counted<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, u64) {
        let mut proposals = 0;
        loop {
            proposals += 1;
            let u: f64 = rng.random();
            let w = self.support.lo + u * self.support.length();
            let c = (self.wavenumber() * (w - self.support.midpoint())).cos();
            if rng.random::<f64>() < c * c && w > self.support.lo && w < self.support.hi {
                return (w, proposals);
            }
        }
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample_counted(rng).0
    }
}

impl ScalarDensity for CosSqDensity {
    fn pdf(&self, w: f64) -> f64 {
        if w <= self.support.lo || w >= self.support.hi {
            return 0.0;
        }
        let c = (self.wavenumber() * (w - self.support.midpoint())).cos();
        2.0 / self.support.length() * c * c
    }

    fn cdf(&self, w: f64) -> f64 {
        if w <= self.support.lo {
            return 0.0;
        }
        if w >= self.support.hi {
            return 1.0;
        }
        let t = (w - self.support.lo) / self.support.length();
        (t + (2.0 * PI * (t - 0.5)).sin() / (2.0 * PI)).clamp(0.0, 1.0)
    }

    fn support(&self) -> (f64, f64) {
        (self.support.lo, self.support.hi)
    }

    fn score(&self, w: f64) -> Option<f64> {
        let k = self.wavenumber();
        Some(-2.0 * k * (k * (w - self.support.midpoint())).tan())
    }
}

/// Independent cos² factors, one per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductCosSqDensity {
    factors: Vec<CosSqDensity>,
}

impl ProductCosSqDensity {
    pub fn new(factors: Vec<CosSqDensity>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::DimensionMismatch("product of zero factors".into()));
        }
        Ok(Self { factors })
    }

    pub fn identical(support: Interval, m: usize) -> Result<Self> {
        Self::new(vec![CosSqDensity::new(support); m])
    }

    pub fn factors(&self) -> &[CosSqDensity] {
        &self.factors
    }
}

/// `c(x) exp(-a (w + x)) cos²(π (w - mid) / L)` on `[lo, hi]`, where
/// `a = p'(x)/p(x)` is the logarithmic derivative of the weight at `x`.
///
/// The normalization is computed once at construction by adaptive Simpson
/// quadrature and frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedCosSqDensity {
    support: Interval,
    tilt: f64,
    shift: f64,
    /// log of the constant multiplying `exp(-a (w - lo)) cos²(·)`.
    log_scale: f64,
    envelope: f64,
}

impl TiltedCosSqDensity {
    /// Builds the density for a given tilt `a` and evaluation point `x`.
    pub fn with_tilt(support: Interval, tilt: f64, shift: f64) -> Result<Self> {
        if !tilt.is_finite() || !shift.is_finite() {
            return Err(Error::NonFinite("tilt or shift".into()));
        }
        let log_scale = if tilt == 0.0 {
            (2.0 / support.length()).ln()
        } else {
            let k = PI / support.length();
            let mid = support.midpoint();
            let lo = support.lo;
            let shape = |w: f64| {
                let c = (k * (w - mid)).cos();
                (-tilt * (w - lo)).exp() * c * c
            };
            // relative tolerance: scale the absolute target by the integrand size
            let peak = (0.0f64).max((-tilt * support.length()).exp()).max(1.0);
            let z = adaptive_simpson(shape, lo, support.hi, DEFAULT_TOL * peak)?;
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::QuadratureFailure {
                    lo,
                    hi: support.hi,
                    tol: DEFAULT_TOL,
                });
            }
            -z.ln()
        };
        let mut d = Self {
            support,
            tilt,
            shift,
            log_scale,
            envelope: 0.0,
        };
        let h = support.length() / (ENVELOPE_GRID - 1) as f64;
        let max = (0..ENVELOPE_GRID)
            .map(|i| d.pdf(support.lo + i as f64 * h))
            .fold(0.0_f64, f64::max);
        d.envelope = ENVELOPE_INFLATION * max;
        Ok(d)
    }

    pub fn support_interval(&self) -> Interval {
        self.support
    }

    pub fn tilt(&self) -> f64 {
        self.tilt
    }

    pub fn shift(&self) -> f64 {
        self.shift
    }

    /// `c(x)` in the parameterization `c(x) exp(-a (w + x)) cos²(·)`.
    pub fn norm_const(&self) -> f64 {
        (self.log_scale + self.tilt * (self.support.lo + self.shift)).exp()
    }

    pub fn envelope(&self) -> f64 {
        self.envelope
    }

    /// `∫_lo^w exp(-a (t - lo)) cos²(·) dt` in closed form.
    fn shape_antiderivative(&self, w: f64) -> f64 {
        let s = (w - self.support.lo).clamp(0.0, self.support.length());
        let a = self.tilt;
        let b = 2.0 * PI / self.support.length();
        // cos²(k (t - mid)) = sin²(k (t - lo)) = (1 - cos(b (t - lo))) / 2
        let exp_part = if a == 0.0 { s } else { -(-a * s).exp_m1() / a };
        let cos_part = ((-a * s).exp() * (-a * (b * s).cos() + b * (b * s).sin()) + a) / (a * a + b * b);
        0.5 * (exp_part - cos_part)
    }

    /// Closed-form normalizer, kept for cross-checking the quadrature.
    pub fn analytic_log_scale(&self) -> f64 {
        -self.shape_antiderivative(self.support.hi).ln()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let u: f64 = rng.random();
            let w = self.support.lo + u * self.support.length();
            if rng.random::<f64>() * self.envelope < self.pdf(w) {
                return w;
            }
        }
    }

    pub fn mean(&self) -> Result<f64> {
        adaptive_simpson(|w| w * self.pdf(w), self.support.lo, self.support.hi, DEFAULT_TOL)
    }

    pub fn variance(&self) -> Result<f64> {
        let m = self.mean()?;
        adaptive_simpson(
            |w| (w - m) * (w - m) * self.pdf(w),
            self.support.lo,
            self.support.hi,
            DEFAULT_TOL,
        )
    }
}

impl ScalarDensity for TiltedCosSqDensity {
    fn pdf(&self, w: f64) -> f64 {
        if w <= self.support.lo || w >= self.support.hi {
            return 0.0;
        }
        let k = PI / self.support.length();
        let c = (k * (w - self.support.midpoint())).cos();
        (self.log_scale - self.tilt * (w - self.support.lo)).exp() * c * c
    }

    fn cdf(&self, w: f64) -> f64 {
        if w <= self.support.lo {
            return 0.0;
        }
        if w >= self.support.hi {
            return 1.0;
        }
        (self.shape_antiderivative(w) / self.shape_antiderivative(self.support.hi)).clamp(0.0, 1.0)
    }

    fn support(&self) -> (f64, f64) {
        (self.support.lo, self.support.hi)
    }

    fn score(&self, w: f64) -> Option<f64> {
        let k = PI / self.support.length();
        Some(-self.tilt - 2.0 * k * (k * (w - self.support.midpoint())).tan())
    }
}

/// Zero-mean multivariate Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    covariance: Matrix,
    precision: Matrix,
    sqrt_cov: Matrix,
    log_det: f64,
}

impl PartialEq for GaussianDensity {
    fn eq(&self, other: &Self) -> bool {
        self.covariance == other.covariance
    }
}

impl GaussianDensity {
    pub fn new(covariance: Matrix) -> Result<Self> {
        let precision = spd_inverse(&covariance)?;
        let sqrt_cov = psd_sqrt(&covariance)?;
        let log_det = sym_det(&covariance)?.ln();
        Ok(Self {
            covariance,
            precision,
            sqrt_cov,
            log_det,
        })
    }

    pub fn scalar(variance: f64) -> Result<Self> {
        Self::new(Matrix::from_diag(&[variance]))
    }

    pub fn dim(&self) -> usize {
        self.covariance.rows()
    }

    pub fn covariance(&self) -> &Matrix {
        &self.covariance
    }

    /// `Σ⁻¹`, which is also the Fisher information of the location family.
    pub fn precision(&self) -> &Matrix {
        &self.precision
    }

    pub fn pdf_vec(&self, w: &[f64]) -> f64 {
        let pw = self.precision.mul_vec(w).expect("dimension checked by caller");
        let q: f64 = pw.iter().zip(w).map(|(a, b)| a * b).sum();
        let m = self.dim() as f64;
        (-0.5 * q - 0.5 * (m * (2.0 * PI).ln() + self.log_det)).exp()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        self.sqrt_cov.mul_vec(&z).expect("square root is dim x dim")
    }

    fn scalar_variance(&self) -> f64 {
        self.covariance[(0, 0)]
    }
}

impl ScalarDensity for GaussianDensity {
    fn pdf(&self, w: f64) -> f64 {
        let v = self.scalar_variance();
        (-0.5 * w * w / v).exp() / (2.0 * PI * v).sqrt()
    }

    fn cdf(&self, w: f64) -> f64 {
        0.5 * libm::erfc(-w / (2.0 * self.scalar_variance()).sqrt())
    }

    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn window(&self) -> (f64, f64) {
        // pdf stays above 1e-14 relative to its peak well past 7σ, tail mass < 3e-12
        let s = 7.0 * self.scalar_variance().sqrt();
        (-s, s)
    }

    fn score(&self, w: f64) -> Option<f64> {
        Some(-w / self.scalar_variance())
    }
}

/// `1/(2b) exp(-|w|/b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceDensity {
    scale: f64,
}

impl LaplaceDensity {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidParameter(format!("Laplace scale {scale}")));
        }
        Ok(Self { scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn variance(&self) -> f64 {
        2.0 * self.scale * self.scale
    }

    /// Inverse-CDF draw.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random::<f64>() - 0.5;
        -self.scale * u.signum() * (-2.0 * u.abs()).ln_1p()
    }
}

impl ScalarDensity for LaplaceDensity {
    fn pdf(&self, w: f64) -> f64 {
        (-w.abs() / self.scale).exp() / (2.0 * self.scale)
    }

    fn cdf(&self, w: f64) -> f64 {
        if w < 0.0 {
            0.5 * (w / self.scale).exp()
        } else {
            1.0 - 0.5 * (-w / self.scale).exp()
        }
    }

    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn window(&self) -> (f64, f64) {
        let s = 25.0 * self.scale;
        (-s, s)
    }

    fn kinks(&self) -> Vec<f64> {
        vec![0.0]
    }

    fn score(&self, w: f64) -> Option<f64> {
        if w == 0.0 {
            None
        } else {
            Some(-w.signum() / self.scale)
        }
    }
}

/// Numerical entropy `-∫ γ log₂ γ` over the density's window.
pub fn entropy_bits_quadrature(d: &dyn ScalarDensity) -> Result<f64> {
    let (lo, hi) = d.window();
    let mut breaks = vec![lo];
    breaks.extend(d.kinks());
    breaks.push(hi);
    let nats = adaptive_simpson_pieces(
        |w| {
            let p = d.pdf(w);
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        },
        &breaks,
        1e-11,
    )?;
    Ok(nats / LN_2)
}

/// Normalization `∫ pdf` over the density's window, by adaptive Simpson.
pub fn total_mass(d: &dyn ScalarDensity) -> Result<f64> {
    let (lo, hi) = d.window();
    let mut breaks = vec![lo];
    breaks.extend(d.kinks());
    breaks.push(hi);
    adaptive_simpson_pieces(|w| d.pdf(w), &breaks, DEFAULT_TOL)
}

/// Weight `p(x)` over the database domain, carried with its logarithmic
/// derivative `p'(x)/p(x)`. Only the ratio enters the optimal density.
#[derive(Clone)]
pub struct WeightFunction {
    value: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    log_ratio: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    log_ratio_slope: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    description: String,
    spec: Option<WeightSpec>,
}

/// Serializable weight families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WeightSpec {
    /// `p(x) = 1`.
    Uniform,
    /// `p(x) ∝ exp(-rate · x)`.
    Exponential { rate: f64 },
    /// `p(x) ∝ exp(-rate · x²)`.
    SquaredExponential { rate: f64 },
}

impl WeightFunction {
    pub fn uniform() -> Self {
        WeightSpec::Uniform.into()
    }

    pub fn exponential(rate: f64) -> Self {
        WeightSpec::Exponential { rate }.into()
    }

    pub fn squared_exponential(rate: f64) -> Self {
        WeightSpec::SquaredExponential { rate }.into()
    }

    /// A weight given by arbitrary closures; the slope of the log ratio is
    /// taken by central differences.
    pub fn custom(
        description: impl Into<String>,
        value: impl Fn(f64) -> f64 + Send + Sync + 'static,
        log_ratio: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let log_ratio: Arc<dyn Fn(f64) -> f64 + Send + Sync> = Arc::new(log_ratio);
        let lr = Arc::clone(&log_ratio);
        Self {
            value: Arc::new(value),
            log_ratio,
            log_ratio_slope: Arc::new(move |x| {
                let h = 1e-5 * x.abs().max(1.0);
                (lr(x + h) - lr(x - h)) / (2.0 * h)
            }),
            description: description.into(),
            spec: None,
        }
    }

    /// Multiplies `p` by a positive constant; the log ratio is unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let v = Arc::clone(&self.value);
        Self {
            value: Arc::new(move |x| factor * v(x)),
            log_ratio: Arc::clone(&self.log_ratio),
            log_ratio_slope: Arc::clone(&self.log_ratio_slope),
            description: format!("{factor} * ({})", self.description),
            spec: None,
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    pub fn log_ratio(&self, x: f64) -> f64 {
        (self.log_ratio)(x)
    }

    /// `d/dx [p'(x)/p(x)]`.
    pub fn log_ratio_slope(&self, x: f64) -> f64 {
        (self.log_ratio_slope)(x)
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn spec(&self) -> Option<WeightSpec> {
        self.spec
    }
}

impl fmt::Debug for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightFunction")
            .field("description", &self.description)
            .finish()
    }
}

impl From<WeightSpec> for WeightFunction {
    fn from(spec: WeightSpec) -> Self {
        type F = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
        let (value, log_ratio, slope, description): (F, F, F, String) = match spec {
            WeightSpec::Uniform => (
                Arc::new(|_| 1.0),
                Arc::new(|_| 0.0),
                Arc::new(|_| 0.0),
                "p(x) = 1".into(),
            ),
            WeightSpec::Exponential { rate } => (
                Arc::new(move |x| (-rate * x).exp()),
                Arc::new(move |_| -rate),
                Arc::new(|_| 0.0),
                format!("p(x) ∝ exp(-{rate} x)"),
            ),
            WeightSpec::SquaredExponential { rate } => (
                Arc::new(move |x| (-rate * x * x).exp()),
                Arc::new(move |x| -2.0 * rate * x),
                Arc::new(move |_| -2.0 * rate),
                format!("p(x) ∝ exp(-{rate} x²)"),
            ),
        };
        Self {
            value,
            log_ratio,
            log_ratio_slope: slope,
            description,
            spec: Some(spec),
        }
    }
}

/// Builds the optimal density for a non-uniform weight at the point `x`.
pub fn tilted_new(support: Interval, weight: &WeightFunction, x: f64) -> Result<TiltedCosSqDensity> {
    let a = weight.log_ratio(x);
    if !a.is_finite() {
        return Err(Error::NonFinite(format!("weight log ratio at x = {x}")));
    }
    TiltedCosSqDensity::with_tilt(support, a, x)
}

/// Any of the shipped noise densities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseSpec", into = "NoiseSpec")]
pub enum NoiseDensity {
    CosSq(CosSqDensity),
    ProductCosSq(ProductCosSqDensity),
    TiltedCosSq(TiltedCosSqDensity),
    Gaussian(GaussianDensity),
    Laplace(LaplaceDensity),
}

/// Wire form of [`NoiseDensity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    CosSq { lo: f64, hi: f64 },
    ProductCosSq { factors: Vec<Interval> },
    TiltedCosSq { lo: f64, hi: f64, tilt: f64, shift: f64 },
    Gaussian { covariance: Matrix },
    Laplace { scale: f64 },
}

impl TryFrom<NoiseSpec> for NoiseDensity {
    type Error = Error;
    fn try_from(spec: NoiseSpec) -> Result<Self> {
        Ok(match spec {
            NoiseSpec::CosSq { lo, hi } => NoiseDensity::CosSq(CosSqDensity::new(Interval::new(lo, hi)?)),
            NoiseSpec::ProductCosSq { factors } => NoiseDensity::ProductCosSq(ProductCosSqDensity::new(
                factors.into_iter().map(CosSqDensity::new).collect(),
            )?),
            NoiseSpec::TiltedCosSq { lo, hi, tilt, shift } => {
                NoiseDensity::TiltedCosSq(TiltedCosSqDensity::with_tilt(Interval::new(lo, hi)?, tilt, shift)?)
            }
            NoiseSpec::Gaussian { covariance } => NoiseDensity::Gaussian(GaussianDensity::new(covariance)?),
            NoiseSpec::Laplace { scale } => NoiseDensity::Laplace(LaplaceDensity::new(scale)?),
        })
    }
}

impl From<NoiseDensity> for NoiseSpec {
    fn from(d: NoiseDensity) -> Self {
        match d {
            NoiseDensity::CosSq(c) => NoiseSpec::CosSq {
                lo: c.support.lo,
                hi: c.support.hi,
            },
            NoiseDensity::ProductCosSq(p) => NoiseSpec::ProductCosSq {
                factors: p.factors.iter().map(|f| f.support).collect(),
            },
            NoiseDensity::TiltedCosSq(t) => NoiseSpec::TiltedCosSq {
                lo: t.support.lo,
                hi: t.support.hi,
                tilt: t.tilt,
                shift: t.shift,
            },
            NoiseDensity::Gaussian(g) => NoiseSpec::Gaussian {
                covariance: g.covariance,
            },
            NoiseDensity::Laplace(l) => NoiseSpec::Laplace { scale: l.scale },
        }
    }
}

impl NoiseDensity {
    pub fn cos_sq(lo: f64, hi: f64) -> Result<Self> {
        Ok(NoiseDensity::CosSq(CosSqDensity::new(Interval::new(lo, hi)?)))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            NoiseDensity::CosSq(_) => "cos_sq",
            NoiseDensity::ProductCosSq(_) => "product_cos_sq",
            NoiseDensity::TiltedCosSq(_) => "tilted_cos_sq",
            NoiseDensity::Gaussian(_) => "gaussian",
            NoiseDensity::Laplace(_) => "laplace",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseDensity::ProductCosSq(p) => p.factors.len(),
            NoiseDensity::Gaussian(g) => g.dim(),
            _ => 1,
        }
    }

    /// The scalar view, if the density is one-dimensional.
    pub fn as_scalar(&self) -> Option<&dyn ScalarDensity> {
        match self {
            NoiseDensity::CosSq(d) => Some(d),
            NoiseDensity::TiltedCosSq(d) => Some(d),
            NoiseDensity::Laplace(d) => Some(d),
            NoiseDensity::Gaussian(g) if g.dim() == 1 => Some(g),
            NoiseDensity::ProductCosSq(p) if p.factors.len() == 1 => Some(&p.factors[0]),
            _ => None,
        }
    }

    /// Per-coordinate support box, `None` for unbounded densities.
    pub fn support_box(&self) -> Option<Vec<Interval>> {
        match self {
            NoiseDensity::CosSq(d) => Some(vec![d.support]),
            NoiseDensity::TiltedCosSq(d) => Some(vec![d.support]),
            NoiseDensity::ProductCosSq(p) => Some(p.factors.iter().map(|f| f.support).collect()),
            NoiseDensity::Gaussian(_) | NoiseDensity::Laplace(_) => None,
        }
    }

    pub fn is_bounded(&self) -> bool {
        self.support_box().is_some()
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "noise of dimension {} evaluated at a vector of length {len}",
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn pdf(&self, w: &[f64]) -> Result<f64> {
        self.check_dim(w.len())?;
        Ok(match self {
            NoiseDensity::ProductCosSq(p) => p.factors.iter().zip(w).map(|(f, &wi)| f.pdf(wi)).product(),
            NoiseDensity::Gaussian(g) => g.pdf_vec(w),
            d => d.as_scalar().expect("scalar variant").pdf(w[0]),
        })
    }

    pub fn cdf_1d(&self, w: f64) -> Result<f64> {
        self.as_scalar().map(|d| d.cdf(w)).ok_or(Error::NotScalar)
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            NoiseDensity::CosSq(d) => vec![d.sample_one(rng)],
            NoiseDensity::ProductCosSq(p) => p.factors.iter().map(|f| f.sample_one(rng)).collect(),
            NoiseDensity::TiltedCosSq(d) => vec![d.sample_one(rng)],
            NoiseDensity::Gaussian(g) => g.sample_one(rng),
            NoiseDensity::Laplace(d) => vec![d.sample_one(rng)],
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Mean vector and covariance matrix.
    pub fn moments(&self) -> Result<(Vec<f64>, Matrix)> {
        Ok(match self {
            NoiseDensity::CosSq(d) => (vec![d.mean()], Matrix::from_diag(&[d.variance()])),
            NoiseDensity::ProductCosSq(p) => (
                p.factors.iter().map(CosSqDensity::mean).collect(),
                Matrix::from_diag(&p.factors.iter().map(CosSqDensity::variance).collect::<Vec<_>>()),
            ),
            NoiseDensity::TiltedCosSq(d) => (vec![d.mean()?], Matrix::from_diag(&[d.variance()?])),
            NoiseDensity::Gaussian(g) => (vec![0.0; g.dim()], g.covariance.clone()),
            NoiseDensity::Laplace(d) => (vec![0.0], Matrix::from_diag(&[d.variance()])),
        })
    }

    /// `E‖w‖² = Tr(cov) + ‖mean‖²`.
    pub fn quality(&self) -> Result<f64> {
        let (mean, cov) = self.moments()?;
        Ok(cov.trace() + mean.iter().map(|m| m * m).sum::<f64>())
    }

    pub fn entropy_bits(&self) -> Result<f64> {
        match self {
            NoiseDensity::Gaussian(g) if g.dim() == 1 => {
                Ok(0.5 * (2.0 * PI * E * g.scalar_variance()).log2())
            }
            NoiseDensity::Laplace(d) => Ok((2.0 * d.scale * E).log2()),
            d => entropy_bits_quadrature(d.as_scalar().ok_or(Error::NotScalar)?),
        }
    }

    /// Whether `w` lies in the closed support.
    pub fn contains(&self, w: &[f64]) -> bool {
        match self.support_box() {
            None => w.len() == self.dim() && w.iter().all(|v| v.is_finite()),
            Some(b) => b.len() == w.len() && b.iter().zip(w).all(|(i, &v)| i.contains(v)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit() -> CosSqDensity {
        CosSqDensity::new(Interval::new(0.0, 1.0).unwrap())
    }

    fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        samples
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn degenerate_interval_rejected() {
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
        assert!(Interval::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn cos_sq_pdf_values() {
        let d = unit();
        assert_eq!(d.pdf(0.5), 2.0);
        assert_eq!(d.pdf(0.0), 0.0);
        assert_eq!(d.pdf(1.0), 0.0);
        assert_eq!(d.pdf(-0.1), 0.0);
        let lap = LaplaceDensity::new(1.0).unwrap();
        assert_eq!(lap.pdf(0.0), 0.5);
    }

    #[test]
    fn cos_sq_cdf_values() {
        let d = unit();
        assert!((d.cdf(0.5) - 0.5).abs() < 1e-15);
        let expected = 0.25 + (2.0 * PI * (0.25 - 0.5)).sin() / (2.0 * PI);
        assert!((d.cdf(0.25) - expected).abs() < 1e-15);
        assert!((d.cdf(0.25) - 0.09085).abs() < 1e-5);
        // independent check of the antiderivative by quadrature
        let q = adaptive_simpson(|w| d.pdf(w), 0.0, 0.25, 1e-13).unwrap();
        assert!((q - d.cdf(0.25)).abs() < 1e-11);
        assert_eq!(LaplaceDensity::new(1.0).unwrap().cdf(0.0), 0.5);
    }

    #[test]
    fn cdf_is_monotone_and_hits_endpoints() {
        let d = unit();
        assert_eq!(d.cdf(0.0), 0.0);
        assert_eq!(d.cdf(1.0), 1.0);
        let mut prev = 0.0;
        for i in 0..=1000 {
            let v = d.cdf(i as f64 / 1000.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn normalization_by_quadrature() {
        let densities: Vec<Box<dyn ScalarDensity>> = vec![
            Box::new(unit()),
            Box::new(CosSqDensity::new(Interval::new(-3.0, 2.0).unwrap())),
            Box::new(TiltedCosSqDensity::with_tilt(Interval::new(0.0, 1.0).unwrap(), -2.0, 1.0).unwrap()),
            Box::new(TiltedCosSqDensity::with_tilt(Interval::new(0.0, 1.0).unwrap(), 3.5, 0.2).unwrap()),
            Box::new(GaussianDensity::scalar(2.0).unwrap()),
            Box::new(LaplaceDensity::new(0.7).unwrap()),
        ];
        for d in &densities {
            let m = total_mass(d.as_ref()).unwrap();
            assert!((m - 1.0).abs() < 1e-8, "mass {m}");
        }
    }

    #[test]
    fn cos_sq_moments_closed_form() {
        let d = CosSqDensity::new(Interval::new(-1.0, 3.0).unwrap());
        let mean = adaptive_simpson(|w| w * d.pdf(w), -1.0, 3.0, 1e-12).unwrap();
        let var = adaptive_simpson(|w| (w - 1.0).powi(2) * d.pdf(w), -1.0, 3.0, 1e-12).unwrap();
        assert!((mean - d.mean()).abs() < 1e-10);
        assert!((var - d.variance()).abs() < 1e-10);
        assert!((unit().variance() - 0.03267).abs() < 1e-5);
    }

    #[test]
    fn quality_values() {
        let q = NoiseDensity::cos_sq(0.0, 1.0).unwrap().quality().unwrap();
        let expected = (2.0 * PI * PI - 3.0) / (6.0 * PI * PI);
        assert!((q - expected).abs() < 1e-14);
        assert!((q - 0.28267).abs() < 1e-5);
        let g = NoiseDensity::Gaussian(GaussianDensity::scalar(0.8).unwrap());
        assert!((g.quality().unwrap() - 0.8).abs() < 1e-15);
        let l = NoiseDensity::Laplace(LaplaceDensity::new(1.5).unwrap());
        assert!((l.quality().unwrap() - 2.0 * 1.5 * 1.5).abs() < 1e-14);
    }

    #[test]
    fn entropy_values() {
        let lap = NoiseDensity::Laplace(LaplaceDensity::new(0.5f64.sqrt()).unwrap());
        let h = lap.entropy_bits().unwrap();
        assert!((h - (E * 2f64.sqrt()).log2()).abs() < 1e-14);
        assert!((h - 1.9427).abs() < 1e-4);
        let g = NoiseDensity::Gaussian(GaussianDensity::scalar(1.0).unwrap());
        assert!((g.entropy_bits().unwrap() - 2.0471).abs() < 1e-4);
        let g0 = NoiseDensity::Gaussian(GaussianDensity::scalar(1.0 / (2.0 * PI * E)).unwrap());
        assert!(g0.entropy_bits().unwrap().abs() < 1e-14);
        // quadrature agrees with closed forms
        for d in [&lap, &g] {
            let q = entropy_bits_quadrature(d.as_scalar().unwrap()).unwrap();
            assert!((q - d.entropy_bits().unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn tilted_zero_tilt_is_cos_sq() {
        let s = Interval::new(0.0, 1.0).unwrap();
        let t = TiltedCosSqDensity::with_tilt(s, 0.0, 0.3).unwrap();
        let c = CosSqDensity::new(s);
        for i in 0..=200 {
            let w = i as f64 / 200.0;
            assert!((t.pdf(w) - c.pdf(w)).abs() < 1e-12);
        }
        let (tm, tv) = NoiseDensity::TiltedCosSq(t).moments().unwrap();
        assert!((tm[0] - c.mean()).abs() < 1e-10);
        assert!((tv[(0, 0)] - c.variance()).abs() < 1e-10);
    }

    #[test]
    fn tilted_continuity_in_tilt() {
        let s = Interval::new(0.0, 1.0).unwrap();
        let t = TiltedCosSqDensity::with_tilt(s, 1e-6, 0.0).unwrap();
        let c = CosSqDensity::new(s);
        let sup = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .map(|w| (t.pdf(w) - c.pdf(w)).abs())
            .fold(0.0, f64::max);
        assert!(sup < 1e-4);
    }

    #[test]
    fn tilted_quadrature_normalizer_matches_closed_form() {
        let s = Interval::new(-0.5, 2.0).unwrap();
        for a in [-6.0, -1.0, 0.3, 4.0] {
            let t = TiltedCosSqDensity::with_tilt(s, a, 0.0).unwrap();
            assert!((t.log_scale - t.analytic_log_scale()).abs() < 1e-9, "tilt {a}");
        }
    }

    #[test]
    fn exponential_weight_gives_x_independent_density() {
        let s = Interval::new(0.0, 1.0).unwrap();
        let w = WeightFunction::exponential(1.0);
        let a = tilted_new(s, &w, 0.0).unwrap();
        let b = tilted_new(s, &w, 3.7).unwrap();
        for i in 0..=100 {
            let v = i as f64 / 100.0;
            assert!((a.pdf(v) - b.pdf(v)).abs() < 1e-14);
        }
        let u = tilted_new(s, &WeightFunction::uniform(), 2.0).unwrap();
        assert!((u.pdf(0.5) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn squared_exponential_weight_skews_toward_upper_end() {
        let s = Interval::new(0.0, 1.0).unwrap();
        let d = tilted_new(s, &WeightFunction::squared_exponential(1.0), 1.0).unwrap();
        let argmax = (0..=10_000)
            .map(|i| i as f64 / 10_000.0)
            .max_by(|a, b| d.pdf(*a).total_cmp(&d.pdf(*b)))
            .unwrap();
        assert!(argmax > 0.5, "argmax {argmax}");
    }

    #[test]
    fn norm_const_matches_parameterization() {
        let s = Interval::new(0.0, 1.0).unwrap();
        let d = TiltedCosSqDensity::with_tilt(s, -2.0, 1.0).unwrap();
        let w: f64 = 0.3;
        let k = PI;
        let direct = d.norm_const() * (2.0 * (w + 1.0)).exp() * (k * (w - 0.5)).cos().powi(2);
        assert!((direct - d.pdf(w)).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_and_not_scalar() {
        let g = NoiseDensity::Gaussian(GaussianDensity::new(Matrix::identity(2)).unwrap());
        assert!(matches!(g.pdf(&[0.0]), Err(Error::DimensionMismatch(_))));
        assert!(matches!(g.cdf_1d(0.0), Err(Error::NotScalar)));
    }

    #[test]
    fn gaussian_multivariate_pdf() {
        let cov = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let g = GaussianDensity::new(cov).unwrap();
        let det: f64 = 2.0 - 0.25;
        let expected = 1.0 / (2.0 * PI * det.sqrt());
        assert!((g.pdf_vec(&[0.0, 0.0]) - expected).abs() < 1e-14);
    }

    #[test]
    fn cos_sq_sampling_moments_and_acceptance() {
        let d = unit();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut proposals = 0;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let (w, p) = d.sample_counted(&mut rng);
                proposals += p;
                w
            })
            .collect();
        assert!(samples.iter().all(|&w| w > 0.0 && w < 1.0));
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 0.5).abs() < 0.003, "mean {mean}");
        let expected_var = (PI * PI - 6.0) / (12.0 * PI * PI);
        assert!((var - expected_var).abs() < 5e-4, "var {var}");
        let rate = n as f64 / proposals as f64;
        assert!((rate - 0.5).abs() < 0.01, "acceptance {rate}");
    }

    #[test]
    fn kolmogorov_smirnov_for_scalar_densities() {
        let n = 100_000;
        let crit = 1.63 / (n as f64).sqrt();
        let s = Interval::new(0.0, 1.0).unwrap();
        let densities = vec![
            NoiseDensity::CosSq(CosSqDensity::new(s)),
            NoiseDensity::TiltedCosSq(TiltedCosSqDensity::with_tilt(s, -2.0, 1.0).unwrap()),
            NoiseDensity::TiltedCosSq(TiltedCosSqDensity::with_tilt(s, 5.0, 0.0).unwrap()),
            NoiseDensity::Gaussian(GaussianDensity::scalar(2.0).unwrap()),
            NoiseDensity::Laplace(LaplaceDensity::new(0.6).unwrap()),
        ];
        for (i, d) in densities.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut xs: Vec<f64> = d.sample(&mut rng, n).into_iter().map(|v| v[0]).collect();
            if let Some(b) = d.support_box() {
                assert!(xs.iter().all(|&x| b[0].contains(x)));
            }
            let ks = ks_statistic(&mut xs, |x| d.cdf_1d(x).unwrap());
            assert!(ks < crit, "{}: KS {ks} >= {crit}", d.kind());
        }
    }

    #[test]
    fn equal_seeds_give_equal_streams() {
        let d = NoiseDensity::cos_sq(0.0, 1.0).unwrap();
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(5), 50);
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(5), 50);
        assert_eq!(a, b);
    }

    #[test]
    fn json_round_trip() {
        let d = NoiseDensity::cos_sq(0.0, 1.0).unwrap();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(s, r#"{"kind":"cos_sq","lo":0.0,"hi":1.0}"#);
        let back: NoiseDensity = serde_json::from_str(r#"{"kind":"gaussian","covariance":[[2.0]]}"#).unwrap();
        assert_eq!(back.dim(), 1);
        assert!(serde_json::from_str::<NoiseDensity>(r#"{"kind":"cos_sq","lo":1.0,"hi":1.0}"#).is_err());
    }

    proptest! {
        #[test]
        fn tilted_json_round_trip(lo in -3.0f64..3.0, len in 0.1f64..5.0, tilt in -4.0f64..4.0, shift in -2.0f64..2.0) {
            let d = NoiseDensity::TiltedCosSq(
                TiltedCosSqDensity::with_tilt(Interval::new(lo, lo + len).unwrap(), tilt, shift).unwrap(),
            );
            let back: NoiseDensity = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
            prop_assert_eq!(d, back);
        }

        #[test]
        fn bounded_pdf_vanishes_on_boundary(lo in -10.0f64..10.0, len in 1e-3f64..10.0, tilt in -5.0f64..5.0) {
            let s = Interval::new(lo, lo + len).unwrap();
            let c = CosSqDensity::new(s);
            let t = TiltedCosSqDensity::with_tilt(s, tilt, 0.0).unwrap();
            prop_assert_eq!(c.pdf(s.lo()), 0.0);
            prop_assert_eq!(c.pdf(s.hi()), 0.0);
            prop_assert_eq!(t.pdf(s.lo()), 0.0);
            prop_assert_eq!(t.pdf(s.hi()), 0.0);
        }
    }
}
