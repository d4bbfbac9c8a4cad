//! Estimators available to an adversary who knows the mechanism, and Monte
//! Carlo checks that their error never beats the Cramér–Rao floor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamic::{smoothing_estimate, LtiPrivacyModel};
use crate::error::{Error, Result};
use crate::fisher::{crb_least_squares, crb_unbiased, noise_fisher, FisherReport, DEFAULT_GRID};
use crate::matcore::{moore_penrose_pinv, Matrix};
use crate::mechanisms::{Mechanism, NoiseFamily};

/// Smallest trial count accepted by the Monte Carlo checks.
pub const MIN_TRIALS: usize = 10_000;
/// Standard errors of slack granted to the estimate.
pub const SIGMA_SLACK: f64 = 3.0;

pub const MC_CSV_HEADER: &str = "mechanism_id,estimator,trials,mse,stderr,bound,passed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McResult {
    pub mechanism_id: String,
    pub estimator: String,
    pub trials: usize,
    /// Mean of `‖x - x̂‖²`.
    pub mse: f64,
    pub stderr: f64,
    /// `‖mean(x̂) - x‖`.
    pub bias_norm: f64,
    /// Standard error of the bias vector's norm under zero true bias.
    pub bias_stderr: f64,
    pub per_entry_mse: Vec<f64>,
    pub per_entry_stderr: Vec<f64>,
    pub bound: f64,
    pub passed: bool,
}

impl McResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mechanism_id, self.estimator, self.trials, self.mse, self.stderr, self.bound, self.passed
        )
    }

    /// Whether the bias is within `SIGMA_SLACK` standard errors of zero.
    pub fn unbiased_within_noise(&self) -> bool {
        self.bias_norm <= SIGMA_SLACK * self.bias_stderr
    }

    /// Whether every entry's error stays above `floor`.
    pub fn entries_respect(&self, floor: f64) -> bool {
        self.per_entry_mse
            .iter()
            .zip(&self.per_entry_stderr)
            .all(|(m, s)| m + SIGMA_SLACK * s >= floor)
    }
}

/// `x̂ = y - E[w]`, unbiased for identity queries.
pub fn unbiased_identity_estimate(y: &[f64], noise_mean: &[f64]) -> Result<Vec<f64>> {
    if y.len() != noise_mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "response of length {} with noise mean of length {}",
            y.len(),
            noise_mean.len()
        )));
    }
    Ok(y.iter().zip(noise_mean).map(|(a, b)| a - b).collect())
}

/// `x̂ = C† y`; biased when `C` has fewer rows than columns.
pub fn ls_estimate(c: &Matrix, y: &[f64]) -> Result<Vec<f64>> {
    moore_penrose_pinv(c)?.mul_vec(y)
}

#[derive(Debug, Clone)]
pub enum Estimator {
    /// Subtracts the known noise mean.
    UnbiasedIdentity,
    /// Pseudo-inverse of the query matrix.
    LeastSquares,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::UnbiasedIdentity => "unbiased_identity",
            Estimator::LeastSquares => "least_squares",
        }
    }
}

struct Accumulator {
    sq: Vec<f64>,
    err: Vec<f64>,
    err_sq: Vec<f64>,
    entry_sq_sq: Vec<f64>,
    total: f64,
    total_sq: f64,
    trials: usize,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            sq: vec![0.0; n],
            err: vec![0.0; n],
            err_sq: vec![0.0; n],
            entry_sq_sq: vec![0.0; n],
            total: 0.0,
            total_sq: 0.0,
            trials: 0,
        }
    }

    fn push(&mut self, x: &[f64], est: &[f64]) {
        let mut norm = 0.0;
        for j in 0..x.len() {
            let e = est[j] - x[j];
            self.err[j] += e;
            self.err_sq[j] += e * e;
            self.sq[j] += e * e;
            self.entry_sq_sq[j] += e * e * e * e;
            norm += e * e;
        }
        self.total += norm;
        self.total_sq += norm * norm;
        self.trials += 1;
    }

    fn finish(self, mechanism_id: &str, estimator: &str, bound: f64) -> McResult {
        let t = self.trials as f64;
        let mse = self.total / t;
        let var = (self.total_sq / t - mse * mse).max(0.0) * t / (t - 1.0);
        let stderr = (var / t).sqrt();
        let bias: Vec<f64> = self.err.iter().map(|e| e / t).collect();
        let bias_norm = bias.iter().map(|b| b * b).sum::<f64>().sqrt();
        let bias_var: f64 = self
            .err_sq
            .iter()
            .zip(&bias)
            .map(|(s, b)| (s / t - b * b).max(0.0) * t / (t - 1.0))
            .sum();
        let per_entry_mse: Vec<f64> = self.sq.iter().map(|s| s / t).collect();
        let per_entry_stderr = self
            .entry_sq_sq
            .iter()
            .zip(&per_entry_mse)
            .map(|(q, m)| ((q / t - m * m).max(0.0) * t / (t - 1.0) / t).sqrt())
            .collect();
        McResult {
            mechanism_id: mechanism_id.to_string(),
            estimator: estimator.to_string(),
            trials: self.trials,
            mse,
            stderr,
            bias_norm,
            bias_stderr: (bias_var / t).sqrt(),
            per_entry_mse,
            per_entry_stderr,
            bound,
            passed: mse + SIGMA_SLACK * stderr >= bound,
        }
    }
}

fn check_trials(trials: usize) -> Result<()> {
    if trials < MIN_TRIALS {
        return Err(Error::InvalidParameter(format!("{trials} trials < {MIN_TRIALS}")));
    }
    Ok(())
}

/// Runs the estimator against fresh responses at `x` and compares its MSE
/// with the bound matching the estimator's bias structure.
pub fn mc_crb_check<R: Rng + ?Sized>(
    mech: &Mechanism,
    estimator: &Estimator,
    x: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<McResult> {
    check_trials(trials)?;
    let noise = mech.noise.at(x)?;
    let (bound, pinv, mean) = match estimator {
        Estimator::UnbiasedIdentity => {
            let fisher = FisherReport::from_matrix(mech.noise.fisher_at(x, &mech.query)?)?;
            let (mean, _) = noise.moments()?;
            (crb_unbiased(&fisher)?, None, mean)
        }
        Estimator::LeastSquares => {
            let c = mech
                .query
                .linear_matrix()
                .ok_or_else(|| Error::IncompatibleQuery("least squares needs a linear query".into()))?;
            if !matches!(mech.noise, NoiseFamily::Fixed(_)) {
                return Err(Error::IncompatibleQuery("least squares needs x-independent noise".into()));
            }
            let bound = crb_least_squares(&c, &noise_fisher(&noise, DEFAULT_GRID)?, x)?;
            (bound, Some(moore_penrose_pinv(&c)?), Vec::new())
        }
    };
    let mut acc = Accumulator::new(x.len());
    for _ in 0..trials {
        let y = mech.respond(x, rng)?.value;
        let est = match &pinv {
            Some(p) => p.mul_vec(&y)?,
            None => unbiased_identity_estimate(&y, &mean)?,
        };
        acc.push(x, &est);
    }
    Ok(acc.finish(&mech.id, estimator.name(), bound))
}

/// Smoothing estimator on the LTI mechanism, one fresh `z` per trial.
pub fn mc_dynamic_check<R: Rng + ?Sized>(
    model: &LtiPrivacyModel,
    x0: &[f64],
    trials: usize,
    rng: &mut R,
) -> Result<McResult> {
    check_trials(trials)?;
    let bound = crb_unbiased(&model.fisher()?)?;
    let mut acc = Accumulator::new(x0.len());
    for _ in 0..trials {
        let z = model.sample_z(rng);
        let y = model.response_with_noise(x0, &z)?;
        acc.push(x0, &smoothing_estimate(model, &y)?);
    }
    Ok(acc.finish("lti_initial_state", "smoothing", bound))
}
