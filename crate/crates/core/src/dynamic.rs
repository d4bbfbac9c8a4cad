//! Initial-state privacy for a linear time-invariant system.
//!
//! The plant `x[k+1] = A x[k]`, `y[k] = C x[k]` is released over `k = 0..T`.
//! The mechanism perturbs the initial condition once, `x₀ + z` with
//! `z ~ N(0, Σ)`, so the stacked response is `Ψ_T (x₀ + z)` and its noise
//! `Ψ_T z` is correlated across time.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::densities::GaussianDensity;
use crate::error::{Error, Result};
use crate::fisher::FisherReport;
use crate::matcore::{left_pinv, psd_inv_sqrt, psd_sqrt, spd_inverse, spectral_decompose, Matrix};
use crate::mechanisms::Response;

const GRAMIAN_TOL: f64 = 1e-10;

/// Stacks `C, CA, …, CA^T` into a `(T+1)m × n` matrix.
pub fn build_psi(a: &Matrix, c: &Matrix, horizon: usize) -> Result<Matrix> {
    if !a.is_square() || c.cols() != a.rows() {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, C is {}x{}",
            a.rows(),
            a.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let (m, n) = (c.rows(), c.cols());
    let mut data = Vec::with_capacity((horizon + 1) * m * n);
    let mut block = c.clone();
    for k in 0..=horizon {
        if k > 0 {
            block = block.matmul(a)?;
        }
        data.extend_from_slice(block.as_slice());
    }
    Matrix::from_vec((horizon + 1) * m, n, data)
}

/// `Σ_{k=0}^T (A^k)ᵀ Cᵀ C A^k`, accumulated without forming `Ψ_T`.
pub fn observability_gramian(a: &Matrix, c: &Matrix, horizon: usize) -> Result<Matrix> {
    let n = a.rows();
    let mut ak = Matrix::identity(n);
    let ctc = c.gram_cols();
    let mut acc = Matrix::zeros(n, n);
    for k in 0..=horizon {
        if k > 0 {
            ak = ak.matmul(a)?;
        }
        acc = &acc + &ak.transpose().matmul(&ctc)?.matmul(&ak)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GramianCheck {
    pub invertible: bool,
    pub min_eigenvalue: f64,
}

/// Whether `Ψ_TᵀΨ_T` is invertible. Observability of `(A, C)` with `T ≥ n - 1`
/// is sufficient.
pub fn check_gramian(a: &Matrix, c: &Matrix, horizon: usize) -> Result<GramianCheck> {
    let g = build_psi(a, c, horizon)?.gram_cols();
    let min = spectral_decompose(&g)?.min_eigenvalue();
    Ok(GramianCheck {
        invertible: min > GRAMIAN_TOL,
        min_eigenvalue: min,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LtiPrivacyModel {
    pub a: Matrix,
    pub c: Matrix,
    pub horizon: usize,
    pub psi: Matrix,
    /// Covariance of the initial-condition perturbation.
    pub sigma_z: Matrix,
    pub rho: f64,
    #[serde(skip)]
    z_density: GaussianDensity,
    #[serde(skip)]
    psi_pinv: Matrix,
}

/// `Σ = 2 (Ψ_TᵀΨ_T)^{-1/2} / √ρ`.
pub fn dynamic_mechanism(a: &Matrix, c: &Matrix, horizon: usize, rho: f64) -> Result<LtiPrivacyModel> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidParameter(format!("rho = {rho} must be positive")));
    }
    let check = check_gramian(a, c, horizon)?;
    if !check.invertible {
        return Err(Error::SingularGramian(check.min_eigenvalue));
    }
    let psi = build_psi(a, c, horizon)?;
    let sigma_z = psd_inv_sqrt(&psi.gram_cols())?.scale(2.0 / rho.sqrt());
    Ok(LtiPrivacyModel {
        a: a.clone(),
        c: c.clone(),
        horizon,
        z_density: GaussianDensity::new(sigma_z.clone())?,
        psi_pinv: left_pinv(&psi)?,
        psi,
        sigma_z,
        rho,
    })
}

impl LtiPrivacyModel {
    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.c.rows()
    }

    /// Covariance `Ψ Σ Ψᵀ` of the stacked response noise.
    pub fn response_noise_covariance(&self) -> Result<Matrix> {
        self.psi.matmul(&self.sigma_z)?.matmul(&self.psi.transpose())
    }

    /// Fisher information about `x₀`. The response is a full-column-rank
    /// image of `x₀ + z`, so no more can be learnt than from `x₀ + z` itself.
    pub fn fisher(&self) -> Result<FisherReport> {
        FisherReport::from_matrix(spd_inverse(&self.sigma_z)?)
    }

    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.z_density.sample_one(rng)
    }

    /// Stacked response `Ψ (x₀ + z)` for a given perturbation.
    pub fn response_with_noise(&self, x0: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != self.state_dim() || z.len() != self.state_dim() {
            return Err(Error::DimensionMismatch("x0 and z must match the state dimension".into()));
        }
        let shifted: Vec<f64> = x0.iter().zip(z).map(|(a, b)| a + b).collect();
        self.psi.mul_vec(&shifted)
    }
}

/// One run: a single draw of `z`, then `y[k] = CA^k (x₀ + z)` for `k = 0..T`.
pub fn simulate<R: Rng + ?Sized>(model: &LtiPrivacyModel, x0: &[f64], rng: &mut R) -> Result<Vec<Response>> {
    let z = model.sample_z(rng);
    let stacked = model.response_with_noise(x0, &z)?;
    let m = model.output_dim();
    Ok(stacked
        .chunks(m)
        .enumerate()
        .map(|(k, y)| Response {
            value: y.to_vec(),
            mechanism_id: "lti_initial_state".into(),
            timestamp: k as u64,
        })
        .collect())
}

/// Concatenates per-step responses into `y_T`.
pub fn stack(responses: &[Response]) -> Vec<f64> {
    responses.iter().flat_map(|r| r.value.iter().copied()).collect()
}

/// Least-squares reconstruction `x̂₀ = (ΨᵀΨ)⁻¹ Ψᵀ y_T`.
pub fn smoothing_estimate(model: &LtiPrivacyModel, y: &[f64]) -> Result<Vec<f64>> {
    model.psi_pinv.mul_vec(y)
}

/// The crowd-sensing plant: position and velocity, position observed.
pub fn traffic_system() -> (Matrix, Matrix) {
    (
        Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).expect("static matrix"),
        Matrix::row_vector(&[1.0, 0.0]).expect("static matrix"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    #[serde(rename = "T")]
    pub t: usize,
    pub rho: f64,
    pub q_closed: f64,
    pub mse_closed: f64,
    pub q_matrix: f64,
    pub mse_matrix: f64,
    pub delta: f64,
}

pub const TRAFFIC_CSV_HEADER: &str = "T,rho,delta,q_closed,q_matrix,mse_closed,mse_matrix";

impl TrafficReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t, self.rho, self.delta, self.q_closed, self.q_matrix, self.mse_closed, self.mse_matrix
        )
    }
}

/// Closed-form quality and smoothing error for the traffic plant, checked
/// against the matrix computation.
pub fn traffic_report(horizon: usize, rho: f64) -> Result<TrafficReport> {
    if horizon <= 2 {
        return Err(Error::HorizonTooShort(horizon));
    }
    let t = horizon as f64;
    let delta = 4.0 * t.powi(4) + 4.0 * t.powi(3) + 13.0 * t * t - 12.0 * t + 36.0;
    let base = 2.0 * t * t + t + 6.0;
    let lo = (t + 1.0) * (base - delta.sqrt());
    let hi = (t + 1.0) * (base + delta.sqrt());
    let q_closed = (lo.sqrt() + hi.sqrt()) / (3.0 * rho).sqrt();
    let mse_closed = 4.0 * 3f64.sqrt() / rho.sqrt() * (1.0 / lo.sqrt() + 1.0 / hi.sqrt());

    let (a, c) = traffic_system();
    let model = dynamic_mechanism(&a, &c, horizon, rho)?;
    let q_matrix = 2.0 * psd_sqrt(&model.psi.gram_cols())?.trace() / rho.sqrt();
    let mse_matrix = model.sigma_z.trace();
    Ok(TrafficReport {
        t: horizon,
        rho,
        q_closed,
        mse_closed,
        q_matrix,
        mse_matrix,
        delta,
    })
}

/// Least-squares slope of `log v` against `log t`.
pub fn loglog_slope(t: &[f64], v: &[f64]) -> f64 {
    let xs: Vec<f64> = t.iter().map(|x| x.ln()).collect();
    let ys: Vec<f64> = v.iter().map(|y| y.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSlopes {
    pub q_slope: f64,
    pub mse_slope: f64,
}

/// Log-log slopes of the closed-form quality and error over `horizons`.
pub fn traffic_slopes(horizons: &[usize], rho: f64) -> Result<ScalingSlopes> {
    let reports = horizons
        .iter()
        .map(|&t| traffic_report(t, rho))
        .collect::<Result<Vec<_>>>()?;
    let ts: Vec<f64> = horizons.iter().map(|&t| t as f64).collect();
    let q: Vec<f64> = reports.iter().map(|r| r.q_closed).collect();
    let mse: Vec<f64> = reports.iter().map(|r| r.mse_closed).collect();
    Ok(ScalingSlopes {
        q_slope: loglog_slope(&ts, &q),
        mse_slope: loglog_slope(&ts, &mse),
    })
}
