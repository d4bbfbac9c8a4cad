//! Experiment runner behind the `cnoise` binary.
//!
//! Every experiment is a pure function of its parameters and seed that
//! returns file bodies plus named checks; the runner writes the files and
//! turns the checks into the exit code.

use std::ffi::OsString;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{mc_crb_check, mc_dynamic_check, Estimator, McResult, MC_CSV_HEADER};
use crate::densities::{tilted_new, CosSqDensity, Interval, NoiseDensity, ScalarDensity, WeightFunction};
use crate::dynamic::{dynamic_mechanism, traffic_report, traffic_slopes, traffic_system, TRAFFIC_CSV_HEADER};
use crate::error::{Error, Result};
use crate::fisher::{fisher_scalar_quadrature, DEFAULT_GRID};
use crate::matcore::Matrix;
use crate::mechanisms::{laplace_dp, optimal_bounded_identity, optimal_unbounded_linear, Budget, NoiseFamily};
use crate::pde_verify::{
    boundary_check, convergence_ratio, helmholtz_residual, is_second_order, scalar_stationarity_residual,
    weighted_residual_scalar, gaussian_stationarity_residual, Grid1D, ResidualReport, GaussianStationarityReport,
};
use crate::privacy_analysis::{
    check_eps_delta, entropy_compare, entropy_gap, eps_delta_region, epsilon_dp_audit, fisher_compare,
    fisher_compare_quadrature, log_grid, strength_factor, AUDIT_PROBES,
};
use crate::quad::adaptive_simpson_pieces;
use crate::server::{read_ledger, replay_audit, serve, ServerConfig};

pub const TOOL: &str = concat!("cnoise/", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "cnoise", version, about = "Fisher-information-minimizing noise mechanisms: experiments and query service")]
pub struct Cli {
    /// Experiment spec (JSON); for `serve` and `audit`, the server config.
    #[arg(long, global = true)]
    pub spec: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Upper bound on experiments run at once.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    Fig1,
    Fig2,
    Corollary4,
    Traffic,
    CrbSuite,
    DpCompare,
    Verify,
    Serve,
    Audit,
    /// Every experiment.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentName {
    Fig1,
    Fig2,
    Corollary4,
    Traffic,
    CrbSuite,
    DpCompare,
    Verify,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 7] = [
        ExperimentName::Fig1,
        ExperimentName::Fig2,
        ExperimentName::Corollary4,
        ExperimentName::Traffic,
        ExperimentName::CrbSuite,
        ExperimentName::DpCompare,
        ExperimentName::Verify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Fig1 => "fig1",
            ExperimentName::Fig2 => "fig2",
            ExperimentName::Corollary4 => "corollary4",
            ExperimentName::Traffic => "traffic",
            ExperimentName::CrbSuite => "crb_suite",
            ExperimentName::DpCompare => "dp_compare",
            ExperimentName::Verify => "verify",
        }
    }

    fn from_command(c: Command) -> Option<Self> {
        Some(match c {
            Command::Fig1 => ExperimentName::Fig1,
            Command::Fig2 => ExperimentName::Fig2,
            Command::Corollary4 => ExperimentName::Corollary4,
            Command::Traffic => ExperimentName::Traffic,
            Command::CrbSuite => ExperimentName::CrbSuite,
            Command::DpCompare => ExperimentName::DpCompare,
            Command::Verify => ExperimentName::Verify,
            _ => return None,
        })
    }
}

/// Spec file contents: `{"name": ..., "parameters": {...}, "output": dir?, "seed": int?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: ExperimentName,
    #[serde(default)]
    pub parameters: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ExperimentSpec {
    pub fn named(name: ExperimentName) -> Self {
        Self {
            name,
            parameters: serde_json::Value::Null,
            output: None,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub experiment: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub name: ExperimentName,
    /// File name and full contents, header included.
    pub files: Vec<(String, String)>,
    pub checks: Vec<Check>,
}

impl ExperimentOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub seed: u64,
    pub spec: String,
}

impl Provenance {
    fn new(seed: u64, spec: ExperimentName) -> Self {
        Self {
            tool: TOOL.into(),
            seed,
            spec: spec.as_str().into(),
        }
    }

    fn csv_header(&self) -> String {
        format!("# tool={} seed={} spec={}\n", self.tool, self.seed, self.spec)
    }
}

#[derive(Serialize)]
struct JsonOutput<'a, T: Serialize> {
    provenance: &'a Provenance,
    report: T,
}

struct Recorder {
    name: ExperimentName,
    prov: Provenance,
    files: Vec<(String, String)>,
    checks: Vec<Check>,
}

impl Recorder {
    fn new(name: ExperimentName, seed: u64) -> Self {
        Self {
            name,
            prov: Provenance::new(seed, name),
            files: Vec::new(),
            checks: Vec::new(),
        }
    }

    fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            experiment: self.name.as_str().into(),
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn csv(&mut self, file: &str, header: &str, rows: impl IntoIterator<Item = String>) {
        let mut body = self.prov.csv_header();
        body.push_str(header);
        body.push('\n');
        for r in rows {
            body.push_str(&r);
            body.push('\n');
        }
        self.files.push((file.into(), body));
    }

    fn json<T: Serialize>(&mut self, file: &str, report: T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(&JsonOutput {
            provenance: &self.prov,
            report,
        })?;
        body.push('\n');
        self.files.push((file.into(), body));
        Ok(())
    }

    fn finish(self) -> ExperimentOutcome {
        ExperimentOutcome {
            name: self.name,
            files: self.files,
            checks: self.checks,
        }
    }
}

fn params<T: for<'de> Deserialize<'de> + Default>(v: &serde_json::Value) -> Result<T> {
    if v.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("parameters: {e}")))
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------- fig1

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Params {
    pub theta: f64,
    pub query: Vec<f64>,
    pub domain: [f64; 2],
    pub epsilon_range: [f64; 2],
    pub delta_range: [f64; 2],
    pub points: usize,
}

impl Default for Fig1Params {
    fn default() -> Self {
        Self {
            theta: 1.0,
            query: vec![1.0],
            domain: [0.0, 1.0],
            epsilon_range: [1e-3, 1.0],
            delta_range: [1e-3, 0.5],
            points: 61,
        }
    }
}

fn fig1(p: Fig1Params, rec: &mut Recorder) -> Result<()> {
    let c = Matrix::row_vector(&p.query)?;
    let domain = Interval::new(p.domain[0], p.domain[1])?;
    let eps = log_grid(p.epsilon_range[0], p.epsilon_range[1], p.points);
    let del = log_grid(p.delta_range[0], p.delta_range[1], p.points);
    let grid = eps_delta_region(p.theta, domain, &c, &eps, &del)?;
    rec.csv("fig1.csv", crate::privacy_analysis::REGION_CSV_HEADER, grid.csv_rows());

    let unit_c = Matrix::identity(1);
    let unit = Interval::new(0.0, 1.0)?;
    let rhs = check_eps_delta(p.theta, unit, &unit_c, 1.0, 0.1)?.binding_value;
    rec.check("boundary_value", (rhs - 2.5012).abs() < 1e-4, format!("rhs(1, 0.1, 1) = {rhs}"));
    rec.check("monotone", grid.is_monotone(), "satisfaction never switches off as epsilon or delta grows");
    let near_top = grid.at(1.0, 0.5);
    rec.check("satisfied_near_1_0.5", near_top == Some(true), format!("{near_top:?}"));
    let near_origin = grid.at(1e-3, 1e-3);
    rec.check("unsatisfied_near_origin", near_origin == Some(false), format!("{near_origin:?}"));
    Ok(())
}

// ---------------------------------------------------------------- fig2

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Params {
    pub points: usize,
    pub w_range: [f64; 2],
    pub x_range: [f64; 2],
    pub rate: f64,
}

impl Default for Fig2Params {
    fn default() -> Self {
        Self {
            points: 101,
            w_range: [0.0, 1.0],
            x_range: [0.0, 4.0],
            rate: 1.0,
        }
    }
}

/// `γ*(w | x)` on a grid; `values[i][j]` is at `xs[i]`, `ws[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    pub xs: Vec<f64>,
    pub ws: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
        .collect()
}

impl Surface {
    pub fn compute(support: Interval, weight: &WeightFunction, x_range: [f64; 2], points: usize) -> Result<Self> {
        if points < 2 {
            return Err(Error::InvalidParameter("surface needs at least 2 points per axis".into()));
        }
        let xs = linspace(x_range[0], x_range[1], points);
        let ws = linspace(support.lo(), support.hi(), points);
        let values = xs
            .iter()
            .map(|&x| {
                let d = tilted_new(support, weight, x)?;
                Ok(ws.iter().map(|&w| d.pdf(w)).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self { xs, ws, values })
    }

    /// Largest pointwise difference between any row and the first.
    pub fn x_variation(&self) -> f64 {
        let first = &self.values[0];
        self.values
            .iter()
            .flat_map(|row| row.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Grid argmax in `w` for each `x`.
    pub fn argmax_path(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| {
                let j = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("non-empty row");
                self.ws[j]
            })
            .collect()
    }

    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::with_capacity(self.xs.len() * self.ws.len());
        for (i, x) in self.xs.iter().enumerate() {
            for (j, w) in self.ws.iter().enumerate() {
                rows.push(format!("{x},{w},{}", self.values[i][j]));
            }
        }
        rows
    }
}

/// Non-decreasing or non-increasing, and not constant.
pub fn shifts_monotonically(path: &[f64]) -> bool {
    let up = path.windows(2).all(|w| w[1] >= w[0]);
    let down = path.windows(2).all(|w| w[1] <= w[0]);
    (up || down) && path.first() != path.last()
}

fn fig2(p: Fig2Params, rec: &mut Recorder) -> Result<()> {
    let support = Interval::new(p.w_range[0], p.w_range[1])?;
    let sq = Surface::compute(support, &WeightFunction::squared_exponential(p.rate), p.x_range, p.points)?;
    let ex = Surface::compute(support, &WeightFunction::exponential(p.rate), p.x_range, p.points)?;
    rec.csv("fig2_squared_exponential.csv", "x,w,density", sq.csv_rows());
    rec.csv("fig2_exponential.csv", "x,w,density", ex.csv_rows());
    let var = ex.x_variation();
    rec.check("exponential_x_invariant", var < 1e-10, format!("sup row difference {var:e}"));
    let path = sq.argmax_path();
    rec.check(
        "squared_exponential_argmax_monotone",
        shifts_monotonically(&path),
        format!("argmax from {} to {}", path[0], path[path.len() - 1]),
    );
    Ok(())
}

// ---------------------------------------------------------------- corollary4

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Corollary4Params {
    pub lengths: Vec<f64>,
    pub m: usize,
    pub mc_samples: usize,
}

impl Default for Corollary4Params {
    fn default() -> Self {
        Self {
            lengths: vec![0.5, 1.0, 2.0],
            m: 1,
            mc_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Corollary4Row {
    pub length: f64,
    pub trace_inverse: f64,
    pub quality: f64,
    pub ratio: f64,
    pub quality_closed: f64,
    pub mc_quality: f64,
    pub mc_stderr: f64,
}

/// `E w²` by adaptive quadrature.
pub fn second_moment_quadrature(d: &CosSqDensity) -> Result<f64> {
    let (lo, hi) = d.support();
    adaptive_simpson_pieces(|w| w * w * d.pdf(w), &[lo, hi], 1e-13)
}

pub fn corollary4_rows(p: &Corollary4Params, seed: u64) -> Result<Vec<Corollary4Row>> {
    let m = p.m as f64;
    p.lengths
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            let support = Interval::new(0.0, l)?;
            let d = CosSqDensity::new(support);
            let trace_inverse = m / fisher_scalar_quadrature(&d, DEFAULT_GRID)?;
            let quality = m * second_moment_quadrature(&d)?;
            let quality_closed = m * l * l * (2.0 * PI * PI - 3.0) / (6.0 * PI * PI);

            let noise = NoiseDensity::ProductCosSq(crate::densities::ProductCosSqDensity::identical(support, p.m)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..p.mc_samples {
                let w = noise.sample_one(&mut rng);
                let q: f64 = w.iter().map(|v| v * v).sum();
                s += q;
                s2 += q * q;
            }
            let t = p.mc_samples as f64;
            let mc_quality = s / t;
            let mc_stderr = ((s2 / t - mc_quality * mc_quality).max(0.0) / (t - 1.0)).sqrt();
            Ok(Corollary4Row {
                length: l,
                trace_inverse,
                quality,
                ratio: quality / trace_inverse,
                quality_closed,
                mc_quality,
                mc_stderr,
            })
        })
        .collect()
}

fn corollary4(p: Corollary4Params, seed: u64, rec: &mut Recorder) -> Result<()> {
    let rows = corollary4_rows(&p, seed)?;
    rec.csv(
        "corollary4.csv",
        "L,trace_inverse,Q,ratio",
        rows.iter()
            .map(|r| format!("{},{},{},{}", r.length, r.trace_inverse, r.quality, r.ratio)),
    );
    let m = p.m as f64;
    for r in &rows {
        let tag = format!("L={}", r.length);
        rec.check(
            &format!("quality_quadrature_{tag}"),
            (r.quality - r.quality_closed).abs() < 1e-8,
            format!("{} vs {}", r.quality, r.quality_closed),
        );
        rec.check(
            &format!("quality_monte_carlo_{tag}"),
            (r.mc_quality - r.quality_closed).abs() <= 3.0 * r.mc_stderr,
            format!("{} ± {} vs {}", r.mc_quality, r.mc_stderr, r.quality_closed),
        );
        let kappa = 1.0 / (4.0 * PI * PI);
        let expected = m * kappa * r.length * r.length;
        rec.check(
            &format!("trace_inverse_{tag}"),
            rel_close(r.trace_inverse, expected, 1e-6),
            format!("{} vs {}", r.trace_inverse, expected),
        );
    }
    let r0 = rows[0].ratio;
    let spread = rows.iter().map(|r| ((r.ratio - r0) / r0).abs()).fold(0.0, f64::max);
    rec.check("ratio_constant", spread < 1e-6, format!("relative spread {spread:e}"));
    for w in rows.windows(2) {
        if (w[1].length / w[0].length - 2.0).abs() < 1e-12 {
            let tq = w[1].trace_inverse / w[0].trace_inverse;
            let qq = w[1].quality / w[0].quality;
            rec.check(
                &format!("doubling_L={}", w[0].length),
                rel_close(tq, 4.0, 1e-6) && rel_close(qq, 4.0, 1e-6),
                format!("trace ratio {tq}, quality ratio {qq}"),
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- traffic

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficParams {
    pub rho: f64,
    pub horizons: Vec<usize>,
    pub slope_horizons: Vec<usize>,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            horizons: (3..=64).collect(),
            slope_horizons: (4..=64).collect(),
        }
    }
}

fn traffic(p: TrafficParams, rec: &mut Recorder) -> Result<()> {
    let reports = p
        .horizons
        .iter()
        .map(|&t| traffic_report(t, p.rho))
        .collect::<Result<Vec<_>>>()?;
    rec.csv("traffic.csv", TRAFFIC_CSV_HEADER, reports.iter().map(|r| r.csv_row()));
    for r in &reports {
        rec.check(
            &format!("closed_vs_matrix_T={}", r.t),
            rel_close(r.q_closed, r.q_matrix, 1e-6) && rel_close(r.mse_closed, r.mse_matrix, 1e-6),
            format!("Q {} / {}, MSE {} / {}", r.q_closed, r.q_matrix, r.mse_closed, r.mse_matrix),
        );
    }
    if let Some(r) = reports.iter().find(|r| r.t == 3 && p.rho == 1.0) {
        rec.check("delta_T=3", r.delta == 549.0, format!("{}", r.delta));
        rec.check("q_T=3", (r.q_closed - 10.381).abs() < 1e-3, format!("{}", r.q_closed));
        rec.check("mse_T=3", (r.mse_closed - 2.3216).abs() < 3e-4, format!("{}", r.mse_closed));
    }
    let s = traffic_slopes(&p.slope_horizons, p.rho)?;
    rec.check("q_slope", (s.q_slope - 1.5).abs() <= 0.05, format!("{} (target +1.5)", s.q_slope));
    rec.check("mse_slope", (s.mse_slope + 1.5).abs() <= 0.05, format!("{} (target -1.5)", s.mse_slope));
    Ok(())
}

// ---------------------------------------------------------------- crb_suite

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrbParams {
    pub trials: usize,
}

impl Default for CrbParams {
    fn default() -> Self {
        Self { trials: 100_000 }
    }
}

pub fn crb_suite_results(trials: usize, seed: u64) -> Result<Vec<McResult>> {
    let rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };
    let unit = Interval::new(0.0, 1.0)?;
    let identity = optimal_bounded_identity(1, unit)?;
    let c = Matrix::row_vector(&[0.5, 0.5])?;
    let averaging = optimal_unbounded_linear(&c, Budget::Theta { theta: 1.0 })?.with_id("averaging_gaussian");
    let (a, cc) = traffic_system();
    let model = dynamic_mechanism(&a, &cc, 3, 1.0)?;
    Ok(vec![
        mc_crb_check(&identity, &Estimator::UnbiasedIdentity, &[0.5], trials, &mut rng(0))?,
        mc_crb_check(&averaging, &Estimator::LeastSquares, &[1.0, 0.0], trials, &mut rng(1))?,
        mc_dynamic_check(&model, &[10.0, 1.0], trials, &mut rng(2))?,
    ])
}

fn crb_suite(p: CrbParams, seed: u64, rec: &mut Recorder) -> Result<()> {
    let results = crb_suite_results(p.trials, seed)?;
    rec.csv("crb_suite.csv", MC_CSV_HEADER, results.iter().map(McResult::csv_row));
    for r in &results {
        rec.check(
            &format!("mse_above_bound_{}", r.mechanism_id),
            r.passed,
            format!("mse {} ± {} vs bound {}", r.mse, r.stderr, r.bound),
        );
    }
    let id = &results[0];
    rec.check("identity_mse", (id.mse - 0.03267).abs() < 1e-3, format!("{}", id.mse));
    rec.check("identity_bound", (id.bound - 0.02533).abs() < 1e-5, format!("{}", id.bound));
    Ok(())
}

// ---------------------------------------------------------------- dp_compare

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpCompareParams {
    pub thetas: Vec<f64>,
    pub query: Vec<f64>,
    pub domain: [f64; 2],
    pub epsilons: Vec<f64>,
}

impl Default for DpCompareParams {
    fn default() -> Self {
        Self {
            thetas: vec![0.1, 0.5, 1.0, 2.0, 10.0],
            query: vec![0.5, 0.5],
            domain: [0.0, 1.0],
            epsilons: vec![0.1, 0.5, 1.0, 2.0],
        }
    }
}

fn dp_compare(p: DpCompareParams, rec: &mut Recorder) -> Result<()> {
    let c = Matrix::row_vector(&p.query)?;
    let domain = Interval::new(p.domain[0], p.domain[1])?;
    let cct = c.gram_rows()[(0, 0)];
    let mut rows = Vec::new();
    for &t in &p.thetas {
        let e = entropy_compare(t)?;
        let f = fisher_compare(&c, t)?;
        let fq = fisher_compare_quadrature(&c, t)?;
        let s = strength_factor(&c, domain, t)?;
        let gap = e.gaussian_bits - e.laplace_bits;
        rows.push(format!(
            "{t},{},{},{gap},{},{},{}",
            e.laplace_bits, e.gaussian_bits, f.laplace, f.gaussian, s.factor
        ));
        rec.check(
            &format!("entropy_gap_theta={t}"),
            (gap - entropy_gap()).abs() < 1e-12,
            format!("{gap} vs {}", entropy_gap()),
        );
        rec.check(
            &format!("fisher_exact_theta={t}"),
            f.laplace == 2.0 * cct / t && f.gaussian == cct / t,
            format!("({}, {})", f.laplace, f.gaussian),
        );
        rec.check(
            &format!("fisher_quadrature_theta={t}"),
            rel_close(fq.laplace, f.laplace, 1e-3) && rel_close(fq.gaussian, f.gaussian, 1e-3),
            format!("({}, {})", fq.laplace, fq.gaussian),
        );
    }
    rec.csv(
        "dp_compare.csv",
        "theta,laplace_bits,gaussian_bits,entropy_gap,fisher_laplace,fisher_gaussian,strength_factor",
        rows,
    );
    if p.query == [0.5, 0.5] && p.domain == [0.0, 1.0] {
        let s = strength_factor(&c, domain, 1.0)?;
        rec.check("strength_factor_1.8", (s.factor - 1.8).abs() < 1e-9, format!("{}", s.factor));
    }

    let mut audit_rows = Vec::new();
    for &eps in &p.epsilons {
        let mech = laplace_dp(&c, domain, eps)?;
        let a = epsilon_dp_audit(&mech, domain, eps, AUDIT_PROBES)?;
        let NoiseFamily::Fixed(NoiseDensity::Laplace(l)) = &mech.noise else {
            return Err(Error::IncompatibleQuery("laplace_dp returned non-Laplace noise".into()));
        };
        let mut halved = mech.clone();
        halved.noise = NoiseFamily::Fixed(NoiseDensity::Laplace(crate::densities::LaplaceDensity::new(
            l.scale() / 2.0,
        )?));
        let h = epsilon_dp_audit(&halved, domain, eps, AUDIT_PROBES)?;
        audit_rows.push(format!(
            "{eps},{},{},{},{}",
            a.sup_log_ratio, a.passed, h.sup_log_ratio, h.passed
        ));
        rec.check(
            &format!("audit_passes_eps={eps}"),
            a.passed && (a.sup_log_ratio - eps).abs() < 1e-6,
            format!("sup {}", a.sup_log_ratio),
        );
        rec.check(&format!("audit_halved_fails_eps={eps}"), !h.passed, format!("sup {}", h.sup_log_ratio));
    }
    rec.csv(
        "dp_audit.csv",
        "epsilon,sup_log_ratio,passed,halved_sup_log_ratio,halved_passed",
        audit_rows,
    );
    Ok(())
}

// ---------------------------------------------------------------- verify

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub points: usize,
    pub base_points: usize,
    pub xs: Vec<f64>,
    pub rho: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            points: 513,
            base_points: 129,
            xs: (0..9).map(|i| i as f64 * 0.5).collect(),
            rho: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerifyDetail {
    Residual(ResidualReport),
    Gaussian(GaussianStationarityReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEntry {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence_ratio: Option<f64>,
    pub report: VerifyDetail,
}

fn verify(p: VerifyParams, rec: &mut Recorder) -> Result<()> {
    let unit = Interval::new(0.0, 1.0)?;
    let grid = Grid1D::over(unit, p.points)?;
    let base = Grid1D::over(unit, p.base_points)?;
    let mut entries = Vec::new();

    let d = CosSqDensity::new(unit);
    let h = helmholtz_residual(&d, grid);
    let ratio = convergence_ratio(base, |g| helmholtz_residual(&d, g));
    rec.check("helmholtz_cos_sq", h.passed, format!("{:e} <= {:e}", h.max_abs_residual, h.tolerance));
    rec.check("helmholtz_cos_sq_order", is_second_order(ratio), format!("ratio {ratio}"));
    entries.push(VerifyEntry {
        name: "helmholtz_cos_sq".into(),
        convergence_ratio: Some(ratio),
        report: VerifyDetail::Residual(h),
    });

    let t1 = scalar_stationarity_residual(&d, &Matrix::identity(1), grid)?;
    rec.check("scalar_stationarity_cos_sq", t1.passed, format!("{:e} < {:e}", t1.max_abs_residual, t1.tolerance));
    entries.push(VerifyEntry {
        name: "scalar_stationarity_cos_sq".into(),
        convergence_ratio: None,
        report: VerifyDetail::Residual(t1),
    });
    rec.check("boundary_cos_sq", boundary_check(&d), "pdf vanishes at both ends");

    for (label, weight) in [
        ("exponential", WeightFunction::exponential(1.0)),
        ("squared_exponential", WeightFunction::squared_exponential(1.0)),
    ] {
        for &x in &p.xs {
            let r = weighted_residual_scalar(unit, &weight, x, grid)?;
            let name = format!("weighted_{label}_x={x}");
            rec.check(&name, r.passed, format!("{:e} <= {:e}", r.max_abs_residual, r.tolerance));
            rec.check(
                &format!("boundary_{label}_x={x}"),
                boundary_check(&tilted_new(unit, &weight, x)?),
                "pdf vanishes at both ends",
            );
            entries.push(VerifyEntry {
                name,
                convergence_ratio: None,
                report: VerifyDetail::Residual(r),
            });
        }
        let ratio = convergence_ratio(base, |g| {
            weighted_residual_scalar(unit, &weight, 1.0, g).expect("grid built from a valid support")
        });
        rec.check(&format!("weighted_{label}_order"), is_second_order(ratio), format!("ratio {ratio}"));
    }

    // the covariance solving the Gaussian stationarity condition, and the
    // one the rho budget prescribes; only the first is asserted
    let c = Matrix::identity(1);
    let solving = Matrix::from_diag(&[1.0 / p.rho.sqrt()]);
    let r = gaussian_stationarity_residual(&c, p.rho, &solving, 801)?;
    rec.check(
        "gaussian_stationarity",
        r.residual.passed && (r.mismatch_factor - 1.0).abs() < 1e-3,
        format!("mismatch {}", r.mismatch_factor),
    );
    entries.push(VerifyEntry {
        name: "gaussian_stationarity".into(),
        convergence_ratio: None,
        report: VerifyDetail::Gaussian(r),
    });
    let budget = optimal_unbounded_linear(&c, Budget::Rho { rho: p.rho })?;
    if let NoiseFamily::Fixed(NoiseDensity::Gaussian(g)) = &budget.noise {
        entries.push(VerifyEntry {
            name: "gaussian_rho_budget_covariance".into(),
            convergence_ratio: None,
            report: VerifyDetail::Gaussian(gaussian_stationarity_residual(&c, p.rho, g.covariance(), 801)?),
        });
    }
    rec.json("verify.json", &entries)
}

// ---------------------------------------------------------------- runner

/// Runs one experiment in memory.
pub fn run_experiment(spec: &ExperimentSpec, seed: u64) -> Result<ExperimentOutcome> {
    let mut rec = Recorder::new(spec.name, seed);
    let v = &spec.parameters;
    match spec.name {
        ExperimentName::Fig1 => fig1(params(v)?, &mut rec)?,
        ExperimentName::Fig2 => fig2(params(v)?, &mut rec)?,
        ExperimentName::Corollary4 => corollary4(params(v)?, seed, &mut rec)?,
        ExperimentName::Traffic => traffic(params(v)?, &mut rec)?,
        ExperimentName::CrbSuite => crb_suite(params(v)?, seed, &mut rec)?,
        ExperimentName::DpCompare => dp_compare(params(v)?, &mut rec)?,
        ExperimentName::Verify => verify(params(v)?, &mut rec)?,
    }
    Ok(rec.finish())
}

pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, body) in &outcome.files {
        std::fs::write(dir.join(name), body)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    tool: &'static str,
    seed: u64,
    passed: bool,
    checks: Vec<&'a Check>,
}

#[derive(Debug, Serialize)]
struct FailureList<'a> {
    failures: Vec<&'a Check>,
}

fn load_specs(cli: &Cli, names: &[ExperimentName]) -> Result<Vec<ExperimentSpec>> {
    let Some(path) = &cli.spec else {
        return Ok(names.iter().map(|&n| ExperimentSpec::named(n)).collect());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let specs: Vec<ExperimentSpec> = if value.is_array() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value(value).map(|s| vec![s])
    }
    .map_err(|e| Error::Config(e.to_string()))?;
    if let [only] = names {
        if specs.len() != 1 || specs[0].name != *only {
            return Err(Error::Config(format!("spec file does not describe `{}`", only.as_str())));
        }
    }
    Ok(specs)
}

fn run_experiments(cli: &Cli, names: &[ExperimentName]) -> Result<bool> {
    let specs = load_specs(cli, names)?;
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<(ExperimentOutcome, PathBuf)> = pool.install(|| {
        specs
            .par_iter()
            .map(|s| {
                let seed = cli.seed.or(s.seed).unwrap_or(0);
                let dir = s.output.clone().unwrap_or_else(|| cli.out.clone());
                run_experiment(s, seed).map(|o| (o, dir))
            })
            .collect::<Result<_>>()
    })?;
    let mut checks = Vec::new();
    for (o, dir) in &outcomes {
        write_outcome(o, dir)?;
        checks.extend(o.checks.iter());
    }
    let passed = checks.iter().all(|c| c.passed);
    let seed = cli.seed.unwrap_or(0);
    std::fs::create_dir_all(&cli.out)?;
    let mut summary = serde_json::to_string_pretty(&Summary {
        tool: TOOL,
        seed,
        passed,
        checks: checks.clone(),
    })?;
    summary.push('\n');
    std::fs::write(cli.out.join("summary.json"), summary)?;
    let mut line = String::new();
    for c in &checks {
        let _ = writeln!(line, "{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, c.experiment, c.name, c.detail);
    }
    eprint!("{line}");
    if !passed {
        let failures = FailureList {
            failures: checks.into_iter().filter(|c| !c.passed).collect(),
        };
        println!("{}", serde_json::to_string(&failures)?);
    }
    Ok(passed)
}

fn server_config(cli: &Cli) -> Result<ServerConfig> {
    let path = cli
        .spec
        .as_ref()
        .ok_or_else(|| Error::Config("--spec <server config> is required".into()))?;
    let mut cfg = ServerConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn audit(cli: &Cli) -> Result<bool> {
    let cfg = server_config(cli)?;
    let db = cfg.load_database()?;
    let registry = cfg.registry(db.len())?;
    let entries = read_ledger(&cfg.ledger)?;
    let report = replay_audit(&entries, &db, &registry);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(report.passed())
}

/// Exit status: 0 when every assertion holds, 1 when one fails, 2 on errors.
pub fn run(cli: &Cli) -> i32 {
    let result = match cli.command {
        Command::Serve => server_config(cli).and_then(|c| serve(&c)).map(|_| true),
        Command::Audit => audit(cli),
        Command::All => run_experiments(cli, &ExperimentName::ALL),
        c => run_experiments(cli, &[ExperimentName::from_command(c).expect("experiment command")]),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let msg = serde_json::json!({"error": {"code": e.code(), "message": e.to_string()}});
            eprintln!("{msg}");
            2
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig1_outcome() {
        let o = run_experiment(&ExperimentSpec::named(ExperimentName::Fig1), 0).unwrap();
        assert!(o.passed(), "{:?}", o.checks);
        let (name, body) = &o.files[0];
        assert_eq!(name, "fig1.csv");
        let mut lines = body.lines();
        assert!(lines.next().unwrap().starts_with("# tool=cnoise/"));
        assert_eq!(lines.next().unwrap(), "epsilon,delta,satisfied");
    }

    #[test]
    fn fig2_small_grid() {
        let spec = ExperimentSpec {
            parameters: serde_json::json!({"points": 21}),
            ..ExperimentSpec::named(ExperimentName::Fig2)
        };
        let o = run_experiment(&spec, 0).unwrap();
        assert!(o.passed(), "{:?}", o.checks);
        assert_eq!(o.files[0].1.lines().count(), 2 + 21 * 21);
    }

    #[test]
    fn corollary4_outcome() {
        let spec = ExperimentSpec {
            parameters: serde_json::json!({"mc_samples": 20000}),
            ..ExperimentSpec::named(ExperimentName::Corollary4)
        };
        let o = run_experiment(&spec, 4).unwrap();
        assert!(o.passed(), "{:?}", o.checks);
        assert_eq!(run_experiment(&spec, 4).unwrap(), o);
    }

    #[test]
    fn unknown_parameter_rejected() {
        let spec = ExperimentSpec {
            parameters: serde_json::json!({"bogus": 1}),
            ..ExperimentSpec::named(ExperimentName::Fig1)
        };
        assert!(matches!(run_experiment(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn traffic_reports_slope_failure() {
        let o = run_experiment(&ExperimentSpec::named(ExperimentName::Traffic), 0).unwrap();
        assert!(o.check("delta_T=3").unwrap().passed);
        assert!(o.check("closed_vs_matrix_T=64").unwrap().passed);
        assert!(!o.check("mse_slope").unwrap().passed);
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from(["cnoise", "crb-suite", "--seed", "3", "--out", "x", "--jobs", "2"]).unwrap();
        assert_eq!(cli.command, Command::CrbSuite);
        assert_eq!((cli.seed, cli.jobs), (Some(3), Some(2)));
        assert!(Cli::try_parse_from(["cnoise", "nope"]).is_err());
    }

    #[test]
    fn surface_helpers() {
        assert!(shifts_monotonically(&[0.1, 0.2, 0.2, 0.5]));
        assert!(shifts_monotonically(&[0.5, 0.2]));
        assert!(!shifts_monotonically(&[0.1, 0.3, 0.2]));
        assert!(!shifts_monotonically(&[0.5, 0.5]));
    }
}
