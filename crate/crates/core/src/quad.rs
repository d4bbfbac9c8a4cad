//! One-dimensional quadrature helpers.

use crate::error::{Error, Result};

/// Absolute tolerance used for density normalization and moments.
pub const DEFAULT_TOL: f64 = 1e-10;
const MAX_DEPTH: u32 = 48;

/// Adaptive Simpson integration of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    let mut ok = true;
    let v = recurse(&f, a, b, fa, fm, fb, whole, tol, MAX_DEPTH, &mut ok);
    if !ok || !v.is_finite() {
        return Err(Error::QuadratureFailure { lo: a, hi: b, tol });
    }
    Ok(v)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    ok: &mut bool,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    // a minimum depth guards against symmetric integrands fooling the first estimate
    if depth + 6 <= MAX_DEPTH && delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    if depth == 0 {
        *ok = false;
        return left + right + delta / 15.0;
    }
    recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1, ok)
        + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1, ok)
}

/// Integrates over consecutive breakpoints, splitting the tolerance evenly.
pub fn adaptive_simpson_pieces<F: Fn(f64) -> f64>(f: F, breaks: &[f64], tol: f64) -> Result<f64> {
    let pieces = breaks.len().saturating_sub(1).max(1) as f64;
    breaks
        .windows(2)
        .map(|w| adaptive_simpson(&f, w[0], w[1], tol / pieces))
        .sum()
}

/// Pairwise (cascade) summation in a fixed order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (l, r) = values.split_at(n / 2);
            pairwise_sum(l) + pairwise_sum(r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn integrates_polynomials_and_trig() {
        let v = adaptive_simpson(|x| x * x, 0.0, 3.0, 1e-12).unwrap();
        assert!((v - 9.0).abs() < 1e-12);
        let v = adaptive_simpson(f64::sin, 0.0, PI, 1e-12).unwrap();
        assert!((v - 2.0).abs() < 1e-11);
    }

    #[test]
    fn symmetric_integrand_is_not_fooled() {
        // Simpson's first estimate of this bump is exactly zero.
        let v = adaptive_simpson(|x| (x * 4.0 * PI).sin().powi(2), 0.0, 1.0, 1e-12).unwrap();
        assert!((v - 0.5).abs() < 1e-11);
    }

    #[test]
    fn pieces_handle_kinks() {
        let v = adaptive_simpson_pieces(|x: f64| (-x.abs()).exp(), &[-30.0, 0.0, 30.0], 1e-12).unwrap();
        assert!((v - 2.0).abs() < 1e-11);
    }

    #[test]
    fn pairwise_matches_naive_sum() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499_500.0);
    }
}
