//! Adaptive one-dimensional quadrature.
//!
//! The workhorse is a 15-point Gauss-Legendre rule refined by interval
//! bisection: an interval is accepted when the whole-interval estimate agrees
//! with the sum of the two half-interval estimates. Nodes and weights are
//! computed once at startup by Newton iteration on the Legendre polynomial,
//! so there are no hard-coded abscissa tables to get wrong.
//!
//! Integrands with a power-law endpoint singularity z^sigma (sigma > -1) are
//! handled by the substitution z = u^(1/(1+sigma)), which removes the
//! singularity exactly before the adaptive rule is applied.

use once_cell::sync::Lazy;
use thiserror::Error;

const GAUSS_POINTS: usize = 15;
const MAX_DEPTH: u32 = 48;
/// Cap on rule applications per `integrate` call; reaching it ends
/// refinement with the current estimate and books the leaf error.
const MAX_EVALS: u32 = 40_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("integrand returned a non-finite value near x = {0}")]
    NonFinite(f64),
    #[error("requested tolerance not reached (best error estimate {0:.3e})")]
    ToleranceNotReached(f64),
    #[error("invalid integration bounds [{0}, {1}]")]
    InvalidBounds(f64, f64),
}

/// Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        // Chebyshev-like initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0_f64, x);
            for j in 1..n {
                let p2 = ((2 * j + 1) as f64 * x * p1 - j as f64 * p0) / (j + 1) as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[k] = x;
        weights[k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

static G15: Lazy<(Vec<f64>, Vec<f64>)> = Lazy::new(|| gauss_legendre(GAUSS_POINTS));

fn fixed_rule<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Result<f64, QuadError> {
    let (nodes, weights) = (&G15.0, &G15.1);
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for (&x, &w) in nodes.iter().zip(weights.iter()) {
        let v = f(mid + half * x);
        if !v.is_finite() {
            return Err(QuadError::NonFinite(mid + half * x));
        }
        acc += w * v;
    }
    Ok(acc * half)
}

fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: u32,
    worst: &mut f64,
    evals: &mut u32,
) -> Result<f64, QuadError> {
    let mid = 0.5 * (a + b);
    let left = fixed_rule(f, a, mid)?;
    let right = fixed_rule(f, mid, b)?;
    *evals += 2;
    let err = (left + right - whole).abs();
    if err <= tol || depth >= MAX_DEPTH || *evals >= MAX_EVALS {
        if err > tol {
            // accumulated error estimate of unconverged leaves
            *worst += err;
        }
        return Ok(left + right);
    }
    let l = adaptive(f, a, mid, left, 0.5 * tol, depth + 1, worst, evals)?;
    let r = adaptive(f, mid, b, right, 0.5 * tol, depth + 1, worst, evals)?;
    Ok(l + r)
}

/// Integrate `f` over [a, b] to absolute tolerance `abs_tol` plus relative
/// tolerance `rel_tol` (applied to the running estimate).
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64, QuadError> {
    if !(a.is_finite() && b.is_finite()) || a > b {
        return Err(QuadError::InvalidBounds(a, b));
    }
    if a == b {
        return Ok(0.0);
    }
    let whole = fixed_rule(&f, a, b)?;
    let tol = abs_tol.max(rel_tol * whole.abs());
    let mut worst = 0.0;
    let mut evals = 1;
    let value = adaptive(
        &f,
        a,
        b,
        whole,
        tol.max(f64::MIN_POSITIVE),
        0,
        &mut worst,
        &mut evals,
    )?;
    if worst > 10.0 * (abs_tol + rel_tol * value.abs()).max(1e-300) {
        return Err(QuadError::ToleranceNotReached(worst));
    }
    Ok(value)
}

/// Single application of the 15-point rule, no refinement. Appropriate when
/// the integrand is known smooth on [a, b] (e.g. one tabulation segment).
pub fn fixed<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    fixed_rule(&f, a, b)
}

/// Integrate z^sigma * h(z) over [0, c] with sigma > -1 and h bounded,
/// via the exact substitution z = u^(1/(1+sigma)).
pub fn integrate_power_weighted<H: Fn(f64) -> f64>(
    h: H,
    sigma: f64,
    c: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<f64, QuadError> {
    assert!(sigma > -1.0, "power weight must be integrable (sigma > -1)");
    assert!(c > 0.0);
    let p = 1.0 / (1.0 + sigma);
    let upper = c.powf(1.0 + sigma);
    integrate(|u| h(u.powf(p)) * p, 0.0, upper, abs_tol, rel_tol)
}
