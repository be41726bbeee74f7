//! Closed-form reference solutions for validating the discrete operators and
//! the time integrator.
//!
//! Pure fragmentation (no coagulation), a(x) = x, uniform daughter profile
//! B = 2 on (0,1), initial condition e^(-x):
//!
//! ```text
//! f(t,x) = (1+t)^2 e^(-(1+t)x).
//! ```
//!
//! Substitution check: d_t f = (1+t) e^(-(1+t)x) (2 - x(1+t)), while
//! -a f + int_x^inf a(y) b(x,y) f dy = -x f + 2 int_x^inf f dy
//! = (1+t)^2 e^(-(1+t)x) (-x + 2/(1+t)), which is the same expression.
//!
//! Constant-kernel coagulation K = 2 (no fragmentation), initial e^(-x):
//!
//! ```text
//! f(t,x) = A(t)^2 e^(-A(t) x),   A(t) = 1/(1+t).
//! ```
//!
//! Substitution check for f = A^2 e^(-Ax): the gain term is
//! (1/2) int_0^x 2 f(y) f(x-y) dy = A^4 x e^(-Ax), the loss term is
//! 2 f M_0 = 2 A^3 e^(-Ax), and d_t f = (2A A' - A^2 A' x) e^(-Ax); matching
//! the coefficients of both the constant and the linear-in-x parts forces
//! A' = -A^2, i.e. A = 1/(1+t) from A(0) = 1.

use crate::coefficients::{CoefficientSet, DaughterSpec, DiagnosticParams, Kernel};
use crate::dynamics::{DynError, EvolveConfig, Mode, System};
use crate::grid::{self, SizeGrid, Spectrum};
use std::sync::Arc;

/// Exact pure-fragmentation solution (lambda = 2, a0 = 1, nu = 0, K0 = 0).
pub fn pure_fragmentation_solution(t: f64, x: f64) -> f64 {
    let a = 1.0 + t;
    a * a * (-a * x).exp()
}

/// Exact constant-kernel solution (K = 2, a0 = 0), initial e^(-x).
pub fn constant_kernel_solution(t: f64, x: f64) -> f64 {
    let a = 1.0 / (1.0 + t);
    a * a * (-a * x).exp()
}

/// Result of an oracle comparison run.
#[derive(Debug, Clone)]
pub struct OracleRun {
    /// (time, L1(x dx) error against the projected analytic solution)
    pub errors: Vec<(f64, f64)>,
    /// error at the final time
    pub final_error: f64,
}

fn compare_run<FExact>(
    system: &System,
    grid: &Arc<SizeGrid>,
    t_end: f64,
    exact: FExact,
) -> Result<OracleRun, DynError>
where
    FExact: Fn(f64, f64) -> f64,
{
    let f0 = grid::project(|x| exact(0.0, x), grid)?;
    let mut config = EvolveConfig::physical(t_end);
    config.snapshot_every = t_end / 10.0;
    config.dt_max = t_end / 100.0;
    config.store_snapshots = true;
    let out = system.evolve(&f0, &config)?;
    let mut errors = Vec::new();
    for (row, snap) in out.record.rows.iter().zip(out.record.snapshots.iter()) {
        let reference = grid::project(|x| exact(row.time, x), grid)?;
        errors.push((row.time, grid::x1_distance(snap, &reference)));
    }
    let final_error = errors.last().map(|e| e.1).unwrap_or(f64::NAN);
    Ok(OracleRun {
        errors,
        final_error,
    })
}

/// Evolve the pure-fragmentation configuration and compare against the
/// closed form at every snapshot.
pub fn run_fragmentation_oracle(
    grid: &Arc<SizeGrid>,
    t_end: f64,
) -> Result<OracleRun, DynError> {
    let coeffs = CoefficientSet::new(2.0, 1.0, 0.0, 1.0);
    let daughter = DaughterSpec::power_law(0.0).expect("nu = 0 admissible");
    let params = DiagnosticParams::defaults(&CoefficientSet::new(2.0, 1.0, 1.0, 1.0), &daughter)
        .expect("reference parameters");
    let system = System::assemble(grid, &coeffs, Some(&daughter), params, None)?;
    compare_run(&system, grid, t_end, pure_fragmentation_solution)
}

/// Evolve the constant-kernel configuration and compare against the closed
/// form at every snapshot.
pub fn run_constant_kernel_oracle(
    grid: &Arc<SizeGrid>,
    t_end: f64,
) -> Result<OracleRun, DynError> {
    let coeffs = CoefficientSet::new(2.0, 1.0, 1.0, 0.0);
    let daughter = DaughterSpec::power_law(0.0).expect("nu = 0 admissible");
    let params = DiagnosticParams::defaults(&CoefficientSet::new(2.0, 1.0, 1.0, 1.0), &daughter)
        .expect("reference parameters");
    let system = System::assemble(
        grid,
        &coeffs,
        None,
        params,
        Some(Kernel::Constant { k0: 2.0 }),
    )?;
    compare_run(&system, grid, t_end, constant_kernel_solution)
}

/// Verify a closed form against the equation it claims to solve by comparing
/// a centered time difference with the right-hand side evaluated by
/// quadrature at sample points. Returns the worst relative defect.
pub fn substitution_defect_fragmentation() -> f64 {
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for &(t, x) in &[(0.5, 0.3), (1.0, 1.7), (2.0, 0.05)] {
        let dfdt = (pure_fragmentation_solution(t + h, x) - pure_fragmentation_solution(t - h, x))
            / (2.0 * h);
        // RHS = -x f + 2 int_x^inf f(t,y) dy, closed tail integral
        let a = 1.0 + t;
        let rhs = -x * pure_fragmentation_solution(t, x) + 2.0 * a * (-a * x).exp();
        worst = worst.max((dfdt - rhs).abs() / rhs.abs().max(1e-12));
    }
    worst
}

/// Same check for the constant-kernel closed form.
pub fn substitution_defect_constant_kernel() -> f64 {
    let h = 1e-5;
    let mut worst = 0.0_f64;
    for &(t, x) in &[(0.5, 0.3), (1.0, 1.7), (2.0, 4.0)] {
        let dfdt =
            (constant_kernel_solution(t + h, x) - constant_kernel_solution(t - h, x)) / (2.0 * h);
        let a = 1.0 / (1.0 + t);
        let f = constant_kernel_solution(t, x);
        // gain (1/2) int_0^x 2 f(y) f(x-y) dy = A^4 x e^(-Ax); loss 2 f M_0
        let gain = a.powi(4) * x * (-a * x).exp();
        let loss = 2.0 * f * a;
        let rhs = gain - loss;
        worst = worst.max((dfdt - rhs).abs() / rhs.abs().max(1e-12));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_satisfy_their_equations() {
        assert!(substitution_defect_fragmentation() < 1e-8);
        assert!(substitution_defect_constant_kernel() < 1e-8);
    }

    #[test]
    fn fragmentation_oracle_converges() {
        let grid = SizeGrid::new(1e-6, 1e3, 128).unwrap();
        let run = run_fragmentation_oracle(&grid, 0.5).unwrap();
        assert!(run.final_error < 5e-3, "error {}", run.final_error);
    }

    #[test]
    fn constant_kernel_oracle_converges() {
        let grid = SizeGrid::new(1e-6, 1e3, 128).unwrap();
        let run = run_constant_kernel_oracle(&grid, 0.5).unwrap();
        assert!(run.final_error < 2e-2, "error {}", run.final_error);
    }
}
