//! Stand-alone checkers for the inequalities and functionals the analysis
//! rests on, runnable against spectra and trajectory records.
//!
//! Key quantities:
//!
//! ```text
//! U_m(h)     = int x ln x h dx + 3/(e (1-m)) M_m(h)
//! delta_rho  = K0 ln2 (rho_star - rho) / 2
//! delta_rho_m = a0 (1 - b_{1+lambda-alpha,1}) rho^((1-lambda)/(m-1)) / 8
//! (AIL)      : (x+y) ln(x+y) - x ln x - y ln y <= 2 ln2 sqrt(xy)
//! ```
//!
//! The invariant-set report lists the norm/moment quantities whose
//! boundedness characterises states the rescaled flow preserves; the bounds
//! themselves involve non-explicit constants, so entries are value reports,
//! not pass/fail gates.

use crate::coefficients::{
    mollify, rho_star, CoeffError, CoefficientSet, DaughterDistribution, DaughterSpec,
    DiagnosticParams, Kernel,
};
use crate::dynamics::{Mode, TrajectoryRecord};
use crate::grid::{self, SizeGrid, Spectrum};
use crate::operators::{weak_coagulation_pairing, TestFunction, TransportOp, TransportScheme};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagError {
    #[error("record too coarse: need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("record has no stored snapshots; rerun with store_snapshots")]
    NoSnapshots,
    #[error(transparent)]
    Coeff(#[from] CoeffError),
}

/// Report of one sampled inequality check.
#[derive(Debug, Clone)]
pub struct InequalityReport {
    pub name: String,
    pub samples: usize,
    pub violations: usize,
    /// largest observed lhs - rhs (negative margins mean slack)
    pub worst_margin: f64,
    pub context: String,
}

/// Lyapunov functional U_m = int x ln x h dx + 3/(e(1-m)) M_m(h), m in [m1, 1).
pub fn lyapunov_u(spec: &Spectrum, m: f64) -> f64 {
    assert!(m < 1.0, "U_m needs a sublinear order m < 1");
    grid::log_moment(spec) + 3.0 / (std::f64::consts::E * (1.0 - m)) * grid::moment(spec, m)
}

/// delta_rho = K0 ln2 (rho_star - rho) / 2; non-positive at and above the
/// threshold (reported, not an error).
pub fn delta_rho(coeffs: &CoefficientSet, daughter: &dyn DaughterDistribution, rho: f64) -> f64 {
    let rs = rho_star(coeffs, daughter);
    coeffs.k0 * std::f64::consts::LN_2 * (rs - rho) / 2.0
}

/// delta_rho_m = a0 (1 - b_{1+lambda-alpha,1}) rho^((1-lambda)/(m-1)) / 8.
pub fn delta_rho_m(
    coeffs: &CoefficientSet,
    daughter: &dyn DaughterDistribution,
    rho: f64,
    m: f64,
) -> Result<f64, CoeffError> {
    let b = daughter.moment(1.0 + coeffs.lambda - coeffs.alpha, 1.0)?;
    Ok(coeffs.a0 * (1.0 - b) * rho.powf((1.0 - coeffs.lambda) / (m - 1.0)) / 8.0)
}

fn ail_sides(x: f64, y: f64) -> (f64, f64) {
    let lhs = (x + y) * (x + y).ln() - x * x.ln() - y * y.ln();
    let rhs = 2.0 * std::f64::consts::LN_2 * (x * y).sqrt();
    (lhs, rhs)
}

/// Sample the additive-log inequality
/// (x+y)ln(x+y) - x ln x - y ln y <= 2 ln2 sqrt(xy)
/// at log-uniform points of `range`^2. A violation is an excess beyond the
/// floating-point slack 1e-12 max(1, |rhs|).
pub fn check_ail(samples: usize, range: (f64, f64), seed: u64) -> InequalityReport {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let (lo, hi) = range;
    let log_ratio = (hi / lo).ln();
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..samples {
        let x = lo * (rng.gen::<f64>() * log_ratio).exp();
        let y = lo * (rng.gen::<f64>() * log_ratio).exp();
        let (lhs, rhs) = ail_sides(x, y);
        let margin = lhs - rhs;
        worst = worst.max(margin);
        if margin > 1e-12 * rhs.abs().max(1.0) {
            violations += 1;
        }
    }
    InequalityReport {
        name: "additive-log inequality".into(),
        samples,
        violations,
        worst_margin: worst,
        context: format!("log-uniform on ({lo:.3e}, {hi:.3e})^2, seed {seed}"),
    }
}

/// Worst relative |lhs - rhs| on the diagonal x = y, where the inequality is
/// an identity: both sides equal 2 x ln 2.
pub fn ail_diagonal_margin(samples: usize, range: (f64, f64), seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (lo, hi) = range;
    let log_ratio = (hi / lo).ln();
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let x = lo * (rng.gen::<f64>() * log_ratio).exp();
        let (lhs, rhs) = ail_sides(x, x);
        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
    }
    worst
}

/// Value report of the invariant-set quantities: mass against the target,
/// the Lyapunov combination, the moments M_m0, M_mu1, M_(1+lambda),
/// M_(2+lambda), the weighted L^q1 integral, and the two strongly
/// regularisation-dependent entries (M_(lambda-2) and the total variation of
/// the cell values), reported raw.
#[derive(Debug, Clone)]
pub struct InvariantSetReport {
    pub entries: Vec<(String, f64)>,
}

pub fn invariant_set_report(
    spec: &Spectrum,
    coeffs: &CoefficientSet,
    _daughter: &dyn DaughterDistribution,
    rho: f64,
    params: &DiagnosticParams,
) -> InvariantSetReport {
    let lam = coeffs.lambda;
    let tv: f64 = spec.values.windows(2).map(|w| (w[1] - w[0]).abs()).sum();
    let entries = vec![
        ("M_1".into(), grid::moment(spec, 1.0)),
        ("M_1_minus_rho".into(), grid::moment(spec, 1.0) - rho),
        ("lyapunov_U_m1".into(), lyapunov_u(spec, params.m1)),
        (format!("M_{:.6}", params.m0), grid::moment(spec, params.m0)),
        (format!("M_{:.6}", params.mu1), grid::moment(spec, params.mu1)),
        (format!("M_{:.6}", 1.0 + lam), grid::moment(spec, 1.0 + lam)),
        (format!("M_{:.6}", 2.0 + lam), grid::moment(spec, 2.0 + lam)),
        (
            format!("Lq_norm_m{:.3}_q{:.3}", params.m1, params.q1),
            grid::weighted_lq_norm(spec, params.m1, params.q1),
        ),
        (format!("M_{:.6}", lam - 2.0), grid::moment(spec, lam - 2.0)),
        ("total_variation".into(), tv),
    ];
    InvariantSetReport { entries }
}

/// Moment of order m evaluated at the pivots (the quadrature the pairing
/// sums use): sum_i x_i^m N_i.
pub fn pivot_moment(spec: &Spectrum, m: f64) -> f64 {
    let g = &spec.grid;
    let terms: Vec<f64> = (0..g.n_cells)
        .map(|i| g.pivots[i].powf(m) * spec.values[i] * g.widths[i])
        .collect();
    grid::pairwise_sum(&terms)
}

#[derive(Debug, Clone)]
pub struct BalanceCheck {
    pub m: f64,
    /// max over interior snapshots of |dM_m/ds (FD) - weak RHS| / norm
    pub max_defect: f64,
    /// normalisation used (largest of the two sides and a mass-based floor)
    pub norm: f64,
}

/// Compare the centred finite difference of M_m along a record against the
/// instantaneous weak-form right-hand side with theta = x^m:
///
/// ```text
/// dM_m/ds = (m-1) M_m [rescaled only]
///         + (1/2) sum K chi_m N N - a0 (1 - b_{m,1}) Mhat_(m+lambda-1).
/// ```
pub fn moment_balance_check(
    record: &TrajectoryRecord,
    coeffs: &CoefficientSet,
    daughter: &dyn DaughterDistribution,
    kernel: Option<Kernel>,
    m: f64,
) -> Result<BalanceCheck, DiagError> {
    if record.rows.len() < 3 {
        return Err(DiagError::TooFewRows {
            need: 3,
            got: record.rows.len(),
        });
    }
    if record.snapshots.len() != record.rows.len() {
        return Err(DiagError::NoSnapshots);
    }
    let kernel = kernel.unwrap_or_else(|| Kernel::from_coefficients(coeffs));
    let theta = TestFunction::power(m);
    let b_m1 = daughter.moment(m, 1.0)?;
    let moments: Vec<f64> = record
        .snapshots
        .iter()
        .map(|s| grid::moment(s, m))
        .collect();
    let rho_scale = record
        .rows
        .iter()
        .map(|r| r.m_1)
        .fold(0.0_f64, f64::max);

    let mut max_abs_defect = 0.0_f64;
    let mut sup_fd = 0.0_f64;
    let mut sup_rhs = 0.0_f64;
    for k in 1..record.rows.len() - 1 {
        let dt = record.rows[k + 1].time - record.rows[k - 1].time;
        let fd = (moments[k + 1] - moments[k - 1]) / dt;
        let snap = &record.snapshots[k];
        let coag = if coeffs.k0 > 0.0 || matches!(kernel, Kernel::Constant { .. }) {
            weak_coagulation_pairing(snap, &kernel, &theta)
        } else {
            0.0
        };
        let frag = if coeffs.a0 > 0.0 {
            coeffs.a0 * (1.0 - b_m1) * pivot_moment(snap, m + coeffs.lambda - 1.0)
        } else {
            0.0
        };
        let drift = match record.mode {
            Mode::Rescaled => (m - 1.0) * grid::moment(snap, m),
            Mode::Physical => 0.0,
        };
        let rhs = drift + coag - frag;
        sup_fd = sup_fd.max(fd.abs());
        sup_rhs = sup_rhs.max(rhs.abs());
        max_abs_defect = max_abs_defect.max((fd - rhs).abs());
    }
    let norm = sup_fd.max(sup_rhs).max(0.05 * rho_scale);
    Ok(BalanceCheck {
        m,
        max_defect: max_abs_defect / norm,
        norm,
    })
}

/// Result of one named property suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Run the cross-module property suites with the given sampling budget.
/// These are the checks behind the command-line `verify` scenario.
pub fn run_property_suites(seed: u64, ail_samples: usize) -> Vec<SuiteResult> {
    let mut out = Vec::new();

    // additive-log inequality, off and on the diagonal
    let ail = check_ail(ail_samples, (1e-6, 1e6), seed);
    out.push(SuiteResult {
        name: "ail".into(),
        pass: ail.violations == 0,
        detail: format!(
            "{} samples, {} violations, worst margin {:.3e}",
            ail.samples, ail.violations, ail.worst_margin
        ),
    });
    let diag = ail_diagonal_margin(ail_samples / 10, (1e-6, 1e6), seed);
    out.push(SuiteResult {
        name: "ail_diagonal".into(),
        pass: diag < 1e-12,
        detail: format!("worst relative margin {diag:.3e}"),
    });

    // kernel symmetry and homogeneity
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xabcd);
    let mut worst_sym = 0.0_f64;
    let mut worst_hom = 0.0_f64;
    for coeffs in [
        CoefficientSet::new(2.0, 1.0, 1.0, 1.0),
        CoefficientSet::new(1.5, 0.75, 0.8, 1.3),
        CoefficientSet::new(1.7, 0.8, 1.0, 0.5),
    ] {
        for _ in 0..2000 {
            let x = 1e-5 * (rng.gen::<f64>() * 23.0).exp();
            let y = 1e-5 * (rng.gen::<f64>() * 23.0).exp();
            let k = coeffs.kernel(x, y);
            worst_sym = worst_sym.max((k - coeffs.kernel(y, x)).abs() / k.max(1e-300));
            for r in [0.5, 2.0, 10.0] {
                let lhs = coeffs.kernel(r * x, r * y);
                let rhs = r.powf(coeffs.lambda) * k;
                worst_hom = worst_hom.max((lhs - rhs).abs() / rhs.max(1e-300));
            }
        }
    }
    out.push(SuiteResult {
        name: "kernel_symmetry_homogeneity".into(),
        pass: worst_sym <= 1e-13 && worst_hom <= 1e-12,
        detail: format!("worst symmetry {worst_sym:.3e}, worst homogeneity {worst_hom:.3e}"),
    });

    // daughter moments: closed form against the quadrature oracle
    let mut worst_dm = 0.0_f64;
    for nu in [0.0, -0.5, -1.0] {
        let d = DaughterSpec::power_law(nu).unwrap();
        for m in [0.0, 0.5, 1.0, 2.0, 3.0] {
            if !d.admissible(m, 1.0) {
                continue;
            }
            let closed = d.moment(m, 1.0).unwrap();
            let oracle = crate::quad::integrate_power_weighted(
                |_| nu + 2.0,
                m + nu,
                1.0,
                1e-13,
                1e-13,
            )
            .unwrap();
            worst_dm = worst_dm.max((closed - oracle).abs());
        }
    }
    out.push(SuiteResult {
        name: "daughter_moments".into(),
        pass: worst_dm < 1e-10,
        detail: format!("worst closed-form vs quadrature gap {worst_dm:.3e}"),
    });

    // mollifier family: normalisation, support, log-moment convergence
    let d0 = DaughterSpec::power_law(0.0).unwrap();
    let coeffs_ref = CoefficientSet::new(2.0, 1.0, 1.0, 1.0);
    let rs = rho_star(&coeffs_ref, &d0);
    let mut moll_ok = true;
    let mut detail = String::new();
    let mut last_gap = f64::INFINITY;
    for eps in [0.1, 0.05, 0.025, 0.0125] {
        match mollify(&d0, eps) {
            Ok(md) => {
                let norm_gap = (md.mass_cdf(1.0) - 1.0).abs();
                let cut = eps - eps * eps;
                let support_ok = md
                    .z
                    .iter()
                    .zip(md.b.iter())
                    .all(|(z, b)| *z > cut || *b == 0.0);
                let gap = (md.log_moment() - d0.log_moment()).abs();
                let rs_eps = crate::coefficients::rho_star_eps(&coeffs_ref, &md);
                let rs_gap = (rs_eps - rs).abs() / rs;
                moll_ok &= norm_gap < 1e-10 && support_ok && gap < last_gap;
                if eps == 0.0125 {
                    moll_ok &= gap < 1e-2 && rs_gap < 2e-2;
                }
                detail.push_str(&format!("eps={eps}: |b_ln gap|={gap:.3e}; "));
                last_gap = gap;
            }
            Err(e) => {
                moll_ok = false;
                detail.push_str(&format!("eps={eps}: {e}; "));
            }
        }
    }
    out.push(SuiteResult {
        name: "mollifier".into(),
        pass: moll_ok,
        detail,
    });

    // exact mass ledgers of the discrete operators
    let ledger = operator_ledger_suite();
    out.push(ledger);

    // delta_rho monotone, vanishing at the threshold
    let d_mid = delta_rho(&coeffs_ref, &d0, 0.5 * rs);
    let d_hi = delta_rho(&coeffs_ref, &d0, 0.9 * rs);
    let d_star = delta_rho(&coeffs_ref, &d0, rs);
    let drm = delta_rho_m(&coeffs_ref, &d0, 0.5 * rs, 1.0 + coeffs_ref.lambda).unwrap();
    let expected_mid = std::f64::consts::LN_2 * rs / 4.0;
    let pass = d_mid > d_hi
        && d_hi > 0.0
        && d_star.abs() < 1e-15
        && drm > 0.0
        && (d_mid - expected_mid).abs() < 1e-12
        && (d_mid - 0.0625).abs() < 1e-6;
    out.push(SuiteResult {
        name: "delta_rho".into(),
        pass,
        detail: format!(
            "delta(rho*/2)={d_mid:.6}, delta(0.9 rho*)={d_hi:.6}, delta(rho*)={d_star:.1e}, delta_m={drm:.4}"
        ),
    });

    out
}

fn operator_ledger_suite() -> SuiteResult {
    use crate::operators::{CoagulationOp, FragmentationOp};
    let grid = SizeGrid::new(1e-6, 1e3, 192).unwrap();
    let spec = grid::project(|x: f64| (-x).exp() * (1.0 + 0.3 * (x.ln()).sin()), &grid).unwrap();
    let coeffs = CoefficientSet::new(2.0, 1.0, 1.0, 1.0);
    let d = DaughterSpec::power_law(0.0).unwrap();

    let mut worst = 0.0_f64;
    let coag = CoagulationOp::new(&grid, Kernel::from_coefficients(&coeffs));
    let (rate, gel) = coag.apply(&spec);
    worst = worst.max(ledger_defect(&rate, gel));
    let frag = FragmentationOp::new(&grid, &coeffs, &d).unwrap();
    let (rate, dust) = frag.apply(&spec);
    worst = worst.max(ledger_defect(&rate, dust));
    let transport = TransportOp::new(&grid, TransportScheme::default());
    let (rate, out) = transport.apply(&spec);
    worst = worst.max(ledger_defect(&rate, out));

    SuiteResult {
        name: "operator_mass_ledger".into(),
        pass: worst <= 1e-13,
        detail: format!("worst normalised ledger defect {worst:.3e}"),
    }
}

fn ledger_defect(rate: &Spectrum, boundary_flux: f64) -> f64 {
    let g = &rate.grid;
    let terms: Vec<f64> = rate
        .values
        .iter()
        .zip(g.mass_weights.iter())
        .map(|(v, w)| v * w)
        .collect();
    let total = grid::pairwise_sum(&terms);
    let activity: f64 = terms.iter().map(|t| t.abs()).sum::<f64>() + boundary_flux.abs();
    if activity == 0.0 {
        return 0.0;
    }
    (total + boundary_flux).abs() / activity
}
