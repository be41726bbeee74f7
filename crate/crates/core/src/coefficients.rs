//! Coefficient family for the coagulation-fragmentation system.
//!
//! Coagulation kernel, overall fragmentation rate and daughter distribution:
//!
//! ```text
//! K(x,y) = K0 (x^alpha y^(lambda-alpha) + x^(lambda-alpha) y^alpha)
//! a(x)   = a0 x^(lambda-1)
//! b(x,y) = B(x/y) / y,   B >= 0 on (0,1),   int_0^1 z B(z) dz = 1
//! ```
//!
//! with homogeneity degree lambda in (1,2], kernel exponent alpha in
//! [max(1/2, lambda-1), lambda/2], and a daughter profile whose small-size
//! behaviour is governed by an exponent nu in (-2, 0]. The admissible moment
//! set is
//!
//! ```text
//! A_nu = { (m,p) : m > -1, p >= 1, m + p nu > -1 },   b_{m,p} = int z^m B(z)^p dz.
//! ```
//!
//! The mass threshold below which self-similar profiles are sought is
//! `rho_star = a0 * b_ln / (2 K0 ln 2)` with `b_ln = int z |ln z| B(z) dz`.

use crate::quad::{self, QuadError};
use std::fmt;
use thiserror::Error;

/// Smallest number of tabulation nodes for the mollified daughter profile.
const MOLLIFIED_TABLE_MIN: usize = 4096;
/// Upper bound on the tabulation length (memory guard for very small eps).
const MOLLIFIED_TABLE_MAX: usize = 1 << 20;
/// Smallest accepted normalisation constant beta_eps; below this the
/// mollification has eaten too much of the profile and eps is rejected.
const BETA_EPS_MIN: f64 = 0.5;
/// Tolerance on the mass normalisation of user-supplied daughter tables.
const TABLE_NORMALISATION_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CoeffError {
    #[error("nu = {0} outside (-2, 0]")]
    NuOutOfRange(f64),
    #[error("eps = {eps} too large: normalisation beta_eps = {beta:.6} <= {min}")]
    EpsTooLarge { eps: f64, beta: f64, min: f64 },
    #[error("eps = {0} outside (0, 1)")]
    EpsOutOfRange(f64),
    #[error("moment order (m={m}, p={p}) outside the admissible set for nu = {nu}")]
    OutsideAdmissibleSet { m: f64, p: f64, nu: f64 },
    #[error("daughter table invalid: {0}")]
    BadTable(String),
    #[error("daughter table normalisation off by {0:.3e} (tolerance {TABLE_NORMALISATION_TOL:.0e})")]
    BadNormalisation(f64),
    #[error("no valid integrability exponent q1 exists for these parameters")]
    NoValidQ1,
    #[error("quadrature failure: {0}")]
    Quad(#[from] QuadError),
}

/// Homogeneous kernel/rate parameters.
///
/// `gamma` is tied to `lambda` (gamma = lambda - 1); the constructor enforces
/// this so the scale invariance of the equation is never silently broken.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientSet {
    pub lambda: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub k0: f64,
    pub a0: f64,
}

impl CoefficientSet {
    pub fn new(lambda: f64, alpha: f64, k0: f64, a0: f64) -> Self {
        Self {
            lambda,
            alpha,
            gamma: lambda - 1.0,
            k0,
            a0,
        }
    }

    /// K(x,y) = K0 (x^alpha y^(lambda-alpha) + x^(lambda-alpha) y^alpha).
    /// Symmetric in (x,y) and homogeneous of degree lambda.
    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        debug_assert!(x > 0.0 && y > 0.0);
        let b = self.lambda - self.alpha;
        self.k0 * (x.powf(self.alpha) * y.powf(b) + x.powf(b) * y.powf(self.alpha))
    }

    /// a(x) = a0 x^(lambda - 1).
    pub fn frag_rate(&self, x: f64) -> f64 {
        debug_assert!(x > 0.0);
        self.a0 * x.powf(self.gamma)
    }
}

/// Coagulation kernel abstraction used by the discrete operators. The
/// constant kernel sits outside the homogeneous family and exists for
/// validation against closed-form solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Homogeneous { k0: f64, alpha: f64, lambda: f64 },
    Constant { k0: f64 },
}

impl Kernel {
    pub fn from_coefficients(c: &CoefficientSet) -> Self {
        Kernel::Homogeneous {
            k0: c.k0,
            alpha: c.alpha,
            lambda: c.lambda,
        }
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            Kernel::Homogeneous { k0, alpha, lambda } => {
                let b = lambda - alpha;
                k0 * (x.powf(alpha) * y.powf(b) + x.powf(b) * y.powf(alpha))
            }
            Kernel::Constant { k0 } => k0,
        }
    }
}

/// One violated admissibility constraint. Violations are data, not faults:
/// `validate` returns the full list so a configuration error message can name
/// every broken constraint at once.
#[derive(Debug, Clone, PartialEq)]
pub enum AdmissibilityViolation {
    LambdaOutOfRange { lambda: f64 },
    AlphaOutOfRange { alpha: f64, lo: f64, hi: f64 },
    GammaInconsistent { gamma: f64, lambda: f64 },
    K0NotPositive { k0: f64 },
    A0NotPositive { a0: f64 },
    NuOutOfRange { nu: f64 },
    AlphaVsNu { alpha: f64, nu: f64 },
    DaughterNegative { z: f64, value: f64 },
    DaughterNotNormalised { mass: f64 },
}

impl fmt::Display for AdmissibilityViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use AdmissibilityViolation::*;
        match self {
            LambdaOutOfRange { lambda } => {
                write!(f, "lambda = {lambda} must lie in (1, 2]")
            }
            AlphaOutOfRange { alpha, lo, hi } => {
                write!(f, "alpha = {alpha} must lie in [max(1/2, lambda-1), lambda/2] = [{lo}, {hi}]")
            }
            GammaInconsistent { gamma, lambda } => {
                write!(f, "gamma = {gamma} must equal lambda - 1 = {}", lambda - 1.0)
            }
            K0NotPositive { k0 } => write!(f, "K0 = {k0} must be positive"),
            A0NotPositive { a0 } => write!(f, "a0 = {a0} must be positive"),
            NuOutOfRange { nu } => write!(f, "nu = {nu} must lie in (-2, 0]"),
            AlphaVsNu { alpha, nu } => {
                write!(f, "alpha = {alpha} must exceed -nu-1 = {}", -nu - 1.0)
            }
            DaughterNegative { z, value } => {
                write!(f, "daughter profile negative at z = {z}: {value}")
            }
            DaughterNotNormalised { mass } => {
                write!(f, "daughter mass int z B(z) dz = {mass} differs from 1")
            }
        }
    }
}

/// Check every admissibility constraint of the coefficient family. Returns
/// the empty list iff the pair (coefficients, daughter) is admissible.
pub fn validate(coeffs: &CoefficientSet, daughter: &DaughterSpec) -> Vec<AdmissibilityViolation> {
    use AdmissibilityViolation::*;
    let mut v = Vec::new();
    let lam = coeffs.lambda;
    if !(lam > 1.0 && lam <= 2.0) {
        v.push(LambdaOutOfRange { lambda: lam });
    }
    let lo = (0.5_f64).max(lam - 1.0);
    let hi = lam / 2.0;
    if !(coeffs.alpha >= lo && coeffs.alpha <= hi) {
        v.push(AlphaOutOfRange {
            alpha: coeffs.alpha,
            lo,
            hi,
        });
    }
    if (coeffs.gamma - (lam - 1.0)).abs() > 1e-14 {
        v.push(GammaInconsistent {
            gamma: coeffs.gamma,
            lambda: lam,
        });
    }
    if !(coeffs.k0 > 0.0) {
        v.push(K0NotPositive { k0: coeffs.k0 });
    }
    if !(coeffs.a0 > 0.0) {
        v.push(A0NotPositive { a0: coeffs.a0 });
    }
    let nu = daughter.nu;
    if !(nu > -2.0 && nu <= 0.0) {
        v.push(NuOutOfRange { nu });
    }
    if !(coeffs.alpha > -nu - 1.0) {
        v.push(AlphaVsNu {
            alpha: coeffs.alpha,
            nu,
        });
    }
    if let DaughterProfile::Table { z, b } = &daughter.profile {
        for (&zi, &bi) in z.iter().zip(b.iter()) {
            if bi < 0.0 {
                v.push(DaughterNegative { z: zi, value: bi });
                break;
            }
        }
        // the table is renormalised at construction; re-check by quadrature
        let mass = daughter.mass_cdf(1.0);
        if (mass - 1.0).abs() > TABLE_NORMALISATION_TOL {
            v.push(DaughterNotNormalised { mass });
        }
    }
    v
}

/// Common interface of the raw and mollified daughter profiles. Everything
/// downstream (fragmentation assembly, weak-form pairings, thresholds) is
/// written against this.
pub trait DaughterDistribution {
    /// B(z) for z in (0,1); zero outside.
    fn eval(&self, z: f64) -> f64;
    /// Mass CDF: Phi(w) = int_0^min(w,1) z B(z) dz. Phi(1) = 1.
    fn mass_cdf(&self, w: f64) -> f64;
    /// b_{m,p} = int_0^1 z^m B(z)^p dz.
    fn moment(&self, m: f64, p: f64) -> Result<f64, CoeffError>;
    /// b_ln = int_0^1 z |ln z| B(z) dz.
    fn log_moment(&self) -> f64;
    /// Fragment count fraction int_a^b B(z) dz over [a,b] intersected with
    /// (0,1). May be infinite when a = 0 and B is not integrable there.
    fn number_between(&self, a: f64, b: f64) -> f64;
    /// Infimum of the support of B (0 for raw profiles, eps - eps^2 after
    /// mollification).
    fn support_lower(&self) -> f64;
}

#[derive(Debug, Clone, PartialEq)]
pub enum DaughterProfile {
    /// B(z) = (nu + 2) z^nu, normalised by construction.
    PowerLaw,
    /// User-supplied tabulation on strictly increasing nodes in (0,1),
    /// renormalised at load time. Below the first node the profile is
    /// extended by the declared power law, above the last node it is held
    /// constant.
    Table { z: Vec<f64>, b: Vec<f64> },
}

/// Scaling daughter profile with small-size exponent nu in (-2, 0].
#[derive(Debug, Clone, PartialEq)]
pub struct DaughterSpec {
    pub nu: f64,
    pub profile: DaughterProfile,
}

impl DaughterSpec {
    pub fn power_law(nu: f64) -> Result<Self, CoeffError> {
        if !(nu > -2.0 && nu <= 0.0) {
            return Err(CoeffError::NuOutOfRange(nu));
        }
        Ok(Self {
            nu,
            profile: DaughterProfile::PowerLaw,
        })
    }

    /// Build from tabulated (z, B(z)) pairs. Validates monotone nodes and
    /// non-negativity, checks the mass normalisation by quadrature to within
    /// 1e-6, then renormalises exactly.
    pub fn from_table(nu: f64, points: &[(f64, f64)]) -> Result<Self, CoeffError> {
        if !(nu > -2.0 && nu <= 0.0) {
            return Err(CoeffError::NuOutOfRange(nu));
        }
        if points.len() < 2 {
            return Err(CoeffError::BadTable("need at least two nodes".into()));
        }
        let mut z = Vec::with_capacity(points.len());
        let mut b = Vec::with_capacity(points.len());
        for &(zi, bi) in points {
            if !(zi > 0.0 && zi < 1.0) {
                return Err(CoeffError::BadTable(format!("node z = {zi} outside (0,1)")));
            }
            if let Some(&prev) = z.last() {
                if zi <= prev {
                    return Err(CoeffError::BadTable(format!(
                        "nodes must be strictly increasing ({prev} then {zi})"
                    )));
                }
            }
            if !bi.is_finite() || bi < 0.0 {
                return Err(CoeffError::BadTable(format!("B({zi}) = {bi} invalid")));
            }
            z.push(zi);
            b.push(bi);
        }
        let raw = Self {
            nu,
            profile: DaughterProfile::Table { z, b },
        };
        let mass = raw.table_integral(1.0, 1.0, 1.0);
        if (mass - 1.0).abs() > TABLE_NORMALISATION_TOL {
            return Err(CoeffError::BadNormalisation(mass - 1.0));
        }
        let DaughterProfile::Table { z, mut b } = raw.profile else {
            unreachable!()
        };
        for v in &mut b {
            *v /= mass;
        }
        Ok(Self {
            nu,
            profile: DaughterProfile::Table { z, b },
        })
    }

    /// Parse a two-column CSV `z,B(z)`. A single non-numeric header line is
    /// tolerated; blank lines are skipped.
    pub fn from_csv(nu: f64, text: &str) -> Result<Self, CoeffError> {
        let mut pts = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut cols = line.split(',').map(str::trim);
            let (c0, c1) = (cols.next().unwrap_or(""), cols.next().unwrap_or(""));
            match (c0.parse::<f64>(), c1.parse::<f64>()) {
                (Ok(z), Ok(bz)) => pts.push((z, bz)),
                _ if idx == 0 => continue, // header
                _ => {
                    return Err(CoeffError::BadTable(format!(
                        "line {}: cannot parse `{line}`",
                        idx + 1
                    )))
                }
            }
        }
        Self::from_table(nu, &pts)
    }

    /// (m, p) membership in the admissible set A_nu.
    pub fn admissible(&self, m: f64, p: f64) -> bool {
        m > -1.0 && p >= 1.0 && m + p * self.nu > -1.0
    }

    /// Integral of z^m B(z)^p over (0, w) for the tabulated profile, split
    /// into the closed-form power tail below the first node, exact fixed
    /// quadrature on each linear segment, and the constant extension up to 1.
    fn table_integral(&self, m: f64, p: f64, w: f64) -> f64 {
        let DaughterProfile::Table { z, b } = &self.profile else {
            unreachable!("table_integral on non-table profile")
        };
        let w = w.clamp(0.0, 1.0);
        if w == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        // power-law piece on (0, min(w, z_0)): B = b0 (z/z0)^nu
        let head = w.min(z[0]);
        let expt = m + p * self.nu + 1.0;
        debug_assert!(expt > 0.0);
        acc += b[0].powf(p) * z[0].powf(-p * self.nu) * head.powf(expt) / expt;
        // linear segments
        for k in 0..z.len() - 1 {
            if z[k] >= w {
                return acc;
            }
            let hi = z[k + 1].min(w);
            acc += quad::fixed(
                |x| {
                    let t = (x - z[k]) / (z[k + 1] - z[k]);
                    let bx = b[k] + t * (b[k + 1] - b[k]);
                    x.powf(m) * bx.powf(p)
                },
                z[k],
                hi,
            )
            .unwrap_or(0.0);
        }
        // constant extension on (z_last, min(w, 1))
        let zl = *z.last().unwrap();
        if w > zl {
            let bl = *b.last().unwrap();
            let tail = if (m + 1.0).abs() < 1e-12 {
                (w / zl).ln()
            } else {
                (w.powf(m + 1.0) - zl.powf(m + 1.0)) / (m + 1.0)
            };
            acc += bl.powf(p) * tail;
        }
        acc
    }

    /// Integral of z |ln z| B(z) over (0, 1) for the tabulated profile.
    fn table_log_integral(&self) -> f64 {
        let DaughterProfile::Table { z, b } = &self.profile else {
            unreachable!()
        };
        // head: int_0^z0 z^(1+nu) (-ln z) dz * b0 z0^(-nu), closed form
        let a = 1.0 + self.nu;
        let anti = |x: f64| x.powf(a + 1.0) * (1.0 - (a + 1.0) * x.ln()) / ((a + 1.0) * (a + 1.0));
        let mut acc = b[0] * z[0].powf(-self.nu) * anti(z[0]);
        for k in 0..z.len() - 1 {
            acc += quad::fixed(
                |x| {
                    let t = (x - z[k]) / (z[k + 1] - z[k]);
                    let bx = b[k] + t * (b[k + 1] - b[k]);
                    -x.ln() * x * bx
                },
                z[k],
                z[k + 1],
            )
            .unwrap_or(0.0);
        }
        let zl = *z.last().unwrap();
        if zl < 1.0 {
            acc += b.last().unwrap()
                * quad::fixed(|x| -x.ln() * x, zl, 1.0).unwrap_or(0.0);
        }
        acc
    }

    fn eval_unnormalised(&self, z: f64) -> f64 {
        match &self.profile {
            DaughterProfile::PowerLaw => {
                if z <= 0.0 || z >= 1.0 {
                    0.0
                } else {
                    (self.nu + 2.0) * z.powf(self.nu)
                }
            }
            DaughterProfile::Table { z: zs, b } => {
                if z <= 0.0 || z >= 1.0 {
                    return 0.0;
                }
                if z <= zs[0] {
                    return b[0] * (z / zs[0]).powf(self.nu);
                }
                if z >= *zs.last().unwrap() {
                    return *b.last().unwrap();
                }
                let k = zs.partition_point(|&n| n <= z) - 1;
                let t = (z - zs[k]) / (zs[k + 1] - zs[k]);
                b[k] + t * (b[k + 1] - b[k])
            }
        }
    }
}

impl DaughterDistribution for DaughterSpec {
    fn eval(&self, z: f64) -> f64 {
        self.eval_unnormalised(z)
    }

    fn mass_cdf(&self, w: f64) -> f64 {
        let w = w.clamp(0.0, 1.0);
        if w == 0.0 {
            return 0.0;
        }
        match &self.profile {
            DaughterProfile::PowerLaw => w.powf(self.nu + 2.0),
            DaughterProfile::Table { .. } => self.table_integral(1.0, 1.0, w),
        }
    }

    fn moment(&self, m: f64, p: f64) -> Result<f64, CoeffError> {
        if !self.admissible(m, p) {
            return Err(CoeffError::OutsideAdmissibleSet { m, p, nu: self.nu });
        }
        match &self.profile {
            DaughterProfile::PowerLaw => {
                // int (nu+2)^p z^(m + p nu) dz
                Ok((self.nu + 2.0).powf(p) / (m + p * self.nu + 1.0))
            }
            DaughterProfile::Table { .. } => Ok(self.table_integral(m, p, 1.0)),
        }
    }

    fn log_moment(&self) -> f64 {
        match &self.profile {
            DaughterProfile::PowerLaw => 1.0 / (self.nu + 2.0),
            DaughterProfile::Table { .. } => self.table_log_integral(),
        }
    }

    fn number_between(&self, a: f64, b: f64) -> f64 {
        let a = a.clamp(0.0, 1.0);
        let b = b.clamp(0.0, 1.0);
        if b <= a {
            return 0.0;
        }
        if a == 0.0 && self.nu <= -1.0 {
            return f64::INFINITY;
        }
        match &self.profile {
            DaughterProfile::PowerLaw => {
                let nu = self.nu;
                if (nu + 1.0).abs() < 1e-12 {
                    (nu + 2.0) * (b / a).ln()
                } else {
                    (nu + 2.0) * (b.powf(nu + 1.0) - a.powf(nu + 1.0)) / (nu + 1.0)
                }
            }
            DaughterProfile::Table { z, b: bt } => {
                let mut acc = 0.0;
                // head power piece on [a, min(b, z0)]
                if a < z[0] {
                    let hi = b.min(z[0]);
                    let nu = self.nu;
                    let head = if (nu + 1.0).abs() < 1e-12 {
                        bt[0] * z[0] * (hi / a).ln() // b0 z0^{-nu} = b0 z0 for nu=-1
                    } else {
                        bt[0] * z[0].powf(-nu) * (hi.powf(nu + 1.0) - a.powf(nu + 1.0)) / (nu + 1.0)
                    };
                    acc += head;
                }
                // linear segments intersecting [a, b]
                for k in 0..z.len() - 1 {
                    let lo = z[k].max(a);
                    let hi = z[k + 1].min(b);
                    if hi <= lo {
                        continue;
                    }
                    // trapezoid is exact on a linear segment
                    let t0 = (lo - z[k]) / (z[k + 1] - z[k]);
                    let t1 = (hi - z[k]) / (z[k + 1] - z[k]);
                    let f0 = bt[k] + t0 * (bt[k + 1] - bt[k]);
                    let f1 = bt[k] + t1 * (bt[k + 1] - bt[k]);
                    acc += 0.5 * (f0 + f1) * (hi - lo);
                }
                // constant extension above the last node
                let zl = *z.last().unwrap();
                if b > zl {
                    acc += bt.last().unwrap() * (b - zl.max(a));
                }
                acc
            }
        }
    }

    fn support_lower(&self) -> f64 {
        0.0
    }
}

/// Smooth bump zeta(z) = c (1 - z^2)^4 on (-1, 1), unit integral
/// (c = 315/256).
fn bump(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        return 0.0;
    }
    let t = 1.0 - z * z;
    (315.0 / 256.0) * t * t * t * t
}

/// eps-mollified daughter profile:
///
/// ```text
/// B_eps(z) = (1/beta_eps) int_eps^1 zeta_eps(z - z*) B(z*) dz*,
/// zeta_eps(z) = eps^-2 zeta(z eps^-2),
/// ```
///
/// tabulated on a uniform grid in [0,1] (at least `MOLLIFIED_TABLE_MIN`
/// nodes, refined so the eps^2-wide mollification ramp spans several nodes)
/// with linear interpolation and renormalised so that the interpolant satisfies
/// int z B_eps(z) dz = 1 exactly. The construction guarantees
/// B_eps(z) = 0 for z <= eps - eps^2 and finite total variation.
#[derive(Debug, Clone)]
pub struct MollifiedDaughter {
    pub eps: f64,
    pub beta_eps: f64,
    /// uniform nodes in [0,1]
    pub z: Vec<f64>,
    /// renormalised values of B_eps at the nodes
    pub b: Vec<f64>,
    /// mass CDF at the nodes (exact integral of the interpolant)
    mass_cum: Vec<f64>,
    /// count CDF at the nodes (exact trapezoid of the interpolant)
    number_cum: Vec<f64>,
    pub parent: DaughterSpec,
}

/// Mollify a daughter profile. Fails when eps is so large that the
/// normalisation constant drops to beta_eps <= 1/2.
pub fn mollify(daughter: &DaughterSpec, eps: f64) -> Result<MollifiedDaughter, CoeffError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(CoeffError::EpsOutOfRange(eps));
    }
    let e2 = eps * eps;
    let n = MOLLIFIED_TABLE_MIN
        .max((8.0 / e2).ceil() as usize)
        .min(MOLLIFIED_TABLE_MAX);
    let mut z = vec![0.0; n];
    let mut raw = vec![0.0; n];
    for k in 0..n {
        let zk = k as f64 / (n - 1) as f64;
        z[k] = zk;
        let lo = (zk - e2).max(eps);
        let hi = (zk + e2).min(1.0);
        if lo >= hi {
            raw[k] = 0.0;
            continue;
        }
        let v = quad::integrate(
            |zs| bump((zk - zs) / e2) / e2 * daughter.eval(zs),
            lo,
            hi,
            1e-13,
            1e-11,
        )?;
        raw[k] = v.max(0.0);
    }
    let beta = segment_mass(&z, &raw, z.len() - 1, 1.0);
    if beta <= BETA_EPS_MIN {
        return Err(CoeffError::EpsTooLarge {
            eps,
            beta,
            min: BETA_EPS_MIN,
        });
    }
    let b: Vec<f64> = raw.iter().map(|v| v / beta).collect();
    let mut mass_cum = vec![0.0; n];
    let mut number_cum = vec![0.0; n];
    for k in 1..n {
        mass_cum[k] = segment_mass(&z, &b, k, z[k]);
        number_cum[k] = number_cum[k - 1] + 0.5 * (b[k - 1] + b[k]) * (z[k] - z[k - 1]);
    }
    Ok(MollifiedDaughter {
        eps,
        beta_eps: beta,
        z,
        b,
        mass_cum,
        number_cum,
        parent: daughter.clone(),
    })
}

/// Exact int_0^w z * interp(z) dz for the piecewise-linear table, where the
/// upper limit w lies in segment `seg_end - 1 -> seg_end` territory: the sum
/// runs over whole segments up to index `upto` and the caller passes w = z[upto]
/// or a partial upper limit inside the last segment.
fn segment_mass(z: &[f64], b: &[f64], upto: usize, w: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..upto {
        let (z0, z1) = (z[k], z[k + 1]);
        let hi = if k + 1 == upto { w.min(z1) } else { z1 };
        if hi <= z0 {
            break;
        }
        acc += linear_mass_piece(z0, z1, b[k], b[k + 1], z0, hi);
    }
    acc
}

/// int_{lo}^{hi} z * (linear through (z0,b0),(z1,b1)) dz, exact.
fn linear_mass_piece(z0: f64, z1: f64, b0: f64, b1: f64, lo: f64, hi: f64) -> f64 {
    let h = z1 - z0;
    let slope = (b1 - b0) / h;
    // z*(b0 + slope*(z-z0)) integrated: b0 z^2/2 + slope (z^3/3 - z0 z^2/2)
    let f = |x: f64| 0.5 * b0 * x * x + slope * (x * x * x / 3.0 - 0.5 * z0 * x * x);
    f(hi) - f(lo)
}

impl MollifiedDaughter {
    fn interp(&self, zq: f64) -> f64 {
        if zq <= 0.0 || zq >= 1.0 {
            return 0.0;
        }
        let n = self.z.len();
        let step = 1.0 / (n - 1) as f64;
        let k = ((zq / step) as usize).min(n - 2);
        let t = (zq - self.z[k]) / step;
        self.b[k] + t * (self.b[k + 1] - self.b[k])
    }

    /// Count CDF int_0^w B_eps(z) dz via the cumulative node table plus the
    /// exact partial trapezoid.
    fn number_cdf(&self, w: f64) -> f64 {
        let w = w.clamp(0.0, 1.0);
        if w <= 0.0 {
            return 0.0;
        }
        let n = self.z.len();
        if w >= 1.0 {
            return self.number_cum[n - 1];
        }
        let step = 1.0 / (n - 1) as f64;
        let k = ((w / step) as usize).min(n - 2);
        let t = (w - self.z[k]) / step;
        let fw = self.b[k] + t * (self.b[k + 1] - self.b[k]);
        self.number_cum[k] + 0.5 * (self.b[k] + fw) * (w - self.z[k])
    }

    /// Sum of fixed Gauss quadratures of f(z, B_eps(z)) over each tabulation
    /// segment intersecting the support.
    fn segment_quadrature<F: Fn(f64, f64) -> f64>(&self, f: F) -> f64 {
        let lo = self.support_lower();
        let mut acc = 0.0;
        for k in 0..self.z.len() - 1 {
            let (z0, z1) = (self.z[k], self.z[k + 1]);
            if z1 <= lo || (self.b[k] == 0.0 && self.b[k + 1] == 0.0) {
                continue;
            }
            let a = z0.max(lo);
            acc += quad::fixed(|z| f(z, self.interp(z)), a, z1).unwrap_or(0.0);
        }
        acc
    }
}

impl DaughterDistribution for MollifiedDaughter {
    fn eval(&self, z: f64) -> f64 {
        self.interp(z)
    }

    fn mass_cdf(&self, w: f64) -> f64 {
        let w = w.clamp(0.0, 1.0);
        if w <= 0.0 {
            return 0.0;
        }
        let n = self.z.len();
        if w >= 1.0 {
            return self.mass_cum[n - 1];
        }
        let step = 1.0 / (n - 1) as f64;
        let k = ((w / step) as usize).min(n - 2);
        self.mass_cum[k] + linear_mass_piece(self.z[k], self.z[k + 1], self.b[k], self.b[k + 1], self.z[k], w)
    }

    /// Every (m, p) with p >= 1 is admissible for the mollified profile: the
    /// support is bounded away from zero, so the integral always converges.
    /// Integration runs segment-by-segment over the tabulation, where the
    /// integrand is smooth.
    fn moment(&self, m: f64, p: f64) -> Result<f64, CoeffError> {
        if p < 1.0 {
            return Err(CoeffError::OutsideAdmissibleSet { m, p, nu: self.parent.nu });
        }
        Ok(self.segment_quadrature(|z, bz| z.powf(m) * bz.powf(p)))
    }

    fn log_moment(&self) -> f64 {
        self.segment_quadrature(|z, bz| if z > 0.0 { -z.ln() * z * bz } else { 0.0 })
    }

    fn number_between(&self, a: f64, b: f64) -> f64 {
        (self.number_cdf(b) - self.number_cdf(a)).max(0.0)
    }

    fn support_lower(&self) -> f64 {
        (self.eps - self.eps * self.eps).max(0.0)
    }
}

/// Mass threshold rho_star = a0 b_ln / (2 K0 ln 2).
pub fn rho_star(coeffs: &CoefficientSet, daughter: &dyn DaughterDistribution) -> f64 {
    coeffs.a0 * daughter.log_moment() / (2.0 * coeffs.k0 * std::f64::consts::LN_2)
}

/// eps-variant of the threshold, using the mollified log moment.
pub fn rho_star_eps(coeffs: &CoefficientSet, mollified: &MollifiedDaughter) -> f64 {
    rho_star(coeffs, mollified)
}

/// Auxiliary moment/integrability exponents used by the runtime diagnostics:
///
/// ```text
/// m0 in (-nu-1, alpha) inter [0, 1),   m1 = max(m0, 2-lambda),
/// q1 in (1, 2) with (m1, q1) in A_nu and
/// mu1 = (m1 + 1 + q1 (lambda-2)) / q1 in (m0, lambda).
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticParams {
    pub m0: f64,
    pub m1: f64,
    pub q1: f64,
    pub mu1: f64,
}

impl DiagnosticParams {
    /// Default selection: m0 at the midpoint of its admissible interval and
    /// q1 at the largest admissible value in (1,2) pulled back by a 5% margin.
    pub fn defaults(coeffs: &CoefficientSet, daughter: &DaughterSpec) -> Result<Self, CoeffError> {
        let nu = daughter.nu;
        let lo = (0.0_f64).max(-nu - 1.0);
        let hi = coeffs.alpha.min(1.0);
        if !(hi > lo) {
            return Err(CoeffError::NoValidQ1);
        }
        let m0 = 0.5 * (lo + hi);
        let m1 = m0.max(2.0 - coeffs.lambda);
        let mut q1_max: f64 = 2.0;
        if nu < 0.0 {
            q1_max = q1_max.min((m1 + 1.0) / (-nu));
        }
        let denom = m0 + 2.0 - coeffs.lambda;
        if denom > 0.0 {
            q1_max = q1_max.min((m1 + 1.0) / denom);
        }
        if q1_max <= 1.0 {
            return Err(CoeffError::NoValidQ1);
        }
        let q1 = 1.0 + 0.95 * (q1_max - 1.0);
        let mu1 = (m1 + 1.0 + q1 * (coeffs.lambda - 2.0)) / q1;
        let p = Self { m0, m1, q1, mu1 };
        p.check(coeffs, daughter)?;
        Ok(p)
    }

    /// Verify the defining constraints: (m1, q1) admissible, q1 in (1,2),
    /// and 1 + lambda > mu1 > m0 > -nu - 1.
    pub fn check(&self, coeffs: &CoefficientSet, daughter: &DaughterSpec) -> Result<(), CoeffError> {
        let ok = self.q1 > 1.0
            && self.q1 < 2.0
            && daughter.admissible(self.m1, self.q1)
            && self.mu1 > self.m0
            && self.mu1 < coeffs.lambda
            && 1.0 + coeffs.lambda > self.mu1
            && self.m0 > -daughter.nu - 1.0
            && self.m0 >= 0.0
            && self.m0 < 1.0;
        if ok {
            Ok(())
        } else {
            Err(CoeffError::NoValidQ1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex1() -> (CoefficientSet, DaughterSpec) {
        (
            CoefficientSet::new(2.0, 1.0, 1.0, 1.0),
            DaughterSpec::power_law(0.0).unwrap(),
        )
    }

    #[test]
    fn validate_reference_parameters() {
        let (c, d) = ex1();
        assert!(validate(&c, &d).is_empty());

        let d_minus1 = DaughterSpec::power_law(-1.0).unwrap();
        assert!(validate(&c, &d_minus1).is_empty());

        let bad_alpha = CoefficientSet::new(2.0, 0.4, 1.0, 1.0);
        let v = validate(&bad_alpha, &d);
        assert!(v.iter().any(|x| matches!(x, AdmissibilityViolation::AlphaOutOfRange { .. })));

        let bad = CoefficientSet::new(1.5, 0.8, 1.0, 1.0);
        let v = validate(&bad, &d);
        assert!(v.iter().any(|x| matches!(x, AdmissibilityViolation::AlphaOutOfRange { .. })));
    }

    #[test]
    fn kernel_values() {
        let c = CoefficientSet::new(2.0, 1.0, 1.0, 1.0);
        assert!((c.kernel(2.0, 3.0) - 12.0).abs() < 1e-13); // 2xy
        assert!((c.kernel(1.0, 1.0) - 2.0 * c.k0).abs() < 1e-14);
        let c = CoefficientSet::new(1.5, 0.75, 1.0, 1.0);
        let expect = 2.0 * 4.0_f64.powf(0.75);
        assert!((c.kernel(4.0, 1.0) - expect).abs() < 1e-12);
        assert!((expect - 5.65685).abs() < 1e-5);
    }

    #[test]
    fn kernel_symmetry_and_homogeneity() {
        let c = CoefficientSet::new(1.7, 0.8, 0.9, 1.0);
        let pts = [(0.1, 3.0), (2.0, 2.0), (1e-4, 1e3), (7.5, 0.3)];
        for &(x, y) in &pts {
            let k = c.kernel(x, y);
            assert!((k - c.kernel(y, x)).abs() <= 1e-14 * k.abs());
            for &r in &[0.5, 2.0, 10.0] {
                let lhs = c.kernel(r * x, r * y);
                let rhs = r.powf(c.lambda) * k;
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * rhs.abs(),
                    "homogeneity broken at ({x},{y}) r={r}"
                );
            }
        }
    }

    #[test]
    fn frag_rate_values() {
        let c = CoefficientSet::new(2.0, 1.0, 1.0, 1.0);
        assert_eq!(c.frag_rate(5.0), 5.0);
        let c = CoefficientSet::new(1.5, 0.75, 1.0, 2.0);
        assert!((c.frag_rate(4.0) - 4.0).abs() < 1e-14);
        assert!((c.frag_rate(1.0) - c.a0).abs() < 1e-14);
    }

    #[test]
    fn daughter_moments_power_family() {
        let d = DaughterSpec::power_law(0.0).unwrap();
        assert!((d.moment(1.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!((d.moment(0.0, 1.0).unwrap() - 2.0).abs() < 1e-14);

        // closed form (nu+2)/(m+nu+1) against the quadrature oracle
        for &m in &[0.0, 0.5, 1.0, 2.0, 3.0] {
            let closed = d.moment(m, 1.0).unwrap();
            let oracle = quad::integrate(|z| z.powf(m) * 2.0, 0.0, 1.0, 1e-12, 1e-12).unwrap();
            assert!((closed - oracle).abs() < 1e-10, "m = {m}");
        }

        let d = DaughterSpec::power_law(-1.0).unwrap();
        assert!((d.moment(1.0, 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert!(d.moment(0.0, 1.0).is_err()); // m + p nu = -1, diverges
    }

    #[test]
    fn daughter_log_moment_values() {
        // quadrature oracle: int z |ln z| (nu+2) z^nu dz
        for &nu in &[0.0, -0.5, -1.0] {
            let d = DaughterSpec::power_law(nu).unwrap();
            let oracle = quad::integrate_power_weighted(
                |z| if z > 0.0 { -(z.ln()) * (nu + 2.0) } else { 0.0 },
                1.0 + nu,
                1.0,
                1e-13,
                1e-13,
            )
            .unwrap();
            assert!((d.log_moment() - oracle).abs() < 1e-9, "nu = {nu}");
        }
        assert!((DaughterSpec::power_law(0.0).unwrap().log_moment() - 0.5).abs() < 1e-13);
        assert!((DaughterSpec::power_law(-1.0).unwrap().log_moment() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn rho_star_values() {
        let (c, d) = ex1();
        let expect = 1.0 / (4.0 * std::f64::consts::LN_2);
        assert!((rho_star(&c, &d) - expect).abs() < 1e-12);
        assert!((expect - 0.360674).abs() < 1e-6);

        let d = DaughterSpec::power_law(-1.0).unwrap();
        let expect = 1.0 / (2.0 * std::f64::consts::LN_2);
        assert!((rho_star(&c, &d) - expect).abs() < 1e-12);
    }

    #[test]
    fn mollifier_support_and_normalisation() {
        let (_, d) = ex1();
        for &eps in &[0.1, 0.05, 0.025, 0.0125] {
            let m = mollify(&d, eps).unwrap();
            // support: zero at and below eps - eps^2
            let cut = eps - eps * eps;
            for (zk, bk) in m.z.iter().zip(m.b.iter()) {
                if *zk <= cut {
                    assert_eq!(*bk, 0.0, "eps = {eps}, z = {zk}");
                }
            }
            // normalisation exact after renormalisation
            assert!((m.mass_cdf(1.0) - 1.0).abs() < 1e-12, "eps = {eps}");
            assert!(m.beta_eps > 0.9 && m.beta_eps <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn mollifier_beta_tends_to_one() {
        let (_, d) = ex1();
        let m = mollify(&d, 1e-3).unwrap();
        assert!((m.beta_eps - 1.0).abs() < 1e-2);
        // direct quadrature oracle for beta_eps (double integral)
        let eps = 1e-3;
        let e2 = eps * eps;
        let oracle = quad::integrate(
            |z| {
                let lo = (z - e2).max(eps);
                let hi = (z + e2).min(1.0);
                if lo >= hi {
                    return 0.0;
                }
                z * quad::integrate(|zs| bump((z - zs) / e2) / e2 * d.eval(zs), lo, hi, 1e-12, 1e-10)
                    .unwrap()
            },
            0.0,
            1.0,
            1e-9,
            1e-9,
        )
        .unwrap();
        // the tabulated beta differs from the exact double integral only by
        // the 4096-node interpolation error around the support cutoff
        assert!((m.beta_eps - oracle).abs() < 5e-4);
    }

    #[test]
    fn mollifier_moments_converge() {
        let (_, d) = ex1();
        // b_{m,1,eps} -> b_{m,1} with monotone error decay as eps halves
        // (m = 1 is excluded: it is pinned to 1 exactly by renormalisation)
        for &m_ord in &[0.5, 2.0, 3.0] {
            let exact = d.moment(m_ord, 1.0).unwrap();
            let mut last = f64::INFINITY;
            for &eps in &[0.1, 0.05, 0.025] {
                let md = mollify(&d, eps).unwrap();
                let err = (md.moment(m_ord, 1.0).unwrap() - exact).abs();
                assert!(err < last, "m={m_ord} eps={eps}: {err} !< {last}");
                last = err;
            }
        }
    }

    #[test]
    fn mollifier_superlinear_moment_below_one() {
        // b_{1+lambda-alpha, 1, eps} < 1 for the reference parameters
        let (c, d) = ex1();
        let ord = 1.0 + c.lambda - c.alpha;
        let raw = d.moment(ord, 1.0).unwrap();
        for &eps in &[0.1, 0.05, 0.025, 0.0125] {
            let md = mollify(&d, eps).unwrap();
            let v = md.moment(ord, 1.0).unwrap();
            assert!(v < 1.0, "eps = {eps}: b = {v}");
            assert!(v <= 0.5 * (1.0 + raw) + 1e-9);
        }
    }

    #[test]
    fn mollify_rejects_large_eps() {
        let (_, d) = ex1();
        assert!(matches!(mollify(&d, 0.99), Err(CoeffError::EpsTooLarge { .. })));
        assert!(mollify(&d, 1.0).is_err());
    }

    #[test]
    fn table_daughter_roundtrip() {
        // parabolic profile B(z) = 12 z (1-z), already normalised; sampling
        // fine enough that the interpolant mass stays within the 1e-6 gate
        let pts: Vec<(f64, f64)> = (1..=4999)
            .map(|k| {
                let z = k as f64 / 5000.0;
                (z, 12.0 * z * (1.0 - z))
            })
            .collect();
        let d = DaughterSpec::from_table(0.0, &pts).unwrap();
        assert!((d.mass_cdf(1.0) - 1.0).abs() < 1e-6);
        // b_{0,1} = int 12 z(1-z) dz = 2
        assert!((d.moment(0.0, 1.0).unwrap() - 2.0).abs() < 1e-4);
        // log moment oracle: int z|ln z| 12 z(1-z) dz = 12 (1/9 - 1/16) ... compute directly
        let oracle = quad::integrate(
            |z| if z > 0.0 { -z.ln() * z * 12.0 * z * (1.0 - z) } else { 0.0 },
            0.0,
            1.0,
            1e-12,
            1e-12,
        )
        .unwrap();
        assert!((d.log_moment() - oracle).abs() < 1e-4);
    }

    #[test]
    fn table_rejects_bad_input() {
        assert!(DaughterSpec::from_table(0.0, &[(0.5, 1.0)]).is_err());
        assert!(DaughterSpec::from_table(0.0, &[(0.5, 1.0), (0.4, 1.0)]).is_err());
        assert!(DaughterSpec::from_table(0.0, &[(0.2, -1.0), (0.5, 1.0)]).is_err());
        // badly normalised (mass far from 1)
        let pts: Vec<(f64, f64)> = (1..=99)
            .map(|k| {
                let z = k as f64 / 100.0;
                (z, 5.0)
            })
            .collect();
        assert!(matches!(
            DaughterSpec::from_table(0.0, &pts),
            Err(CoeffError::BadNormalisation(_))
        ));
    }

    #[test]
    fn csv_parsing() {
        let text = "z,B\n0.25,1.6\n0.5,2.0\n0.75,2.4\n";
        // rough normalisation: int z B dz with B ~ 2 gives ~1; accept
        let d = DaughterSpec::from_csv(0.0, text);
        // the coarse table integrates to int z*B(z) dz != 1 exactly; just
        // check the parser path and the error path
        match d {
            Ok(d) => assert!((d.mass_cdf(1.0) - 1.0).abs() < 1e-6),
            Err(CoeffError::BadNormalisation(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
        assert!(DaughterSpec::from_csv(0.0, "a,b\nx,y\n").is_err());
    }

    #[test]
    fn diagnostic_params_reference() {
        let (c, d) = ex1();
        let p = DiagnosticParams::defaults(&c, &d).unwrap();
        assert!((p.m0 - 0.5).abs() < 1e-14);
        assert!((p.m1 - 0.5).abs() < 1e-14);
        assert!((p.q1 - 1.95).abs() < 1e-12);
        assert!((p.mu1 - 1.5 / 1.95).abs() < 1e-12);
        p.check(&c, &d).unwrap();

        // second reference set: lambda = 2, nu = -1
        let d2 = DaughterSpec::power_law(-1.0).unwrap();
        let p2 = DiagnosticParams::defaults(&c, &d2).unwrap();
        assert!(p2.q1 > 1.0 && p2.q1 < 2.0);
        assert!(p2.mu1 > p2.m0 && p2.mu1 < c.lambda);
        p2.check(&c, &d2).unwrap();
    }
}
