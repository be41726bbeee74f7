//! Geometric size mesh and cell-averaged size distributions.
//!
//! Cells are the intervals between geometrically spaced edges
//! `x_(i) = xmin * r^i`, `r = (xmax/xmin)^(1/n)`. A `Spectrum` stores the
//! per-cell average of the number density together with two mass-accounting
//! side channels: cumulative mass advected past `xmax` (gel) and cumulative
//! mass fragmented below `xmin` (dust).
//!
//! All power-weight integrals over cells are closed-form, so moments are
//! exact functionals of the piecewise-constant representation, and every
//! reduction uses a fixed ascending-index pairwise summation tree for
//! cross-platform reproducibility.

use crate::quad::{self, QuadError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid bounds: need 0 < xmin < xmax, got [{0}, {1}]")]
    InvalidBounds(f64, f64),
    #[error("need at least 8 cells, got {0}")]
    TooFewCells(usize),
}

/// Pairwise (cascade) summation in fixed ascending index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        return acc;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Geometric size mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeGrid {
    pub xmin: f64,
    pub xmax: f64,
    pub n_cells: usize,
    /// n_cells + 1 strictly increasing edges, edges[0] = xmin, edges[n] = xmax
    pub edges: Vec<f64>,
    /// geometric means of adjacent edges (plot/report positions)
    pub centers: Vec<f64>,
    /// cell widths
    pub widths: Vec<f64>,
    /// exact per-cell mass weights int_cell x dx
    pub mass_weights: Vec<f64>,
    /// mass centroid of each cell, mass_weights / widths; this is the size at
    /// which the discrete operators place the cell's population
    pub pivots: Vec<f64>,
    /// edge ratio r > 1
    pub ratio: f64,
}

impl SizeGrid {
    pub fn new(xmin: f64, xmax: f64, n_cells: usize) -> Result<Arc<Self>, GridError> {
        if !(xmin > 0.0 && xmax > xmin && xmin.is_finite() && xmax.is_finite()) {
            return Err(GridError::InvalidBounds(xmin, xmax));
        }
        if n_cells < 8 {
            return Err(GridError::TooFewCells(n_cells));
        }
        let n = n_cells;
        let log_ratio = (xmax / xmin).ln() / n as f64;
        let mut edges = Vec::with_capacity(n + 1);
        for i in 0..=n {
            edges.push(xmin * (log_ratio * i as f64).exp());
        }
        edges[0] = xmin;
        edges[n] = xmax;
        for w in edges.windows(2) {
            if w[1] <= w[0] {
                return Err(GridError::InvalidBounds(xmin, xmax));
            }
        }
        let centers: Vec<f64> = edges.windows(2).map(|w| (w[0] * w[1]).sqrt()).collect();
        let widths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
        let mass_weights: Vec<f64> = edges
            .windows(2)
            .map(|w| 0.5 * (w[1] * w[1] - w[0] * w[0]))
            .collect();
        let pivots: Vec<f64> = mass_weights
            .iter()
            .zip(widths.iter())
            .map(|(m, w)| m / w)
            .collect();
        Ok(Arc::new(Self {
            xmin,
            xmax,
            n_cells,
            edges,
            centers,
            widths,
            mass_weights,
            pivots,
            ratio: log_ratio.exp(),
        }))
    }

    /// Exact per-cell integrals int_cell x^m dx.
    pub fn power_weights(&self, m: f64) -> Vec<f64> {
        if (m + 1.0).abs() < 1e-12 {
            self.edges.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
        } else {
            let p = m + 1.0;
            self.edges
                .windows(2)
                .map(|w| (w[1].powf(p) - w[0].powf(p)) / p)
                .collect()
        }
    }

    /// Exact per-cell integrals int_cell x ln x dx.
    pub fn log_weights(&self) -> Vec<f64> {
        let f = |x: f64| 0.25 * x * x * (2.0 * x.ln() - 1.0);
        self.edges.windows(2).map(|w| f(w[1]) - f(w[0])).collect()
    }

    /// Exact per-cell integrals int_cell x |ln x| dx (the cell containing 1
    /// is split at 1).
    pub fn abs_log_weights(&self) -> Vec<f64> {
        let f = |x: f64| 0.25 * x * x * (2.0 * x.ln() - 1.0);
        self.edges
            .windows(2)
            .map(|w| {
                if w[1] <= 1.0 {
                    -(f(w[1]) - f(w[0]))
                } else if w[0] >= 1.0 {
                    f(w[1]) - f(w[0])
                } else {
                    (f(w[1]) - f(1.0)) - (f(1.0) - f(w[0]))
                }
            })
            .collect()
    }

    pub fn same_mesh(&self, other: &Self) -> bool {
        self.n_cells == other.n_cells
            && self.xmin == other.xmin
            && self.xmax == other.xmax
    }
}

/// Cell-averaged size distribution with mass-accounting side channels.
///
/// `values` hold per-cell averages of the number density. Operator outputs
/// reuse this container for rate fields, which may legitimately go negative;
/// non-negativity is enforced on evolution states via `clip_negative`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub grid: Arc<SizeGrid>,
    pub values: Vec<f64>,
    pub gel_mass: f64,
    pub dust_mass: f64,
}

impl Spectrum {
    pub fn zeros(grid: &Arc<SizeGrid>) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.n_cells],
            gel_mass: 0.0,
            dust_mass: 0.0,
        }
    }

    /// Clip negative cell values to zero; returns the (non-negative) amount
    /// of mass removed by the clip so the caller can book it.
    pub fn clip_negative(&mut self) -> f64 {
        let mut clipped = 0.0;
        for (v, w) in self.values.iter_mut().zip(self.grid.mass_weights.iter()) {
            if *v < 0.0 {
                clipped += -*v * *w;
                *v = 0.0;
            }
        }
        clipped
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Rescale the size axis: returns x -> c^2 * self(c x) on the dilated
    /// grid with edges `edges / c`. Pure relabeling; every cell keeps its
    /// mass, so M_1 is preserved to rounding.
    pub fn dilate(&self, c: f64) -> Result<Self, GridError> {
        assert!(c > 0.0 && c.is_finite());
        let g = &self.grid;
        let grid = SizeGrid::new(g.xmin / c, g.xmax / c, g.n_cells)?;
        let values = self.values.iter().map(|v| v * c * c).collect();
        Ok(Self {
            grid,
            values,
            gel_mass: self.gel_mass,
            dust_mass: self.dust_mass,
        })
    }
}

/// Project a density function onto the grid: per-cell mass-weighted averages
/// `value_i = int_cell x f(x) dx / int_cell x dx`, so the projection carries
/// exactly the mass of f over the covered domain.
pub fn project<F: Fn(f64) -> f64>(f: F, grid: &Arc<SizeGrid>) -> Result<Spectrum, QuadError> {
    let mut values = Vec::with_capacity(grid.n_cells);
    for i in 0..grid.n_cells {
        let (a, b) = (grid.edges[i], grid.edges[i + 1]);
        let m = quad::integrate(|x| x * f(x), a, b, 1e-300, 1e-12)?;
        values.push(m / grid.mass_weights[i]);
    }
    Ok(Spectrum {
        grid: grid.clone(),
        values,
        gel_mass: 0.0,
        dust_mass: 0.0,
    })
}

/// Moment of order m: sum_i value_i int_cell x^m dx, exact per-cell power
/// integration. `moment(spec, 1.0)` is the finite-volume mass used by the
/// operators (identical weights, identical summation order).
pub fn moment(spec: &Spectrum, m: f64) -> f64 {
    let w = if m == 1.0 {
        spec.grid.mass_weights.clone()
    } else {
        spec.grid.power_weights(m)
    };
    weighted_total(&spec.values, &w)
}

/// int x ln(x) spec dx with exact per-cell weights.
pub fn log_moment(spec: &Spectrum) -> f64 {
    weighted_total(&spec.values, &spec.grid.log_weights())
}

/// int x |ln x| spec dx.
pub fn abs_log_moment(spec: &Spectrum) -> f64 {
    weighted_total(&spec.values, &spec.grid.abs_log_weights())
}

/// Weighted L^q integral: int x^m |h(x)|^q dx over the grid.
pub fn weighted_lq_norm(spec: &Spectrum, m: f64, q: f64) -> f64 {
    let w = spec.grid.power_weights(m);
    let terms: Vec<f64> = spec
        .values
        .iter()
        .zip(w.iter())
        .map(|(v, w)| v.abs().powf(q) * w)
        .collect();
    pairwise_sum(&terms)
}

/// X_1 distance int x |a - b| dx; both spectra must share a mesh.
pub fn x1_distance(a: &Spectrum, b: &Spectrum) -> f64 {
    assert!(
        a.grid.same_mesh(&b.grid),
        "x1_distance requires a common mesh"
    );
    let terms: Vec<f64> = a
        .values
        .iter()
        .zip(b.values.iter())
        .zip(a.grid.mass_weights.iter())
        .map(|((x, y), w)| (x - y).abs() * w)
        .collect();
    pairwise_sum(&terms)
}

fn weighted_total(values: &[f64], weights: &[f64]) -> f64 {
    let terms: Vec<f64> = values.iter().zip(weights.iter()).map(|(v, w)| v * w).collect();
    pairwise_sum(&terms)
}

/// Exact refined view of a piecewise-constant spectrum: each cell is split
/// into `q` nested geometric subcells carrying the same value. Useful for
/// sharpening quadratures of functionals without changing the state.
pub fn refine_view(spec: &Spectrum, q: usize) -> Spectrum {
    assert!(q >= 1);
    let g = &spec.grid;
    let fine = SizeGrid::new(g.xmin, g.xmax, g.n_cells * q).expect("refined grid");
    let values = (0..fine.n_cells).map(|j| spec.values[j / q]).collect();
    Spectrum {
        grid: fine,
        values,
        gel_mass: spec.gel_mass,
        dust_mass: spec.dust_mass,
    }
}

/// Conservative first-order remap onto another mesh. Each source cell's mass
/// is distributed over the target cells in proportion to the overlap of the
/// x dx measure; mass falling below/above the target domain is booked to the
/// dust/gel channels of the result.
pub fn remap_onto(spec: &Spectrum, target: &Arc<SizeGrid>) -> Spectrum {
    let src = &spec.grid;
    let mut mass = vec![0.0; target.n_cells];
    let mut dust = 0.0;
    let mut gel = 0.0;
    let xw = |a: f64, b: f64| 0.5 * (b * b - a * a);
    for i in 0..src.n_cells {
        let (a, b) = (src.edges[i], src.edges[i + 1]);
        let cell_mass = spec.values[i] * src.mass_weights[i];
        if cell_mass == 0.0 {
            continue;
        }
        let total = src.mass_weights[i];
        // below the target domain
        if a < target.xmin {
            let hi = b.min(target.xmin);
            dust += cell_mass * xw(a, hi) / total;
        }
        // above the target domain
        if b > target.xmax {
            let lo = a.max(target.xmax);
            gel += cell_mass * xw(lo, b) / total;
        }
        // overlapping target cells
        let lo = a.max(target.xmin);
        let hi = b.min(target.xmax);
        if lo >= hi {
            continue;
        }
        let start = target.edges.partition_point(|&e| e <= lo).saturating_sub(1);
        for j in start..target.n_cells {
            let (ta, tb) = (target.edges[j], target.edges[j + 1]);
            if ta >= hi {
                break;
            }
            let oa = ta.max(lo);
            let ob = tb.min(hi);
            if ob > oa {
                mass[j] += cell_mass * xw(oa, ob) / total;
            }
        }
    }
    let values = mass
        .iter()
        .zip(target.mass_weights.iter())
        .map(|(m, w)| m / w)
        .collect();
    Spectrum {
        grid: target.clone(),
        values,
        gel_mass: spec.gel_mass + gel,
        dust_mass: spec.dust_mass + dust,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_construction() {
        let g = SizeGrid::new(1e-6, 1e3, 9).unwrap();
        assert!((g.ratio - 10.0).abs() < 1e-12);
        assert_eq!(g.edges.len(), 10);
        assert_eq!(g.edges[0], 1e-6);
        assert_eq!(g.edges[9], 1e3);

        let g = SizeGrid::new(1.0, 2.0, 8).unwrap();
        assert!((g.ratio - 2f64.powf(1.0 / 8.0)).abs() < 1e-14);

        assert!(SizeGrid::new(2.0, 1.0, 8).is_err());
        assert!(SizeGrid::new(1.0, 2.0, 4).is_err());
        for (i, c) in SizeGrid::new(0.5, 8.0, 12).unwrap().centers.iter().enumerate() {
            let g = SizeGrid::new(0.5, 8.0, 12).unwrap();
            assert!(*c > g.edges[i] && *c < g.edges[i + 1]);
        }
    }

    #[test]
    fn projection_mass_is_exact() {
        let g = SizeGrid::new(1e-6, 1e3, 128).unwrap();
        let rho = 0.7;
        let s = project(|x| rho * (-x).exp(), &g).unwrap();
        assert!((moment(&s, 1.0) - rho).abs() < 1e-8);

        let z = project(|_| 0.0, &g).unwrap();
        assert!(moment(&z, 1.0) == 0.0 && z.values.iter().all(|v| *v == 0.0));

        // indicator of a single cell projects to its exact average
        let (a, b) = (g.edges[40], g.edges[41]);
        let ind = project(|x| if x >= a && x < b { 3.0 } else { 0.0 }, &g).unwrap();
        assert!((ind.values[40] - 3.0).abs() < 1e-9);
        assert!(ind.values[39].abs() < 1e-12 && ind.values[41].abs() < 1e-12);
    }

    #[test]
    fn moments_of_exponential() {
        // wide, fine grid: M_0 = Gamma(1) = 1, M_1 = Gamma(2) = 1,
        // M_2 = Gamma(3) = 2
        let g = SizeGrid::new(1e-8, 1e3, 32768).unwrap();
        let s = project(|x| (-x).exp(), &g).unwrap();
        assert!((moment(&s, 1.0) - 1.0).abs() < 1e-8);
        assert!((moment(&s, 0.0) - 1.0).abs() < 1e-6);
        assert!((moment(&s, 2.0) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn moment_refinement_order() {
        // error halves (at least) each time n_cells doubles
        let gamma = [1.0, 1.0, 2.0]; // Gamma(m+1) for m = 0,1,2
        for (m_idx, &m) in [0.0, 1.0, 2.0].iter().enumerate() {
            let mut last_err = f64::INFINITY;
            for &n in &[256usize, 512, 1024] {
                let g = SizeGrid::new(1e-8, 1e3, n).unwrap();
                let s = project(|x| (-x).exp(), &g).unwrap();
                let err = (moment(&s, m) - gamma[m_idx]).abs().max(1e-16);
                assert!(
                    err < 0.6 * last_err || err < 1e-12,
                    "m={m} n={n}: err {err} vs previous {last_err}"
                );
                last_err = err;
            }
        }
    }

    #[test]
    fn log_moment_of_exponential() {
        // int x ln x e^(-x) dx = 1 - EulerGamma
        let g = SizeGrid::new(1e-8, 1e3, 16384).unwrap();
        let s = project(|x| (-x).exp(), &g).unwrap();
        let expect = 0.422784335098467;
        assert!((log_moment(&s) - expect).abs() < 1e-6);
        // quadrature oracle on the same truncated domain
        let oracle = quad::integrate(|x| x * x.ln() * (-x).exp(), 1e-8, 1e3, 1e-12, 1e-12).unwrap();
        assert!((log_moment(&s) - oracle).abs() < 1e-6);
        assert!(abs_log_moment(&s) >= log_moment(&s) - 1e-12);
    }

    #[test]
    fn lq_norm_recovers_mass() {
        let g = SizeGrid::new(1e-4, 1e2, 64).unwrap();
        let s = project(|x| (-x).exp(), &g).unwrap();
        let a = weighted_lq_norm(&s, 1.0, 1.0);
        let b = moment(&s, 1.0);
        assert!((a - b).abs() < 1e-14 * b.abs());
    }

    #[test]
    fn x1_distance_properties() {
        let g = SizeGrid::new(1e-3, 1e2, 64).unwrap();
        let a = project(|x| (-x).exp(), &g).unwrap();
        let b = project(|x| 0.5 * (-0.5 * x).exp(), &g).unwrap();
        let c = project(|x| (1.0 + x).recip().powi(4), &g).unwrap();
        assert_eq!(x1_distance(&a, &a), 0.0);
        let dab = x1_distance(&a, &b);
        assert!((dab - x1_distance(&b, &a)).abs() < 1e-15);
        assert!(dab >= 0.0);
        assert!(x1_distance(&a, &c) <= dab + x1_distance(&b, &c) + 1e-14);
    }

    #[test]
    fn dilation_preserves_mass_and_inverts() {
        let g = SizeGrid::new(1e-4, 1e2, 96).unwrap();
        let s = project(|x| (-x).exp(), &g).unwrap();
        let m1 = moment(&s, 1.0);
        let d = s.dilate(3.7).unwrap();
        assert!((moment(&d, 1.0) - m1).abs() < 1e-13 * m1);
        let back = d.dilate(1.0 / 3.7).unwrap();
        for (v, w) in back.values.iter().zip(s.values.iter()) {
            assert!((v - w).abs() <= 1e-12 * w.abs().max(1e-300));
        }
    }

    #[test]
    fn remap_conserves_mass() {
        let src = SizeGrid::new(1e-4, 1e2, 96).unwrap();
        let s = project(|x| (-x).exp(), &src).unwrap();
        let m1 = moment(&s, 1.0);
        // wider and shifted target
        let tgt = SizeGrid::new(3e-4, 2e2, 80).unwrap();
        let r = remap_onto(&s, &tgt);
        let total = moment(&r, 1.0) + (r.dust_mass - s.dust_mass) + (r.gel_mass - s.gel_mass);
        assert!((total - m1).abs() < 1e-12 * m1);
        // identity remap reproduces values
        let id = remap_onto(&s, &src);
        for (v, w) in id.values.iter().zip(s.values.iter()) {
            assert!((v - w).abs() <= 1e-12 * w.abs().max(1e-300));
        }
    }

    #[test]
    fn clipping_books_mass() {
        let g = SizeGrid::new(0.1, 10.0, 16).unwrap();
        let mut s = Spectrum::zeros(&g);
        s.values[3] = -2.0;
        s.values[5] = 1.0;
        let clipped = s.clip_negative();
        assert!((clipped - 2.0 * g.mass_weights[3]).abs() < 1e-14);
        assert_eq!(s.values[3], 0.0);
        assert_eq!(s.values[5], 1.0);
    }
}
