//! CSV and manifest writers. All numeric output carries 17 significant
//! digits, `.` decimal separator, `\n` line endings, so reruns with identical
//! inputs produce byte-identical artifacts.

use crate::dynamics::TrajectoryRecord;
use crate::grid::Spectrum;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

/// 17 significant digits, scientific.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Ordered `key = value` manifest.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.entries.push((key.into(), value.into()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, fmt17(value));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.render())
    }
}

/// Spectrum snapshot: header `x_center,value`, one row per cell.
pub fn render_spectrum_csv(spec: &Spectrum) -> String {
    let mut out = String::from("x_center,value\n");
    for (c, v) in spec.grid.centers.iter().zip(spec.values.iter()) {
        let _ = writeln!(out, "{},{}", fmt17(*c), fmt17(*v));
    }
    out
}

pub fn write_spectrum_csv(path: &Path, spec: &Spectrum) -> io::Result<()> {
    fs::write(path, render_spectrum_csv(spec))
}

/// Trajectory table with the diagnostic columns of the evolution record.
pub fn render_trajectory_csv(record: &TrajectoryRecord) -> String {
    let mut out =
        String::from("time,M_m0,M_m1,M_1,M_lambda,M_1pl,logmom,U_m1,Lq1,gel,dust,clip\n");
    for r in &record.rows {
        let cols = [
            r.time,
            r.m_m0,
            r.m_m1,
            r.m_1,
            r.m_lambda,
            r.m_1pl,
            r.log_moment,
            r.u_m1,
            r.lq1,
            r.gel_mass,
            r.dust_mass,
            r.clip_mass,
        ];
        let line: Vec<String> = cols.iter().map(|v| fmt17(*v)).collect();
        let _ = writeln!(out, "{}", line.join(","));
    }
    out
}

pub fn write_trajectory_csv(path: &Path, record: &TrajectoryRecord) -> io::Result<()> {
    fs::write(path, render_trajectory_csv(record))
}
