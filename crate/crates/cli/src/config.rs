//! Run configuration: INI-style `key = value` sections parsed from a file,
//! with flat command-line overrides (`--set section.key=value`). Unknown keys
//! are hard errors.

use anyhow::{anyhow, bail, Context, Result};
use coagfrag::coefficients::{
    validate, CoefficientSet, DaughterSpec, DiagnosticParams,
};
use coagfrag::dynamics::{Mode, Stepper};
use coagfrag::operators::TransportScheme;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientBlock {
    pub lambda: f64,
    pub alpha: f64,
    pub k0: f64,
    pub a0: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DaughterBlock {
    pub nu: f64,
    /// "power" (default) or "csv"
    #[serde(default = "default_profile")]
    pub profile: String,
    pub csv_path: Option<PathBuf>,
    /// mollification parameter; omit to run with the raw daughter
    pub eps: Option<f64>,
}

fn default_profile() -> String {
    "power".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub xmin: f64,
    pub xmax: f64,
    pub n_cells: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeBlock {
    /// "physical" or "rescaled"
    #[serde(default = "default_mode")]
    pub mode: String,
    pub horizon: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// 0 disables the accuracy cap
    #[serde(default)]
    pub dt_max: f64,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: f64,
    #[serde(default = "default_steady_tol")]
    pub steady_tol: f64,
    #[serde(default = "default_clip")]
    pub max_clip_frac: f64,
    /// "muscl" (default) or "upwind1"
    #[serde(default = "default_transport")]
    pub transport: String,
    /// "heun" (default) or "patankar"
    #[serde(default = "default_stepper")]
    pub stepper: String,
    #[serde(default)]
    pub store_snapshots: bool,
}

fn default_mode() -> String {
    "physical".into()
}
fn default_cfl() -> f64 {
    0.45
}
fn default_snapshot() -> f64 {
    0.1
}
fn default_steady_tol() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    1e-8
}
fn default_transport() -> String {
    "muscl".into()
}
fn default_stepper() -> String {
    "heun".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    pub rho: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_seed() -> u64 {
    1
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    #[serde(default)]
    pub eps_list: Vec<f64>,
    #[serde(default)]
    pub rho_list: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBlock {
    #[serde(default = "default_ail")]
    pub ail_samples: usize,
}

fn default_ail() -> usize {
    100_000
}

impl Default for VerifyBlock {
    fn default() -> Self {
        Self {
            ail_samples: default_ail(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub coefficients: CoefficientBlock,
    pub daughter: DaughterBlock,
    pub grid: GridBlock,
    pub run: RunBlock,
    #[serde(default)]
    pub time: Option<TimeBlock>,
    #[serde(default)]
    pub sweep: SweepBlock,
    #[serde(default)]
    pub verify: VerifyBlock,
}

/// Fully validated run specification.
pub struct RunSpec {
    pub config: Config,
    pub coeffs: CoefficientSet,
    pub daughter: DaughterSpec,
    pub params: DiagnosticParams,
}

/// Parse the file text, apply `section.key=value` overrides, deserialize
/// strictly, and run the admissibility validation.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunSpec> {
    let mut table: toml::Table = text.parse().context("config is not valid key = value syntax")?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    let config: Config =
        toml::Value::Table(table).try_into().map_err(|e| anyhow!("{e}"))?;

    let coeffs = CoefficientSet::new(
        config.coefficients.lambda,
        config.coefficients.alpha,
        config.coefficients.k0,
        config.coefficients.a0,
    );
    let daughter = match config.daughter.profile.as_str() {
        "power" => DaughterSpec::power_law(config.daughter.nu)?,
        "csv" => {
            let path = config
                .daughter
                .csv_path
                .as_ref()
                .ok_or_else(|| anyhow!("daughter.profile = \"csv\" requires daughter.csv_path"))?;
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading daughter table {}", path.display()))?;
            DaughterSpec::from_csv(config.daughter.nu, &text)?
        }
        other => bail!("unknown daughter.profile `{other}` (expected power|csv)"),
    };

    // admissibility: collect every violated constraint; coagulation-only or
    // fragmentation-only test configurations (k0 = 0 or a0 = 0) skip the
    // positivity constraint they intentionally break
    let violations: Vec<String> = validate(&coeffs, &daughter)
        .into_iter()
        .filter(|v| {
            use coagfrag::coefficients::AdmissibilityViolation::*;
            !(matches!(v, K0NotPositive { .. }) && config.coefficients.k0 == 0.0
                || matches!(v, A0NotPositive { .. }) && config.coefficients.a0 == 0.0)
        })
        .map(|v| v.to_string())
        .collect();
    if !violations.is_empty() {
        bail!("inadmissible coefficients:\n  {}", violations.join("\n  "));
    }
    if let Some(eps) = config.daughter.eps {
        if !(eps > 0.0 && eps < 1.0) {
            bail!("daughter.eps = {eps} outside (0, 1)");
        }
    }
    if config.grid.n_cells < 8 || config.grid.xmin <= 0.0 || config.grid.xmax <= config.grid.xmin {
        bail!(
            "invalid grid block: xmin {} xmax {} n_cells {}",
            config.grid.xmin,
            config.grid.xmax,
            config.grid.n_cells
        );
    }
    let params = DiagnosticParams::defaults(&coeffs, &daughter)?;
    Ok(RunSpec {
        config,
        coeffs,
        daughter,
        params,
    })
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunSpec> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_config(&text, overrides)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` must look like section.key=value"))?;
    let (section, field) = key
        .trim()
        .split_once('.')
        .ok_or_else(|| anyhow!("override key `{key}` must look like section.key"))?;
    let parsed: toml::Value = match value.trim().parse::<toml::Value>() {
        Ok(v) => v,
        Err(_) => toml::Value::String(value.trim().to_string()),
    };
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(Default::default()));
    let toml::Value::Table(sec) = entry else {
        bail!("override section `{section}` is not a table");
    };
    sec.insert(field.to_string(), parsed);
    Ok(())
}

impl TimeBlock {
    pub fn mode(&self) -> Result<Mode> {
        match self.mode.as_str() {
            "physical" => Ok(Mode::Physical),
            "rescaled" => Ok(Mode::Rescaled),
            other => bail!("unknown time.mode `{other}` (expected physical|rescaled)"),
        }
    }

    pub fn transport(&self) -> Result<TransportScheme> {
        match self.transport.as_str() {
            "muscl" => Ok(TransportScheme::MusclMinmod),
            "upwind1" => Ok(TransportScheme::Upwind1),
            other => bail!("unknown time.transport `{other}` (expected muscl|upwind1)"),
        }
    }

    pub fn stepper(&self) -> Result<Stepper> {
        match self.stepper.as_str() {
            "heun" => Ok(Stepper::Heun),
            "patankar" => Ok(Stepper::PatankarEuler),
            other => bail!("unknown time.stepper `{other}` (expected heun|patankar)"),
        }
    }
}
