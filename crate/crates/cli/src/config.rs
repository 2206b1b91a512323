//! TOML run configuration. Unknown keys are rejected so that typos surface
//! as schema errors instead of silently falling back to defaults.

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub medium: MediumConfig,
    pub grid: GridConfig,
    pub solver: SolverConfig,
    pub estimator: EstimatorConfig,
    pub run: RunSection,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MediumConfig {
    pub kind: MediumKind,
    /// background conductivity (also the constant-medium value)
    pub k1: f64,
    /// inclusion conductivity
    pub k2: f64,
    /// inclusion probability for the Bernoulli-defect medium
    pub p: f64,
    /// peak amplitude bound for the regular-peaks medium
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// fibre volume fraction and jitter parameters for the mapped medium
    pub fibre_fraction: f64,
    pub jitter: f64,
    pub aspect: f64,
}

impl Default for MediumConfig {
    fn default() -> Self {
        Self {
            kind: MediumKind::BernoulliDefect,
            k1: 1.0,
            k2: 100.0,
            p: 0.1,
            alpha_max: 199.0,
            beta_min: 2.0,
            beta_max: 10.0,
            fibre_fraction: 0.5,
            jitter: 0.1,
            aspect: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MediumKind {
    Constant,
    BernoulliDefect,
    RegularPeaks,
    MappedFibres,
}

impl Default for MediumKind {
    fn default() -> Self {
        MediumKind::BernoulliDefect
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub cells_x: usize,
    pub cells_y: usize,
    /// micro elements per direction within one cell
    pub micro: usize,
    pub cell_lx: f64,
    pub cell_ly: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { cells_x: 10, cells_y: 10, micro: 20, cell_lx: 1.0, cell_ly: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Fem,
    Mslrm,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: SolverKind,
    /// greedy low-rank residual tolerance
    pub epsilon: f64,
    /// empirical-interpolation sup tolerance
    pub delta: f64,
    /// singular-value truncation tolerance
    pub delta_trunc: f64,
    pub eta_pen: f64,
    pub fem_tol: f64,
    pub recycling: bool,
    /// where the modes library is persisted (relative to the output dir)
    pub library_out: String,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverKind::Mslrm,
            epsilon: 0.01,
            delta: 0.1,
            delta_trunc: 1e-12,
            eta_pen: 10.0,
            fem_tol: 1e-10,
            recycling: true,
            library_out: "library.json".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    Mc,
    CvWeakly1,
    CvWeakly2,
    CvEim,
    Mfmc,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    /// target standard deviation of the estimator
    pub eta: f64,
    /// computational budget in seconds (multi-fidelity mode)
    pub budget: f64,
    pub pilot: usize,
    pub qoi: String,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { mode: EstimatorMode::Mc, eta: 0.05, budget: 0.0, pilot: 100, qoi: "k11".into() }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
    /// fixed sample count; 0 means "derive from eta"
    pub samples: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 1, out_dir: "out".into(), samples: 0 }
    }
}

impl RunConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |m: String| Err(CliError::Config(m));
        if self.grid.cells_x == 0 || self.grid.cells_y == 0 || self.grid.micro == 0 {
            return err("grid dimensions must be positive".into());
        }
        if !(self.medium.k1 > 0.0 && self.medium.k2 > 0.0) {
            return err("conductivities must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.medium.p) {
            return err(format!("medium.p = {} outside [0, 1]", self.medium.p));
        }
        if self.solver.epsilon <= 0.0 || self.solver.delta <= 0.0 || self.solver.fem_tol <= 0.0 {
            return err("solver tolerances must be positive".into());
        }
        if self.estimator.eta <= 0.0 && self.run.samples == 0 && self.estimator.budget <= 0.0 {
            return err("one of estimator.eta, estimator.budget or run.samples required".into());
        }
        crate::runner::parse_qoi(&self.estimator.qoi)?;
        match self.estimator.mode {
            EstimatorMode::CvWeakly1 | EstimatorMode::CvWeakly2 => {
                if self.medium.kind != MediumKind::BernoulliDefect {
                    return err(format!(
                        "estimator mode {:?} requires the bernoulli_defect medium",
                        self.estimator.mode
                    ));
                }
            }
            EstimatorMode::CvEim => {
                if self.medium.kind == MediumKind::MappedFibres {
                    return err("cv_eim requires a scalar (unmapped) medium".into());
                }
            }
            EstimatorMode::Mfmc => {
                if self.estimator.budget <= 0.0 {
                    return err("mfmc requires a positive estimator.budget".into());
                }
            }
            EstimatorMode::Mc => {}
        }
        Ok(())
    }

    /// Applies `QPHOM_SEED`, `QPHOM_THREADS` and `QPHOM_OUT` overrides.
    pub fn apply_env(&mut self) -> Result<(), CliError> {
        if let Ok(v) = std::env::var("QPHOM_SEED") {
            self.run.seed =
                v.parse().map_err(|_| CliError::Config(format!("QPHOM_SEED = {v:?}")))?;
        }
        if let Ok(v) = std::env::var("QPHOM_THREADS") {
            self.run.threads =
                v.parse().map_err(|_| CliError::Config(format!("QPHOM_THREADS = {v:?}")))?;
        }
        if let Ok(v) = std::env::var("QPHOM_OUT") {
            self.run.out_dir = v;
        }
        Ok(())
    }
}

/// Sets one dotted-path key (e.g. `solver.epsilon`) on the serialised tree
/// and re-validates through the schema, so sweeps get the same diagnostics
/// as hand-edited files.
pub fn with_override(cfg: &RunConfig, path: &str, value: &str) -> Result<RunConfig, CliError> {
    let mut tree = toml::Value::try_from(cfg)
        .map_err(|e| CliError::Config(format!("serialising config: {e}")))?;
    // interpret the value as a TOML literal (float, int, bool, ...),
    // falling back to a bare string for enum-like keys
    let parsed: toml::Value = match format!("v = {value}").parse::<toml::Value>() {
        Ok(doc) => doc.as_table().and_then(|t| t.get("v")).cloned().unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = &mut tree;
    let parts: Vec<&str> = path.split('.').collect();
    for (d, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: not a table at {part}")))?;
        if d + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(CliError::Config(format!("{path}: unknown key {part}")));
            }
            table.insert(part.to_string(), parsed);
            break;
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("{path}: unknown section {part}")))?;
    }
    let out: RunConfig = tree
        .try_into()
        .map_err(|e| CliError::Config(format!("override {path} = {value}: {e}")))?;
    out.validate()?;
    Ok(out)
}
