//! Experiment configuration: one JSON document, with leaf overrides given as
//! dotted paths on the command line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MepError, Result};
use crate::landscape::ModelSpec;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub n: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Initial time step of the relaxation; the stability cap applies in any
    /// case, and `null` starts at the cap.
    pub dt: Option<f64>,
    /// Seeds of the endpoint minimizer searches, for models without a
    /// canonical pair.
    pub start: Option<Vec<f64>>,
    pub end: Option<Vec<f64>>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            n: 101,
            tol: 1e-8,
            max_iters: 200_000,
            dt: None,
            start: None,
            end: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct StabilityConfig {
    pub trials: usize,
    pub seed: u64,
    /// Spectral gap below which an eigenvalue counts as repeated.
    pub gap_tol: f64,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0,
            gap_tol: crate::diagnostics::DEFAULT_GAP_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationConfig {
    pub deltas: Vec<f64>,
    /// Tube radius; `0.1·L` when `null`.
    pub epsilon: Option<f64>,
    pub bump: ModelSpec,
    pub probes: usize,
    pub seed: u64,
    pub mask: Option<Vec<bool>>,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            deltas: vec![0.0, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2],
            epsilon: None,
            bump: ModelSpec {
                name: "sinusoid".into(),
                params: BTreeMap::from([("kx".to_string(), 3.0), ("ky".to_string(), 2.0)]),
            },
            probes: 20,
            seed: 0,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleConfig {
    /// Graded nodes per decade toward α = 0.
    pub grid: usize,
    pub ns: Vec<u32>,
    pub eta0: f64,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        Self {
            grid: 40,
            ns: vec![2, 4, 8, 16, 32],
            eta0: crate::counterexamples::DEFAULT_ETA0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub directory: String,
    pub formats: Vec<Format>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            formats: vec![Format::Csv, Format::Json, Format::Svg],
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

fn default_model() -> ModelSpec {
    ModelSpec {
        name: "dw".into(),
        params: BTreeMap::from([("kappa".to_string(), 10.0)]),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_model")]
    pub model: ModelSpec,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub stability: StabilityConfig,
    #[serde(default)]
    pub perturbation: PerturbationConfig,
    #[serde(default)]
    pub counterexample: CounterexampleConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: default_model(),
            solver: SolverConfig::default(),
            stability: StabilityConfig::default(),
            perturbation: PerturbationConfig::default(),
            counterexample: CounterexampleConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(MepError::Configuration(format!("{name} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    /// Parses a document, applies `key.path=value` overrides and validates.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| MepError::Configuration(format!("invalid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| MepError::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.solver;
        if s.n < 11 {
            return Err(MepError::Configuration(format!(
                "solver.n must be at least 11, got {}",
                s.n
            )));
        }
        positive("solver.tol", s.tol)?;
        if s.max_iters == 0 {
            return Err(MepError::Configuration("solver.max_iters must be positive".into()));
        }
        if let Some(dt) = s.dt {
            positive("solver.dt", dt)?;
        }
        if s.start.is_some() != s.end.is_some() {
            return Err(MepError::Configuration(
                "solver.start and solver.end go together".into(),
            ));
        }
        positive("stability.gap_tol", self.stability.gap_tol)?;
        let p = &self.perturbation;
        if p.deltas.is_empty() {
            return Err(MepError::Configuration("perturbation.deltas is empty".into()));
        }
        if let Some(d) = p.deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
            return Err(MepError::Configuration(format!(
                "perturbation amplitude {d} is not ≥ 0"
            )));
        }
        if let Some(e) = p.epsilon {
            positive("perturbation.epsilon", e)?;
        }
        let c = &self.counterexample;
        if c.grid < 5 {
            return Err(MepError::Configuration("counterexample.grid must be at least 5".into()));
        }
        positive("counterexample.eta0", c.eta0)?;
        if c.ns.is_empty() || c.ns[0] == 0 || !c.ns.windows(2).all(|w| w[1] > w[0]) {
            return Err(MepError::Configuration(
                "counterexample.ns must be positive and strictly increasing".into(),
            ));
        }
        if self.output.directory.is_empty() {
            return Err(MepError::Configuration("output.directory is empty".into()));
        }
        // Model parameters are checked by building the models.
        self.model.build()?;
        p.bump.build()?;
        Ok(())
    }
}

/// Sets the leaf at a dotted path. The value is parsed as JSON when possible
/// and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let body = assignment.strip_prefix("--").unwrap_or(assignment);
    let (path, raw) = body
        .split_once('=')
        .ok_or_else(|| MepError::Configuration(format!("override '{assignment}' is not key=value")))?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(MepError::Configuration(format!("bad override key '{path}'")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| MepError::Configuration(format!("override '{path}' descends into a non-object")))?;
        node = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| MepError::Configuration(format!("override '{path}' descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
