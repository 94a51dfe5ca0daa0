//! Experiment configuration read from TOML.

use serde::Deserialize;
use shjb_core::{
    builtin_problem, ControlSet64, CostSpec64, Layout, PathTree64, SpatialGrid64, TimeGrid, DEFAULT_NODE_BUDGET,
};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Built-in problem name.
    pub problem: String,
    /// Optional control set override: a list of `d x m` matrices, row-major.
    #[serde(default)]
    pub controls: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub tree: TreeConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub penalty: PenaltyConfig,
    #[serde(default)]
    pub certificate: CertificateConfig,
    #[serde(default)]
    pub obstacle: ObstacleConfig,
    #[serde(default)]
    pub pde: PdeConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub tolerances: ToleranceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutName {
    Tree,
    Markov,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    /// Wiener dimension; defaults to the problem's.
    pub m: Option<usize>,
    pub steps: usize,
    pub horizon: f64,
    pub budget: usize,
    pub layout: LayoutName,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            m: None,
            steps: 3,
            horizon: 1.0,
            budget: DEFAULT_NODE_BUDGET,
            layout: LayoutName::Tree,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub radius: f64,
    pub spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            radius: 1.0,
            spacing: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    /// Constant control driving the paths; defaults to the last control.
    pub control: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub schedule: Vec<f64>,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            schedule: vec![16.0, 64.0, 256.0, 1024.0, 4096.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateModeName {
    Exact,
    Constant,
    Degraded,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CertificateConfig {
    pub eps: Vec<f64>,
    pub mode: CertificateModeName,
    /// Suboptimal control for the constant and degraded modes; defaults to
    /// the last control.
    pub control: Option<usize>,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        Self {
            eps: vec![0.4, 0.2, 0.1],
            mode: CertificateModeName::Degraded,
            control: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObstacleKind {
    /// Seeded node-wise uniform obstacle.
    Random,
    /// `slope * (T - t)`.
    Linear,
    /// Never binding.
    None,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObstacleConfig {
    pub kind: ObstacleKind,
    pub seed: u64,
    pub scale: f64,
    pub slope: f64,
    /// Constant running field `H` of the reflected problem.
    pub running: f64,
}

impl Default for ObstacleConfig {
    fn default() -> Self {
        Self {
            kind: ObstacleKind::Random,
            seed: 7,
            scale: 1.0,
            slope: 1.0,
            running: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeConfig {
    pub radius: f64,
    pub spacing: f64,
    /// Fewest stable steps when absent.
    pub steps: Option<usize>,
    /// Store every `stride`-th level.
    pub stride: usize,
}

impl Default for PdeConfig {
    fn default() -> Self {
        Self {
            radius: 8.0,
            spacing: 0.05,
            steps: None,
            stride: 100,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub samples: usize,
    pub seed: u64,
    pub radius: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 7,
            radius: 6.0,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToleranceConfig {
    /// Multiplies every verification tolerance.
    pub scale: f64,
}

impl Default for ToleranceConfig {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn positive(field: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, format!("must be positive and finite, got {v}")))
    }
}

fn multiple_of(field: &str, value: f64, unit: f64) -> Result<(), CliError> {
    let r = value / unit;
    if (r - r.round()).abs() > 1e-9 * r.abs().max(1.0) || r.round() < 1.0 {
        return Err(bad(field, format!("{value} is not a positive multiple of {unit}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Problem with the configured control set.
    pub fn spec(&self) -> Result<CostSpec64, CliError> {
        let spec = builtin_problem::<f64>(&self.problem).map_err(|e| bad("problem", e.to_string()))?;
        let Some(mats) = &self.controls else {
            return Ok(spec);
        };
        let mut elements = Vec::with_capacity(mats.len());
        for (i, mat) in mats.iter().enumerate() {
            if mat.len() != spec.d || mat.iter().any(|row| row.len() != spec.m) {
                return Err(bad(
                    format!("controls[{i}]"),
                    format!("expected a {}x{} matrix for problem `{}`", spec.d, spec.m, spec.name),
                ));
            }
            if let Some(v) = mat.iter().flatten().find(|v| !v.is_finite()) {
                return Err(bad(format!("controls[{i}]"), format!("entry {v} is not finite")));
            }
            elements.push(mat.iter().flatten().copied().collect());
        }
        let set = ControlSet64::new(spec.d, spec.m, elements).map_err(|e| match e {
            shjb_core::Error::Config { field, message } => bad(field, message),
            other => bad("controls", other.to_string()),
        })?;
        spec.with_controls(set).map_err(|e| bad("controls", e.to_string()))
    }

    pub fn m(&self, spec: &CostSpec64) -> usize {
        self.tree.m.unwrap_or(spec.m)
    }

    pub fn time_grid(&self) -> Result<TimeGrid<f64>, CliError> {
        TimeGrid::new(self.tree.horizon, self.tree.steps).map_err(|e| bad("tree", e.to_string()))
    }

    pub fn path_tree(&self, spec: &CostSpec64) -> Result<PathTree64, CliError> {
        PathTree64::build(self.m(spec), self.time_grid()?, self.tree.budget).map_err(|e| bad("tree.budget", e.to_string()))
    }

    pub fn spatial_grid(&self, d: usize) -> Result<SpatialGrid64, CliError> {
        SpatialGrid64::new(d, self.grid.radius, self.grid.spacing).map_err(|e| bad("grid", e.to_string()))
    }

    pub fn layout(&self) -> Layout {
        match self.tree.layout {
            LayoutName::Tree => Layout::Tree,
            LayoutName::Markov => Layout::Markov,
        }
    }

    pub fn strategy_control(&self, spec: &CostSpec64) -> usize {
        self.strategy.control.unwrap_or(spec.controls.len() - 1)
    }

    pub fn certificate_control(&self, spec: &CostSpec64) -> usize {
        self.certificate.control.unwrap_or(spec.controls.len() - 1)
    }

    /// Semantic checks beyond the TOML schema.
    pub fn validate(&self) -> Result<(), CliError> {
        let spec = self.spec()?;
        if self.tree.steps == 0 {
            return Err(bad("tree.steps", "must be at least 1"));
        }
        if self.tree.budget == 0 {
            return Err(bad("tree.budget", "must be positive"));
        }
        positive("tree.horizon", self.tree.horizon)?;
        if let Some(m) = self.tree.m {
            if m != spec.m {
                return Err(bad("tree.m", format!("problem `{}` needs m = {}", spec.name, spec.m)));
            }
        }
        if self.tree.layout == LayoutName::Markov && !spec.is_markovian() {
            return Err(bad("tree.layout", "the Markov layout needs a problem with m0 = 0"));
        }
        positive("grid.radius", self.grid.radius)?;
        positive("grid.spacing", self.grid.spacing)?;
        multiple_of("grid.spacing", 2.0 * self.grid.radius, self.grid.spacing)?;
        let nu = spec.controls.len();
        if let Some(c) = self.strategy.control {
            if c >= nu {
                return Err(bad("strategy.control", format!("index {c} outside a set of {nu} controls")));
            }
        }
        if let Some(c) = self.certificate.control {
            if c >= nu {
                return Err(bad("certificate.control", format!("index {c} outside a set of {nu} controls")));
            }
        }
        if self.penalty.schedule.is_empty() {
            return Err(bad("penalty.schedule", "must not be empty"));
        }
        for (i, n) in self.penalty.schedule.iter().enumerate() {
            positive(&format!("penalty.schedule[{i}]"), *n)?;
        }
        if self.certificate.eps.is_empty() {
            return Err(bad("certificate.eps", "must not be empty"));
        }
        for (i, e) in self.certificate.eps.iter().enumerate() {
            let field = format!("certificate.eps[{i}]");
            positive(&field, *e)?;
            multiple_of(&field, *e, self.grid.spacing)?;
            multiple_of(&field, 2.0 * self.grid.radius, *e)?;
        }
        positive("obstacle.scale", self.obstacle.scale)?;
        if !self.obstacle.slope.is_finite() || !self.obstacle.running.is_finite() {
            return Err(bad("obstacle", "slope and running must be finite"));
        }
        positive("pde.radius", self.pde.radius)?;
        positive("pde.spacing", self.pde.spacing)?;
        multiple_of("pde.spacing", 2.0 * self.pde.radius, self.pde.spacing)?;
        if self.pde.steps == Some(0) {
            return Err(bad("pde.steps", "must be at least 1"));
        }
        if self.pde.stride == 0 {
            return Err(bad("pde.stride", "must be at least 1"));
        }
        if self.sampling.samples == 0 {
            return Err(bad("sampling.samples", "must be positive"));
        }
        positive("sampling.radius", self.sampling.radius)?;
        positive("tolerances.scale", self.tolerances.scale)?;
        Ok(())
    }
}
