//! Experiment configuration: JSON file, presets, and `path=value` overrides.

use std::path::Path;

use ccsgd::apps::fishing::{FishingDistribution, FishingParams};
use ccsgd::apps::gas::{GasDecision, SyntheticGasSpec};
use ccsgd::apps::separator::{SeparatorDistribution, SeparatorParams};
use ccsgd::{AuditPolicy, StepSchedule};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid JSON at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("bad override {0:?}: expected path=value")]
    Override(String),
    #[error("override {path}: {message}")]
    OverridePath { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Application {
    Fishing,
    Separator,
    Gas,
}

impl Application {
    pub fn name(self) -> &'static str {
        match self {
            Application::Fishing => "fishing",
            Application::Separator => "separator",
            Application::Gas => "gas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FishingSetup {
    pub params: FishingParams<f64>,
    pub distribution: FishingDistribution,
}

impl Default for FishingSetup {
    fn default() -> Self {
        Self { params: FishingParams::new(100), distribution: FishingDistribution::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeparatorSetup {
    pub params: SeparatorParams<f64>,
    pub distribution: SeparatorDistribution,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasSetup {
    /// Network JSON file; when absent the synthetic network is generated.
    pub network: Option<String>,
    pub synthetic: SyntheticGasSpec,
    pub layout: GasDecision,
}

/// Minibatch sizes and epoch counts. `pairs` zips the two lists, `cross` takes every
/// combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    #[serde(default)]
    pub mode: GridMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridMode {
    #[default]
    Pairs,
    Cross,
}

impl Grid {
    pub fn cells(&self) -> Vec<(usize, usize)> {
        match self.mode {
            GridMode::Pairs => self.sizes.iter().copied().zip(self.epochs.iter().copied()).collect(),
            GridMode::Cross => self
                .sizes
                .iter()
                .flat_map(|&s| self.epochs.iter().map(move |&e| (s, e)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSchedule {
    pub initial: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_stages")]
    pub stages: usize,
}

fn default_factor() -> f64 {
    10.0
}

fn default_stages() -> usize {
    1
}

/// Starting point: one value for every coordinate, or the full vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialPoint {
    Fill(f64),
    Vector(Vec<f64>),
}

impl InitialPoint {
    pub fn resolve(&self, dim: usize) -> Result<Vec<f64>, ConfigError> {
        match self {
            InitialPoint::Fill(v) => Ok(vec![*v; dim]),
            InitialPoint::Vector(x) if x.len() == dim => Ok(x.clone()),
            InitialPoint::Vector(x) => Err(ConfigError::Invalid(format!(
                "initial point has {} entries, problem dimension is {dim}",
                x.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub application: Application,
    #[serde(default)]
    pub fishing: FishingSetup,
    #[serde(default)]
    pub separator: SeparatorSetup,
    #[serde(default)]
    pub gas: GasSetup,
    pub scenarios: usize,
    pub epsilon: f64,
    pub grid: Grid,
    pub step: StepSchedule<f64>,
    pub lambda: LambdaSchedule,
    pub initial: InitialPoint,
    #[serde(default)]
    pub seed: u64,
    /// Held-out scenarios for the out-of-sample failure rate; `None` means ten times the
    /// training count, zero disables it.
    #[serde(default)]
    pub test_scenarios: Option<usize>,
    #[serde(default)]
    pub reinit_delayed_values: bool,
    #[serde(default = "default_true")]
    pub parallel: bool,
    #[serde(default = "default_audit")]
    pub audit: AuditPolicy,
    /// Also run the full-gradient method with one step per epoch of each cell.
    #[serde(default)]
    pub compare_batch: bool,
    #[serde(default = "default_true")]
    pub write_traces: bool,
}

fn default_true() -> bool {
    true
}

fn default_audit() -> AuditPolicy {
    AuditPolicy::Never
}

impl ExperimentConfig {
    /// Default experiment for each application.
    pub fn preset(app: Application) -> Self {
        let base = |scenarios, epsilon, sizes: Vec<usize>, epochs: Vec<usize>, mode, alpha, lambda, initial| Self {
            schema_version: SCHEMA_VERSION,
            application: app,
            fishing: FishingSetup::default(),
            separator: SeparatorSetup::default(),
            gas: GasSetup::default(),
            scenarios,
            epsilon,
            grid: Grid { sizes, epochs, mode },
            step: StepSchedule::Constant { alpha },
            lambda: LambdaSchedule { initial: lambda, factor: 10.0, stages: 1 },
            initial,
            seed: 1,
            test_scenarios: None,
            reinit_delayed_values: false,
            parallel: true,
            audit: AuditPolicy::Never,
            compare_batch: false,
            write_traces: true,
        };
        let mut cfg = match app {
            Application::Fishing => base(
                10_000,
                0.2,
                vec![1000, 100],
                vec![10, 1],
                GridMode::Pairs,
                1e-2,
                10.0,
                InitialPoint::Fill(0.0),
            ),
            Application::Separator => base(
                1000,
                0.1,
                vec![1000, 100, 10],
                vec![20, 20, 20],
                GridMode::Pairs,
                1e-4,
                1e3,
                InitialPoint::Vector(vec![5.0, -0.1, 0.1]),
            ),
            Application::Gas => base(
                10_000,
                0.15,
                vec![2000, 1000, 500, 250, 100],
                vec![40, 20, 10, 5, 2],
                GridMode::Cross,
                1e-4,
                1e-3,
                InitialPoint::Fill(1.0),
            ),
        };
        // Larger λ makes the constant-step iterate cycle: fishing past about 1e4, and the
        // separator past 1e4 because the bounce derivatives dominate the penalty gradient.
        cfg.lambda.stages = match app {
            Application::Fishing => 4,
            Application::Separator => 2,
            Application::Gas => 7,
        };
        cfg
    }

    pub fn from_value(value: Value) -> Result<Self, ConfigError> {
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let mut de = serde_json::Deserializer::from_str(text);
        let value: Value = serde_path_to_error::deserialize(&mut de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    /// Applies `a.b.c=value` overrides on the JSON form and re-validates. The value is parsed
    /// as JSON when possible and taken as a string otherwise.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value = serde_json::to_value(self).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for item in overrides {
            let (path, raw) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.clone()))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, path, parsed)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.scenarios == 0 {
            return bad("scenarios must be positive".into());
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.grid.mode == GridMode::Pairs && self.grid.sizes.len() != self.grid.epochs.len() {
            return bad("grid mode pairs needs as many sizes as epoch counts".into());
        }
        let cells = self.grid.cells();
        if cells.is_empty() {
            return bad("grid has no cells".into());
        }
        if cells.iter().any(|&(size, epochs)| size == 0 || epochs == 0) {
            return bad("minibatch sizes and epoch counts must be positive".into());
        }
        let alpha = self.step.base();
        if !(alpha.is_finite() && alpha > 0.0) {
            return bad(format!("step size must be positive, got {alpha}"));
        }
        let l = &self.lambda;
        if !(l.initial.is_finite() && l.initial > 0.0) || l.stages == 0 || (l.stages > 1 && !(l.factor > 1.0)) {
            return bad("lambda schedule needs initial > 0, stages ≥ 1 and factor > 1".into());
        }
        if let InitialPoint::Fill(v) = self.initial {
            if !v.is_finite() {
                return bad("initial point must be finite".into());
            }
        }
        Ok(())
    }

    /// Checks that every grid cell fits the scenario set. Only runs need this, so it is kept
    /// out of [`validate`](Self::validate).
    pub fn check_grid(&self) -> Result<(), ConfigError> {
        match self.grid.cells().into_iter().find(|&(size, _)| size > self.scenarios) {
            Some((size, _)) => Err(ConfigError::Invalid(format!(
                "minibatch size {size} exceeds the {} scenarios",
                self.scenarios
            ))),
            None => Ok(()),
        }
    }

    pub fn test_count(&self) -> usize {
        self.test_scenarios.unwrap_or(10 * self.scenarios)
    }

    pub fn lambdas(&self) -> Vec<f64> {
        (0..self.lambda.stages)
            .map(|i| self.lambda.initial * self.lambda.factor.powi(i as i32))
            .collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}

fn set_path(root: &mut Value, path: &str, new: Value) -> Result<(), ConfigError> {
    let err = |m: &str| ConfigError::OverridePath { path: path.to_string(), message: m.to_string() };
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(err("empty path component"));
        }
        let last = n + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), new);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert(Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let i: usize = part.parse().map_err(|_| err("array index expected"))?;
                let slot = items.get_mut(i).ok_or_else(|| err("array index out of range"))?;
                if last {
                    *slot = new;
                    return Ok(());
                }
                slot
            }
            Value::Null if !last => {
                *cur = Value::Object(Default::default());
                let Value::Object(map) = cur else { unreachable!() };
                map.entry(part.to_string()).or_insert(Value::Object(Default::default()))
            }
            _ => return Err(err("path descends into a scalar")),
        };
    }
    Err(err("empty path"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for app in [Application::Fishing, Application::Separator, Application::Gas] {
            let cfg = ExperimentConfig::preset(app);
            cfg.validate().unwrap();
            cfg.check_grid().unwrap();
            let back = ExperimentConfig::from_json_str(&cfg.to_pretty_json()).unwrap();
            assert_eq!(back, cfg);
        }
        assert_eq!(ExperimentConfig::preset(Application::Gas).grid.cells().len(), 25);
        assert_eq!(ExperimentConfig::preset(Application::Fishing).grid.cells(), vec![(1000, 10), (100, 1)]);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = ExperimentConfig::preset(Application::Fishing)
            .with_overrides(&[
                "fishing.params.steps=20".into(),
                "grid.sizes=[10]".into(),
                "grid.epochs.0=3".into(),
                "grid.mode=cross".into(),
                "step.kind=inverse-sqrt".into(),
            ])
            .unwrap();
        assert_eq!(cfg.fishing.params.steps, 20);
        assert_eq!(cfg.grid.cells(), vec![(10, 3), (10, 1)]);
        assert!(matches!(cfg.step, StepSchedule::InverseSqrt { .. }));
    }

    #[test]
    fn bad_input_is_reported_with_its_path() {
        let base = ExperimentConfig::preset(Application::Gas);
        let err = base.with_overrides(&["epsilon=\"x\"".into()]).unwrap_err();
        assert!(err.to_string().contains("epsilon"), "{err}");
        assert!(base.with_overrides(&["epsilon=1.5".into()]).is_err());
        assert!(base.with_overrides(&["nonsense".into()]).is_err());
        assert!(base.with_overrides(&["bogus_field=1".into()]).is_err());
        assert!(base.with_overrides(&["schema_version=2".into()]).is_err());
        assert!(base.with_overrides(&["grid.sizes=[0]".into()]).is_err());
        let large = base.with_overrides(&["grid.sizes=[20000]".into()]).unwrap();
        assert!(large.check_grid().is_err());
    }
}
