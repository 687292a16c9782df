//! TOML run configuration. Relative data paths resolve against the directory
//! of the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cmprsk_core::simulate::{Example1Config, SimConfig};
use cmprsk_core::{FitOptions, LatePolicy, ModelSpec};
use serde::Deserialize;

use crate::{CliError, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: Option<SimulateSection>,
    pub data: Option<DataSection>,
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub options: OptionsSection,
    #[serde(default)]
    pub curves: CurvesSection,
    #[serde(default)]
    pub check: CheckSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory of the configuration file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Generator and its parameters.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum SimulateSection {
    Example5(SimConfig),
    Example1(Example1Config),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Late {
    #[default]
    Error,
    Truncate,
}

impl From<Late> for LatePolicy {
    fn from(l: Late) -> Self {
        match l {
            Late::Error => LatePolicy::Error,
            Late::Truncate => LatePolicy::Truncate,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// One file per longitudinal block, in block order.
    pub longitudinal: Vec<PathBuf>,
    pub survival: PathBuf,
    /// Defaults to the number of cause blocks in the model.
    pub n_causes: Option<u32>,
    #[serde(default)]
    pub late: Late,
    #[serde(default)]
    pub rescale_time: bool,
}

/// Overrides of the inference defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionsSection {
    pub threads: Option<usize>,
    pub newton_tolerance: Option<f64>,
    pub newton_max_iterations: Option<usize>,
    pub diameter_tolerance: Option<f64>,
    pub spread_tolerance: Option<f64>,
    pub max_evaluations: Option<usize>,
    pub initial_step: Option<f64>,
    pub hessian_step: Option<f64>,
    pub grid_step: Option<f64>,
    pub grid_drop: Option<f64>,
    pub grid_max_steps: Option<usize>,
}

impl OptionsSection {
    pub fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions::default();
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut o.newton.tolerance, self.newton_tolerance);
        set(&mut o.optimizer.diameter_tolerance, self.diameter_tolerance);
        set(&mut o.optimizer.spread_tolerance, self.spread_tolerance);
        set(&mut o.optimizer.initial_step, self.initial_step);
        set(&mut o.grid.hessian_step, self.hessian_step);
        set(&mut o.grid.step, self.grid_step);
        set(&mut o.grid.drop, self.grid_drop);
        if let Some(v) = self.newton_max_iterations {
            o.newton.max_iterations = v;
        }
        if let Some(v) = self.max_evaluations {
            o.optimizer.max_evaluations = v;
        }
        if let Some(v) = self.grid_max_steps {
            o.grid.max_steps = v;
        }
        o
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveGroup {
    pub name: String,
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurvesSection {
    /// Points of the cumulative incidence grid on `[0, t_max]`.
    #[serde(default = "default_n_times")]
    pub n_times: usize,
    /// Defaults to the largest survival time.
    pub t_max: Option<f64>,
    /// Covariate settings; by default a single group at the covariate means.
    #[serde(default)]
    pub groups: Vec<CurveGroup>,
}

fn default_n_times() -> usize {
    101
}

impl Default for CurvesSection {
    fn default() -> Self {
        CurvesSection {
            n_times: default_n_times(),
            t_max: None,
            groups: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSection {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Overrides the number of simulated individuals.
    pub n_individuals: Option<usize>,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    /// Multiplies every tolerance; 0 makes every comparison fail.
    #[serde(default = "one")]
    pub tolerance_scale: f64,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_bins() -> usize {
    50
}

fn one() -> f64 {
    1.0
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection {
            seeds: default_seeds(),
            n_individuals: None,
            n_bins: default_bins(),
            tolerance_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Pretty,
    Compact,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| CliError::input(path, e.to_string()))?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `--out` wins over `[output] dir`, which resolves against the config
    /// directory; the fallback is the config directory itself.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        match (flag, &self.output.dir) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(d)) => self.resolve(d),
            (None, None) if self.base_dir.as_os_str().is_empty() => PathBuf::from("."),
            (None, None) => self.base_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_defaults() {
        let c = RunConfig::parse("", Path::new("dir/run.toml")).unwrap();
        assert_eq!(c.check.seeds, [1, 2, 3, 4, 5]);
        assert_eq!(c.base_dir, Path::new("dir"));
        assert_eq!(c.options.fit_options(), FitOptions::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[options]\nthreds = 2", Path::new("x.toml")).is_err());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("[options]\nnewton_tolerance = 1e-6\ngrid_drop = 3.0", Path::new("x.toml")).unwrap();
        let o = c.options.fit_options();
        assert_eq!(o.newton.tolerance, 1e-6);
        assert_eq!(o.grid.drop, 3.0);
    }
}
