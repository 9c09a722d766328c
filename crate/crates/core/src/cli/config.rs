//! Run configuration and its resolution into library objects.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::flow::{self, FlowSettings, Integrator, RunParameters};
use crate::manifold::{build_geometry, initial_data, GeometrySpec, InitialData, ModelGeometry, ScalarField};
use crate::operators::FlowSign;

/// Output root override.
pub const OUTPUT_ROOT_ENV: &str = "WEBSTER_FLOW_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auto {
    Auto,
}

/// `"auto"` or a positive step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeStep {
    Fixed(f64),
    Auto(Auto),
}

impl Default for TimeStep {
    fn default() -> Self {
        TimeStep::Auto(Auto::Auto)
    }
}

/// Expert-only knobs. Absent fields take the library defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConventionOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_sign: Option<FlowSign>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blowup_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_stab: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cg_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cg_max_iter: Option<usize>,
}

fn default_max_steps() -> u64 {
    1_000_000
}
fn default_plateau_tol() -> f64 {
    1e-10
}
fn default_plateau_window() -> usize {
    50
}
fn default_converge_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometrySpec,
    pub initial: InitialData,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub dt: TimeStep,
    pub max_time: f64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default = "default_plateau_tol")]
    pub plateau_tol: f64,
    #[serde(default = "default_plateau_window")]
    pub plateau_window: usize,
    #[serde(default = "default_converge_tol")]
    pub converge_tol: f64,
    /// Write `λ` every this many steps; 0 disables snapshots.
    #[serde(default)]
    pub snapshot_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub conventions: ConventionOverrides,
}

impl RunConfig {
    pub fn new(geometry: GeometrySpec, initial: InitialData, max_time: f64) -> Self {
        RunConfig {
            geometry,
            initial,
            integrator: Integrator::default(),
            dt: TimeStep::default(),
            max_time,
            max_steps: default_max_steps(),
            plateau_tol: default_plateau_tol(),
            plateau_window: default_plateau_window(),
            converge_tol: default_converge_tol(),
            snapshot_every: 0,
            output_dir: None,
            conventions: ConventionOverrides::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FlowError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn settings(&self) -> FlowSettings {
        let d = FlowSettings::default();
        let c = &self.conventions;
        FlowSettings {
            sign: c.flow_sign.unwrap_or(d.sign),
            blowup_threshold: c.blowup_threshold.unwrap_or(d.blowup_threshold),
            c_stab: c.c_stab.unwrap_or(d.c_stab),
            cg_tol: c.cg_tol.unwrap_or(d.cg_tol),
            cg_max_iter: c.cg_max_iter.unwrap_or(d.cg_max_iter),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(FlowError::Config(msg.to_string()));
        if !(self.max_time > 0.0 && self.max_time.is_finite()) {
            return bad("max_time must be positive and finite");
        }
        if let TimeStep::Fixed(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return bad("dt must be positive and finite or \"auto\"");
            }
        }
        if !(self.plateau_tol >= 0.0) {
            return bad("plateau_tol must be non-negative");
        }
        if !(self.converge_tol >= 0.0) {
            return bad("converge_tol must be non-negative");
        }
        let s = self.settings();
        if !(s.blowup_threshold > 0.0) {
            return bad("blowup_threshold must be positive");
        }
        if !(s.c_stab > 0.0) {
            return bad("c_stab must be positive");
        }
        if !(s.cg_tol > 0.0) || s.cg_max_iter == 0 {
            return bad("cg_tol and cg_max_iter must be positive");
        }
        Ok(())
    }

    /// Builds the geometry and initial field and expands every default.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.validate()?;
        let geometry = build_geometry(&self.geometry)?;
        let initial = initial_data(&geometry, &self.initial)?;
        initial.ensure_finite()?;
        let dt = match self.dt {
            TimeStep::Fixed(dt) => dt,
            TimeStep::Auto(_) => match self.integrator {
                Integrator::Explicit => flow::auto_dt_explicit(&initial),
                Integrator::Imex => flow::auto_dt_imex(&initial),
            },
        };
        let settings = self.settings();
        let params = RunParameters {
            integrator: self.integrator,
            dt,
            max_time: self.max_time,
            max_steps: self.max_steps,
            plateau_tol: self.plateau_tol,
            plateau_window: self.plateau_window,
            converge_tol: self.converge_tol,
            snapshot_every: self.snapshot_every,
            settings: settings.clone(),
        };
        let mut config = self.clone();
        config.dt = TimeStep::Fixed(dt);
        config.conventions = ConventionOverrides {
            flow_sign: Some(settings.sign),
            blowup_threshold: Some(settings.blowup_threshold),
            c_stab: Some(settings.c_stab),
            cg_tol: Some(settings.cg_tol),
            cg_max_iter: Some(settings.cg_max_iter),
        };
        Ok(ResolvedRun {
            config,
            geometry,
            initial,
            params,
        })
    }
}

pub struct ResolvedRun {
    /// The input config with every default filled in.
    pub config: RunConfig,
    pub geometry: Arc<ModelGeometry>,
    pub initial: ScalarField,
    pub params: RunParameters,
}

/// Output directory: explicit flag, else the config's `output_dir`, else
/// `out/<config stem>`; relative paths are taken under `$WEBSTER_FLOW_OUT`
/// when it is set.
pub fn output_dir(flag: Option<&Path>, config: &RunConfig, config_path: &Path) -> PathBuf {
    let chosen = flag
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            Path::new("out").join(stem)
        });
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if chosen.is_relative() => PathBuf::from(root).join(chosen),
        _ => chosen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let text = r#"{
            "geometry": {"kind": "heisenberg_sector_2d", "resolution": [32, 32]},
            "initial": {"kind": "smooth_random", "seed": 1, "amplitude": 0.05, "cutoff": 3},
            "max_time": 1e-6
        }"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.dt, TimeStep::Auto(Auto::Auto));
        assert_eq!(cfg.plateau_window, 50);
        assert_eq!(cfg.integrator, Integrator::Explicit);
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn dt_accepts_number_or_auto() {
        let with = |dt: &str| {
            format!(
                r#"{{"geometry": {{"kind": "sphere", "resolution": [16]}},
                   "initial": {{"kind": "constant", "value": 0.0}},
                   "max_time": 1.0, "dt": {dt}}}"#
            )
        };
        assert_eq!(RunConfig::from_json(&with("1e-7")).unwrap().dt, TimeStep::Fixed(1e-7));
        assert_eq!(
            RunConfig::from_json(&with("\"auto\"")).unwrap().dt,
            TimeStep::Auto(Auto::Auto)
        );
        assert!(RunConfig::from_json(&with("\"soon\"")).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"geometry": {"kind": "sphere", "resolution": [16]},
            "initial": {"kind": "constant", "value": 0.0}, "max_time": 1.0, "tmax": 2}"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn resolve_expands_defaults() {
        let cfg = RunConfig::new(
            GeometrySpec::sector(16),
            InitialData::Constant { value: 0.0 },
            1e-3,
        );
        let r = cfg.resolve().unwrap();
        assert!(matches!(r.config.dt, TimeStep::Fixed(dt) if dt > 0.0));
        assert_eq!(r.config.conventions.blowup_threshold, Some(20.0));
        assert_eq!(r.config.conventions.flow_sign, Some(FlowSign::Descending));
        let again = r.config.resolve().unwrap();
        assert_eq!(again.config, r.config);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let mut cfg = RunConfig::new(GeometrySpec::sector(16), InitialData::Constant { value: 0.0 }, 1.0);
        cfg.max_time = -1.0;
        assert!(matches!(cfg.resolve(), Err(FlowError::Config(_))));
        cfg.max_time = 1.0;
        cfg.dt = TimeStep::Fixed(0.0);
        assert!(matches!(cfg.resolve(), Err(FlowError::Config(_))));
    }
}
