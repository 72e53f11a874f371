//! Experiment configuration: JSON file, dotted `key=value` overrides, and
//! validation into a ready-to-run [`Plan`].

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rvi_core::evolve::{Method, Mode};
use rvi_core::model::{preset_with, PresetOptions, PRESET_NAMES};
use rvi_core::{ControlProblem, GridSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentMode {
    Vi,
    Rvi,
    RviMin,
    Pia,
    McCheck,
    Full,
}

impl ExperimentMode {
    pub fn evolution_mode(self) -> Option<Mode> {
        match self {
            ExperimentMode::Vi => Some(Mode::Vi),
            ExperimentMode::Rvi => Some(Mode::Rvi),
            ExperimentMode::RviMin => Some(Mode::RviMin),
            _ => None,
        }
    }
}

/// Monte Carlo settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McSettings {
    pub paths: usize,
    /// Horizon of the ergodic average.
    pub horizon: f64,
    pub burn_in: f64,
    pub dt: f64,
    /// Start of the ergodic runs; the origin when absent.
    pub x0: Option<Vec<f64>>,
    pub fh_horizon: f64,
    /// Start of the finite-horizon runs; `(1, 0, ..)` when absent.
    pub fh_x0: Option<Vec<f64>>,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            paths: 10_000,
            horizon: 200.0,
            burn_in: 20.0,
            dt: 0.01,
            x0: None,
            fh_horizon: 10.0,
            fh_x0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// The grid is `[-half_width, half_width]^d`.
    pub half_width: f64,
    /// Grid spacing; 0.02 in 1D and 0.2 in 2D when absent.
    pub h: Option<f64>,
    pub control_count: Option<usize>,
    pub u_max: Option<f64>,
    pub mode: ExperimentMode,
    pub horizon: f64,
    /// Time step; 0.9 times the monotone bound when absent.
    pub dt: Option<f64>,
    pub snapshot_every: f64,
    pub method: Method,
    /// `zero`, `constant:c`, `quadratic:a` (a·|x|²) or `vstar`.
    pub phi0: String,
    pub tol: f64,
    pub max_iter: usize,
    pub probe_radius: f64,
    pub mc: McSettings,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            preset: "lqg1d".into(),
            half_width: 4.0,
            h: None,
            control_count: None,
            u_max: None,
            mode: ExperimentMode::Full,
            horizon: 30.0,
            dt: None,
            snapshot_every: 0.5,
            method: Method::Explicit,
            phi0: "zero".into(),
            tol: 1e-8,
            max_iter: 100,
            probe_radius: 1.0,
            mc: McSettings::default(),
            seed: 20240601,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Phi0Spec {
    Zero,
    Constant(f64),
    Quadratic(f64),
    Vstar,
}

impl FromStr for Phi0Spec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let number = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| format!("bad number `{v}` in phi0 spec `{s}`"))
        };
        match s.split_once(':') {
            None if s == "zero" => Ok(Phi0Spec::Zero),
            None if s == "vstar" => Ok(Phi0Spec::Vstar),
            Some(("constant", v)) => Ok(Phi0Spec::Constant(number(v)?)),
            Some(("quadratic", v)) => Ok(Phi0Spec::Quadratic(number(v)?)),
            _ => Err(format!(
                "unknown phi0 spec `{s}` (expected zero, constant:c, quadratic:a or vstar)"
            )),
        }
    }
}

/// A validated configuration with the problem and grid built.
#[derive(Clone, Debug)]
pub struct Plan {
    pub config: ExperimentConfig,
    pub problem: ControlProblem,
    pub grid: Arc<GridSpec>,
    pub h: f64,
    pub phi0: Phi0Spec,
    pub mc_x0: Vec<f64>,
    pub fh_x0: Vec<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Value, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    /// Builds the configuration from an optional JSON document and
    /// `key=value` overrides. Values parse as JSON when they can and as
    /// strings otherwise.
    pub fn from_parts(base: Option<Value>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = base.unwrap_or_else(|| Value::Object(Default::default()));
        if !doc.is_object() {
            return Err(CliError::Config("config must be a JSON object".into()));
        }
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_dotted(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<Plan, CliError> {
        let bad = |msg: String| Err(CliError::Config(format!("preset `{}`: {msg}", self.preset)));
        if !PRESET_NAMES.contains(&self.preset.as_str()) {
            return Err(CliError::Config(format!(
                "unknown preset `{}` (expected one of: {})",
                self.preset,
                PRESET_NAMES.join(", ")
            )));
        }
        let mut opts = PresetOptions::for_preset(&self.preset);
        if let Some(n) = self.control_count {
            opts.control_count = n;
        }
        if let Some(u) = self.u_max {
            opts.u_max = u;
        }
        let problem = match preset_with(&self.preset, &opts) {
            Ok(p) => p,
            Err(e) => return bad(e.to_string()),
        };
        let dim = problem.dim();
        let h = self.h.unwrap_or(if dim == 1 { 0.02 } else { 0.2 });
        let grid = match GridSpec::cube(dim, self.half_width, h) {
            Ok(g) => Arc::new(g),
            Err(e) => return bad(e.to_string()),
        };
        if let Err(e) = problem.validate_on(&grid) {
            return bad(e.to_string());
        }
        let positive = [
            ("horizon", self.horizon, self.horizon >= 0.0),
            ("snapshot_every", self.snapshot_every, self.snapshot_every > 0.0),
            ("tol", self.tol, self.tol > 0.0),
            ("probe_radius", self.probe_radius, self.probe_radius >= 0.0),
            ("mc.horizon", self.mc.horizon, self.mc.horizon > 0.0),
            ("mc.burn_in", self.mc.burn_in, self.mc.burn_in >= 0.0 && self.mc.burn_in < self.mc.horizon),
            ("mc.dt", self.mc.dt, self.mc.dt > 0.0),
            ("mc.fh_horizon", self.mc.fh_horizon, self.mc.fh_horizon >= 0.0),
        ];
        for (name, value, ok) in positive {
            if !ok || !value.is_finite() {
                return bad(format!("{name} = {value} is out of range"));
            }
        }
        if let Some(dt) = self.dt {
            if dt.is_nan() || dt <= 0.0 || !dt.is_finite() {
                return bad(format!("dt = {dt} must be positive"));
            }
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if self.mc.paths < 2 {
            return bad("mc.paths must be at least 2".into());
        }
        if self.probe_radius > self.half_width {
            return bad(format!(
                "probe radius {} exceeds the grid half width {}",
                self.probe_radius, self.half_width
            ));
        }
        let phi0 = match self.phi0.parse::<Phi0Spec>() {
            Ok(p) => p,
            Err(e) => return bad(e),
        };
        let mc_x0 = self.mc.x0.clone().unwrap_or_else(|| vec![0.0; dim]);
        let fh_x0 = self.mc.fh_x0.clone().unwrap_or_else(|| {
            let mut x = vec![0.0; dim];
            x[0] = 1.0;
            x
        });
        for (name, x) in [("mc.x0", &mc_x0), ("mc.fh_x0", &fh_x0)] {
            if x.len() != dim || !grid.contains(x) {
                return bad(format!("{name} = {x:?} is not a point of the {dim}-d grid box"));
            }
        }
        if self.out.is_file() {
            return bad(format!("output path {} is a file", self.out.display()));
        }
        Ok(Plan {
            config: self.clone(),
            problem,
            grid,
            h,
            phi0,
            mc_x0,
            fh_x0,
        })
    }
}

fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override key `{key}` descends into a non-object")))?;
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("override key `{key}` descends into a non-object")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi0_specs_parse() {
        assert_eq!("zero".parse::<Phi0Spec>(), Ok(Phi0Spec::Zero));
        assert_eq!("constant:5".parse::<Phi0Spec>(), Ok(Phi0Spec::Constant(5.0)));
        assert_eq!("quadratic:0.5".parse::<Phi0Spec>(), Ok(Phi0Spec::Quadratic(0.5)));
        assert_eq!("vstar".parse::<Phi0Spec>(), Ok(Phi0Spec::Vstar));
        assert!("constant:x".parse::<Phi0Spec>().is_err());
        assert!("cubic:1".parse::<Phi0Spec>().is_err());
    }

    #[test]
    fn dotted_overrides_apply() {
        let cfg = ExperimentConfig::from_parts(
            None,
            &[
                "mc.paths=500".into(),
                "preset=lqg2d".into(),
                "mode=rvi-min".into(),
                "h=0.1".into(),
                "mc.fh_x0=[0.5,0.5]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.mc.paths, 500);
        assert_eq!(cfg.preset, "lqg2d");
        assert_eq!(cfg.mode, ExperimentMode::RviMin);
        assert_eq!(cfg.h, Some(0.1));
        assert_eq!(cfg.mc.fh_x0, Some(vec![0.5, 0.5]));
        assert_eq!(cfg.mc.horizon, 200.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_parts(None, &["mc.pathz=5".into()]).is_err());
        assert!(ExperimentConfig::from_parts(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn validation_names_the_preset() {
        let cfg = ExperimentConfig {
            preset: "lqg3d".into(),
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lqg3d"), "{err}");

        let cfg = ExperimentConfig {
            h: Some(0.03),
            ..Default::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lqg1d"), "{err}");
    }

    #[test]
    fn defaults_depend_on_dimension() {
        let plan = ExperimentConfig::default().validate().unwrap();
        assert_eq!(plan.h, 0.02);
        assert_eq!(plan.fh_x0, vec![1.0]);
        let plan = ExperimentConfig {
            preset: "lqg2d".into(),
            ..Default::default()
        }
        .validate()
        .unwrap();
        assert_eq!(plan.h, 0.2);
        assert_eq!(plan.mc_x0, vec![0.0, 0.0]);
        assert_eq!(plan.fh_x0, vec![1.0, 0.0]);
    }
}
