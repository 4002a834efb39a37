//! Run configuration: every tunable of the pipeline with its default, loadable
//! from a JSON file and echoed next to each run's outputs.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::guidance::{
    DecaySchedule, GuidanceParams, DEFAULT_FRACTION, DEFAULT_K, DEFAULT_NEG_CONST, DEFAULT_STEPS,
};
use crate::heads::{DEFAULT_BLOCK, DEFAULT_GAMMA};
use crate::layout::{MeanShiftParams, DEFAULT_EPS, DEFAULT_MIN_PTS, DEFAULT_PEAK_RATIO};
use crate::refine::default_radius;

/// Environment variable naming a config file used when none is given.
pub const CONFIG_ENV: &str = "NUMINA_CONFIG";
/// File name of the resolved config written next to outputs.
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("config file {path}: {msg}")]
    Parse { path: String, msg: String },
    #[error("{field} = {value} is out of range ({range})")]
    OutOfRange {
        field: &'static str,
        value: String,
        range: &'static str,
    },
}

/// A value that is either fixed or derived from the grid size.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Auto<T> {
    #[default]
    Auto,
    Value(T),
}

impl<T: Copy> Auto<T> {
    pub fn resolve(self, auto: impl FnOnce() -> T) -> T {
        match self {
            Auto::Auto => auto(),
            Auto::Value(v) => v,
        }
    }
}

impl<T: std::str::FromStr> std::str::FromStr for Auto<T> {
    type Err = T::Err;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(Auto::Auto)
        } else {
            s.parse().map(Auto::Value)
        }
    }
}

impl<T: Serialize> Serialize for Auto<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => v.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Auto<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw<T> {
            Text(String),
            Value(T),
        }
        match Raw::<T>::deserialize(d)? {
            Raw::Text(s) if s == "auto" => Ok(Auto::Auto),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "expected a number or \"auto\", got {s:?}"
            ))),
            Raw::Value(v) => Ok(Auto::Value(v)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Minimum overlap score for a region to count as an instance.
    pub tau: f64,
    /// Weight of the temporal term in placement cost.
    pub lambda: f64,
    /// Boost added to circle-template additions.
    pub k: f64,
    /// Weight of edge clarity in head scores.
    pub gamma: f64,
    /// Block side for the block-variance score.
    pub block: usize,
    pub peak_ratio: f64,
    pub eps: f64,
    pub min_pts: usize,
    /// Mean-shift bandwidth; auto is max(grid_h, grid_w) / 6.
    pub bandwidth: Auto<f64>,
    /// Radius of circle templates; auto is round(min(grid_h, grid_w) / 8).
    pub radius: Auto<usize>,
    pub neg_const: f64,
    /// Spacing of candidate placement centers.
    pub stride: usize,
    /// Share of the denoising steps during which additions are guided.
    pub fraction: f64,
    pub total_steps: usize,
    /// Denoising step the attention was captured at.
    pub timestep: u32,
    /// Transformer layer the attention was captured from.
    pub layer: u32,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda: 8.0,
            k: DEFAULT_K,
            gamma: DEFAULT_GAMMA,
            block: DEFAULT_BLOCK,
            peak_ratio: DEFAULT_PEAK_RATIO,
            eps: DEFAULT_EPS,
            min_pts: DEFAULT_MIN_PTS,
            bandwidth: Auto::Auto,
            radius: Auto::Auto,
            neg_const: DEFAULT_NEG_CONST,
            stride: 2,
            fraction: DEFAULT_FRACTION,
            total_steps: DEFAULT_STEPS,
            timestep: 20,
            layer: 15,
            seed: 0,
        }
    }
}

fn out_of_range(field: &'static str, value: impl ToString, range: &'static str) -> ConfigError {
    ConfigError::OutOfRange {
        field,
        value: value.to_string(),
        range,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(out_of_range("tau", self.tau, "(0, 1]"));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(out_of_range("lambda", self.lambda, ">= 0"));
        }
        if !self.k.is_finite() {
            return Err(out_of_range("k", self.k, "finite"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(out_of_range("gamma", self.gamma, ">= 0"));
        }
        if self.block == 0 {
            return Err(out_of_range("block", self.block, ">= 1"));
        }
        if !(self.peak_ratio > 0.0 && self.peak_ratio < 1.0) {
            return Err(out_of_range("peak_ratio", self.peak_ratio, "(0, 1)"));
        }
        if !finite_pos(self.eps) {
            return Err(out_of_range("eps", self.eps, "> 0"));
        }
        if self.min_pts == 0 {
            return Err(out_of_range("min_pts", self.min_pts, ">= 1"));
        }
        if let Auto::Value(b) = self.bandwidth {
            if !finite_pos(b) {
                return Err(out_of_range("bandwidth", b, "> 0 or auto"));
            }
        }
        if !(self.neg_const.is_finite() && self.neg_const < 0.0) {
            return Err(out_of_range("neg_const", self.neg_const, "< 0"));
        }
        if self.stride == 0 {
            return Err(out_of_range("stride", self.stride, ">= 1"));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(out_of_range("fraction", self.fraction, "(0, 1]"));
        }
        if self.total_steps == 0 {
            return Err(out_of_range("total_steps", self.total_steps, ">= 1"));
        }
        Ok(())
    }

    pub fn from_json(json: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(json).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// The file named by `NUMINA_CONFIG`, or the defaults when it is unset.
    pub fn from_env() -> Result<Self, ConfigError> {
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(p),
            _ => Ok(Self::default()),
        }
    }

    /// Writes the config as `run_config.json` inside `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<std::path::PathBuf, ConfigError> {
        let path = dir.as_ref().join(ECHO_FILE);
        std::fs::write(&path, self.to_json() + "\n").map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(path)
    }

    pub fn mean_shift(&self, grid_h: usize, grid_w: usize) -> MeanShiftParams {
        let mut params = MeanShiftParams::for_grid(grid_h, grid_w);
        if let Auto::Value(b) = self.bandwidth {
            params.bandwidth = b;
        }
        params
    }

    pub fn radius_for(&self, grid_h: usize, grid_w: usize) -> usize {
        self.radius.resolve(|| default_radius(grid_h, grid_w))
    }

    pub fn guidance(&self) -> Result<GuidanceParams, ConfigError> {
        let schedule = DecaySchedule::new(self.total_steps, self.fraction)
            .map_err(|_| out_of_range("fraction", self.fraction, "(0, 1]"))?;
        Ok(GuidanceParams {
            k: self.k,
            neg_const: self.neg_const,
            schedule,
        })
    }
}
