use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PatchProtocol, SynthWorldConfig};
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use crate::model::SpliifConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate the synthetic world in memory.
    Synth,
    /// Read `stations_csv` and `topography_asc`.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub stations_csv: Option<PathBuf>,
    pub topography_asc: Option<PathBuf>,
    pub synth: SynthWorldConfig,
    pub patch: PatchProtocol,
    /// Fraction of stations withheld from training and used as targets.
    pub holdout_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synth,
            stations_csv: None,
            topography_asc: None,
            synth: SynthWorldConfig::default(),
            patch: PatchProtocol::default(),
            holdout_fraction: 0.3,
            split_seed: 3,
        }
    }
}

/// The whole run description. Every section has defaults; unknown keys are
/// rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: SpliifConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
}

fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => Error::Config(format!("{key}: {other}")),
    }
}

impl RunConfig {
    /// Parses a JSON document after applying `key.path=value` overrides.
    /// Errors name the offending key path.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_json(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| keyed("model", e))?;
        self.train.validate().map_err(|e| keyed("train", e))?;
        self.eval.validate().map_err(|e| keyed("eval", e))?;
        self.data.patch.validate().map_err(|e| keyed("data.patch", e))?;
        let d = &self.data;
        if d.source == DataSource::Synth {
            d.synth.validate().map_err(|e| keyed("data.synth", e))?;
        } else {
            if d.stations_csv.is_none() {
                return Err(Error::Config("data.stations_csv: required when data.source is \"files\"".into()));
            }
            if d.topography_asc.is_none() {
                return Err(Error::Config("data.topography_asc: required when data.source is \"files\"".into()));
            }
        }
        if !(d.holdout_fraction > 0.0 && d.holdout_fraction < 1.0) {
            return Err(Error::Config("data.holdout_fraction: must lie in (0, 1)".into()));
        }
        let m = &self.model;
        if d.patch.patch_size != m.fine_h
            || d.patch.patch_size != m.fine_w
            || d.patch.coarse_size != m.coarse_h
            || d.patch.coarse_size != m.coarse_w
        {
            return Err(Error::Config(format!(
                "data.patch: patch {} / coarse {} must match model fine {}x{} / coarse {}x{}",
                d.patch.patch_size, d.patch.coarse_size, m.fine_h, m.fine_w, m.coarse_h, m.coarse_w
            )));
        }
        if m.c_d != 0 {
            return Err(Error::Config(
                "model.c_d: station-only datasets have no dense input; must be 0".into(),
            ));
        }
        Ok(())
    }
}

/// Sets `key.path` in `doc` to `value`, parsed as JSON when possible and as a
/// string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects key.path=value, got `{assignment}`")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("--set has an empty key segment in `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "{}: is not an object, cannot set `{key}`",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}
