//! Run configuration: one JSON document with optional sections, strict keys,
//! and `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetSpec;
use crate::denoise::{NetConfig, NoiseConditioning};
use crate::dsp::{StftConfig, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::error::{Error, Result};
use crate::sample::SamplerConfig;
use crate::sde::SdeParams;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub conditioning: NoiseConditioning,
    pub alpha: f64,
    pub beta: f64,
    pub input_scale: f64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        Self {
            hidden: net.hidden,
            conditioning: net.conditioning,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            input_scale: net.input_scale,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            data_dir: None,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sde: SdeParams,
    pub stft: StftConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub data: DatasetSpec,
    pub paths: PathsConfig,
}

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.finish()?;
        Ok(cfg)
    }

    /// Fills derived fields and validates every section.
    fn finish(&mut self) -> Result<()> {
        self.sample.num_sources = self.data.num_sources;
        self.sde.validate()?;
        self.stft.validate()?;
        self.net_config().validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.data.validate()?;
        if self.model.precision == Precision::F32 {
            return Err(Error::Config("model.precision = \"f32\" is not supported; use \"f64\"".into()));
        }
        Ok(())
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            num_sources: self.data.num_sources,
            hidden: self.model.hidden.clone(),
            conditioning: self.model.conditioning,
            alpha: self.model.alpha,
            beta: self.model.beta,
            input_scale: self.model.input_scale,
        }
    }

    /// Applies `section.key=value` assignments; values are parsed as JSON
    /// and fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self)?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("`{key}` does not name a config field")))?;
                if !obj.contains_key(*part) && i + 1 < parts.len() {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
                slot = obj.entry(part.to_string()).or_insert(Value::Null);
            }
            *slot = value;
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.finish()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Sets every seed in the document to `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.sample.seed = seed;
        self.data.seed = seed;
    }
}

/// Defaults, then the file at `path` (if any), then `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let base = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            RunConfig::from_json(&text)?
        }
        None => {
            let mut cfg = RunConfig::default();
            cfg.finish()?;
            cfg
        }
    };
    base.with_overrides(overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.sde.sigma_max, 0.5);
        assert_eq!(cfg.sde.sigma_min, 0.05);
        assert_eq!(cfg.sde.gamma, 2.0);
        assert_eq!(cfg.train.p_t, 0.1);
        assert_eq!(cfg.sample.n_steps, 29);
        assert_eq!((cfg.model.alpha, cfg.model.beta), (0.5, 0.15));
        assert_eq!(cfg.stft.n_fft, 510);
    }

    #[test]
    fn overrides_and_errors() {
        let cfg = RunConfig::from_json(r#"{"sde": {"gamma": 2.5}}"#).unwrap();
        assert_eq!(cfg.sde.gamma, 2.5);
        let cfg = cfg.with_overrides(&["sde.gamma=3".into(), "model.hidden=[8,4]".into()]).unwrap();
        assert_eq!(cfg.sde.gamma, 3.0);
        assert_eq!(cfg.model.hidden, vec![8, 4]);
        let cfg = cfg.with_overrides(&["data.kind=gaussian".into()]).unwrap();
        assert_eq!(cfg.data.kind, crate::data::DatasetKind::Gaussian);

        let err = RunConfig::from_json(r#"{"sde": {"gama": 2}}"#).unwrap_err().to_string();
        assert!(err.contains("gama"), "{err}");
        let err = RunConfig::from_json(r#"{"sde": {"gamma": 2, "gamma": 3}}"#).unwrap_err().to_string();
        assert!(err.contains("duplicate"), "{err}");
        let err = RunConfig::from_json("{\n  \"sde\": [\n}").unwrap_err().to_string();
        assert!(err.contains("line"), "{err}");
        assert!(cfg.with_overrides(&["sde.nope=1".into()]).is_err());
        assert!(cfg.with_overrides(&["nosection.x=1".into()]).is_err());
        assert!(cfg.with_overrides(&["sde.gamma".into()]).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"precision": "f32"}}"#).is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let cfg = RunConfig::default().with_overrides(&["train.seed=7".into()]).unwrap();
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }
}
