//! TOML run configuration. Every field has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::negatives::GeneratorSpec;
use crate::parallel::Parallelism;
use crate::perception::QaTrainConfig;
use crate::trainer::UieTrainConfig;

/// Environment variables that may override path settings.
pub const PATH_ENV_VARS: [(&str, &str); 5] = [
    ("UIE_DATA_DIR", "data"),
    ("UIE_NEGATIVES_DIR", "negatives"),
    ("UIE_PERCEPTION_CKPT", "perception"),
    ("UIE_OUT_DIR", "out"),
    ("UIE_REFERENCE_DIR", "reference"),
];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub negatives: Option<PathBuf>,
    pub perception: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

impl PathsConfig {
    fn slot(&mut self, key: &str) -> &mut Option<PathBuf> {
        match key {
            "data" => &mut self.data,
            "negatives" => &mut self.negatives,
            "perception" => &mut self.perception,
            "out" => &mut self.out,
            "reference" => &mut self.reference,
            _ => unreachable!("fixed key table"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NegativesConfig {
    /// Generator names, in order: `he`, `dcp`, `udcp`, `ibla`, `precomputed:<name>[=<dir>]`.
    pub methods: Vec<String>,
}

impl Default for NegativesConfig {
    fn default() -> Self {
        Self {
            methods: GeneratorSpec::default_set().iter().map(ToString::to_string).collect(),
        }
    }
}

impl NegativesConfig {
    pub fn specs(&self) -> Result<Vec<GeneratorSpec>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_fraction: (usize, usize),
    pub mos_max: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_fraction: crate::data::DEFAULT_TRAIN_FRACTION,
            mos_max: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub parallelism: Parallelism,
    /// Use double precision for all tensors; otherwise single.
    pub f64: bool,
    pub backbone: BackboneConfig,
    pub qa: QaTrainConfig,
    pub uie: UieTrainConfig,
    pub negatives: NegativesConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Parse and validate; missing fields take their defaults.
    pub fn from_toml_str(raw: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(raw).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::Config {
                field,
                message: e.to_string().trim().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&raw)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.qa.validate()?;
        self.uie.validate()?;
        let specs = self.negatives.specs().map_err(|e| Error::config("negatives.methods", e.to_string()))?;
        if self.uie.needs_negatives() && specs.len() != self.uie.cr.z {
            return Err(Error::config(
                "uie.cr.z",
                format!("is {} but {} negative methods are listed", self.uie.cr.z, specs.len()),
            ));
        }
        let (num, den) = self.data.train_fraction;
        if den == 0 || num > den {
            return Err(Error::config("data.train_fraction", "must be a fraction in [0, 1]"));
        }
        if let Some(m) = self.data.mos_max {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::config("data.mos_max", "must be positive"));
            }
        }
        Ok(())
    }

    /// Replace path settings from environment variables; other fields are never overridden.
    pub fn apply_env_overrides(&mut self, get: impl Fn(&str) -> Option<String>) {
        for (var, key) in PATH_ENV_VARS {
            if let Some(v) = get(var).filter(|v| !v.is_empty()) {
                *self.paths.slot(key) = Some(PathBuf::from(v));
            }
        }
    }

    pub fn dtype(&self) -> candle_core::DType {
        if self.f64 {
            candle_core::DType::F64
        } else {
            candle_core::DType::F32
        }
    }
}
