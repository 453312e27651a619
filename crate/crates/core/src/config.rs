//! The full run configuration: one TOML file with a section per component,
//! plus `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, PretrainConfig};
use crate::datagen::SynthConfig;
use crate::dpmoe::ExpertConfig;
use crate::error::{Error, Result};
use crate::evalkit::EvalProtocol;
use crate::model::ModelConfig;
use crate::objectives::LossConfig;
use crate::trainkit::TrainConfig;
use crate::views::ViewConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub experts: ExpertConfig,
    pub views: ViewConfig,
    pub pretrain: PretrainConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalProtocol,
    pub data: SynthConfig,
}

impl Config {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            experts: self.experts.clone(),
            views: self.views.clone(),
            pretrain: self.pretrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.data.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies one `section.key=value` override. The value is read as a TOML
    /// literal, falling back to a bare string. Unknown keys are rejected.
    pub fn set(&mut self, spec: &str) -> Result<()> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        let key = key.trim();
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        }
        *slot = parse_value(raw.trim());
        *self = tree
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))?;
        Ok(())
    }

    pub fn apply(&mut self, overrides: &[String]) -> Result<()> {
        overrides.iter().try_for_each(|o| self.set(o))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
