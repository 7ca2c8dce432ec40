//! Run configuration: everything one invocation needs, serialized into
//! every checkpoint and report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curation::{FilterRules, TextView};
use crate::encoders::{EncoderConfig, InitSource, ModalityRegistry, TextConfig};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::preproc::{BpeTokenizer, Modality, PreprocConfig};
use crate::trainer::{Strategy, TrainConfig};

/// Language tower shape; the vocabulary comes from the tokenizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextTower {
    pub context_length: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl Default for TextTower {
    fn default() -> Self {
        Self {
            context_length: 77,
            layers: 2,
            width: 64,
            heads: 4,
            projection_dim: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalitySettings {
    /// Preprocessing path; defaults to the modality of the same name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Modality>,
    pub encoder: EncoderConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lora: Option<LoraConfig>,
    /// External weight file for the base parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Overrides the run-wide preprocessing constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preproc: Option<PreprocConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub text: TextTower,
    #[serde(default)]
    pub preproc: PreprocConfig,
    pub modalities: BTreeMap<String, ModalitySettings>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub curation: FilterRules,
    /// Caption source for training pairs.
    #[serde(default = "default_view")]
    pub text_view: TextView,
}

fn default_view() -> TextView {
    TextView::TitleHashtags
}

impl RunConfig {
    /// Desk defaults for the named built-in modalities. Video gets
    /// temporal layers with adapters on them; the rest adapt attention.
    pub fn desk(names: &[&str]) -> Result<Self> {
        let mut modalities = BTreeMap::new();
        for &name in names {
            let kind: Modality = name.parse()?;
            if kind == Modality::Text {
                return Err(Error::Config("text is the language tower, not a modality".into()));
            }
            let video = kind == Modality::Video;
            let mut lora = LoraConfig::new(4, 16.0, 0.0);
            if video {
                lora.target_selectors.extend(LoraConfig::temporal_targets());
            }
            modalities.insert(
                name.to_string(),
                ModalitySettings {
                    kind: None,
                    encoder: EncoderConfig {
                        temporal_layers: video,
                        ..EncoderConfig::desk()
                    },
                    lora: Some(lora),
                    init: None,
                    preproc: None,
                },
            );
        }
        let cfg = Self {
            train: TrainConfig::desk(),
            text: TextTower::default(),
            preproc: PreprocConfig::desk(),
            modalities,
            paths: Paths::default(),
            curation: FilterRules::default(),
            text_view: TextView::TitleHashtags,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.preproc.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("no modalities configured".into()));
        }
        for (name, m) in &self.modalities {
            m.encoder.validate()?;
            if let Some(l) = &m.lora {
                l.validate()?;
            }
            if let Some(p) = &m.preproc {
                p.validate()?;
            }
            self.kind_of(name)?;
        }
        Ok(())
    }

    pub fn settings(&self, name: &str) -> Result<&ModalitySettings> {
        self.modalities
            .get(name)
            .ok_or_else(|| Error::Config(format!("modality {name:?} not in config")))
    }

    pub fn kind_of(&self, name: &str) -> Result<Modality> {
        let m = self.settings(name)?;
        match m.kind {
            Some(k) => Ok(k),
            None => name.parse().map_err(|_| {
                Error::Config(format!("modality {name:?} needs an explicit kind"))
            }),
        }
    }

    pub fn text_config(&self, tokenizer: &BpeTokenizer) -> TextConfig {
        TextConfig {
            vocab_size: tokenizer.vocab_size(),
            context_length: self.text.context_length,
            layers: self.text.layers,
            width: self.text.width,
            heads: self.text.heads,
            projection_dim: self.text.projection_dim,
        }
    }

    /// Language tower plus the named modality towers, set up for the
    /// configured strategy: `scratch` ignores init weights and adapters,
    /// `full_tuning` ignores adapters, `lora` requires them.
    pub fn build_registry(&self, names: &[&str]) -> Result<ModalityRegistry> {
        let tokenizer = BpeTokenizer::fixture();
        let text = self.text_config(&tokenizer);
        let mut reg = ModalityRegistry::with_text(text, self.text.seed)?;
        for &name in names {
            let m = self.settings(name)?;
            let strategy = self.train.strategy;
            let lora = match strategy {
                Strategy::Lora => Some(m.lora.clone().ok_or_else(|| {
                    Error::Config(format!("lora strategy needs a lora config for {name}"))
                })?),
                Strategy::Scratch | Strategy::FullTuning => None,
            };
            let init = match (&m.init, strategy) {
                (Some(p), Strategy::FullTuning | Strategy::Lora) => InitSource::WeightFile(p.clone()),
                _ => InitSource::Random { seed: self.train.seed },
            };
            let preproc = m.preproc.clone().unwrap_or_else(|| self.preproc.clone());
            reg.register_modality(name, self.kind_of(name)?, m.encoder.clone(), lora, init, preproc)?;
            strategy.apply(&mut reg.entry_mut(name)?.encoder.store);
        }
        Ok(reg)
    }
}
