//! Per-modality encoders, the frozen language tower, and the registry
//! that maps modality names to them.

pub mod layers;
mod modality;
mod text;

use std::collections::BTreeMap;
use std::path::PathBuf;

pub use modality::{EncoderConfig, ModalityEncoder, POSITION_STD};
pub use text::{TextConfig, TextEncoder, TextEncoding};

use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::preproc::{preprocess, BpeTokenizer, Modality, PreprocConfig, PreprocessedTensor, RawModalitySample};
use crate::seed::{derive_seed, rng_from, str_tag};
use crate::tape::Mat;
use crate::tensor_file::TensorFile;

/// Name under which the language tower is listed.
pub const LANGUAGE: &str = "text";

/// Checkpoint namespaces that no modality may shadow.
pub const RESERVED_NAMES: [&str; 4] = [LANGUAGE, "loss", "optim", "meta"];

/// Where a newly registered encoder takes its base weights from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitSource {
    Random { seed: u64 },
    WeightFile(PathBuf),
    Weights(TensorFile),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEntry {
    pub encoder: ModalityEncoder,
    pub preproc: PreprocConfig,
    pub lora: Option<LoraConfig>,
}

#[derive(Debug, Clone)]
pub struct ModalityRegistry {
    pub text: TextEncoder,
    pub tokenizer: BpeTokenizer,
    entries: BTreeMap<String, ModalityEntry>,
}

impl ModalityRegistry {
    pub fn new(text: TextEncoder, tokenizer: BpeTokenizer) -> Result<Self> {
        if !text.is_frozen() {
            return Err(Error::Registry("language encoder must be frozen".into()));
        }
        if text.eot != tokenizer.eot() || text.config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Registry("language encoder and tokenizer disagree on vocabulary".into()));
        }
        Ok(Self {
            text,
            tokenizer,
            entries: BTreeMap::new(),
        })
    }

    /// Fixture tokenizer plus a seeded desk-scale language tower.
    pub fn with_text(config: TextConfig, seed: u64) -> Result<Self> {
        let tokenizer = BpeTokenizer::fixture();
        let text = TextEncoder::new(config, tokenizer.eot(), seed)?;
        Self::new(text, tokenizer)
    }

    /// Number of towers, the language tower included.
    pub fn len(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Result<&ModalityEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Registry(format!("modality {name:?} is not registered")))
    }

    pub fn entry_mut(&mut self, name: &str) -> Result<&mut ModalityEntry> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Registry(format!("modality {name:?} is not registered")))
    }

    /// Installs a new encoder. `kind` picks the preprocessing path, so a
    /// new sensor such as `thermal` can reuse the visual-map pipeline.
    pub fn register_modality(
        &mut self,
        name: &str,
        kind: Modality,
        config: EncoderConfig,
        lora: Option<LoraConfig>,
        init: InitSource,
        preproc: PreprocConfig,
    ) -> Result<()> {
        if name.is_empty() || !name.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_') {
            return Err(Error::Registry(format!("invalid modality name {name:?}")));
        }
        if RESERVED_NAMES.contains(&name) {
            return Err(Error::Registry(format!("modality name {name:?} is reserved")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::Registry(format!("modality {name:?} already registered")));
        }
        if config.projection_dim != self.text.config.projection_dim {
            return Err(Error::Registry(format!(
                "projection_dim {} differs from the shared space ({})",
                config.projection_dim, self.text.config.projection_dim
            )));
        }
        preproc.validate()?;
        let (seed, file) = match init {
            InitSource::Random { seed } => (seed, None),
            InitSource::WeightFile(path) => (0, Some(TensorFile::read(&path)?)),
            InitSource::Weights(file) => (0, Some(file)),
        };
        let mut rng = rng_from(derive_seed(seed, &[str_tag(name)]));
        let encoder = ModalityEncoder::build(kind, config, lora.as_ref(), file.as_ref(), &mut rng)?;
        self.entries.insert(
            name.to_string(),
            ModalityEntry {
                encoder,
                preproc,
                lora,
            },
        );
        Ok(())
    }

    pub fn preprocess(&self, name: &str, sample: &RawModalitySample, seed: u64) -> Result<PreprocessedTensor> {
        let entry = self.entry(name)?;
        let mut t = preprocess(sample, &entry.preproc, seed)?;
        t.modality = entry.encoder.kind;
        Ok(t)
    }

    pub fn encode_modality(&self, name: &str, batch: &[PreprocessedTensor], mask_ratio: f64, seed: u64) -> Result<Mat> {
        self.entry(name)?.encoder.encode(batch, mask_ratio, seed)
    }

    pub fn encode_text(&self, seqs: &[Vec<u32>]) -> Result<Mat> {
        self.text.encode(seqs)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.tokenize(text, self.text.config.context_length)
    }

    pub fn encode_captions<S: AsRef<str>>(&self, captions: &[S]) -> Result<Mat> {
        let seqs: Vec<Vec<u32>> = captions.iter().map(|c| self.tokenize(c.as_ref())).collect();
        self.encode_text(&seqs)
    }

    /// Base weights of an entry (adapters merged) in weight-file form.
    pub fn export_weights(&self, name: &str) -> Result<TensorFile> {
        self.entry(name)?.encoder.export_base()
    }

    pub fn merge_lora(&mut self, name: &str) -> Result<()> {
        self.entry_mut(name)?.encoder.merge_lora();
        Ok(())
    }
}
