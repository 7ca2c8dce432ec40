//! Frozen causal language encoder with end-of-text pooling.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::layers::{Block, Ctx, InitStd, LayerNorm};
use crate::error::{Error, Result};
use crate::lora::Mode;
use crate::params::{normal, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::seed::{rng_from, Rng};
use crate::tape::{Mat, Tape, Var};

pub const TOKEN_STD: f64 = 0.02;
pub const TEXT_POSITION_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub projection_dim: usize,
}

impl TextConfig {
    /// Desk-scale tower sized for the shipped fixture vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            context_length: 77,
            layers: 2,
            width: 64,
            heads: 4,
            projection_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.projection_dim == 0 {
            return Err(Error::Config("text: layers, width, heads, projection_dim must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size == 0 || self.context_length < 2 {
            return Err(Error::Config("text: vocabulary and context must be non-trivial".into()));
        }
        Ok(())
    }
}

/// Per-token features and the pooled, normalized embedding of one text.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoding {
    /// `L×C`, after the final norm.
    pub sequence_features: Mat,
    /// `1×D`, unit norm.
    pub pooled: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub store: ParamStore,
    pub eot: u32,
    token_embedding: ParamId,
    position: ParamId,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    projection: ParamId,
}

impl TextEncoder {
    /// Seeded random weights; every parameter is created frozen.
    pub fn new(config: TextConfig, eot: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        if eot as usize >= config.vocab_size {
            return Err(Error::Config(format!("EOT id {eot} outside vocabulary")));
        }
        let mut rng: Rng = rng_from(seed);
        let c = config.width;
        let mut store = ParamStore::new();
        let g = ParamGroup::Base;
        let token_embedding = store.add("token_embedding", normal(&mut rng, config.vocab_size, c, TOKEN_STD), ParamKind::Embedding, g);
        let position = store.add("position", normal(&mut rng, config.context_length, c, TEXT_POSITION_STD), ParamKind::Position, g);
        let std = InitStd::for_stack(c, config.layers);
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut store, &mut rng, &format!("blocks.{i}"), c, config.heads, std))
            .collect();
        let ln_final = LayerNorm::new(&mut store, "ln_final", c, g);
        let projection = store.add(
            "projection",
            normal(&mut rng, config.projection_dim, c, (c as f64).powf(-0.5)),
            ParamKind::Projection,
            g,
        );
        store.set_trainable(|_| false);
        Ok(Self {
            config,
            store,
            eot,
            token_embedding,
            position,
            blocks,
            ln_final,
            projection,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| !p.trainable)
    }

    fn eot_position(&self, seq: &[u32]) -> Result<usize> {
        if seq.len() > self.config.context_length {
            return Err(Error::shape(format!(
                "sequence of {} tokens exceeds context {}",
                seq.len(),
                self.config.context_length
            )));
        }
        if let Some(bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary")));
        }
        seq.iter()
            .position(|&t| t == self.eot)
            .ok_or_else(|| Error::invalid("token sequence has no EOT"))
    }

    /// Runs the tower over `seqs[i][..lens[i]]` and returns the `ΣL×C`
    /// post-norm features.
    fn trunk(&self, tape: &mut Tape, seqs: &[&[u32]]) -> Var {
        let mut ctx = Ctx {
            store: &self.store,
            mode: Mode::Eval,
            rng: rng_from(0),
        };
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let mut groups = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            groups.push((start..start + s.len()).collect());
            start += s.len();
        }
        let groups = Rc::new(groups);
        let tok = ctx.param(tape, self.token_embedding);
        let tok = tape.gather_rows(tok, ids);
        let pos = ctx.param(tape, self.position);
        let pos = tape.gather_rows(pos, positions);
        let mut h = tape.add(tok, pos);
        for b in &self.blocks {
            h = b.forward(tape, &mut ctx, h, Rc::clone(&groups), None, true);
        }
        self.ln_final.forward(tape, &ctx, h)
    }

    fn project(&self, tape: &mut Tape, pooled: Var) -> Var {
        let p = self.store.get(self.projection);
        let p = tape.param(self.projection, &p.value, p.trainable);
        let z = tape.matmul_bt(pooled, p);
        tape.l2_normalize(z)
    }

    /// Records the pooled, normalized `K×D` embeddings on `tape`, reading
    /// each sequence only up to its first EOT. Attention is causal, so the
    /// skipped tokens cannot affect the pooled feature.
    pub fn forward(&self, tape: &mut Tape, seqs: &[Vec<u32>]) -> Result<Var> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let cut: Vec<&[u32]> = seqs
            .iter()
            .map(|s| self.eot_position(s).map(|e| &s[..=e]))
            .collect::<Result<_>>()?;
        let h = self.trunk(tape, &cut);
        let mut ends = Vec::with_capacity(cut.len());
        let mut acc = 0;
        for s in &cut {
            acc += s.len();
            ends.push(acc - 1);
        }
        let pooled = tape.gather_rows(h, ends);
        Ok(self.project(tape, pooled))
    }

    pub fn encode(&self, seqs: &[Vec<u32>]) -> Result<Mat> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, seqs)?;
        Ok(tape.value(out).clone())
    }

    /// Full-length features and pooled embedding for one sequence.
    pub fn encode_full(&self, seq: &[u32]) -> Result<TextEncoding> {
        let eot = self.eot_position(seq)?;
        let mut tape = Tape::inference();
        let h = self.trunk(&mut tape, &[seq]);
        let pooled = tape.gather_rows(h, vec![eot]);
        let out = self.project(&mut tape, pooled);
        Ok(TextEncoding {
            sequence_features: tape.value(h).clone(),
            pooled: tape.value(out).clone(),
        })
    }
}
