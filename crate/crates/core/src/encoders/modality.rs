//! Patch-token transformer for every non-text modality.

use std::rc::Rc;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::layers::{Block, Ctx, InitStd, LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::lora::{LoraConfig, Mode};
use crate::params::{normal, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::patching::{extract_patches, make_encoder_mask};
use crate::preproc::{Modality, PreprocessedTensor};
use crate::seed::{derive_seed, rng_from, str_tag, Rng};
use crate::tape::{Mat, Tape, Var};
use crate::tensor_file::{NamedTensor, TensorFile};

pub const POSITION_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub projection_dim: usize,
    /// Inserts temporal attention ahead of each spatial attention.
    #[serde(default)]
    pub temporal_layers: bool,
    /// `[H, W]` of the preprocessed input. Sides that are not a multiple
    /// of `patch_size` are zero-padded at the bottom/right.
    pub input_size: [usize; 2],
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
}

fn default_max_frames() -> usize {
    8
}

impl EncoderConfig {
    /// Two layers, width 64, four heads, 32-d shared space, 28×28 inputs
    /// cut into 7×7 patches.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            width: 64,
            heads: 4,
            patch_size: 7,
            projection_dim: 32,
            temporal_layers: false,
            input_size: [28, 28],
            max_frames: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 {
            return Err(Error::Config("encoder: layers, width, heads must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.projection_dim == 0 || self.patch_size == 0 || self.max_frames == 0 {
            return Err(Error::Config("encoder: projection_dim, patch_size, max_frames must be positive".into()));
        }
        if self.input_size.contains(&0) {
            return Err(Error::Config("encoder: input_size must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.patch_size;
        (self.input_size[0].div_ceil(s), self.input_size[1].div_ceil(s))
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityEncoder {
    pub kind: Modality,
    pub config: EncoderConfig,
    pub store: ParamStore,
    patch: Linear,
    class_token: ParamId,
    position: ParamId,
    temporal_position: Option<ParamId>,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    projection: ParamId,
}

impl ModalityEncoder {
    /// Random init, then base weights from `init` (if any), then temporal
    /// modules copied from the spatial ones, then fresh adapters.
    pub fn build(
        kind: Modality,
        config: EncoderConfig,
        lora: Option<&LoraConfig>,
        init: Option<&TensorFile>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if kind == Modality::Text {
            return Err(Error::Registry("text uses the language encoder".into()));
        }
        if config.temporal_layers && kind != Modality::Video {
            return Err(Error::Config("temporal attention applies to video only".into()));
        }
        let c = config.width;
        let s = config.patch_size;
        let std = InitStd::for_stack(c, config.layers);
        let mut store = ParamStore::new();
        let base = ParamGroup::Base;
        let patch_in = 3 * s * s;
        let patch = Linear::new(&mut store, rng, "patch_embed", c, patch_in, (patch_in as f64).powf(-0.5), true, base);
        let class_token = store.add("class_token", normal(rng, 1, c, (c as f64).powf(-0.5)), ParamKind::ClassToken, base);
        let position = store.add("position", normal(rng, config.n_patches(), c, POSITION_STD), ParamKind::Position, base);
        let ln_pre = LayerNorm::new(&mut store, "ln_pre", c, base);
        let blocks: Vec<Block> = (0..config.layers)
            .map(|i| Block::new(&mut store, rng, &format!("blocks.{i}"), c, config.heads, std))
            .collect();
        let ln_post = LayerNorm::new(&mut store, "ln_post", c, base);
        let projection = store.add(
            "projection",
            normal(rng, config.projection_dim, c, (c as f64).powf(-0.5)),
            ParamKind::Projection,
            base,
        );
        let mut enc = Self {
            kind,
            config,
            store,
            patch,
            class_token,
            position,
            temporal_position: None,
            ln_pre,
            blocks,
            ln_post,
            projection,
        };
        if let Some(file) = init {
            enc.load_base(file)?;
        }
        if enc.config.temporal_layers {
            let tpos = normal(rng, enc.config.max_frames, c, POSITION_STD);
            enc.temporal_position = Some(enc.store.add("temporal_position", tpos, ParamKind::Position, ParamGroup::New));
            for (i, b) in enc.blocks.iter_mut().enumerate() {
                b.add_temporal(&mut enc.store, &format!("blocks.{i}"));
            }
        }
        if let Some(cfg) = lora {
            cfg.validate()?;
            for b in &mut enc.blocks {
                for lin in b.linears_mut() {
                    lin.attach_lora(&mut enc.store, rng, cfg)?;
                }
            }
        }
        Ok(enc)
    }

    pub fn linears(&self) -> impl Iterator<Item = &Linear> {
        std::iter::once(&self.patch).chain(self.blocks.iter().flat_map(|b| b.linears()))
    }

    pub fn adapter_count(&self) -> usize {
        self.linears().filter(|l| l.adapter.is_some()).count()
    }

    /// Base-group parameters with adapters folded in, under their local
    /// names.
    pub fn export_base(&self) -> Result<TensorFile> {
        let mut merged = std::collections::HashMap::new();
        for lin in self.linears() {
            if lin.adapter.is_some() {
                merged.insert(lin.weight, lin.merged_weight(&self.store));
            }
        }
        let tensors = self
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Base)
            .map(|(id, p)| NamedTensor::from_mat(p.name.clone(), merged.get(&id).unwrap_or(&p.value)))
            .collect();
        Ok(TensorFile {
            config_json: serde_json::to_string(&self.config)?,
            tensors,
        })
    }

    /// Overwrites every base-group parameter from `file`.
    pub fn load_base(&mut self, file: &TensorFile) -> Result<()> {
        let names: Vec<String> = self
            .store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Base)
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let t = file
                .get(&name)
                .ok_or_else(|| Error::Registry(format!("init weights lack tensor {name}")))?;
            let m = t.to_mat().map_err(|e| Error::Registry(e.to_string()))?;
            self.store
                .assign(&name, m)
                .map_err(|e| Error::Registry(format!("incompatible init weights: {e}")))?;
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and drops the factors'
    /// contribution (they are reset to `B = 0`).
    pub fn merge_lora(&mut self) {
        let updates: Vec<(ParamId, Mat, ParamId)> = self
            .linears()
            .filter_map(|l| l.adapter.as_ref().map(|ad| (l.weight, l.merged_weight(&self.store), ad.b)))
            .collect();
        for (w, merged, b) in updates {
            self.store.get_mut(w).value = merged;
            let bp = self.store.get_mut(b);
            bp.value.fill(0.0);
        }
    }

    fn check_batch(&self, batch: &[PreprocessedTensor]) -> Result<usize> {
        let first = batch
            .first()
            .ok_or_else(|| Error::invalid("empty batch"))?;
        let frames = first.n_frames();
        for t in batch {
            if t.modality != self.kind {
                return Err(Error::invalid(format!(
                    "{} encoder received a {} tensor",
                    self.kind, t.modality
                )));
            }
            if t.channels() != 3 {
                return Err(Error::shape(format!("expected 3 channels, got {}", t.channels())));
            }
            let (h, w) = t.spatial();
            if [h, w] != self.config.input_size {
                return Err(Error::shape(format!(
                    "input {h}x{w} does not match configured {:?}",
                    self.config.input_size
                )));
            }
            if t.n_frames() != frames {
                return Err(Error::shape("frame counts differ within the batch"));
            }
        }
        if frames == 0 || frames > self.config.max_frames {
            return Err(Error::shape(format!(
                "{frames} frames outside 1..={}",
                self.config.max_frames
            )));
        }
        if frames > 1 && self.kind != Modality::Video {
            return Err(Error::shape("only video carries multiple frames"));
        }
        Ok(frames)
    }

    fn padded(&self, frame: ndarray::ArrayView3<f32>) -> Array3<f32> {
        let (gh, gw) = self.config.grid();
        let s = self.config.patch_size;
        let (_, h, w) = frame.dim();
        if gh * s == h && gw * s == w {
            return frame.to_owned();
        }
        let mut out = Array3::zeros((3, gh * s, gw * s));
        out.slice_mut(s![.., ..h, ..w]).assign(&frame);
        out
    }

    /// Records the forward pass for a batch and returns the `K×D`
    /// normalized embeddings. Masks are drawn per (sample, frame) from
    /// `seed`; adapter dropout draws from the same seed in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &[PreprocessedTensor],
        mask_ratio: f64,
        seed: u64,
        mode: Mode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&mask_ratio) {
            return Err(Error::invalid(format!("mask ratio {mask_ratio} outside [0, 1)")));
        }
        let frames = self.check_batch(batch)?;
        let k = batch.len();
        let n = self.config.n_patches();
        let s = self.config.patch_size;
        let mut ctx = Ctx {
            store: &self.store,
            mode,
            rng: rng_from(derive_seed(seed, &[str_tag("dropout")])),
        };

        let masks: Vec<Vec<usize>> = (0..k * frames)
            .map(|g| {
                if mask_ratio == 0.0 {
                    (0..n).collect()
                } else {
                    let tag = [str_tag("mask"), (g / frames) as u64, (g % frames) as u64];
                    make_encoder_mask(n, mask_ratio, derive_seed(seed, &tag))
                }
            })
            .collect();
        let vis = masks[0].len();
        let groups = k * frames;
        let mut raw = Array2::<f64>::zeros((groups * vis, 3 * s * s));
        let mut pos_idx = Vec::with_capacity(groups * vis);
        for (g, mask) in masks.iter().enumerate() {
            let t = &batch[g / frames];
            let patches = extract_patches(self.padded(t.frame(g % frames)).view(), s)?;
            for (j, &src) in mask.iter().enumerate() {
                raw.row_mut(g * vis + j).assign(&patches.row(src));
                pos_idx.push(src);
            }
        }

        let x = tape.constant(raw);
        let emb = self.patch.forward(tape, &mut ctx, x);
        let pos = ctx.param(tape, self.position);
        let pos_rows = tape.gather_rows(pos, pos_idx);
        let emb = tape.add(emb, pos_rows);
        let cls = ctx.param(tape, self.class_token);
        let cls_rows = tape.gather_rows(cls, vec![0; groups]);
        let stacked = tape.concat_rows(&[cls_rows, emb]);
        let seq = vis + 1;
        let order: Vec<usize> = (0..groups * seq)
            .map(|r| {
                let (g, slot) = (r / seq, r % seq);
                if slot == 0 {
                    g
                } else {
                    groups + g * vis + slot - 1
                }
            })
            .collect();
        let mut h = tape.gather_rows(stacked, order);
        h = self.ln_pre.forward(tape, &ctx, h);

        let spatial = Rc::new((0..groups).map(|g| (g * seq..(g + 1) * seq).collect()).collect());
        let temporal = match self.temporal_position {
            Some(tp) if frames > 1 => {
                let tgroups: Vec<Vec<usize>> = (0..k)
                    .flat_map(|i| (0..seq).map(move |slot| (0..frames).map(|f| (i * frames + f) * seq + slot).collect()))
                    .collect();
                let frame_of_row: Vec<usize> = (0..groups * seq).map(|r| (r / seq) % frames).collect();
                let tpv = ctx.param(tape, tp);
                let rows = tape.gather_rows(tpv, frame_of_row);
                Some((rows, Rc::new(tgroups)))
            }
            _ => None,
        };
        for b in &self.blocks {
            h = b.forward(tape, &mut ctx, h, Rc::clone(&spatial), temporal.clone(), false);
        }

        let cls_out = tape.gather_rows(h, (0..groups).map(|g| g * seq).collect());
        let mut pooled = self.ln_post.forward(tape, &ctx, cls_out);
        if frames > 1 {
            pooled = tape.mean_groups(pooled, (0..k).map(|i| (i * frames..(i + 1) * frames).collect()).collect());
        }
        let proj = ctx.param(tape, self.projection);
        let z = tape.matmul_bt(pooled, proj);
        Ok(tape.l2_normalize(z))
    }

    /// Eval-mode embeddings without recording gradients.
    pub fn encode(&self, batch: &[PreprocessedTensor], mask_ratio: f64, seed: u64) -> Result<Mat> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch, mask_ratio, seed, Mode::Eval)?;
        Ok(tape.value(out).clone())
    }
}
