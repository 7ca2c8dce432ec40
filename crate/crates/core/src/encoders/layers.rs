//! Transformer building blocks recorded on a [`Tape`].

use ndarray::Array2;
use rand::Rng as _;

use crate::lora::{LoraConfig, Mode, LORA_A_STD};
use crate::params::{normal, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::seed::Rng;
use crate::tape::{Groups, Mat, Tape, Var};

/// Per-forward state: train/eval mode and the dropout stream.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: Rng,
}

impl Ctx<'_> {
    pub fn param(&self, tape: &mut Tape, id: ParamId) -> Var {
        let p = self.store.get(id);
        tape.param(id, &p.value, p.trainable)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: ParamId,
    pub b: ParamId,
    pub scale: f64,
    pub dropout: f64,
}

/// `y = x·Wᵀ + b`, optionally with a low-rank adapter alongside `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub path: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub adapter: Option<Adapter>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        path: &str,
        out_dim: usize,
        in_dim: usize,
        std: f64,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(format!("{path}.weight"), normal(rng, out_dim, in_dim, std), ParamKind::Weight, group);
        let bias = bias.then(|| {
            store.add(format!("{path}.bias"), Array2::zeros((1, out_dim)), ParamKind::Bias, group)
        });
        Self {
            path: path.to_string(),
            weight,
            bias,
            adapter: None,
        }
    }

    /// Installs fresh `A ~ N(0, 0.02)`, `B = 0` factors when `cfg` selects
    /// this map.
    pub fn attach_lora(&mut self, store: &mut ParamStore, rng: &mut Rng, cfg: &LoraConfig) -> crate::Result<()> {
        if !cfg.targets(&self.path) {
            return Ok(());
        }
        let (d, k) = store.value(self.weight).dim();
        cfg.check_target(d, k)?;
        let a = store.add(format!("{}.lora_a", self.path), normal(rng, cfg.rank, k, LORA_A_STD), ParamKind::LoraA, ParamGroup::New);
        let b = store.add(format!("{}.lora_b", self.path), Array2::zeros((d, cfg.rank)), ParamKind::LoraB, ParamGroup::New);
        self.adapter = Some(Adapter {
            a,
            b,
            scale: cfg.scale(),
            dropout: cfg.dropout,
        });
        Ok(())
    }

    /// `W + scale·B·A`, the weight an adapter-free map would need.
    pub fn merged_weight(&self, store: &ParamStore) -> Mat {
        let w = store.value(self.weight);
        match &self.adapter {
            Some(ad) => w + &(store.value(ad.b).dot(store.value(ad.a)) * ad.scale),
            None => w.clone(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, x: Var) -> Var {
        let w = ctx.param(tape, self.weight);
        let mut y = tape.matmul_bt(x, w);
        if let Some(ad) = &self.adapter {
            let xin = if ctx.mode == Mode::Train && ad.dropout > 0.0 {
                let keep = 1.0 - ad.dropout;
                let dim = tape.value(x).dim();
                let rng = &mut ctx.rng;
                let mask = Mat::from_shape_fn(dim, |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                tape.mul_const(x, mask)
            } else {
                x
            };
            let a = ctx.param(tape, ad.a);
            let b = ctx.param(tape, ad.b);
            let low = tape.matmul_bt(xin, a);
            let low = tape.matmul_bt(low, b);
            let low = tape.scale(low, ad.scale);
            y = tape.add(y, low);
        }
        if let Some(b) = self.bias {
            let bv = ctx.param(tape, b);
            y = tape.add_row(y, bv);
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, width: usize, group: ParamGroup) -> Self {
        Self {
            gain: store.add(format!("{path}.gain"), Array2::ones((1, width)), ParamKind::NormGain, group),
            bias: store.add(format!("{path}.bias"), Array2::zeros((1, width)), ParamKind::NormBias, group),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx<'_>, x: Var) -> Var {
        let g = ctx.param(tape, self.gain);
        let b = ctx.param(tape, self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Standard deviations for one transformer stack of `layers` blocks.
#[derive(Debug, Clone, Copy)]
pub struct InitStd {
    pub attn: f64,
    pub proj: f64,
    pub fc: f64,
}

impl InitStd {
    pub fn for_stack(width: usize, layers: usize) -> Self {
        let w = width as f64;
        Self {
            attn: w.powf(-0.5),
            proj: w.powf(-0.5) * (2.0 * layers as f64).powf(-0.5),
            fc: (2.0 * w).powf(-0.5),
        }
    }
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, path: &str, width: usize, heads: usize, std: InitStd, group: ParamGroup) -> Self {
        let mut lin = |name: &str, s: f64| Linear::new(store, rng, &format!("{path}.{name}"), width, width, s, true, group);
        Self {
            q: lin("q", std.attn),
            k: lin("k", std.attn),
            v: lin("v", std.attn),
            out: lin("out", std.proj),
            heads,
        }
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx<'_>, x: Var, groups: Groups, causal: bool) -> Var {
        let q = self.q.forward(tape, ctx, x);
        let k = self.k.forward(tape, ctx, x);
        let v = self.v.forward(tape, ctx, x);
        let o = tape.attention(q, k, v, groups, self.heads, causal);
        self.out.forward(tape, ctx, o)
    }
}

/// Temporal attention inserted ahead of a block's spatial attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Temporal {
    pub ln: LayerNorm,
    pub attn: Attention,
}

/// Pre-norm residual block: attention then a `4×` quick-GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub temporal: Option<Temporal>,
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, path: &str, width: usize, heads: usize, std: InitStd) -> Self {
        let g = ParamGroup::Base;
        let ln1 = LayerNorm::new(store, &format!("{path}.ln1"), width, g);
        let attn = Attention::new(store, rng, &format!("{path}.attn"), width, heads, std, g);
        let ln2 = LayerNorm::new(store, &format!("{path}.ln2"), width, g);
        let fc1 = Linear::new(store, rng, &format!("{path}.mlp.fc1"), 4 * width, width, std.fc, true, g);
        let fc2 = Linear::new(store, rng, &format!("{path}.mlp.fc2"), width, 4 * width, std.proj, true, g);
        Self {
            temporal: None,
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        }
    }

    /// Adds temporal attention whose norm and `q/k/v` copy the spatial
    /// ones and whose output map is zero, so it contributes nothing until
    /// trained.
    pub fn add_temporal(&mut self, store: &mut ParamStore, path: &str) {
        let copy = |store: &mut ParamStore, src: ParamId, name: String, zero: bool| {
            let p = store.get(src);
            let (kind, value) = (p.kind, if zero { Mat::zeros(p.value.dim()) } else { p.value.clone() });
            store.add(name, value, kind, ParamGroup::New)
        };
        let ln = LayerNorm {
            gain: copy(store, self.ln1.gain, format!("{path}.temporal.ln.gain"), false),
            bias: copy(store, self.ln1.bias, format!("{path}.temporal.ln.bias"), false),
        };
        let mut lin = |src: &Linear, name: &str, zero: bool| {
            let p = format!("{path}.temporal.{name}");
            Linear {
                weight: copy(store, src.weight, format!("{p}.weight"), zero),
                bias: src.bias.map(|b| copy(store, b, format!("{p}.bias"), zero)),
                path: p,
                adapter: None,
            }
        };
        let attn = Attention {
            q: lin(&self.attn.q, "q", false),
            k: lin(&self.attn.k, "k", false),
            v: lin(&self.attn.v, "v", false),
            out: lin(&self.attn.out, "out", true),
            heads: self.attn.heads,
        };
        self.temporal = Some(Temporal { ln, attn });
    }

    pub fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = Vec::new();
        if let Some(t) = &mut self.temporal {
            v.extend(t.attn.linears_mut());
        }
        v.extend(self.attn.linears_mut());
        v.push(&mut self.fc1);
        v.push(&mut self.fc2);
        v
    }

    pub fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = Vec::new();
        if let Some(t) = &self.temporal {
            v.extend(t.attn.linears());
        }
        v.extend(self.attn.linears());
        v.push(&self.fc1);
        v.push(&self.fc2);
        v
    }

    /// `temporal` carries the frame-position rows added to the temporal
    /// input and the groups linking one slot across frames.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx<'_>,
        mut x: Var,
        spatial: Groups,
        temporal: Option<(Var, Groups)>,
        causal: bool,
    ) -> Var {
        if let (Some(t), Some((tpos, tgroups))) = (&self.temporal, temporal) {
            let xin = tape.add(x, tpos);
            let h = t.ln.forward(tape, ctx, xin);
            let h = t.attn.forward(tape, ctx, h, tgroups, false);
            x = tape.add(x, h);
        }
        let h = self.ln1.forward(tape, ctx, x);
        let h = self.attn.forward(tape, ctx, h, spatial, causal);
        x = tape.add(x, h);
        let h = self.ln2.forward(tape, ctx, x);
        let h = self.fc1.forward(tape, ctx, h);
        let h = tape.quick_gelu(h);
        let h = self.fc2.forward(tape, ctx, h);
        tape.add(x, h)
    }
}
