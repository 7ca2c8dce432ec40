//! Low-rank adaptation: `h(x) = W0·x + (α/r)·B·A·x` with `W0` frozen.
//!
//! `A` starts as `N(0, 0.02)` and `B` as zeros, so a fresh adapter adds
//! exactly nothing to the base map.

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::normal;
use crate::seed::Rng;

pub const LORA_A_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Suffixes of linear-map paths that receive adapters, e.g.
    /// `attn.q` or `temporal.out`.
    #[serde(default = "LoraConfig::attention_targets")]
    pub target_selectors: Vec<String>,
}

impl LoraConfig {
    pub fn attention_targets() -> Vec<String> {
        ["attn.q", "attn.k", "attn.v", "attn.out"]
            .into_iter()
            .map(String::from)
            .collect()
    }

    pub fn temporal_targets() -> Vec<String> {
        ["temporal.q", "temporal.k", "temporal.v", "temporal.out"]
            .into_iter()
            .map(String::from)
            .collect()
    }

    pub fn new(rank: usize, alpha: f64, dropout: f64) -> Self {
        Self {
            rank,
            alpha,
            dropout,
            target_selectors: Self::attention_targets(),
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn targets(&self, path: &str) -> bool {
        self.target_selectors
            .iter()
            .any(|sel| path == sel || path.ends_with(&format!(".{sel}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Checks `r ≤ min(d, k)` for a `d×k` target.
    pub fn check_target(&self, d: usize, k: usize) -> Result<()> {
        if self.rank > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {} exceeds min({d}, {k})",
                self.rank
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A standalone adapted linear map. Inputs are row batches (`n×k`).
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `d×k`, frozen.
    w0: Array2<f64>,
    /// `r×k`
    pub a: Array2<f64>,
    /// `d×r`
    pub b: Array2<f64>,
    pub scale: f64,
    pub dropout: f64,
}

impl LoraLayer {
    pub fn new(w0: Array2<f64>, cfg: &LoraConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, k) = w0.dim();
        cfg.check_target(d, k)?;
        Ok(Self {
            a: normal(rng, cfg.rank, k, LORA_A_STD),
            b: Array2::zeros((d, cfg.rank)),
            w0,
            scale: cfg.scale(),
            dropout: cfg.dropout,
        })
    }

    pub fn base(&self) -> &Array2<f64> {
        &self.w0
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    /// `r·(d + k)`.
    pub fn trainable_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array2<f64>, mode: Mode, rng: &mut Rng) -> Result<Array2<f64>> {
        if x.ncols() != self.w0.ncols() {
            return Err(Error::shape(format!(
                "LoRA input has {} features, expected {}",
                x.ncols(),
                self.w0.ncols()
            )));
        }
        let base = x.dot(&self.w0.t());
        let dropped = match mode {
            Mode::Train if self.dropout > 0.0 => {
                let keep = 1.0 - self.dropout;
                x.mapv(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 })
            }
            _ => x.clone(),
        };
        let low = dropped.dot(&self.a.t()).dot(&self.b.t());
        Ok(base + low * self.scale)
    }

    /// `W0 + scale·B·A`, for adapter-free inference.
    pub fn merge_weights(&self) -> Array2<f64> {
        &self.w0 + &(self.b.dot(&self.a) * self.scale)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn zero_b_is_identity_on_base() {
        let mut rng = rng_from(1);
        let w0 = normal(&mut rng, 6, 5, 1.0);
        let layer = LoraLayer::new(w0.clone(), &LoraConfig::new(2, 16.0, 0.0), &mut rng).unwrap();
        let x = normal(&mut rng, 3, 5, 1.0);
        assert_eq!(layer.forward(&x, Mode::Eval, &mut rng).unwrap(), x.dot(&w0.t()));
        assert_eq!(layer.merge_weights(), w0);
        assert_eq!(layer.trainable_params(), 2 * (6 + 5));
    }

    #[test]
    fn hand_computed_two_by_two() {
        let mut rng = rng_from(0);
        let mut layer = LoraLayer::new(Array2::zeros((2, 2)), &LoraConfig::new(2, 2.0, 0.0), &mut rng).unwrap();
        assert_eq!(layer.scale, 1.0);
        layer.a = array![[1.0, 2.0], [3.0, 4.0]];
        layer.b = array![[0.5, -1.0], [2.0, 0.0]];
        // B·A = [[0.5-3, 1-4], [2, 4]] = [[-2.5, -3], [2, 4]]; x = (1, -1)
        // -> (-2.5 + 3, 2 - 4) = (0.5, -2)
        let x = array![[1.0, -1.0]];
        let y = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, array![[0.5, -2.0]]);
    }

    #[test]
    fn published_scale_settings() {
        assert_eq!(LoraConfig::new(16, 16.0, 0.0).scale(), 1.0);
        assert_eq!(LoraConfig::new(2, 16.0, 0.1).scale(), 8.0);
        assert!(LoraConfig::new(0, 16.0, 0.0).validate().is_err());
        assert!(LoraConfig::new(2, 16.0, 1.0).validate().is_err());
        assert!(LoraConfig::new(9, 16.0, 0.0).check_target(8, 64).is_err());
    }

    #[test]
    fn selectors_match_path_suffixes() {
        let cfg = LoraConfig::new(2, 16.0, 0.0);
        assert!(cfg.targets("blocks.0.attn.q"));
        assert!(cfg.targets("blocks.1.attn.out"));
        assert!(!cfg.targets("blocks.0.mlp.fc1"));
        assert!(!cfg.targets("blocks.0.temporal.q"));
        let video = LoraConfig {
            target_selectors: LoraConfig::temporal_targets(),
            ..cfg
        };
        assert!(video.targets("blocks.0.temporal.v"));
        assert!(!video.targets("blocks.0.attn.v"));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut rng = rng_from(2);
        let layer = LoraLayer::new(Array2::zeros((4, 3)), &LoraConfig::new(2, 4.0, 0.0), &mut rng).unwrap();
        assert!(layer.forward(&Array2::zeros((1, 4)), Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn train_mode_dropout_perturbs_only_the_adapter() {
        let mut rng = rng_from(3);
        let w0 = normal(&mut rng, 4, 4, 1.0);
        let mut layer = LoraLayer::new(w0.clone(), &LoraConfig::new(2, 2.0, 0.5), &mut rng).unwrap();
        let x = normal(&mut rng, 2, 4, 1.0);
        let eval = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_eq!(eval, layer.forward(&x, Mode::Train, &mut rng).unwrap());
        layer.b = normal(&mut rng, 4, 2, 1.0);
        let a = layer.forward(&x, Mode::Train, &mut rng).unwrap();
        let b = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
        assert_ne!(a, b);
    }

    proptest! {
        #[test]
        fn merged_forward_matches_adapter(seed in any::<u64>(), rank in 1usize..4) {
            let mut rng = rng_from(seed);
            let w0 = normal(&mut rng, 5, 7, 1.0);
            let mut layer = LoraLayer::new(w0, &LoraConfig::new(rank, 16.0, 0.1), &mut rng).unwrap();
            layer.a = normal(&mut rng, rank, 7, 0.3);
            layer.b = normal(&mut rng, 5, rank, 0.3);
            let x = normal(&mut rng, 4, 7, 1.0);
            let via_adapter = layer.forward(&x, Mode::Eval, &mut rng).unwrap();
            let via_merge = x.dot(&layer.merge_weights().t());
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff = (&via_adapter - &via_merge).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(diff <= 1e-5 * xmax);
        }
    }
}
