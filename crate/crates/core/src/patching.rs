//! Patch tokens, positional embeddings, and the encoder mask.

use ndarray::{Array2, ArrayView3, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::preproc::PreprocessedTensor;
use crate::seed::rng_from;

/// `N×C` patch tokens of one frame, in row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Array2<f64>,
    pub patch_size: usize,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Linear projection applied to each flattened `3×S×S` patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    /// `C × 3S²`
    pub weight: Array2<f64>,
    /// `1 × C`
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTokenSequence {
    pub visible_tokens: Array2<f64>,
    pub mask_indices: Vec<usize>,
    pub position_table: Array2<f64>,
    pub mask_ratio: f64,
}

/// Flattens non-overlapping `S×S` patches of a `3×H×W` image into the rows
/// of an `N × 3S²` matrix. Each row is laid out channel-major, then by
/// row and column within the patch.
pub fn extract_patches(image: ArrayView3<f32>, patch_size: usize) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "spatial dims {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let s = patch_size;
    Ok(Array2::from_shape_fn((gh * gw, c * s * s), |(p, f)| {
        let (py, px) = (p / gw, p % gw);
        let (ch, rem) = (f / (s * s), f % (s * s));
        let (dy, dx) = (rem / s, rem % s);
        f64::from(image[[ch, py * s + dy, px * s + dx]])
    }))
}

/// Projects every patch of the first frame of `t`.
pub fn patchify(t: &PreprocessedTensor, patch_size: usize, embed: &PatchEmbedding) -> Result<PatchSequence> {
    let raw = extract_patches(t.frame(0), patch_size)?;
    if embed.weight.ncols() != raw.ncols() {
        return Err(Error::shape(format!(
            "patch embedding expects {} inputs, patches have {}",
            embed.weight.ncols(),
            raw.ncols()
        )));
    }
    let (h, w) = t.spatial();
    let tokens = raw.dot(&embed.weight.t()) + &embed.bias;
    Ok(PatchSequence {
        tokens,
        patch_size,
        grid: (h / patch_size, w / patch_size),
    })
}

/// `max(1, ⌊(1 − ratio)·n⌋)`. The small slack keeps decimal ratios such
/// as 0.9 from flooring one short (`(1 − 0.9)·20 = 1.9999…`).
pub fn visible_count(n: usize, mask_ratio: f64) -> usize {
    (((1.0 - mask_ratio) * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Uniformly random visible subset of `0..n`, sorted ascending.
pub fn make_encoder_mask(n: usize, mask_ratio: f64, seed: u64) -> Vec<usize> {
    assert!((0.0..1.0).contains(&mask_ratio), "mask ratio must lie in [0, 1)");
    let keep = visible_count(n, mask_ratio);
    if keep >= n {
        return (0..n).collect();
    }
    let mut rng = rng_from(seed);
    let mut idx = index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    idx
}

/// `x_j = m′[M_e[j]] + P[M_e[j]]`.
pub fn apply_mask(
    p: &PatchSequence,
    position_table: &Array2<f64>,
    mask: &[usize],
    mask_ratio: f64,
) -> Result<MaskedTokenSequence> {
    if position_table.dim() != p.tokens.dim() {
        return Err(Error::shape(format!(
            "position table {:?} does not match tokens {:?}",
            position_table.dim(),
            p.tokens.dim()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&i| i >= p.len()) {
        return Err(Error::shape(format!("mask index {bad} out of range for {} tokens", p.len())));
    }
    let visible = p.tokens.select(Axis(0), mask) + position_table.select(Axis(0), mask);
    Ok(MaskedTokenSequence {
        visible_tokens: visible,
        mask_indices: mask.to_vec(),
        position_table: position_table.clone(),
        mask_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preproc::Modality;
    use crate::seed::rng_from;
    use ndarray::Array4;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn tensor(h: usize, w: usize) -> PreprocessedTensor {
        let data = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, x)| (c * 10_000 + y * 100 + x) as f32);
        PreprocessedTensor {
            modality: Modality::Depth,
            data,
            provenance: vec![],
        }
    }

    fn identity_embed(s: usize) -> PatchEmbedding {
        let d = 3 * s * s;
        PatchEmbedding {
            weight: Array2::eye(d),
            bias: Array2::zeros((1, d)),
        }
    }

    #[test]
    fn token_counts() {
        let t = tensor(224, 224);
        let raw14 = extract_patches(t.frame(0), 14).unwrap();
        assert_eq!(raw14.nrows(), 256);
        let raw16 = extract_patches(t.frame(0), 16).unwrap();
        assert_eq!(raw16.nrows(), 196);
        assert!(extract_patches(t.frame(0), 15).is_err());
    }

    #[test]
    fn identity_projection_matches_hand_extraction() {
        let t = tensor(8, 12);
        let s = 4;
        let seq = patchify(&t, s, &identity_embed(s)).unwrap();
        assert_eq!(seq.grid, (2, 3));
        // Oracle: walk patches by hand with explicit loops.
        let img = t.frame(0);
        let mut i = 0;
        for py in 0..2 {
            for px in 0..3 {
                let mut expect = Vec::new();
                for c in 0..3 {
                    for dy in 0..s {
                        for dx in 0..s {
                            expect.push(f64::from(img[[c, py * s + dy, px * s + dx]]));
                        }
                    }
                }
                assert_eq!(seq.tokens.row(i).to_vec(), expect);
                i += 1;
            }
        }
    }

    #[test]
    fn mask_sizes() {
        assert_eq!(make_encoder_mask(256, 0.5, 1).len(), 128);
        assert_eq!(make_encoder_mask(10, 0.0, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(make_encoder_mask(4, 0.99, 1).len(), 1);
        assert_eq!(make_encoder_mask(256, 0.5, 9), make_encoder_mask(256, 0.5, 9));
        assert_ne!(make_encoder_mask(256, 0.5, 9), make_encoder_mask(256, 0.5, 10));
    }

    fn seq(n: usize, c: usize, seed: u64) -> PatchSequence {
        let mut rng = rng_from(seed);
        PatchSequence {
            tokens: Array2::from_shape_fn((n, c), |_| StandardNormal.sample(&mut rng)),
            patch_size: 1,
            grid: (1, n),
        }
    }

    #[test]
    fn apply_mask_cases() {
        let p = seq(8, 3, 1);
        let zeros = Array2::zeros((8, 3));
        let m = apply_mask(&p, &zeros, &[1, 4], 0.5).unwrap();
        assert_eq!(m.visible_tokens.row(0), p.tokens.row(1));
        assert_eq!(m.visible_tokens.row(1), p.tokens.row(4));

        let pos = seq(8, 3, 2).tokens;
        let all: Vec<usize> = (0..8).collect();
        let full = apply_mask(&p, &pos, &all, 0.0).unwrap();
        assert_eq!(full.visible_tokens, &p.tokens + &pos);

        let sub = apply_mask(&p, &pos, &[2, 5], 0.75).unwrap();
        let sum = &p.tokens + &pos;
        assert_eq!(sub.visible_tokens.row(0), sum.row(2));
        assert_eq!(sub.visible_tokens.row(1), sum.row(5));

        assert!(apply_mask(&p, &pos, &[8], 0.5).is_err());
        assert!(apply_mask(&p, &Array2::zeros((7, 3)), &[0], 0.5).is_err());
    }

    #[test]
    fn rejects_mismatched_embedding() {
        let t = tensor(8, 8);
        let bad = PatchEmbedding {
            weight: Array2::zeros((4, 5)),
            bias: Array2::zeros((1, 4)),
        };
        assert!(patchify(&t, 4, &bad).is_err());
    }

    proptest! {
        #[test]
        fn mask_invariants(n in 1usize..400, pct in 0usize..100, seed in any::<u64>()) {
            let m = make_encoder_mask(n, pct as f64 / 100.0, seed);
            let expect = std::cmp::max(1, (100 - pct) * n / 100);
            prop_assert_eq!(m.len(), expect);
            prop_assert!(m.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.iter().all(|&i| i < n));
        }

        #[test]
        fn rows_depend_only_on_their_source(seed in any::<u64>(), bump in 0usize..8) {
            let p = seq(8, 3, seed);
            let pos = seq(8, 3, seed ^ 1).tokens;
            let mask = make_encoder_mask(8, 0.5, seed);
            let base = apply_mask(&p, &pos, &mask, 0.5).unwrap();
            let mut q = p.clone();
            q.tokens.row_mut(bump).mapv_inplace(|x| x + 1.0);
            let moved = apply_mask(&q, &pos, &mask, 0.5).unwrap();
            for (j, &src) in mask.iter().enumerate() {
                let changed = base.visible_tokens.row(j) != moved.visible_tokens.row(j);
                prop_assert_eq!(changed, src == bump);
            }
        }
    }
}
