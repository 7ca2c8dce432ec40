use ndarray::{Array3, ArrayView3};

use super::{Modality, Payload, PreprocessedTensor, RawModalitySample, VisualConfig};
use crate::error::{Error, Result};

/// Output size after scaling the short edge to `short`, keeping aspect.
pub fn resized_dims(h: usize, w: usize, short: usize) -> (usize, usize) {
    if h <= w {
        (short, w * short / h)
    } else {
        (h * short / w, short)
    }
}

/// Top-left corner of a centered `crop×crop` window.
pub fn center_crop_offsets(h: usize, w: usize, crop: usize) -> (usize, usize) {
    ((h - crop) / 2, (w - crop) / 2)
}

/// Depth and infrared maps: replicate single-channel input to RGB, scale
/// the short edge to `resize_short`, center-crop to `crop`, normalize.
pub fn preprocess_visual_map(sample: &RawModalitySample, cfg: &VisualConfig) -> Result<PreprocessedTensor> {
    if !matches!(sample.modality, Modality::Depth | Modality::Infrared) {
        return Err(Error::invalid(format!(
            "visual map preprocessing needs depth or infrared, got {}",
            sample.modality
        )));
    }
    let Payload::Map(map) = &sample.payload else {
        return Err(Error::invalid("visual map payload expected"));
    };
    let (frame, mut provenance) = process_image(map.view(), cfg)?;
    if map.dim().2 == 1 {
        provenance.insert(0, "replicate_channels:3".into());
    }
    Ok(PreprocessedTensor {
        modality: sample.modality,
        data: frame.insert_axis(ndarray::Axis(0)),
        provenance,
    })
}

/// Shared image path: `H×W×C` in, normalized `3×crop×crop` out.
pub(crate) fn process_image(img: ArrayView3<f32>, cfg: &VisualConfig) -> Result<(Array3<f32>, Vec<String>)> {
    let (h, w, c) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::invalid("zero-sized image"));
    }
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("expected 1 or 3 channels, got {c}")));
    }
    cfg.validate()?;
    let mut provenance = Vec::new();
    let rgb = Array3::from_shape_fn((3, h, w), |(ch, y, x)| img[[y, x, if c == 1 { 0 } else { ch }]]);

    let cropped = if h == cfg.crop && w == cfg.crop {
        provenance.push("identity_crop".into());
        rgb
    } else {
        let (nh, nw) = resized_dims(h, w, cfg.resize_short);
        let resized = if (nh, nw) == (h, w) {
            rgb
        } else {
            provenance.push(format!("resize_bilinear:{h}x{w}->{nh}x{nw}"));
            resize_bilinear(&rgb, nh, nw)
        };
        let (top, left) = center_crop_offsets(nh, nw, cfg.crop);
        provenance.push(format!("center_crop:{}@({top},{left})", cfg.crop));
        resized
            .slice(ndarray::s![.., top..top + cfg.crop, left..left + cfg.crop])
            .to_owned()
    };

    let mut out = cropped;
    for (ch, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (cfg.mean[ch], cfg.std[ch]);
        plane.mapv_inplace(|v| (v - m) / s);
    }
    provenance.push(format!("normalize:mean={:?},std={:?}", cfg.mean, cfg.std));
    Ok((out, provenance))
}

/// Half-pixel-centered bilinear resampling of a `C×H×W` array.
fn resize_bilinear(src: &Array3<f32>, nh: usize, nw: usize) -> Array3<f32> {
    let (c, h, w) = src.dim();
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(nh, h);
    let xs = axis(nw, w);
    Array3::from_shape_fn((c, nh, nw), |(ch, y, x)| {
        let (y0, y1, fy) = ys[y];
        let (x0, x1, fx) = xs[x];
        let top = src[[ch, y0, x0]] * (1.0 - fx) + src[[ch, y0, x1]] * fx;
        let bottom = src[[ch, y1, x0]] * (1.0 - fx) + src[[ch, y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn ramp(h: usize, w: usize, c: usize) -> Array3<f32> {
        Array3::from_shape_fn((h, w, c), |(y, x, ch)| ((y * w + x) % 97) as f32 / 97.0 + ch as f32 * 0.01)
    }

    #[test]
    fn single_channel_depth_is_replicated() {
        let s = RawModalitySample::map("d", Modality::Depth, ramp(480, 640, 1)).unwrap();
        let t = preprocess_visual_map(&s, &VisualConfig::default()).unwrap();
        assert_eq!(t.layout(), vec![3, 224, 224]);
        let f = t.frame(0);
        assert_eq!(f.index_axis(ndarray::Axis(0), 0), f.index_axis(ndarray::Axis(0), 1));
        assert_eq!(f.index_axis(ndarray::Axis(0), 0), f.index_axis(ndarray::Axis(0), 2));
    }

    #[test]
    fn target_sized_rgb_passes_through() {
        let img = ramp(224, 224, 3);
        let s = RawModalitySample::map("i", Modality::Infrared, img.clone()).unwrap();
        let cfg = VisualConfig::default();
        let t = preprocess_visual_map(&s, &cfg).unwrap();
        let f = t.frame(0);
        for y in [0, 100, 223] {
            for x in [0, 57, 223] {
                for ch in 0..3 {
                    let expect = (img[[y, x, ch]] - 0.5) / 0.5;
                    assert_eq!(f[[ch, y, x]], expect);
                }
            }
        }
    }

    #[test]
    fn resize_arithmetic_and_crop_offsets() {
        // 300x400: short edge 300 -> 256, long edge 400*256/300 = 341.33 -> 341.
        assert_eq!(resized_dims(300, 400, 256), (256, 341));
        // (256-224)/2 = 16, (341-224)/2 = 58.5 -> 58.
        assert_eq!(center_crop_offsets(256, 341, 224), (16, 58));
        let s = RawModalitySample::map("d", Modality::Depth, ramp(300, 400, 1)).unwrap();
        let t = preprocess_visual_map(&s, &VisualConfig::default()).unwrap();
        assert_eq!(t.layout(), vec![3, 224, 224]);
        assert!(t.provenance.iter().any(|p| p == "center_crop:224@(16,58)"));
        assert!(t.provenance.iter().any(|p| p == "resize_bilinear:300x400->256x341"));
    }

    #[test]
    fn constant_image_survives_resampling() {
        let img = Array3::from_elem((300, 400, 1), 0.25f32);
        let s = RawModalitySample::map("d", Modality::Depth, img).unwrap();
        let t = preprocess_visual_map(&s, &VisualConfig::default()).unwrap();
        assert!(t.data.iter().all(|v| (v - (-0.5)).abs() < 1e-6));
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = VisualConfig::default();
        let s = RawModalitySample::map("d", Modality::Depth, Array3::zeros((0, 5, 1))).unwrap();
        assert!(preprocess_visual_map(&s, &cfg).is_err());
        let s = RawModalitySample::map("d", Modality::Depth, Array3::zeros((5, 5, 2))).unwrap();
        assert!(preprocess_visual_map(&s, &cfg).is_err());
        let s = RawModalitySample::map("d", Modality::Depth, Array3::zeros((5, 5, 4))).unwrap();
        assert!(preprocess_visual_map(&s, &cfg).is_err());
    }
}
