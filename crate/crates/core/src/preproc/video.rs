use ndarray::{Array4, Axis};

use super::visual::process_image;
use super::{Modality, Payload, PreprocessedTensor, RawModalitySample, VisualConfig};
use crate::error::{Error, Result};

/// Indices of the first frame of each of `max_frames` equal segments.
/// Short videos are filled by repeating the last frame.
pub fn sample_frame_indices(n_frames: usize, max_frames: usize) -> Vec<usize> {
    if n_frames >= max_frames {
        (0..max_frames).map(|i| i * n_frames / max_frames).collect()
    } else {
        (0..max_frames).map(|i| i.min(n_frames - 1)).collect()
    }
}

pub fn sample_video_frames(
    sample: &RawModalitySample,
    max_frames: usize,
    cfg: &VisualConfig,
) -> Result<PreprocessedTensor> {
    if sample.modality != Modality::Video {
        return Err(Error::invalid(format!("expected video, got {}", sample.modality)));
    }
    let Payload::Frames(frames) = &sample.payload else {
        return Err(Error::invalid("video payload expected"));
    };
    let (n, _, _, c) = frames.dim();
    if n == 0 {
        return Err(Error::invalid("video has no frames"));
    }
    if max_frames == 0 {
        return Err(Error::invalid("max_frames must be positive"));
    }
    if c != 3 {
        return Err(Error::invalid(format!("video frames must be RGB, got {c} channels")));
    }
    let idx = sample_frame_indices(n, max_frames);
    let mut out = Array4::zeros((max_frames, 3, cfg.crop, cfg.crop));
    let mut provenance = vec![format!("frames:{idx:?}")];
    if n < max_frames {
        provenance.push(format!("repeat_last_frame:{}", max_frames - n));
    }
    for (slot, &src) in idx.iter().enumerate() {
        let (img, p) = process_image(frames.index_axis(Axis(0), src), cfg)?;
        if slot == 0 {
            provenance.extend(p);
        }
        out.index_axis_mut(Axis(0), slot).assign(&img);
    }
    Ok(PreprocessedTensor {
        modality: Modality::Video,
        data: out,
        provenance,
    })
}
