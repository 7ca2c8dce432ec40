//! Raw modality inputs and the fixed tensor layouts the encoders consume.

mod audio;
pub mod bpe;
mod video;
mod visual;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array3, Array4, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use audio::{log_mel_spectrogram, long_clip_window_starts, preprocess_audio, MelFilterBank};
pub use bpe::BpeTokenizer;
pub use video::{sample_frame_indices, sample_video_frames};
pub use visual::{center_crop_offsets, preprocess_visual_map, resized_dims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Depth,
    Infrared,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Video,
        Modality::Depth,
        Modality::Infrared,
        Modality::Audio,
        Modality::Text,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Video => "video",
            Modality::Depth => "depth",
            Modality::Infrared => "infrared",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown modality {s:?}")))
    }
}

/// Modality-specific raw data. Pixel and sample values are floats;
/// images are expected in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `H×W×C` map with `C ∈ {1, 3}` (depth, infrared).
    Map(Array3<f32>),
    /// `T×H×W×3` decoded frames.
    Frames(Array4<f32>),
    /// Mono waveform.
    Waveform(Array1<f32>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawModalitySample {
    pub id: String,
    pub modality: Modality,
    pub payload: Payload,
    /// Hz, audio only.
    pub sample_rate: Option<f64>,
    /// Seconds, audio and video only.
    pub duration: Option<f64>,
}

impl RawModalitySample {
    pub fn map(id: impl Into<String>, modality: Modality, map: Array3<f32>) -> Result<Self> {
        Self::validated(id.into(), modality, Payload::Map(map), None, None)
    }

    pub fn video(id: impl Into<String>, frames: Array4<f32>, duration: Option<f64>) -> Result<Self> {
        Self::validated(id.into(), Modality::Video, Payload::Frames(frames), None, duration)
    }

    pub fn audio(id: impl Into<String>, waveform: Array1<f32>, sample_rate: f64) -> Result<Self> {
        let duration = waveform.len() as f64 / sample_rate;
        Self::validated(
            id.into(),
            Modality::Audio,
            Payload::Waveform(waveform),
            Some(sample_rate),
            Some(duration),
        )
    }

    pub fn text(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            modality: Modality::Text,
            payload: Payload::Text(text.into()),
            sample_rate: None,
            duration: None,
        }
    }

    fn validated(
        id: String,
        modality: Modality,
        payload: Payload,
        sample_rate: Option<f64>,
        duration: Option<f64>,
    ) -> Result<Self> {
        let consistent = matches!(
            (modality, &payload),
            (Modality::Depth | Modality::Infrared, Payload::Map(_))
                | (Modality::Video, Payload::Frames(_))
                | (Modality::Audio, Payload::Waveform(_))
                | (Modality::Text, Payload::Text(_))
        );
        if !consistent {
            return Err(Error::invalid(format!("payload does not match modality {modality}")));
        }
        if let Some(sr) = sample_rate {
            if !(sr > 0.0 && sr.is_finite()) {
                return Err(Error::invalid(format!("sample rate must be positive, got {sr}")));
            }
        }
        if let Some(d) = duration {
            if !(d > 0.0) {
                return Err(Error::invalid(format!("duration must be positive, got {d}")));
            }
        }
        Ok(Self {
            id,
            modality,
            payload,
            sample_rate,
            duration,
        })
    }
}

/// Encoder-ready tensor, stored as `[frames, 3, H, W]`. Non-video
/// modalities carry a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedTensor {
    pub modality: Modality,
    pub data: Array4<f32>,
    pub provenance: Vec<String>,
}

impl PreprocessedTensor {
    /// Logical layout: `[3,H,W]` for maps and audio, `[T,3,H,W]` for video.
    pub fn layout(&self) -> Vec<usize> {
        let (t, c, h, w) = self.data.dim();
        match self.modality {
            Modality::Video => vec![t, c, h, w],
            _ => vec![c, h, w],
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, _, h, w) = self.data.dim();
        (h, w)
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.data.index_axis(ndarray::Axis(0), t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub resize_short: usize,
    pub crop: usize,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            resize_short: 256,
            crop: 224,
            mean: [0.5; 3],
            std: [0.5; 3],
        }
    }
}

impl VisualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.resize_short < self.crop {
            return Err(Error::Config(format!(
                "visual: need 0 < crop <= resize_short, got crop {} short {}",
                self.crop, self.resize_short
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("visual: std must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AudioConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub clip_seconds: f64,
}

impl Default for AudioConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 1024,
            hop: 320,
            n_mels: 128,
            clip_seconds: 10.0,
        }
    }
}

impl AudioConfig {
    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * f64::from(self.sample_rate)).round() as usize
    }

    /// Spectrogram width of one clip.
    pub fn clip_frames(&self) -> usize {
        self.clip_samples() / self.hop
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.hop == 0 || self.n_mels == 0 || self.n_fft < 2 {
            return Err(Error::Config("audio: sample_rate, hop, n_mels, n_fft must be positive".into()));
        }
        if !(self.clip_seconds > 0.0) || self.clip_frames() == 0 {
            return Err(Error::Config("audio: clip must span at least one hop".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocConfig {
    pub visual: VisualConfig,
    /// Normalization for video frames; resize/crop follow `visual`.
    pub video_mean: [f32; 3],
    pub video_std: [f32; 3],
    pub audio: AudioConfig,
    pub max_frames: usize,
    pub max_words: usize,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            visual: VisualConfig::default(),
            video_mean: [0.5; 3],
            video_std: [0.5; 3],
            audio: AudioConfig::default(),
            max_frames: 8,
            max_words: 77,
        }
    }
}

impl PreprocConfig {
    /// 28×28 maps and frames, 28 mel bins by 28 frames of audio, four
    /// video frames: matches `EncoderConfig::desk`.
    pub fn desk() -> Self {
        Self {
            visual: VisualConfig {
                resize_short: 28,
                crop: 28,
                ..VisualConfig::default()
            },
            audio: AudioConfig {
                sample_rate: 8_000,
                n_fft: 256,
                hop: 80,
                n_mels: 28,
                clip_seconds: 0.28,
            },
            max_frames: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.visual.validate()?;
        self.audio.validate()?;
        if self.max_frames == 0 {
            return Err(Error::Config("max_frames must be positive".into()));
        }
        if self.max_words < 2 {
            return Err(Error::Config("max_words must leave room for both sentinels".into()));
        }
        Ok(())
    }

    pub fn video_visual(&self) -> VisualConfig {
        VisualConfig {
            mean: self.video_mean,
            std: self.video_std,
            ..self.visual.clone()
        }
    }
}

/// Routes a non-text sample to its preprocessor. `seed` only matters for
/// audio longer than one clip.
pub fn preprocess(sample: &RawModalitySample, cfg: &PreprocConfig, seed: u64) -> Result<PreprocessedTensor> {
    match sample.modality {
        Modality::Depth | Modality::Infrared => preprocess_visual_map(sample, &cfg.visual),
        Modality::Video => sample_video_frames(sample, cfg.max_frames, &cfg.video_visual()),
        Modality::Audio => preprocess_audio(sample, &cfg.audio, seed),
        Modality::Text => Err(Error::invalid("text is tokenized, not preprocessed")),
    }
}
