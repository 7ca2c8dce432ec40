//! Log-mel spectrograms over fixed-length clips.
//!
//! Clips shorter than the window are tiled in the spectrogram domain and
//! zero-padded; longer recordings contribute one randomly placed window
//! from each third, stacked as the three channels.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::{s, Array2, Array4};
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioConfig, Modality, Payload, PreprocessedTensor, RawModalitySample};
use crate::error::{Error, Result};
use crate::seed::{derived_rng, str_tag};

const LOG_FLOOR: f64 = 1e-10;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filters from 0 Hz to Nyquist, unnormalized.
#[derive(Debug, Clone)]
pub struct MelFilterBank {
    pub weights: Array2<f64>,
}

impl MelFilterBank {
    pub fn new(sample_rate: u32, n_fft: usize, n_mels: usize) -> Self {
        let n_freqs = n_fft / 2 + 1;
        let nyquist = f64::from(sample_rate) / 2.0;
        let (mel_lo, mel_hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
        let hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let weights = Array2::from_shape_fn((n_mels, n_freqs), |(m, k)| {
            let f = k as f64 * f64::from(sample_rate) / n_fft as f64;
            let (lo, c, hi) = (hz[m], hz[m + 1], hz[m + 2]);
            let up = (f - lo) / (c - lo);
            let down = (hi - f) / (hi - c);
            up.min(down).max(0.0)
        });
        Self { weights }
    }
}

/// `n_mels × ⌊len/hop⌋` log-mel power spectrogram. Frame `t` is centered
/// on sample `t·hop`; samples outside the signal count as zero.
pub fn log_mel_spectrogram(wave: &[f64], cfg: &AudioConfig, bank: &MelFilterBank) -> Array2<f32> {
    let n_frames = wave.len() / cfg.hop;
    let n_fft = cfg.n_fft;
    let half = n_fft / 2;
    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n_fft as f64).cos())
        .collect();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n_fft);
    let n_freqs = n_fft / 2 + 1;
    let mut power = Array2::<f64>::zeros((n_freqs, n_frames));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for t in 0..n_frames {
        let center = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            let pos = center as isize + i as isize - half as isize;
            let x = if pos >= 0 && (pos as usize) < wave.len() {
                wave[pos as usize]
            } else {
                0.0
            };
            *b = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..n_freqs {
            power[[k, t]] = buf[k].norm_sqr();
        }
    }
    bank.weights
        .dot(&power)
        .mapv(|p| p.max(LOG_FLOOR).ln() as f32)
}

fn resample_linear(wave: &[f64], from: f64, to: f64) -> Vec<f64> {
    let n_out = ((wave.len() as f64) * to / from).round().max(1.0) as usize;
    let ratio = from / to;
    (0..n_out)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(wave.len() - 1);
            let hi = (lo + 1).min(wave.len() - 1);
            let f = pos - lo as f64;
            wave[lo] * (1.0 - f) + wave[hi] * f
        })
        .collect()
}

/// Start samples of the three clip windows drawn from the front, middle,
/// and back thirds of an `n`-sample recording (`n > clip`). A window that
/// fits inside its third is placed uniformly within it; otherwise it
/// starts at the third's start, pulled back to stay inside the recording.
pub fn long_clip_window_starts(n: usize, clip: usize, seed: u64) -> [usize; 3] {
    let mut rng = derived_rng(seed, &[str_tag("audio_windows")]);
    let mut starts = [0usize; 3];
    for (k, start) in starts.iter_mut().enumerate() {
        let lo = k * n / 3;
        let hi = (k + 1) * n / 3;
        *start = if hi >= lo + clip {
            rng.random_range(lo..=hi - clip)
        } else {
            lo.min(n - clip)
        };
    }
    starts
}

pub fn preprocess_audio(sample: &RawModalitySample, cfg: &AudioConfig, seed: u64) -> Result<PreprocessedTensor> {
    if sample.modality != Modality::Audio {
        return Err(Error::invalid(format!("expected audio, got {}", sample.modality)));
    }
    let Payload::Waveform(wave) = &sample.payload else {
        return Err(Error::invalid("audio payload expected"));
    };
    if wave.is_empty() {
        return Err(Error::invalid("empty waveform"));
    }
    let sr = sample
        .sample_rate
        .ok_or_else(|| Error::invalid("audio sample rate missing"))?;
    if !(sr > 0.0 && sr.is_finite()) {
        return Err(Error::invalid(format!("sample rate must be positive, got {sr}")));
    }
    cfg.validate()?;

    let mut provenance = vec![format!(
        "log_mel:sr={},n_fft={},hop={},n_mels={},window=hann",
        cfg.sample_rate, cfg.n_fft, cfg.hop, cfg.n_mels
    )];
    let mut samples: Vec<f64> = wave.iter().map(|&x| f64::from(x)).collect();
    if (sr - f64::from(cfg.sample_rate)).abs() > 1e-9 {
        samples = resample_linear(&samples, sr, f64::from(cfg.sample_rate));
        provenance.push(format!("resample_linear:{sr}->{}", cfg.sample_rate));
    }

    let bank = MelFilterBank::new(cfg.sample_rate, cfg.n_fft, cfg.n_mels);
    let clip = cfg.clip_samples();
    let width = cfg.clip_frames();
    let n = samples.len();
    let mut out = Array4::<f32>::zeros((1, 3, cfg.n_mels, width));

    if n <= clip {
        let spec = log_mel_spectrogram(&samples, cfg, &bank);
        let w = spec.ncols();
        if w == 0 {
            return Err(Error::invalid("waveform shorter than one hop"));
        }
        let tiles = clip / n;
        let mut tiled = Array2::<f32>::zeros((cfg.n_mels, width));
        for k in 0..tiles {
            tiled.slice_mut(s![.., k * w..(k + 1) * w]).assign(&spec);
        }
        if tiles > 1 {
            provenance.push(format!("tile:{tiles}"));
        }
        if tiles * w < width {
            provenance.push(format!("zero_pad_frames:{}", width - tiles * w));
        }
        for ch in 0..3 {
            out.slice_mut(s![0, ch, .., ..]).assign(&tiled);
        }
        provenance.push("replicate_channels:3".into());
    } else {
        let starts = long_clip_window_starts(n, clip, seed);
        for (ch, &start) in starts.iter().enumerate() {
            let spec = log_mel_spectrogram(&samples[start..start + clip], cfg, &bank);
            out.slice_mut(s![0, ch, .., ..]).assign(&spec);
        }
        provenance.push(format!("window_starts:{starts:?}"));
    }

    Ok(PreprocessedTensor {
        modality: Modality::Audio,
        data: out,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn tone(seconds: f64, sr: f64, freq: f64) -> Array1<f32> {
        let n = (seconds * sr).round() as usize;
        Array1::from_shape_fn(n, |i| (2.0 * PI * freq * i as f64 / sr).sin() as f32 * 0.5)
    }

    fn small_cfg() -> AudioConfig {
        AudioConfig {
            sample_rate: 1600,
            n_fft: 128,
            hop: 32,
            n_mels: 16,
            clip_seconds: 10.0,
        }
    }

    #[test]
    fn default_clip_is_500_frames() {
        assert_eq!(AudioConfig::default().clip_frames(), 500);
    }

    #[test]
    fn mel_bank_rows_are_triangles() {
        let bank = MelFilterBank::new(16_000, 1024, 128);
        assert_eq!(bank.weights.dim(), (128, 513));
        for row in bank.weights.rows() {
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            assert!(row.iter().any(|&w| w > 0.0));
        }
    }

    #[test]
    fn exact_clip_replicates_one_spectrogram() {
        let cfg = small_cfg();
        let s = RawModalitySample::audio("a", tone(10.0, 1600.0, 200.0), 1600.0).unwrap();
        let t = preprocess_audio(&s, &cfg, 0).unwrap();
        assert_eq!(t.layout(), vec![3, 16, 500]);
        assert_eq!(t.frame(0).index_axis(ndarray::Axis(0), 0), t.frame(0).index_axis(ndarray::Axis(0), 2));
        assert!(!t.provenance.iter().any(|p| p.starts_with("zero_pad")));
    }

    #[test]
    fn divisor_durations_need_no_padding() {
        let cfg = small_cfg();
        for secs in [2.5, 5.0, 2.0] {
            let s = RawModalitySample::audio("a", tone(secs, 1600.0, 300.0), 1600.0).unwrap();
            let t = preprocess_audio(&s, &cfg, 0).unwrap();
            assert!(!t.provenance.iter().any(|p| p.starts_with("zero_pad")), "{secs}s");
            assert!(t.data.iter().all(|v| *v != 0.0));
        }
    }

    #[test]
    fn short_audio_is_deterministic_regardless_of_seed() {
        let cfg = small_cfg();
        let s = RawModalitySample::audio("a", tone(3.0, 1600.0, 250.0), 1600.0).unwrap();
        assert_eq!(preprocess_audio(&s, &cfg, 1).unwrap(), preprocess_audio(&s, &cfg, 2).unwrap());
    }

    #[test]
    fn resampling_changes_rate() {
        let cfg = small_cfg();
        let s = RawModalitySample::audio("a", tone(10.0, 3200.0, 200.0), 3200.0).unwrap();
        let t = preprocess_audio(&s, &cfg, 0).unwrap();
        assert_eq!(t.layout(), vec![3, 16, 500]);
        assert!(t.provenance.iter().any(|p| p.starts_with("resample_linear")));
    }

    #[test]
    fn window_starts_stay_in_their_thirds() {
        let clip = 16_000;
        for seed in 0..50 {
            let n = 45 * 1600;
            let starts = long_clip_window_starts(n, clip, seed);
            for (k, s) in starts.iter().enumerate() {
                assert!(*s >= k * n / 3 && s + clip <= (k + 1) * n / 3);
            }
        }
        assert_eq!(long_clip_window_starts(48_000, 16_000, 3), [0, 16_000, 32_000]);
    }

    #[test]
    fn rejects_empty_and_bad_rate() {
        let cfg = small_cfg();
        let s = RawModalitySample {
            id: "a".into(),
            modality: Modality::Audio,
            payload: Payload::Waveform(Array1::zeros(0)),
            sample_rate: Some(1600.0),
            duration: None,
        };
        assert!(preprocess_audio(&s, &cfg, 0).is_err());
        assert!(RawModalitySample::audio("a", tone(1.0, 1600.0, 100.0), 0.0).is_err());
        let s = RawModalitySample {
            sample_rate: Some(-5.0),
            ..RawModalitySample::audio("a", tone(1.0, 1600.0, 100.0), 1600.0).unwrap()
        };
        assert!(preprocess_audio(&s, &cfg, 0).is_err());
    }
}
