//! Synthetic aligned corpus: each sample has a latent `z`, one rendered
//! payload per modality, and a caption fixed by its cluster.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::curation::{write_manifest, MediaRecord};
use crate::error::{Error, Result};
use crate::preproc::{Modality, RawModalitySample};
use crate::seed::{derived_rng, str_tag, Rng};
use crate::tape::Mat;
use crate::trainer::{Pair, PairedDataset};

const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "brown", "orange"];
const SUBJECTS: [&str; 8] = ["dog", "cat", "horse", "bird", "fish", "car", "boat", "train"];
const ACTIONS: [&str; 8] = ["runs", "jumps", "swims", "flies", "sits", "rolls", "turns", "waits"];
const PLACES: [&str; 8] = ["park", "beach", "road", "river", "field", "street", "lake", "forest"];
const RENDER_GAIN: f64 = 1.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub n_samples: usize,
    pub modalities: Vec<Modality>,
    pub latent_dim: usize,
    /// Std of Gaussian noise added to every payload value.
    pub noise: f64,
    pub seed: u64,
    /// Distinct captions; at most `n_samples` and 4096.
    pub n_clusters: usize,
    /// Std of each sample's latent around its cluster center.
    pub spread: f64,
    pub image_size: usize,
    pub frames: usize,
    pub sample_rate: f64,
    pub audio_seconds: f64,
}

impl FixtureSpec {
    /// One cluster per sample, desk-sized payloads. `n_modalities` takes
    /// the first entries of depth, infrared, audio, video.
    pub fn new(n_samples: usize, n_modalities: usize, latent_dim: usize, noise: f64, seed: u64) -> Self {
        let order = [Modality::Depth, Modality::Infrared, Modality::Audio, Modality::Video];
        Self {
            n_samples,
            modalities: order.into_iter().take(n_modalities).collect(),
            latent_dim,
            noise,
            seed,
            n_clusters: n_samples,
            spread: 0.1,
            image_size: 28,
            frames: 4,
            sample_rate: 8_000.0,
            audio_seconds: 0.28,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let combos = COLORS.len() * SUBJECTS.len() * ACTIONS.len() * PLACES.len();
        if self.n_samples < 2 {
            return Err(Error::invalid("fixture needs at least two samples"));
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_samples.min(combos) {
            return Err(Error::invalid(format!("n_clusters must lie in 1..={}", self.n_samples.min(combos))));
        }
        if self.latent_dim == 0 || self.image_size == 0 || self.frames == 0 {
            return Err(Error::invalid("latent_dim, image_size, frames must be positive"));
        }
        if self.modalities.iter().any(|m| *m == Modality::Text) {
            return Err(Error::invalid("text is generated as captions, not payloads"));
        }
        if !(self.noise >= 0.0 && self.spread >= 0.0) {
            return Err(Error::invalid("noise and spread must be non-negative"));
        }
        if !(self.sample_rate > 0.0 && self.audio_seconds > 0.0) {
            return Err(Error::invalid("audio rate and length must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: FixtureSpec,
    pub records: Vec<MediaRecord>,
    /// `n_samples × latent_dim`
    pub latents: Mat,
    pub clusters: Vec<usize>,
    pub samples: Vec<BTreeMap<Modality, RawModalitySample>>,
}

impl Fixture {
    pub fn captions(&self) -> Vec<String> {
        self.records.iter().map(MediaRecord::title_hashtags).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        self.records.iter().map(|r| r.label.clone().unwrap_or_default()).collect()
    }

    /// In-memory pairs for one modality, captioned by title and hashtags.
    pub fn dataset(&self, modality: Modality) -> Result<PairedDataset> {
        if !self.spec.modalities.contains(&modality) {
            return Err(Error::invalid(format!("fixture has no {modality} payloads")));
        }
        let pairs = self
            .records
            .iter()
            .zip(&self.samples)
            .map(|(r, s)| Pair {
                id: r.id.clone(),
                sample: s[&modality].clone(),
                caption: r.title_hashtags(),
                label: r.label.clone(),
            })
            .collect();
        Ok(PairedDataset { pairs })
    }

    /// Writes `manifest.jsonl` and `arrays/<id>_<modality>.npy` under
    /// `dir`; payload paths in the manifest are relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let arrays = dir.join("arrays");
        std::fs::create_dir_all(&arrays)?;
        let npy_err = |e: ndarray_npy::WriteNpyError| Error::Data(e.to_string());
        for (r, s) in self.records.iter().zip(&self.samples) {
            for (m, sample) in s {
                let path = dir.join(&r.modal_paths[m.as_str()]);
                match &sample.payload {
                    crate::preproc::Payload::Map(a) if *m == Modality::Depth => {
                        let flat = a.index_axis(ndarray::Axis(2), 0).to_owned();
                        ndarray_npy::write_npy(&path, &flat).map_err(npy_err)?
                    }
                    crate::preproc::Payload::Map(a) => ndarray_npy::write_npy(&path, a).map_err(npy_err)?,
                    crate::preproc::Payload::Frames(a) => ndarray_npy::write_npy(&path, a).map_err(npy_err)?,
                    crate::preproc::Payload::Waveform(a) => ndarray_npy::write_npy(&path, a).map_err(npy_err)?,
                    crate::preproc::Payload::Text(_) => unreachable!("fixtures hold no text payloads"),
                }
            }
        }
        write_manifest(&self.records, &dir.join("manifest.jsonl"))
    }
}

/// Per-modality fixed map from latent to payload.
struct Renderer {
    /// Per channel, per latent dim: `(fy, fx, phase, drift)`.
    waves: Vec<Vec<(f64, f64, f64, f64)>>,
    /// Per latent dim: `(frequency, phase)`.
    tones: Vec<(f64, f64)>,
}

impl Renderer {
    fn new(rng: &mut Rng, latent_dim: usize, sample_rate: f64) -> Self {
        let wave = |rng: &mut Rng| {
            (
                f64::from(rng.random_range(-3i32..=3)),
                f64::from(rng.random_range(-3i32..=3)),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(-0.5..0.5),
            )
        };
        let waves = (0..3).map(|_| (0..latent_dim).map(|_| wave(rng)).collect()).collect();
        let (lo, hi) = (150.0f64, (0.45 * sample_rate).min(3500.0));
        let tones = (0..latent_dim)
            .map(|k| {
                let t = (k as f64 + rng.random_range(0.2..0.8)) / latent_dim as f64;
                (lo * (hi / lo).powf(t), rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves, tones }
    }

    fn pixel(&self, z: &[f64], ch: usize, y: f64, x: f64, t: f64) -> f32 {
        let s: f64 = self.waves[ch]
            .iter()
            .zip(z)
            .map(|(&(fy, fx, ph, dr), &zk)| zk * (2.0 * PI * (fy * y + fx * x) + ph + dr * t).sin())
            .sum();
        let a = RENDER_GAIN * s / (z.len() as f64).sqrt();
        (1.0 / (1.0 + (-a).exp())) as f32
    }

    fn map(&self, z: &[f64], size: usize, channels: usize, t: f64) -> Array3<f32> {
        let n = size as f64;
        Array3::from_shape_fn((size, size, channels), |(y, x, c)| self.pixel(z, c, y as f64 / n, x as f64 / n, t))
    }

    fn audio(&self, z: &[f64], len: usize, sr: f64) -> Array1<f32> {
        let norm = 0.8 / z.len() as f64;
        Array1::from_shape_fn(len, |i| {
            let t = i as f64 / sr;
            self.tones
                .iter()
                .zip(z)
                .map(|(&(f, ph), &zk)| norm * (1.0 + zk.tanh()) * (2.0 * PI * f * t + ph).sin())
                .sum::<f64>() as f32
        })
    }
}

fn add_noise<D: ndarray::Dimension>(a: &mut ndarray::Array<f32, D>, std: f64, rng: &mut Rng) {
    if std > 0.0 {
        let dist = Normal::new(0.0, std).expect("finite std");
        a.mapv_inplace(|v| v + dist.sample(rng) as f32);
    }
}

pub fn generate_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let (n, l) = (spec.n_samples, spec.latent_dim);
    let combos = COLORS.len() * SUBJECTS.len() * ACTIONS.len() * PLACES.len();
    let mut rng = derived_rng(spec.seed, &[str_tag("clusters")]);
    let chosen = index::sample(&mut rng, combos, spec.n_clusters).into_vec();
    let centers = Array2::from_shape_fn((spec.n_clusters, l), |_| StandardNormal.sample(&mut rng));
    let clusters: Vec<usize> = (0..n).map(|i| i % spec.n_clusters).collect();

    let mut latents = Mat::from_shape_fn((n, l), |(i, k)| centers[[clusters[i], k]]);
    for i in 0..n {
        let mut r = derived_rng(spec.seed, &[str_tag("latent"), i as u64]);
        for k in 0..l {
            let e: f64 = StandardNormal.sample(&mut r);
            latents[[i, k]] += spec.spread * e;
        }
    }

    let renderers: BTreeMap<Modality, Renderer> = spec
        .modalities
        .iter()
        .map(|&m| {
            let mut r = derived_rng(spec.seed, &[str_tag("render"), str_tag(m.as_str())]);
            (m, Renderer::new(&mut r, l, spec.sample_rate))
        })
        .collect();
    let audio_len = (spec.audio_seconds * spec.sample_rate).round() as usize;
    let duration = audio_len as f64 / spec.sample_rate;

    let mut records = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("fx{i:05}");
        let c = chosen[clusters[i]];
        let (color, subject) = (COLORS[c % 8], SUBJECTS[(c / 8) % 8]);
        let (action, place) = (ACTIONS[(c / 64) % 8], PLACES[c / 512]);
        let mut rec = MediaRecord::new(
            id.clone(),
            format!("a {color} {subject} {action} in the {place}"),
            vec![format!("#{subject}")],
            duration,
        );
        rec.label = Some(subject.to_string());
        let z: Vec<f64> = latents.row(i).to_vec();
        let mut per = BTreeMap::new();
        for (&m, render) in &renderers {
            let mut nr = derived_rng(spec.seed, &[str_tag("noise"), str_tag(m.as_str()), i as u64]);
            let sample = match m {
                Modality::Depth | Modality::Infrared => {
                    let ch = if m == Modality::Depth { 1 } else { 3 };
                    let mut a = render.map(&z, spec.image_size, ch, 0.0);
                    add_noise(&mut a, spec.noise, &mut nr);
                    RawModalitySample::map(id.clone(), m, a)?
                }
                Modality::Video => {
                    let s = spec.image_size;
                    let mut a = Array4::zeros((spec.frames, s, s, 3));
                    for t in 0..spec.frames {
                        a.index_axis_mut(ndarray::Axis(0), t).assign(&render.map(&z, s, 3, t as f64));
                    }
                    add_noise(&mut a, spec.noise, &mut nr);
                    RawModalitySample::video(id.clone(), a, Some(duration))?
                }
                Modality::Audio => {
                    let mut a = render.audio(&z, audio_len, spec.sample_rate);
                    add_noise(&mut a, spec.noise, &mut nr);
                    rec.sample_rate = Some(spec.sample_rate);
                    RawModalitySample::audio(id.clone(), a, spec.sample_rate)?
                }
                Modality::Text => unreachable!("validated"),
            };
            rec.modal_paths.insert(m.as_str().to_string(), format!("arrays/{id}_{m}.npy"));
            per.insert(m, sample);
        }
        records.push(rec);
        samples.push(per);
    }
    Ok(Fixture {
        spec: spec.clone(),
        records,
        latents,
        clusters,
        samples,
    })
}

/// Generates the corpus and writes it under `dir`.
pub fn generate_fixture_dataset(spec: &FixtureSpec, dir: &Path) -> Result<Fixture> {
    let f = generate_fixture(spec)?;
    f.write(dir)?;
    Ok(f)
}
