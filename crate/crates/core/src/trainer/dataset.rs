//! Paired (modality sample, caption) data loaded from a manifest plus
//! `.npy` payload files.

use std::path::Path;

use ndarray::{ArrayD, Ix1, Ix2, Ix3, Ix4};

use crate::curation::{MediaRecord, TextView};
use crate::error::{Error, Result};
use crate::preproc::{Modality, RawModalitySample};

#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub id: String,
    pub sample: RawModalitySample,
    pub caption: String,
    /// Class name for zero-shot evaluation, when known.
    pub label: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<Pair>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pairs for every record that has a `key` payload and a caption in
    /// `view`. Payload paths resolve against `base_dir`. Records lacking
    /// either are skipped; unreadable payloads are errors.
    pub fn from_records(records: &[MediaRecord], base_dir: &Path, key: &str, kind: Modality, view: TextView) -> Result<Self> {
        let mut pairs = Vec::new();
        for r in records {
            let (Some(rel), Some(caption)) = (r.modal_paths.get(key), r.text(view)) else {
                continue;
            };
            let sample = load_payload(&r.id, kind, &base_dir.join(rel), r.sample_rate, Some(r.duration))?;
            pairs.push(Pair {
                id: r.id.clone(),
                sample,
                caption,
                label: r.label.clone(),
            });
        }
        Ok(Self { pairs })
    }

    pub fn captions(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.caption.as_str()).collect()
    }
}

fn read_array(path: &Path) -> Result<ArrayD<f32>> {
    let err = |e: &dyn std::fmt::Display| Error::Data(format!("{}: {e}", path.display()));
    match ndarray_npy::read_npy::<_, ArrayD<f32>>(path) {
        Ok(a) => Ok(a),
        Err(ndarray_npy::ReadNpyError::WrongDescriptor(_)) => ndarray_npy::read_npy::<_, ArrayD<f64>>(path)
            .map(|a| a.mapv(|v| v as f32))
            .map_err(|e| err(&e)),
        Err(e) => Err(err(&e)),
    }
}

/// Reads one payload: depth as `H×W` or `H×W×C`, infrared as `H×W×C`,
/// video as `T×H×W×3`, audio as a mono waveform.
pub fn load_payload(id: &str, kind: Modality, path: &Path, sample_rate: Option<f64>, duration: Option<f64>) -> Result<RawModalitySample> {
    let a = read_array(path)?;
    let shape_err = |want: &str| Error::Data(format!("{}: expected {want}, got shape {:?}", path.display(), a.shape()));
    match kind {
        Modality::Depth | Modality::Infrared => {
            let map = match a.ndim() {
                2 => a.clone().into_dimensionality::<Ix2>().map(|m| m.insert_axis(ndarray::Axis(2))),
                3 => a.clone().into_dimensionality::<Ix3>(),
                _ => return Err(shape_err("H×W or H×W×C")),
            }
            .map_err(|_| shape_err("H×W or H×W×C"))?;
            RawModalitySample::map(id, kind, map)
        }
        Modality::Video => {
            let frames = a.clone().into_dimensionality::<Ix4>().map_err(|_| shape_err("T×H×W×3"))?;
            RawModalitySample::video(id, frames, duration)
        }
        Modality::Audio => {
            let wave = a.clone().into_dimensionality::<Ix1>().map_err(|_| shape_err("a 1-D waveform"))?;
            let sr = sample_rate.ok_or_else(|| Error::Data(format!("{id}: audio record lacks sample_rate")))?;
            RawModalitySample::audio(id, wave, sr)
        }
        Modality::Text => Err(Error::invalid("text has no payload file")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};

    #[test]
    fn loads_each_layout_and_skips_missing() {
        let dir = tempfile::tempdir().unwrap();
        ndarray_npy::write_npy(dir.path().join("d.npy"), &Array2::<f32>::from_elem((5, 6), 0.5)).unwrap();
        ndarray_npy::write_npy(dir.path().join("v.npy"), &Array4::<f64>::zeros((2, 4, 4, 3))).unwrap();
        ndarray_npy::write_npy(dir.path().join("a.npy"), &Array1::<f32>::zeros(800)).unwrap();

        let mut r = MediaRecord::new("r0", "a dog runs", vec!["#dog".into()], 1.0);
        r.modal_paths.insert("depth".into(), "d.npy".into());
        r.modal_paths.insert("video".into(), "v.npy".into());
        r.modal_paths.insert("audio".into(), "a.npy".into());
        r.sample_rate = Some(800.0);
        let bare = MediaRecord::new("r1", "nothing", vec![], 1.0);
        let recs = [r, bare];

        let d = PairedDataset::from_records(&recs, dir.path(), "depth", Modality::Depth, TextView::TitleHashtags).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.pairs[0].caption, "a dog runs #dog");
        let v = PairedDataset::from_records(&recs, dir.path(), "video", Modality::Video, TextView::TitleHashtags).unwrap();
        assert_eq!(v.len(), 1);
        let a = PairedDataset::from_records(&recs, dir.path(), "audio", Modality::Audio, TextView::TitleHashtags).unwrap();
        assert_eq!(a.pairs[0].sample.sample_rate, Some(800.0));
        let none = PairedDataset::from_records(&recs, dir.path(), "depth", Modality::Depth, TextView::VideoCaption).unwrap();
        assert!(none.is_empty());
        assert!(matches!(
            PairedDataset::from_records(&recs, dir.path(), "video", Modality::Depth, TextView::TitleHashtags),
            Err(Error::Data(_))
        ));
    }
}
