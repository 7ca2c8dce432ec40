//! Prompt-ensemble zero-shot classification through the language tower.

use std::path::Path;

use rayon::prelude::*;

use super::{similarity, RetrievalReport, SimilarityMatrix};
use crate::encoders::ModalityRegistry;
use crate::error::{Error, Result};
use crate::preproc::Modality;
use crate::tape::Mat;

const SHIPPED: &str = include_str!("../../assets/templates.txt");

/// Prompt templates, each holding one `{}` for the class name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    pub templates: Vec<String>,
}

impl TemplateSet {
    /// One template per line; `#` lines are comments, and a
    /// `# version: <v>` comment names the set.
    pub fn parse(text: &str) -> Result<Self> {
        let mut version = String::from("unversioned");
        let mut templates = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(v) = comment.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            if line.matches("{}").count() != 1 {
                return Err(Error::invalid(format!("template line {}: needs exactly one {{}}", n + 1)));
            }
            templates.push(line.to_string());
        }
        if templates.is_empty() {
            return Err(Error::invalid("template set is empty"));
        }
        Ok(Self { version, templates })
    }

    /// The 20-template set bundled with the crate.
    pub fn shipped() -> Self {
        Self::parse(SHIPPED).expect("shipped templates parse")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Phrase rewrites applied before the class name is filled in.
    pub fn substitutions(kind: Modality) -> &'static [(&'static str, &'static str)] {
        match kind {
            Modality::Video => &[("photo", "video")],
            Modality::Depth => &[("photo", "depth photo")],
            Modality::Audio => &[("a photo of", "a sound of"), ("the photo of", "the sound of")],
            Modality::Infrared | Modality::Text => &[],
        }
    }

    pub fn expand(&self, class: &str, kind: Modality) -> Vec<String> {
        self.templates
            .iter()
            .map(|t| {
                let mut s = t.clone();
                for (from, to) in Self::substitutions(kind) {
                    s = s.replace(from, to);
                }
                s.replace("{}", class)
            })
            .collect()
    }
}

/// `C×D` class embeddings: each class's prompts encoded, averaged, and
/// renormalized.
pub fn class_text_embeddings(
    registry: &ModalityRegistry,
    classes: &[String],
    kind: Modality,
    templates: &TemplateSet,
) -> Result<Mat> {
    if classes.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    let rows = classes
        .par_iter()
        .map(|c| {
            let e = registry.encode_captions(&templates.expand(c, kind))?;
            let mean = e.mean_axis(ndarray::Axis(0)).expect("at least one template");
            let n = mean.dot(&mean).sqrt();
            Ok(mean / n)
        })
        .collect::<Result<Vec<_>>>()?;
    let d = rows[0].len();
    Ok(Mat::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    /// Predicted class index per sample.
    pub predictions: Vec<usize>,
    pub report: RetrievalReport,
}

/// Scores each embedding row against every class prompt ensemble and
/// checks the argmax against `labels`.
pub fn zero_shot_classify(
    registry: &ModalityRegistry,
    embeddings: &Mat,
    labels: &[String],
    classes: &[String],
    kind: Modality,
    templates: &TemplateSet,
) -> Result<ZeroShot> {
    if labels.len() != embeddings.nrows() {
        return Err(Error::shape(format!("{} labels for {} embeddings", labels.len(), embeddings.nrows())));
    }
    if let Some(l) = labels.iter().find(|l| !classes.contains(l)) {
        return Err(Error::invalid(format!("label {l:?} is not a class")));
    }
    let class_emb = class_text_embeddings(registry, classes, kind, templates)?;
    let sim = SimilarityMatrix::from_labels(similarity(embeddings, &class_emb)?, labels, classes)?;
    let predictions = sim
        .scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                .0
        })
        .collect();
    Ok(ZeroShot {
        predictions,
        report: RetrievalReport::classification(&sim),
    })
}
