//! Retrieval and zero-shot metrics, embedding fusion, and the synthetic
//! fixture corpus.

mod dump;
mod fixture;
mod zero_shot;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dump::{read_embeddings, write_embeddings, EmbeddingDump, DUMP_MAGIC};
pub use fixture::{generate_fixture, generate_fixture_dataset, Fixture, FixtureSpec};
pub use zero_shot::{class_text_embeddings, zero_shot_classify, TemplateSet, ZeroShot};

use crate::encoders::ModalityRegistry;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, str_tag};
use crate::tape::Mat;
use crate::trainer::PairedDataset;

const ENCODE_CHUNK: usize = 64;

/// `Q×G` scores plus, per query, the gallery indices counted correct.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub scores: Mat,
    pub positives: Vec<Vec<usize>>,
}

impl SimilarityMatrix {
    pub fn new(scores: Mat, positives: Vec<Vec<usize>>) -> Result<Self> {
        if positives.len() != scores.nrows() {
            return Err(Error::shape(format!(
                "{} positive sets for {} queries",
                positives.len(),
                scores.nrows()
            )));
        }
        for (q, p) in positives.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::invalid(format!("query {q} has no positive")));
            }
            if let Some(&j) = p.iter().find(|&&j| j >= scores.ncols()) {
                return Err(Error::invalid(format!("query {q}: positive {j} outside gallery")));
            }
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Numeric("NaN similarity".into()));
        }
        Ok(Self { scores, positives })
    }

    /// Query `i` matches gallery item `i`.
    pub fn diagonal(scores: Mat) -> Result<Self> {
        let q = scores.nrows();
        Self::new(scores, (0..q).map(|i| vec![i]).collect())
    }

    /// Query `i` matches every gallery item carrying the same label.
    pub fn from_labels<L: PartialEq>(scores: Mat, queries: &[L], gallery: &[L]) -> Result<Self> {
        let positives = queries
            .iter()
            .map(|q| gallery.iter().enumerate().filter(|(_, g)| *g == q).map(|(j, _)| j).collect())
            .collect();
        Self::new(scores, positives)
    }

    pub fn n_queries(&self) -> usize {
        self.scores.nrows()
    }

    /// 1-based rank of the best positive when the gallery is ordered by
    /// score descending, equal scores by ascending index.
    pub fn rank(&self, q: usize) -> usize {
        let row = self.scores.row(q);
        let best = self.positives[q]
            .iter()
            .copied()
            .min_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("no NaN").then(a.cmp(&b)))
            .expect("non-empty positives");
        let s = row[best];
        1 + row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > s || (v == s && j < best))
            .count()
    }

    pub fn ranks(&self) -> Vec<usize> {
        (0..self.n_queries()).into_par_iter().map(|q| self.rank(q)).collect()
    }
}

/// Eval-mode embeddings of every sample in `dataset` under the `name`
/// tower, unmasked. Sample `i` preprocesses under a seed fixed by `i`.
pub fn encode_dataset(registry: &ModalityRegistry, name: &str, dataset: &PairedDataset) -> Result<Mat> {
    let parts = dataset
        .pairs
        .par_chunks(ENCODE_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let batch = chunk
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    let i = (c * ENCODE_CHUNK + j) as u64;
                    registry.preprocess(name, &p.sample, derive_seed(0, &[str_tag("eval"), i]))
                })
                .collect::<Result<Vec<_>>>()?;
            registry.encode_modality(name, &batch, 0.0, 0)
        })
        .collect::<Result<Vec<_>>>()?;
    stack(&parts, registry.text.config.projection_dim)
}

/// Caption embeddings from the frozen language tower.
pub fn encode_texts<S: AsRef<str> + Sync>(registry: &ModalityRegistry, texts: &[S]) -> Result<Mat> {
    let parts = texts
        .par_chunks(ENCODE_CHUNK)
        .map(|c| registry.encode_captions(c))
        .collect::<Result<Vec<_>>>()?;
    stack(&parts, registry.text.config.projection_dim)
}

fn stack(parts: &[Mat], dim: usize) -> Result<Mat> {
    if parts.is_empty() {
        return Ok(Mat::zeros((0, dim)));
    }
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// `scores[i][j] = a_i · b_j`; cosine for unit rows.
pub fn similarity(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.ncols() != b.ncols() {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(a.dot(&b.t()))
}

pub fn recall_from_ranks(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Lower median.
pub fn median_from_ranks(ranks: &[usize]) -> f64 {
    if ranks.is_empty() {
        return f64::NAN;
    }
    let mut r = ranks.to_vec();
    r.sort_unstable();
    r[(r.len() - 1) / 2] as f64
}

pub fn recall_at_k(sim: &SimilarityMatrix, k: usize) -> f64 {
    recall_from_ranks(&sim.ranks(), k)
}

pub fn median_rank(sim: &SimilarityMatrix) -> f64 {
    median_from_ranks(&sim.ranks())
}

/// Serialized as `{r1, r5, r10, mr, top1}`; `top1` is set only for
/// classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub mr: f64,
    pub top1: Option<f64>,
}

impl RetrievalReport {
    pub fn from_similarity(sim: &SimilarityMatrix) -> Self {
        let ranks = sim.ranks();
        Self {
            r1: recall_from_ranks(&ranks, 1),
            r5: recall_from_ranks(&ranks, 5),
            r10: recall_from_ranks(&ranks, 10),
            mr: median_from_ranks(&ranks),
            top1: None,
        }
    }

    /// Samples as queries against a gallery of classes: top-1 accuracy
    /// is R@1.
    pub fn classification(sim: &SimilarityMatrix) -> Self {
        let r = Self::from_similarity(sim);
        Self { top1: Some(r.r1), ..r }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |v: f64| format!("{:6.1}", 100.0 * v);
        writeln!(f, "   R@1    R@5   R@10     MR   Top1")?;
        write!(
            f,
            "{} {} {} {:>6.1} {}",
            pct(self.r1),
            pct(self.r5),
            pct(self.r10),
            self.mr,
            self.top1.map_or_else(|| "     -".into(), pct)
        )
    }
}

/// Queries `a` against gallery `b`, row `i` of each being a pair.
pub fn paired_retrieval(a: &Mat, b: &Mat) -> Result<RetrievalReport> {
    if a.nrows() > b.nrows() {
        return Err(Error::shape(format!("{} queries for {} gallery items", a.nrows(), b.nrows())));
    }
    Ok(RetrievalReport::from_similarity(&SimilarityMatrix::diagonal(similarity(a, b)?)?))
}

/// Direct X→Y retrieval between two towers that only ever saw language.
pub fn emergent_retrieval(x: &Mat, y: &Mat) -> Result<RetrievalReport> {
    paired_retrieval(x, y)
}

fn normalize_rows(mut m: Mat) -> Mat {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    m
}

/// `normalize(Σ_m w_m·e_m)` row-wise. Zero weights drop out; a single
/// remaining modality is returned as is, since its rows are already unit.
pub fn fuse(embeddings: &BTreeMap<String, Mat>, weights: &BTreeMap<String, f64>) -> Result<Mat> {
    for (name, w) in weights {
        if !embeddings.contains_key(name) {
            return Err(Error::invalid(format!("weight given for unknown modality {name:?}")));
        }
        if !(w.is_finite() && *w >= 0.0) {
            return Err(Error::invalid(format!("weight for {name} must be finite and non-negative")));
        }
    }
    let uniform = weights.is_empty();
    let active: Vec<(&Mat, f64)> = embeddings
        .iter()
        .map(|(n, e)| (e, if uniform { 1.0 } else { weights.get(n).copied().unwrap_or(0.0) }))
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let Some(&(first, _)) = active.first() else {
        return Err(Error::invalid("all fusion weights are zero"));
    };
    if active.iter().any(|(e, _)| e.dim() != first.dim()) {
        return Err(Error::shape("fused embeddings must align sample-wise"));
    }
    if active.len() == 1 {
        return Ok(first.clone());
    }
    let mut sum = Mat::zeros(first.dim());
    for (e, w) in &active {
        sum.scaled_add(*w, e);
    }
    Ok(normalize_rows(sum))
}

/// Text queries against the fused gallery; empty `weights` means uniform.
pub fn joint_retrieval(
    embeddings: &BTreeMap<String, Mat>,
    weights: &BTreeMap<String, f64>,
    text: &Mat,
) -> Result<RetrievalReport> {
    paired_retrieval(text, &fuse(embeddings, weights)?)
}
