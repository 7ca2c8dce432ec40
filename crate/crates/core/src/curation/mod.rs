//! Record filtering, stop-word cleaning, search-term balancing, and
//! JSON-lines manifest I/O.

mod manifest;
mod terms;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{parse_manifest, read_manifest, write_manifest, ManifestRead};
pub use terms::{build_search_terms, LexiconTagger, Pos, PosTagger};

const SHIPPED_STOPWORDS: &str = include_str!("../../assets/stopwords.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextView {
    TitleHashtags,
    KeyframeCaption,
    VideoCaption,
    EnhancedCaption,
}

impl TextView {
    pub const ALL: [TextView; 4] = [
        TextView::TitleHashtags,
        TextView::KeyframeCaption,
        TextView::VideoCaption,
        TextView::EnhancedCaption,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TextView::TitleHashtags => "title_hashtags",
            TextView::KeyframeCaption => "keyframe_caption",
            TextView::VideoCaption => "video_caption",
            TextView::EnhancedCaption => "enhanced_caption",
        }
    }
}

impl std::str::FromStr for TextView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextView::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown text view {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediaRecord {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub hashtags: Vec<String>,
    /// Seconds.
    pub duration: f64,
    /// Modality name to payload path, relative to the manifest directory.
    #[serde(default)]
    pub modal_paths: BTreeMap<String, String>,
    #[serde(default)]
    pub texts: BTreeMap<TextView, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downloads: Option<u64>,
    /// Class label for zero-shot classification.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Hz, for audio payloads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_rate: Option<f64>,
}

impl MediaRecord {
    pub fn new(id: impl Into<String>, title: impl Into<String>, hashtags: Vec<String>, duration: f64) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            hashtags,
            duration,
            modal_paths: BTreeMap::new(),
            texts: BTreeMap::new(),
            rating: None,
            downloads: None,
            label: None,
            sample_rate: None,
        }
    }

    /// `"<title> #tag #tag"`.
    pub fn title_hashtags(&self) -> String {
        std::iter::once(self.title.as_str())
            .chain(self.hashtags.iter().map(String::as_str))
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The requested view, with the title-and-hashtags view derived on
    /// demand when absent.
    pub fn text(&self, view: TextView) -> Option<String> {
        match (self.texts.get(&view), view) {
            (Some(t), _) => Some(t.clone()),
            (None, TextView::TitleHashtags) => Some(self.title_hashtags()),
            (None, _) => None,
        }
    }
}

/// Case-insensitive term set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWordList {
    terms: BTreeSet<String>,
    pub version: String,
}

impl StopWordList {
    /// One term per line; `#` lines are comments, and a `# version: X`
    /// comment sets the version tag.
    pub fn parse(text: &str) -> Self {
        let mut terms = BTreeSet::new();
        let mut version = String::from("unversioned");
        for line in text.lines().map(str::trim) {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if !line.is_empty() {
                terms.insert(line.to_lowercase());
            }
        }
        Self { terms, version }
    }

    pub fn shipped() -> Self {
        Self::parse(SHIPPED_STOPWORDS)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Matches after lowercasing and stripping leading `#`.
    pub fn contains(&self, token: &str) -> bool {
        self.terms.contains(&token.trim_start_matches('#').to_lowercase())
    }
}

/// Drops stop-word tokens from the title and hashtag list. Survivors keep
/// their casing; a title with nothing to drop is returned verbatim.
pub fn clean_text(title: &str, hashtags: &[String], stop: &StopWordList) -> (String, Vec<String>) {
    let tokens: Vec<&str> = title.split_whitespace().collect();
    let kept: Vec<&str> = tokens.iter().copied().filter(|t| !stop.contains(t)).collect();
    let title = if kept.len() == tokens.len() {
        title.to_string()
    } else {
        kept.join(" ")
    };
    let tags = hashtags.iter().filter(|t| !stop.contains(t)).cloned().collect();
    (title, tags)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Parse,
    TitleTooShort,
    NoHashtags,
    TooLong,
    LowAudioScore,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// `rating_weight·rating + downloads_weight·ln(1 + downloads) ≥ threshold`.
/// Records without either signal are exempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AudioScoreRule {
    pub rating_weight: f64,
    pub downloads_weight: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterRules {
    pub min_title_words: usize,
    pub max_duration: f64,
    pub require_hashtags: bool,
    pub audio_score: Option<AudioScoreRule>,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            min_title_words: 2,
            max_duration: 20.0,
            require_hashtags: true,
            audio_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterOutcome {
    /// The cleaned record.
    Keep(MediaRecord),
    /// Every violated rule, in a fixed order.
    Reject(Vec<RejectReason>),
}

impl FilterOutcome {
    pub fn is_keep(&self) -> bool {
        matches!(self, FilterOutcome::Keep(_))
    }
}

fn malformed(r: &MediaRecord) -> bool {
    r.id.trim().is_empty() || !r.duration.is_finite() || r.duration < 0.0
}

/// Cleans, then rejects when any rule is violated.
pub fn filter_record(r: &MediaRecord, rules: &FilterRules, stop: &StopWordList) -> FilterOutcome {
    if malformed(r) {
        return FilterOutcome::Reject(vec![RejectReason::Parse]);
    }
    let (title, hashtags) = clean_text(&r.title, &r.hashtags, stop);
    let mut reasons = Vec::new();
    if title.split_whitespace().count() < rules.min_title_words {
        reasons.push(RejectReason::TitleTooShort);
    }
    if rules.require_hashtags && hashtags.is_empty() {
        reasons.push(RejectReason::NoHashtags);
    }
    if r.duration > rules.max_duration {
        reasons.push(RejectReason::TooLong);
    }
    if let Some(rule) = &rules.audio_score {
        if r.rating.is_some() || r.downloads.is_some() {
            let score = rule.rating_weight * r.rating.unwrap_or(0.0)
                + rule.downloads_weight * (r.downloads.unwrap_or(0) as f64).ln_1p();
            if score < rule.threshold {
                reasons.push(RejectReason::LowAudioScore);
            }
        }
    }
    if !reasons.is_empty() {
        return FilterOutcome::Reject(reasons);
    }
    let mut kept = r.clone();
    kept.title = title;
    kept.hashtags = hashtags;
    let assembled = kept.title_hashtags();
    kept.texts.entry(TextView::TitleHashtags).or_insert(assembled);
    FilterOutcome::Keep(kept)
}

/// Filter result over a whole manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationReport {
    pub kept: Vec<MediaRecord>,
    /// Reason to number of records that violated it.
    pub reasons: BTreeMap<RejectReason, usize>,
    pub rejected: usize,
}

impl CurationReport {
    pub fn reasons_json(&self) -> serde_json::Value {
        let m: serde_json::Map<String, serde_json::Value> = self
            .reasons
            .iter()
            .map(|(r, n)| (r.to_string(), serde_json::Value::from(*n)))
            .collect();
        serde_json::Value::Object(m)
    }
}

/// Filters parsed records and counts unparseable lines as `parse`
/// rejections.
pub fn curate(read: &ManifestRead, rules: &FilterRules, stop: &StopWordList) -> CurationReport {
    let mut report = CurationReport::default();
    for _ in &read.errors {
        *report.reasons.entry(RejectReason::Parse).or_default() += 1;
        report.rejected += 1;
    }
    for r in &read.records {
        match filter_record(r, rules, stop) {
            FilterOutcome::Keep(k) => report.kept.push(k),
            FilterOutcome::Reject(reasons) => {
                report.rejected += 1;
                for reason in reasons {
                    *report.reasons.entry(reason).or_default() += 1;
                }
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(t: &[&str]) -> Vec<String> {
        t.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn shipped_list_contents() {
        let s = StopWordList::shipped();
        assert_eq!(s.version, "1");
        assert_eq!(s.len(), 129);
        for w in ["youtube", "fyp", "shorts", "bts", "bmw", "nfl", "viral"] {
            assert!(s.contains(w), "{w}");
        }
        assert!(s.contains("#Shorts"));
        assert!(s.contains("YouTube"));
        assert!(!s.contains("dog"));
    }

    #[test]
    fn clean_examples() {
        let s = StopWordList::shipped();
        let (_, t) = clean_text("x y", &tags(&["#shorts", "#dog"]), &s);
        assert_eq!(t, tags(&["#dog"]));
        let (title, _) = clean_text("golden  retriever swims", &[], &s);
        assert_eq!(title, "golden  retriever swims");
        let (title, _) = clean_text("YouTube BMW review clip", &[], &s);
        assert_eq!(title, "review clip");
    }

    #[test]
    fn filter_examples() {
        let s = StopWordList::shipped();
        let rules = FilterRules::default();
        let r = MediaRecord::new("1", "dog", tags(&["#dog"]), 5.0);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::TitleTooShort]));
        let r = MediaRecord::new("2", "golden retriever swims", vec![], 10.0);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::NoHashtags]));
        let r = MediaRecord::new("3", "golden retriever swims", tags(&["#dog"]), 21.0);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::TooLong]));
        let r = MediaRecord::new("4", "fyp", tags(&["#shorts"]), 30.0);
        assert_eq!(
            filter_record(&r, &rules, &s),
            FilterOutcome::Reject(vec![RejectReason::TitleTooShort, RejectReason::NoHashtags, RejectReason::TooLong])
        );
        let r = MediaRecord::new("5", "golden retriever swims #shorts", tags(&["#dog", "#fyp"]), 20.0);
        let FilterOutcome::Keep(k) = filter_record(&r, &rules, &s) else { panic!() };
        assert_eq!(k.title, "golden retriever swims");
        assert_eq!(k.hashtags, tags(&["#dog"]));
        assert_eq!(k.texts[&TextView::TitleHashtags], "golden retriever swims #dog");
        let r = MediaRecord::new("", "a b", tags(&["#x"]), 1.0);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::Parse]));
        let r = MediaRecord::new("6", "a b", tags(&["#x"]), f64::NAN);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::Parse]));
    }

    #[test]
    fn audio_score_rule() {
        let s = StopWordList::shipped();
        let rules = FilterRules {
            audio_score: Some(AudioScoreRule {
                rating_weight: 1.0,
                downloads_weight: 0.5,
                threshold: 4.0,
            }),
            ..FilterRules::default()
        };
        let mut r = MediaRecord::new("a", "rain on a roof", tags(&["#rain"]), 8.0);
        assert!(filter_record(&r, &rules, &s).is_keep());
        r.rating = Some(2.0);
        r.downloads = Some(10);
        assert_eq!(filter_record(&r, &rules, &s), FilterOutcome::Reject(vec![RejectReason::LowAudioScore]));
        r.downloads = Some(1000);
        assert!(filter_record(&r, &rules, &s).is_keep());
    }

    #[test]
    fn reason_names() {
        assert_eq!(RejectReason::TitleTooShort.to_string(), "title_too_short");
        assert_eq!(RejectReason::Parse.to_string(), "parse");
    }

    proptest! {
        #[test]
        fn clean_is_idempotent(words in proptest::collection::vec("(#?)(YouTube|fyp|dog|Shorts|bmw|cat|run|[a-zA-Z]{1,6})", 0..8),
                               sep in "[ \t]{1,3}",
                               hs in proptest::collection::vec("#(shorts|dog|fyp|Cat|[a-z]{1,4})", 0..5)) {
            let s = StopWordList::shipped();
            let title = words.join(&sep);
            let once = clean_text(&title, &hs, &s);
            let twice = clean_text(&once.0, &once.1, &s);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn filter_is_order_independent(seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let s = StopWordList::shipped();
            let rules = FilterRules::default();
            let mut recs: Vec<MediaRecord> = (0..20)
                .map(|i| MediaRecord::new(
                    i.to_string(),
                    if i % 3 == 0 { "one" } else { "two words" },
                    if i % 4 == 0 { vec![] } else { vec!["#t".into()] },
                    (i * 2) as f64,
                ))
                .collect();
            let ids = |rs: &[MediaRecord]| -> BTreeSet<String> {
                rs.iter().filter(|r| filter_record(r, &rules, &s).is_keep()).map(|r| r.id.clone()).collect()
            };
            let before = ids(&recs);
            recs.shuffle(&mut crate::seed::rng_from(seed));
            prop_assert_eq!(before, ids(&recs));
        }
    }
}
