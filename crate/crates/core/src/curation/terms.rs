use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pos {
    Noun,
    Verb,
    Other,
}

pub trait PosTagger {
    fn tag(&self, word: &str) -> Pos;
}

/// Word-list tagger; unknown words are [`Pos::Other`].
#[derive(Debug, Clone, Default)]
pub struct LexiconTagger {
    lexicon: HashMap<String, Pos>,
}

impl LexiconTagger {
    pub fn new<'a>(nouns: impl IntoIterator<Item = &'a str>, verbs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut lexicon = HashMap::new();
        for n in nouns {
            lexicon.insert(n.to_lowercase(), Pos::Noun);
        }
        for v in verbs {
            lexicon.insert(v.to_lowercase(), Pos::Verb);
        }
        Self { lexicon }
    }
}

impl PosTagger for LexiconTagger {
    fn tag(&self, word: &str) -> Pos {
        self.lexicon.get(&word.to_lowercase()).copied().unwrap_or(Pos::Other)
    }
}

/// Balanced term selection.
///
/// Terms below `floor` are dropped. A term's keyword is its first noun or
/// verb; terms without one are dropped. Keywords are visited in order of
/// total frequency (descending, ties alphabetical), each contributing its
/// next most frequent term per round, and no keyword contributes more
/// than `⌈target / |keywords|⌉` terms.
pub fn build_search_terms(
    term_counts: &BTreeMap<String, u64>,
    tagger: &dyn PosTagger,
    target: usize,
    floor: u64,
) -> Result<Vec<String>> {
    if term_counts.is_empty() {
        return Err(Error::invalid("no search terms"));
    }
    let mut by_keyword: BTreeMap<String, Vec<(&str, u64)>> = BTreeMap::new();
    for (term, &count) in term_counts {
        if count < floor {
            continue;
        }
        let keyword = term
            .split_whitespace()
            .find(|w| matches!(tagger.tag(w), Pos::Noun | Pos::Verb));
        if let Some(k) = keyword {
            by_keyword.entry(k.to_lowercase()).or_default().push((term, count));
        }
    }
    if by_keyword.is_empty() || target == 0 {
        return Ok(Vec::new());
    }
    let mut keywords: Vec<(String, u64, Vec<(&str, u64)>)> = by_keyword
        .into_iter()
        .map(|(k, mut terms)| {
            terms.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            let total = terms.iter().map(|t| t.1).sum();
            (k, total, terms)
        })
        .collect();
    keywords.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let cap = target.div_ceil(keywords.len());
    let mut out = Vec::with_capacity(target);
    for round in 0..cap {
        for (_, _, terms) in &keywords {
            if out.len() == target {
                return Ok(out);
            }
            if let Some((t, _)) = terms.get(round) {
                out.push(t.to_string());
            }
        }
    }
    Ok(out)
}
