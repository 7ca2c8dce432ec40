//! Byte-level BPE with end-of-word markers and start/end sentinels.
//!
//! Vocabulary layout: the 256 byte symbols, the same symbols with `</w>`
//! appended, one entry per merge, then `<|startoftext|>` and
//! `<|endoftext|>`.

use std::collections::HashMap;

use regex::Regex;

use crate::error::{Error, Result};

const FIXTURE_MERGES: &str = include_str!("../../assets/bpe_fixture_merges.txt");
const SOT: &str = "<|startoftext|>";
const EOT: &str = "<|endoftext|>";
pub const PAD_ID: u32 = 0;

#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: Vec<char>,
    pattern: Regex,
    sot: u32,
    eot: u32,
}

/// Byte-to-symbol table plus the symbols in vocabulary order (printable
/// bytes first, then the remapped rest).
fn bytes_to_unicode() -> (Vec<char>, Vec<char>) {
    let mut printable: Vec<u32> = (u32::from('!')..=u32::from('~'))
        .chain(u32::from('¡')..=u32::from('¬'))
        .chain(u32::from('®')..=u32::from('ÿ'))
        .collect();
    let mut codes = printable.clone();
    let mut extra = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            printable.push(b);
            codes.push(256 + extra);
            extra += 1;
        }
    }
    let mut table = vec!['\0'; 256];
    let mut order = Vec::with_capacity(256);
    for (b, c) in printable.into_iter().zip(codes) {
        let ch = char::from_u32(c).expect("valid code point");
        table[b as usize] = ch;
        order.push(ch);
    }
    (table, order)
}

impl BpeTokenizer {
    /// The small merge table shipped for tests and fixtures.
    pub fn fixture() -> Self {
        Self::from_merges(FIXTURE_MERGES).expect("shipped merges parse")
    }

    /// Parses a merges file: an optional `#` header line, then one
    /// space-separated pair per line.
    pub fn from_merges(text: &str) -> Result<Self> {
        let mut merges = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || (n == 0 && line.starts_with('#')) {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    merges.push((a.to_string(), b.to_string()))
                }
                _ => return Err(Error::invalid(format!("merges line {}: {line:?}", n + 1))),
            }
        }
        let (byte_encoder, order) = bytes_to_unicode();
        let mut vocab: Vec<String> = order.iter().map(|c| c.to_string()).collect();
        vocab.extend(order.iter().map(|c| format!("{c}</w>")));
        vocab.extend(merges.iter().map(|(a, b)| format!("{a}{b}")));
        vocab.push(SOT.into());
        vocab.push(EOT.into());
        let mut encoder = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.into_iter().enumerate() {
            encoder.entry(tok).or_insert(i as u32);
        }
        let sot = encoder[SOT];
        let eot = encoder[EOT];
        let ranks = merges.into_iter().enumerate().map(|(i, m)| (m, i)).collect();
        let pattern = Regex::new(
            r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+",
        )
        .expect("valid pattern");
        Ok(Self {
            encoder,
            ranks,
            byte_encoder,
            pattern,
            sot,
            eot,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    pub fn sot(&self) -> u32 {
        self.sot
    }

    pub fn eot(&self) -> u32 {
        self.eot
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let chars: Vec<char> = token.chars().collect();
        let mut word: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        while word.len() > 1 {
            let best = word
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|r| (*r, p)))
                .min_by_key(|(r, _)| *r);
            let Some((_, pair)) = best else { break };
            let (first, second) = (pair[0].clone(), pair[1].clone());
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == first && word[i + 1] == second {
                    merged.push(format!("{first}{second}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// BPE ids without sentinels.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut ids = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                ids.push(self.encoder[&piece]);
            }
        }
        ids
    }

    /// `[SOT, ids.., EOT, 0, ..]` of length exactly `max_tokens`; long
    /// inputs are cut so that EOT lands at `max_tokens - 1`.
    pub fn tokenize(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        assert!(max_tokens >= 2, "context must hold both sentinels");
        let mut ids = self.encode(text);
        ids.truncate(max_tokens - 2);
        let mut out = Vec::with_capacity(max_tokens);
        out.push(self.sot);
        out.extend(ids);
        out.push(self.eot);
        out.resize(max_tokens, PAD_ID);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_string_is_sentinels_then_padding() {
        let tok = BpeTokenizer::fixture();
        let ids = tok.tokenize("", 77);
        assert_eq!(ids.len(), 77);
        assert_eq!(&ids[..2], &[tok.sot(), tok.eot()]);
        assert!(ids[2..].iter().all(|&i| i == PAD_ID));
    }

    #[test]
    fn golden_ids_match_reference_encoder() {
        // Ids computed by an independent reference implementation of the
        // same byte-level BPE over the shipped merges.
        let tok = BpeTokenizer::fixture();
        assert_eq!(tok.vocab_size(), 694);
        assert_eq!(&tok.tokenize("a dog", 77)[..4], &[692, 320, 636, 693]);
        assert_eq!(
            &tok.tokenize("A photo of a Zebra!", 77)[..12],
            &[692, 320, 516, 512, 320, 89, 68, 65, 81, 320, 256, 693]
        );
        assert_eq!(
            &tok.tokenize("naïve café 42", 77)[..15],
            &[692, 77, 64, 127, 107, 85, 324, 66, 64, 69, 127, 358, 275, 273, 693]
        );
    }

    #[test]
    fn long_input_truncates_to_eot() {
        let tok = BpeTokenizer::fixture();
        let text = "zebra ".repeat(100);
        let ids = tok.tokenize(&text, 77);
        assert_eq!(ids.len(), 77);
        assert_eq!(ids[76], tok.eot());
        assert_eq!(ids.iter().filter(|&&i| i == tok.eot()).count(), 1);
    }

    #[test]
    fn bad_merges_are_rejected() {
        assert!(BpeTokenizer::from_merges("#v\na b c\n").is_err());
    }

    proptest! {
        #[test]
        fn sentinel_contract(s in "\\PC{0,120}", max in 2usize..40) {
            let tok = BpeTokenizer::fixture();
            let ids = tok.tokenize(&s, max);
            prop_assert_eq!(ids.len(), max);
            prop_assert_eq!(ids[0], tok.sot());
            let eots: Vec<usize> = ids.iter().enumerate().filter(|(_, &i)| i == tok.eot()).map(|(p, _)| p).collect();
            prop_assert_eq!(eots.len(), 1);
            prop_assert!(eots[0] <= max - 1);
        }
    }
}
