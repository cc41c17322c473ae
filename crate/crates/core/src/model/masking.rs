//! Word and clinical-entity masking for training-time text augmentation.

use std::path::Path;

use rand::Rng as _;

use super::params::MASK;
use crate::corpus::tokenize;
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Replaces each token by the mask token independently with probability `p`.
pub fn mask_words(tokens: &[String], p: f64, seed: u64) -> Result<Vec<String>> {
    let mut rng = seed::rng(seed);
    mask_words_with(tokens, p, &mut rng)
}

pub fn mask_words_with(tokens: &[String], p: f64, rng: &mut Rng) -> Result<Vec<String>> {
    check_prob(p)?;
    Ok(tokens
        .iter()
        .map(|t| if rng.gen_bool(p) { MASK.to_string() } else { t.clone() })
        .collect())
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(format!("mask probability must lie in [0, 1], got {p}")))
    }
}

/// Multi-word entity spans, stored tokenized.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    spans: Vec<Vec<String>>,
}

/// The entity list shipped with the crate.
pub const BUILTIN_LEXICON: &str = include_str!("../../data/clinical_lexicon.txt");

impl Lexicon {
    pub fn new(spans: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut spans: Vec<Vec<String>> = spans
            .into_iter()
            .map(|s| tokenize(s.as_ref()))
            .filter(|t| !t.is_empty())
            .collect();
        // longest first so the first hit at a position is the longest match
        spans.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        spans.dedup();
        Self { spans }
    }

    /// One span per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_LEXICON)
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Greedy longest match, left to right: `(start, len)` of every match.
    pub fn matches(&self, tokens: &[String]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < tokens.len() {
            let hit = self
                .spans
                .iter()
                .find(|span| tokens.len() - i >= span.len() && tokens[i..i + span.len()] == span[..]);
            match hit {
                Some(span) => {
                    out.push((i, span.len()));
                    i += span.len();
                }
                None => i += 1,
            }
        }
        out
    }
}

/// Masks every token of each lexicon match jointly, with probability `p` per match.
pub fn mask_entities(tokens: &[String], lexicon: &Lexicon, p: f64, seed: u64) -> Result<Vec<String>> {
    let mut rng = seed::rng(seed);
    mask_entities_with(tokens, lexicon, p, &mut rng)
}

pub fn mask_entities_with(tokens: &[String], lexicon: &Lexicon, p: f64, rng: &mut Rng) -> Result<Vec<String>> {
    check_prob(p)?;
    let mut out = tokens.to_vec();
    for (start, len) in lexicon.matches(tokens) {
        if rng.gen_bool(p) {
            out[start..start + len].iter_mut().for_each(|t| *t = MASK.to_string());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn word_mask_extremes() {
        let t = toks("there is no pleural effusion .");
        assert_eq!(mask_words(&t, 0.0, 1).unwrap(), t);
        assert!(mask_words(&t, 1.0, 1).unwrap().iter().all(|w| w == MASK));
        assert!(mask_words(&t, 1.5, 1).is_err());
    }

    #[test]
    fn word_mask_rate() {
        let t = vec!["x".to_string(); 100_000];
        let masked = mask_words(&t, 0.3, 2024).unwrap();
        let rate = masked.iter().filter(|w| *w == MASK).count() as f64 / t.len() as f64;
        assert!((rate - 0.3).abs() <= 0.01, "rate {rate}");
        assert_eq!(masked, mask_words(&t, 0.3, 2024).unwrap());
    }

    #[test]
    fn entity_spans_mask_jointly() {
        let lex = Lexicon::new(["pleural effusion"]);
        let out = mask_entities(&toks("small pleural effusion ."), &lex, 1.0, 0).unwrap();
        assert_eq!(out, vec!["small", MASK, MASK, "."]);
        let t = toks("no change .");
        assert_eq!(mask_entities(&t, &lex, 1.0, 0).unwrap(), t);
    }

    #[test]
    fn longest_match_wins() {
        let lex = Lexicon::new(["pleural effusion", "left pleural effusion", "left"]);
        let t = toks("left pleural effusion");
        assert_eq!(lex.matches(&t), vec![(0, 3)]);
    }

    #[test]
    fn builtin_lexicon_parses() {
        let lex = Lexicon::builtin();
        assert!(!lex.is_empty());
        assert!(!lex.matches(&toks("there is opacity in the left lung .")).is_empty());
    }
}
