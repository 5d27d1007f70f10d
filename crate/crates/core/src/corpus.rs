//! Byte corpora: files on disk and deterministic synthetic sources.

use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::entropy::MarkovLanguageSpec;

/// Reads a corpus file as raw bytes.
pub fn load_corpus(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Config {
        key: "data.corpus".into(),
        msg: format!("cannot read {}: {e}", path.display()),
    })
}

/// Splits off the last `fraction` of `tokens` as a held-out region.
pub fn split_holdout(tokens: &[u8], fraction: f64) -> Result<(Vec<u8>, Vec<u8>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::invalid(format!("holdout fraction {fraction} must lie in [0, 1)")));
    }
    let cut = tokens.len() - (tokens.len() as f64 * fraction).round() as usize;
    Ok((tokens[..cut].to_vec(), tokens[cut..].to_vec()))
}

pub fn uniform_bytes(len: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen()).collect()
}

pub fn periodic(pattern: &[u8], len: usize) -> Vec<u8> {
    pattern.iter().copied().cycle().take(len).collect()
}

/// Samples `len` tokens from `spec`, mapping state `i` to `alphabet[i]`.
pub fn markov_sample(spec: &MarkovLanguageSpec, alphabet: &[u8], len: usize, seed: u64) -> Result<Vec<u8>> {
    spec.validate()?;
    if alphabet.len() != spec.states {
        return Err(Error::invalid(format!(
            "alphabet has {} symbols for {} states",
            alphabet.len(),
            spec.states
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<WeightedIndex<f64>> = (0..spec.states)
        .map(|i| WeightedIndex::new(spec.row(i)).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    let init = WeightedIndex::new(&spec.initial).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(len);
    let mut s = init.sample(&mut rng);
    for _ in 0..len {
        out.push(alphabet[s]);
        s = rows[s].sample(&mut rng);
    }
    Ok(out)
}

/// Parameters of the topic-text generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopicTextConfig {
    pub vocab: usize,
    pub topics: usize,
    pub words_per_topic: usize,
    /// Probability that a word comes from the document's topic list.
    pub topic_rate: f64,
    pub doc_min: usize,
    pub doc_max: usize,
}

impl Default for TopicTextConfig {
    fn default() -> Self {
        Self {
            vocab: 3000,
            topics: 24,
            words_per_topic: 120,
            topic_rate: 0.5,
            doc_min: 1500,
            doc_max: 6000,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "ch", "sh", "th",
    "st", "tr", "br", "pl", "gr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "io"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "nd", "st", "m"];

fn make_word<R: Rng>(rng: &mut R) -> String {
    let syllables = [1, 2, 2, 3, 3, 4][rng.gen_range(0..6)];
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    w
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / r as f64).collect()
}

/// English-like text made of documents that each draw a share of their words
/// from one topic list, so earlier context predicts later words.
pub fn topic_text(len: usize, seed: u64, cfg: &TopicTextConfig) -> Result<Vec<u8>> {
    if cfg.vocab < cfg.words_per_topic || cfg.topics == 0 || cfg.doc_min == 0 || cfg.doc_min > cfg.doc_max {
        return Err(Error::invalid("inconsistent topic-text configuration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lexicon: Vec<String> = Vec::with_capacity(cfg.vocab);
    while lexicon.len() < cfg.vocab {
        let w = make_word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let general = WeightedIndex::new(zipf_weights(cfg.vocab)).map_err(|e| Error::invalid(e.to_string()))?;
    let topics: Vec<Vec<usize>> = (0..cfg.topics)
        .map(|_| rand::seq::index::sample(&mut rng, cfg.vocab, cfg.words_per_topic).into_vec())
        .collect();
    let topical = WeightedIndex::new(zipf_weights(cfg.words_per_topic)).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = String::with_capacity(len + cfg.doc_max);
    while out.len() < len {
        let topic = &topics[rng.gen_range(0..cfg.topics)];
        let target = rng.gen_range(cfg.doc_min..=cfg.doc_max);
        let start = out.len();
        let title = &lexicon[topic[0]];
        out.push_str("= ");
        out.push_str(&title[..1].to_uppercase());
        out.push_str(&title[1..]);
        out.push_str(" =\n");
        let mut in_paragraph = 0;
        while out.len() - start < target {
            let words = rng.gen_range(5..16);
            for i in 0..words {
                let w = if rng.gen_bool(cfg.topic_rate) {
                    &lexicon[topic[topical.sample(&mut rng)]]
                } else {
                    &lexicon[general.sample(&mut rng)]
                };
                if i == 0 {
                    out.push_str(&w[..1].to_uppercase());
                    out.push_str(&w[1..]);
                } else {
                    out.push(' ');
                    out.push_str(w);
                    if i + 1 < words && rng.gen_bool(0.08) {
                        out.push(',');
                    }
                }
            }
            out.push('.');
            in_paragraph += 1;
            if in_paragraph >= rng.gen_range(4..9) {
                out.push('\n');
                in_paragraph = 0;
            } else {
                out.push(' ');
            }
        }
        out.push_str("\n\n");
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(len);
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topic_text_is_deterministic_ascii() {
        let cfg = TopicTextConfig::default();
        let a = topic_text(20_000, 1, &cfg).unwrap();
        assert_eq!(a, topic_text(20_000, 1, &cfg).unwrap());
        assert_ne!(a, topic_text(20_000, 2, &cfg).unwrap());
        assert_eq!(a.len(), 20_000);
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn markov_sample_frequencies() {
        let spec = MarkovLanguageSpec::symmetric_two_state(0.9).unwrap();
        let s = markov_sample(&spec, b"ab", 100_000, 3).unwrap();
        let stays = s.windows(2).filter(|w| w[0] == w[1]).count() as f64 / (s.len() - 1) as f64;
        assert!((stays - 0.9).abs() < 0.01);
        assert!(markov_sample(&spec, b"abc", 10, 3).is_err());
    }

    #[test]
    fn holdout_split() {
        let (a, b) = split_holdout(&[0u8; 100], 0.1).unwrap();
        assert_eq!((a.len(), b.len()), (90, 10));
        assert!(split_holdout(&[0u8; 10], 1.0).is_err());
    }
}
