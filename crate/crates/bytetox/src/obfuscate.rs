//! Human-readable text obfuscation: each ASCII letter is independently
//! replaced, with some probability, by a leetspeak/homoglyph substitute drawn
//! from a per-letter dictionary. Vowels may also be starred out or deleted.
//! Everything else (digits, punctuation, whitespace, multibyte characters)
//! passes through untouched.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::LabeledExample;

#[derive(Debug, Error)]
pub enum ObfuscationError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {0}: expected a single a-z letter before the first tab")]
    BadLetter(usize),
    #[error("letter '{0}' has no substitutes")]
    NoSubstitutes(char),
    #[error("letter '{0}' lists itself as a substitute")]
    SelfSubstitute(char),
    #[error("dictionary is missing letters: {0:?}")]
    MissingLetters(Vec<char>),
    #[error("obfuscation rate {0} outside [0, 1]")]
    BadRate(f64),
}

/// Per-letter substitute lists for a-z. The empty string is a valid
/// substitute (deletion); in the TSV format an empty field encodes it.
#[derive(Debug, Clone)]
pub struct ObfuscationDictionary {
    subs: BTreeMap<char, Vec<String>>,
}

const BUILTIN_TSV: &str = include_str!("data/obfuscation_map.tsv");

impl ObfuscationDictionary {
    /// The dictionary shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TSV).expect("bundled dictionary is valid")
    }

    /// Parse the TSV format: one line per letter, tab-separated substitutes.
    pub fn parse(text: &str) -> Result<Self, ObfuscationError> {
        let mut subs: BTreeMap<char, Vec<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let head = fields.next().unwrap_or("");
            let mut chars = head.chars();
            let letter = match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_lowercase() => c,
                _ => return Err(ObfuscationError::BadLetter(i + 1)),
            };
            let entries: Vec<String> = fields.map(|f| f.to_string()).collect();
            if entries.is_empty() {
                return Err(ObfuscationError::NoSubstitutes(letter));
            }
            if entries.iter().any(|s| s.len() == 1 && s.chars().next() == Some(letter)) {
                return Err(ObfuscationError::SelfSubstitute(letter));
            }
            subs.insert(letter, entries);
        }
        let missing: Vec<char> = ('a'..='z').filter(|c| !subs.contains_key(c)).collect();
        if !missing.is_empty() {
            return Err(ObfuscationError::MissingLetters(missing));
        }
        Ok(ObfuscationDictionary { subs })
    }

    pub fn from_file(path: &Path) -> Result<Self, ObfuscationError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn substitutes(&self, letter: char) -> Option<&[String]> {
        self.subs.get(&letter.to_ascii_lowercase()).map(|v| v.as_slice())
    }
}

/// Replace each ASCII letter independently with probability `rate` by a
/// uniformly chosen substitute (case-folded lookup, case discarded).
pub fn obfuscate<R: Rng>(
    text: &str,
    rate: f64,
    dict: &ObfuscationDictionary,
    rng: &mut R,
) -> Result<String, ObfuscationError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(ObfuscationError::BadRate(rate));
    }
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_ascii_alphabetic() && rng.random::<f64>() < rate {
            let subs = dict
                .substitutes(c)
                .expect("validated dictionary covers a-z");
            out.push_str(&subs[rng.random_range(0..subs.len())]);
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

/// One obfuscated copy of the corpus per rate. Seeds derive from
/// (base_seed, rate index, example index), so every copy is reproducible and
/// the rate-0 copy is byte-identical to the input.
pub fn sweep_obfuscation(
    corpus: &[LabeledExample],
    rates: &[f64],
    dict: &ObfuscationDictionary,
    base_seed: u64,
) -> Result<Vec<Vec<LabeledExample>>, ObfuscationError> {
    rates
        .iter()
        .enumerate()
        .map(|(ri, &rate)| {
            corpus
                .iter()
                .enumerate()
                .map(|(ei, ex)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
                    rng.set_stream(((ri as u64) << 32) | ei as u64);
                    let mut out = ex.clone();
                    out.text = obfuscate(&ex.text, rate, dict, &mut rng)?;
                    Ok(out)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_dictionary_is_complete_and_safe() {
        let dict = ObfuscationDictionary::builtin();
        for letter in 'a'..='z' {
            let subs = dict.substitutes(letter).unwrap();
            assert!(!subs.is_empty(), "{letter} has no substitutes");
            for s in subs {
                assert_ne!(s.as_str(), letter.to_string(), "{letter} maps to itself");
            }
        }
        // Vowels carry the star and the deletion entry.
        for vowel in ['a', 'e', 'i', 'o', 'u'] {
            let subs = dict.substitutes(vowel).unwrap();
            assert!(subs.iter().any(|s| s == "*"), "{vowel} lacks '*'");
            assert!(subs.iter().any(|s| s.is_empty()), "{vowel} lacks the empty substitute");
        }
    }

    #[test]
    fn a_substitutes_match_reference_list() {
        let dict = ObfuscationDictionary::builtin();
        let subs = dict.substitutes('a').unwrap();
        for expected in ["4", "@", "/\\"] {
            assert!(subs.iter().any(|s| s == expected), "missing {expected}");
        }
    }

    #[test]
    fn rate_zero_is_identity() {
        let dict = ObfuscationDictionary::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let text = "Hello, World! 123 caf\u{e9} \u{1f600}";
        assert_eq!(obfuscate(text, 0.0, &dict, &mut rng).unwrap(), text);
    }

    #[test]
    fn rate_one_forces_substitution() {
        let dict = ObfuscationDictionary::parse(
            &("a\t4\n".to_string()
                + &('b'..='z').map(|c| format!("{c}\t0\n")).collect::<String>()),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(obfuscate("aaa", 1.0, &dict, &mut rng).unwrap(), "444");
    }

    /// Every letter maps to a single `#`, so substitutions are countable
    /// exactly in the output.
    fn marker_dictionary() -> ObfuscationDictionary {
        let tsv: String = ('a'..='z').map(|c| format!("{c}\t#\n")).collect();
        ObfuscationDictionary::parse(&tsv).unwrap()
    }

    #[test]
    fn non_alphabetical_characters_survive_exactly() {
        let dict = marker_dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let text = "a1b2-c3_d4 \u{e9}\u{4e2d}\u{6587}!? \u{1f600}\n\t";
        let out = obfuscate(text, 1.0, &dict, &mut rng).unwrap();
        let keep: String = text.chars().filter(|c| !c.is_ascii_alphabetic()).collect();
        let kept: String = out.chars().filter(|&c| c != '#').collect();
        assert_eq!(keep, kept);
    }

    #[test]
    fn same_seed_same_output() {
        let dict = ObfuscationDictionary::builtin();
        let text = "reproducible adversarial corpora need stable seeds";
        let one = obfuscate(text, 0.4, &dict, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let two = obfuscate(text, 0.4, &dict, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn measured_rate_tracks_configured_rate() {
        let dict = marker_dictionary();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let text: String = "the quick brown fox jumps over lazy dogs ".repeat(4000);
        let n_alpha = text.chars().filter(|c| c.is_ascii_alphabetic()).count();
        assert!(n_alpha > 100_000);
        for &rate in &[0.1, 0.3, 0.5] {
            let out = obfuscate(&text, rate, &dict, &mut rng).unwrap();
            let substituted = out.chars().filter(|&c| c == '#').count();
            let measured = substituted as f64 / n_alpha as f64;
            assert!((measured - rate).abs() < 0.01, "rate {rate}: measured {measured}");
        }
    }

    #[test]
    fn sweep_rate_zero_copy_is_byte_identical() {
        let corpus: Vec<LabeledExample> = (0..20)
            .map(|i| LabeledExample { text: format!("example number {i}"), ..Default::default() })
            .collect();
        let dict = ObfuscationDictionary::builtin();
        let rates = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        let swept = sweep_obfuscation(&corpus, &rates, &dict, 99).unwrap();
        assert_eq!(swept.len(), 6);
        assert_eq!(swept[0], corpus);
        // And the whole sweep reproduces from the same base seed.
        let again = sweep_obfuscation(&corpus, &rates, &dict, 99).unwrap();
        assert_eq!(swept, again);
    }

    #[test]
    fn sweep_of_empty_corpus_is_empty_corpora() {
        let dict = ObfuscationDictionary::builtin();
        let swept =
            sweep_obfuscation(&[], &[0.0, 0.1, 0.2, 0.3, 0.4, 0.5], &dict, 1).unwrap();
        assert_eq!(swept.len(), 6);
        assert!(swept.iter().all(|c| c.is_empty()));
    }

    proptest::proptest! {
        #[test]
        fn substitution_count_is_within_binomial_bounds(seed in 0u64..50, rate in 0.05f64..0.95) {
            let dict = marker_dictionary();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20_000usize;
            let text: String = std::iter::repeat('q').take(n).collect();
            let out = obfuscate(&text, rate, &dict, &mut rng).unwrap();
            let k = out.chars().filter(|&c| c == '#').count() as f64;
            let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
            proptest::prop_assert!((k - n as f64 * rate).abs() < 4.0 * sigma.max(1.0));
        }
    }
}
