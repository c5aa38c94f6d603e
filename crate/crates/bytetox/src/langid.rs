//! Pluggable language identification and the code-switching filter.
//!
//! The filter's contract is defined entirely on [`LangSpanReport`], so any
//! detector can stand behind it. The default is a character-trigram profile
//! classifier over whitespace tokens, trained on small bundled seed texts.

use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

use crate::data::LabeledExample;

#[derive(Debug, Error)]
pub enum LangIdError {
    #[error("need at least 2 language profiles, got {0}")]
    TooFewProfiles(usize),
    #[error("profile {0} has no usable text")]
    EmptyProfile(String),
    #[error("threshold {0} outside (0, 0.5]")]
    BadThreshold(f64),
}

/// Per-language fraction of an example's content, in [0, 1]. Fractions sum to
/// at most 1; the remainder is unidentified.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LangSpanReport {
    pub fractions: BTreeMap<String, f64>,
}

impl LangSpanReport {
    pub fn from_pairs(pairs: &[(&str, f64)]) -> Self {
        LangSpanReport {
            fractions: pairs.iter().map(|(l, f)| (l.to_string(), *f)).collect(),
        }
    }

    pub fn fraction(&self, lang: &str) -> f64 {
        self.fractions.get(lang).copied().unwrap_or(0.0)
    }
}

/// Behavioral contract: text in, per-language content fractions out.
/// Implementations must be deterministic per input.
pub trait LanguageIdentifier: Send + Sync {
    fn identify(&self, text: &str) -> LangSpanReport;
}

/// Keep an example iff at least `min_langs` languages each cover at least
/// `threshold` of its content.
pub fn passes_codeswitch(report: &LangSpanReport, threshold: f64, min_langs: usize) -> bool {
    report.fractions.values().filter(|&&f| f >= threshold).count() >= min_langs
}

/// Filter a corpus down to its code-switching examples.
pub fn codeswitch_filter(
    examples: &[LabeledExample],
    langid: &dyn LanguageIdentifier,
    threshold: f64,
    min_langs: usize,
) -> Result<Vec<LabeledExample>, LangIdError> {
    if !(threshold > 0.0 && threshold <= 0.5) {
        return Err(LangIdError::BadThreshold(threshold));
    }
    Ok(examples
        .iter()
        .filter(|ex| passes_codeswitch(&langid.identify(&ex.text), threshold, min_langs))
        .cloned()
        .collect())
}

type Trigram = [char; 3];

struct Profile {
    lang: String,
    trigram_logp: HashMap<Trigram, f64>,
    trigram_floor: f64,
    word_logp: HashMap<String, f64>,
    word_floor: f64,
}

/// Token-level language classifier: a token seen in any seed text is judged
/// by word frequencies; unseen tokens fall back to character-trigram profile
/// similarity. Fractions are tokens-per-language over total tokens.
pub struct NgramLangId {
    profiles: Vec<Profile>,
}

fn trigrams(token: &str) -> Vec<Trigram> {
    let padded: Vec<char> = std::iter::once(' ')
        .chain(token.chars().flat_map(|c| c.to_lowercase()))
        .chain(std::iter::once(' '))
        .collect();
    padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

impl NgramLangId {
    /// Train from (language, seed text) pairs; needs at least two.
    pub fn train(seeds: &[(&str, &str)]) -> Result<Self, LangIdError> {
        if seeds.len() < 2 {
            return Err(LangIdError::TooFewProfiles(seeds.len()));
        }
        struct Raw {
            lang: String,
            tri: HashMap<Trigram, usize>,
            tri_total: usize,
            words: HashMap<String, usize>,
            word_total: usize,
        }
        let mut raw: Vec<Raw> = Vec::new();
        for (lang, text) in seeds {
            let mut tri: HashMap<Trigram, usize> = HashMap::new();
            let mut tri_total = 0usize;
            let mut words: HashMap<String, usize> = HashMap::new();
            let mut word_total = 0usize;
            for token in text.split_whitespace() {
                *words.entry(token.to_lowercase()).or_insert(0) += 1;
                word_total += 1;
                for t in trigrams(token) {
                    *tri.entry(t).or_insert(0) += 1;
                    tri_total += 1;
                }
            }
            if tri_total == 0 {
                return Err(LangIdError::EmptyProfile(lang.to_string()));
            }
            raw.push(Raw { lang: lang.to_string(), tri, tri_total, words, word_total });
        }
        // Add-one smoothing over union vocabularies so unseen items cost
        // every profile comparably.
        let mut tri_vocab: std::collections::HashSet<Trigram> = std::collections::HashSet::new();
        let mut word_vocab: std::collections::HashSet<&str> = std::collections::HashSet::new();
        for r in &raw {
            tri_vocab.extend(r.tri.keys().copied());
            word_vocab.extend(r.words.keys().map(|s| s.as_str()));
        }
        let tv = tri_vocab.len() + 1;
        let wv = word_vocab.len() + 1;
        let profiles = raw
            .into_iter()
            .map(|r| {
                let tri_denom = (r.tri_total + tv) as f64;
                let word_denom = (r.word_total + wv) as f64;
                Profile {
                    lang: r.lang,
                    trigram_logp: r
                        .tri
                        .into_iter()
                        .map(|(t, c)| (t, ((c + 1) as f64 / tri_denom).ln()))
                        .collect(),
                    trigram_floor: (1.0 / tri_denom).ln(),
                    word_logp: r
                        .words
                        .into_iter()
                        .map(|(w, c)| (w, ((c + 1) as f64 / word_denom).ln()))
                        .collect(),
                    word_floor: (1.0 / word_denom).ln(),
                }
            })
            .collect();
        Ok(NgramLangId { profiles })
    }

    /// The detector shipped with the crate (en/es/pt/fr/de seed paragraphs).
    pub fn builtin() -> Self {
        Self::train(&[
            ("en", include_str!("data/langid/en.txt")),
            ("es", include_str!("data/langid/es.txt")),
            ("pt", include_str!("data/langid/pt.txt")),
            ("fr", include_str!("data/langid/fr.txt")),
            ("de", include_str!("data/langid/de.txt")),
        ])
        .expect("bundled seed texts are valid")
    }

    pub fn languages(&self) -> Vec<&str> {
        self.profiles.iter().map(|(l, _, _)| l.as_str()).collect()
    }

    fn classify_token(&self, token: &str) -> Option<&str> {
        let grams = trigrams(token);
        if grams.is_empty() {
            return None;
        }
        let mut best: Option<(&str, f64)> = None;
        for (lang, probs, floor) in &self.profiles {
            let mut score = 0.0;
            for g in &grams {
                score += probs.get(g).copied().unwrap_or(*floor);
            }
            score /= grams.len() as f64;
            match best {
                Some((_, b)) if b >= score => {}
                _ => best = Some((lang, score)),
            }
        }
        best.map(|(l, _)| l)
    }
}

impl LanguageIdentifier for NgramLangId {
    fn identify(&self, text: &str) -> LangSpanReport {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return LangSpanReport::default();
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut assigned = 0usize;
        for token in &tokens {
            if let Some(lang) = self.classify_token(token) {
                *counts.entry(lang.to_string()).or_insert(0) += 1;
                assigned += 1;
            }
        }
        let _ = assigned;
        let total = tokens.len() as f64;
        LangSpanReport {
            fractions: counts.into_iter().map(|(l, c)| (l, c as f64 / total)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monolingual_report_is_excluded() {
        let r = LangSpanReport::from_pairs(&[("en", 1.0)]);
        assert!(!passes_codeswitch(&r, 0.25, 2));
    }

    #[test]
    fn even_split_is_included() {
        let r = LangSpanReport::from_pairs(&[("en", 0.5), ("pt", 0.5)]);
        assert!(passes_codeswitch(&r, 0.25, 2));
    }

    #[test]
    fn second_language_below_threshold_is_excluded() {
        let r = LangSpanReport::from_pairs(&[("en", 0.70), ("pt", 0.24), ("es", 0.06)]);
        assert!(!passes_codeswitch(&r, 0.25, 2));
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let r = LangSpanReport::from_pairs(&[("en", 0.75), ("pt", 0.25)]);
        assert!(passes_codeswitch(&r, 0.25, 2));
    }

    #[test]
    fn filter_is_monotone_in_threshold() {
        let reports = [
            LangSpanReport::from_pairs(&[("en", 0.6), ("pt", 0.4)]),
            LangSpanReport::from_pairs(&[("en", 0.8), ("pt", 0.2)]),
            LangSpanReport::from_pairs(&[("en", 0.5), ("pt", 0.3), ("es", 0.2)]),
            LangSpanReport::from_pairs(&[("en", 1.0)]),
        ];
        for r in &reports {
            for hi in [0.5, 0.4, 0.3, 0.25, 0.1] {
                for lo in [0.25, 0.2, 0.1, 0.05] {
                    if lo <= hi && passes_codeswitch(r, hi, 2) {
                        assert!(passes_codeswitch(r, lo, 2), "lowering threshold removed {r:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn untrained_identifier_rejected() {
        assert!(matches!(NgramLangId::train(&[]), Err(LangIdError::TooFewProfiles(0))));
        assert!(matches!(
            NgramLangId::train(&[("en", "hello world")]),
            Err(LangIdError::TooFewProfiles(1))
        ));
    }

    #[test]
    fn self_classification_dominates() {
        // Text drawn from the profiles' own training lines.
        let id = NgramLangId::builtin();
        let en = "the children played in the garden until the sun went down behind the old stone wall";
        let r = id.identify(en);
        assert!(r.fraction("en") >= 0.9, "en fraction {:?}", r.fractions);
        let es = "los niños jugaron en el jardín hasta que el sol se escondió detrás del viejo muro de piedra";
        let r = id.identify(es);
        assert!(r.fraction("es") >= 0.7, "es fraction {:?}", r.fractions);
    }

    #[test]
    fn interleaved_text_splits_roughly_evenly() {
        let id = NgramLangId::builtin();
        let en: Vec<&str> =
            "the weather was cold and the children walked through the quiet streets with their friends"
                .split_whitespace()
                .collect();
        let de: Vec<&str> =
            "das wetter war kalt und die kinder gingen durch die ruhigen straßen mit ihren freunden"
                .split_whitespace()
                .collect();
        let interleaved: Vec<&str> = en
            .iter()
            .zip(&de)
            .flat_map(|(a, b)| [*a, *b])
            .collect();
        let text = interleaved.join(" ");
        let r = id.identify(&text);
        assert!((r.fraction("en") - 0.5).abs() < 0.15, "en {:?}", r.fractions);
        assert!((r.fraction("de") - 0.5).abs() < 0.15, "de {:?}", r.fractions);
    }

    #[test]
    fn empty_text_gives_empty_report() {
        let id = NgramLangId::builtin();
        assert!(id.identify("").fractions.is_empty());
        assert!(id.identify("   \t\n").fractions.is_empty());
    }

    #[test]
    fn fractions_sum_to_at_most_one() {
        let id = NgramLangId::builtin();
        for text in ["mixed text com palavras varias languages zusammen", "hello", "a b c"] {
            let r = id.identify(text);
            let sum: f64 = r.fractions.values().sum();
            assert!(sum <= 1.0 + 1e-12, "{text}: {sum}");
        }
    }

    #[test]
    fn identification_is_deterministic() {
        let id = NgramLangId::builtin();
        let text = "the quick brown fox y el perro rápido";
        assert_eq!(id.identify(text), id.identify(text));
    }

    #[test]
    fn filter_keeps_code_switching_examples() {
        let id = NgramLangId::builtin();
        let mixed = "the shops in this town close early la gente suele decir que leer cada día es la mejor manera which surprises many visitors";
        let english = "the committee will meet again next week to discuss the plan for the new school building";
        let exs = vec![
            LabeledExample { text: mixed.into(), ..Default::default() },
            LabeledExample { text: english.into(), ..Default::default() },
        ];
        let kept = codeswitch_filter(&exs, &id, 0.25, 2).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].text, mixed);
    }

    #[test]
    fn bad_threshold_rejected() {
        let id = NgramLangId::builtin();
        assert!(codeswitch_filter(&[], &id, 0.0, 2).is_err());
        assert!(codeswitch_filter(&[], &id, 0.75, 2).is_err());
    }
}
