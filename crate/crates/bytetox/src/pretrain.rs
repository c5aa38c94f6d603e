//! Span-corruption pretraining data: non-overlapping byte spans are replaced
//! by sentinel ids in the input, and the target interleaves each sentinel with
//! the bytes it removed. Also the two-corpus mixture sampler feeding it.

use std::fs;
use std::io;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytes::{encode_text, ByteSequence, EOS_ID, SENTINEL_BASE};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("sequence has {0} content bytes; need at least 1 to corrupt")]
    TooShort(usize),
    #[error("invalid span corruption config: {0}")]
    BadConfig(String),
    #[error("corpus {0} is empty")]
    EmptyCorpus(String),
    #[error("corpus {name}: {lines} lines but {tags} language tags")]
    TagMismatch { name: String, lines: usize, tags: usize },
    #[error("mixture weights must be positive")]
    BadWeights,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SpanCorruptionConfig {
    /// Fraction of content bytes to corrupt.
    pub corruption_rate: f64,
    /// Mean corrupted-span length in bytes; lengths jitter uniformly in
    /// [1, 2*mean - 1].
    pub mean_span_len: usize,
    /// Sentinel ids available (ids SENTINEL_BASE .. SENTINEL_BASE + max).
    pub max_sentinels: usize,
}

impl Default for SpanCorruptionConfig {
    fn default() -> Self {
        SpanCorruptionConfig { corruption_rate: 0.15, mean_span_len: 20, max_sentinels: 16 }
    }
}

impl SpanCorruptionConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        if !(self.corruption_rate > 0.0 && self.corruption_rate < 1.0) {
            return Err(PretrainError::BadConfig(format!(
                "corruption_rate must be in (0, 1), got {}",
                self.corruption_rate
            )));
        }
        if self.mean_span_len < 1 {
            return Err(PretrainError::BadConfig("mean_span_len must be >= 1".into()));
        }
        if self.max_sentinels < 1 {
            return Err(PretrainError::BadConfig("need at least one sentinel id".into()));
        }
        Ok(())
    }

    /// Sentinel id for the k-th corrupted span (in positional order).
    pub fn sentinel_id(&self, k: usize) -> u16 {
        SENTINEL_BASE + k as u16
    }
}

/// A corrupted example: denoising input, reconstruction target, and the spans
/// that were removed (byte offsets into the content).
#[derive(Debug, Clone)]
pub struct CorruptedExample {
    pub input: ByteSequence,
    pub target: ByteSequence,
    pub spans: Vec<(usize, usize)>,
}

/// Corrupt non-overlapping spans covering roughly `corruption_rate` of the
/// content bytes. Span count = round(rate * L / mean), at least 1; special
/// tokens are never touched. Inputs shorter than one mean span fall back to a
/// single corrupted byte.
pub fn corrupt_spans<R: Rng>(
    seq: &ByteSequence,
    cfg: &SpanCorruptionConfig,
    rng: &mut R,
) -> Result<CorruptedExample, PretrainError> {
    cfg.validate()?;
    let content: Vec<u8> = seq.content_bytes();
    let n = content.len();
    if n == 0 {
        return Err(PretrainError::TooShort(0));
    }

    let ideal = (cfg.corruption_rate * n as f64 / cfg.mean_span_len as f64).round() as usize;
    let span_count = ideal.clamp(1, cfg.max_sentinels.min(n));

    // Jittered lengths with the configured mean, clamped so the spans can fit.
    let mut lengths: Vec<usize> = (0..span_count)
        .map(|_| rng.random_range(1..=2 * cfg.mean_span_len - 1).min(n))
        .collect();
    // Keep at most ~half the sequence corrupted so placement always succeeds.
    let budget = (n / 2).max(1);
    while lengths.iter().sum::<usize>() > budget && lengths.len() > 1 {
        lengths.pop();
    }
    if let [only] = lengths.as_mut_slice() {
        *only = (*only).min(budget);
    }

    // Non-overlapping placement by rejection sampling of start offsets.
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(lengths.len());
    for &len in &lengths {
        let mut len = len;
        'place: loop {
            for _ in 0..1000 {
                let start = rng.random_range(0..=n - len);
                if spans.iter().all(|&(s, l)| start + len <= s || s + l <= start) {
                    spans.push((start, len));
                    break 'place;
                }
            }
            // Pathologically crowded; shrink and retry.
            if len == 1 {
                break 'place;
            }
            len /= 2;
        }
    }
    spans.sort_unstable();

    // Input: content with each span replaced by one sentinel. Target:
    // sentinel, removed bytes, sentinel, ... EOS. Both stay unpadded; the
    // model masks by validity, not by a fixed length.
    let mut input_ids: Vec<u16> = Vec::with_capacity(n);
    let mut target_ids: Vec<u16> = Vec::with_capacity(n / 2 + spans.len() + 1);
    let mut cursor = 0usize;
    for (k, &(start, len)) in spans.iter().enumerate() {
        input_ids.extend(content[cursor..start].iter().map(|&b| b as u16));
        input_ids.push(cfg.sentinel_id(k));
        target_ids.push(cfg.sentinel_id(k));
        target_ids.extend(content[start..start + len].iter().map(|&b| b as u16));
        cursor = start + len;
    }
    input_ids.extend(content[cursor..].iter().map(|&b| b as u16));
    input_ids.push(EOS_ID);
    target_ids.push(EOS_ID);

    Ok(CorruptedExample {
        input: ByteSequence::from_ids(input_ids, seq.original_length),
        target: ByteSequence::from_ids(target_ids, seq.original_length),
        spans,
    })
}

/// Invert a corruption: substitute each target span back at its sentinel.
/// Used as the reconstruction oracle in tests and checks.
pub fn reconstruct(example: &CorruptedExample) -> Vec<u8> {
    let mut spans: Vec<Vec<u8>> = Vec::new();
    let mut current: Option<Vec<u8>> = None;
    for &id in &example.target.ids {
        if id >= SENTINEL_BASE {
            if let Some(done) = current.take() {
                spans.push(done);
            }
            current = Some(Vec::new());
        } else if id == EOS_ID {
            break;
        } else if let Some(cur) = current.as_mut() {
            cur.push(id as u8);
        }
    }
    if let Some(done) = current.take() {
        spans.push(done);
    }

    let mut out = Vec::new();
    let mut k = 0usize;
    for &id in &example.input.ids {
        if id >= SENTINEL_BASE {
            out.extend_from_slice(&spans[k]);
            k += 1;
        } else if id < 256 {
            out.push(id as u8);
        }
    }
    out
}

/// One named corpus: a document per line, optionally tagged with a language
/// per line (sidecar file).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub name: String,
    pub lines: Vec<String>,
    pub langs: Option<Vec<String>>,
    /// Grouped line indices per language, present when balanced.
    lang_groups: Vec<Vec<usize>>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, lines: Vec<String>) -> Result<Self, PretrainError> {
        let name = name.into();
        if lines.is_empty() {
            return Err(PretrainError::EmptyCorpus(name));
        }
        Ok(Corpus { name, lines, langs: None, lang_groups: Vec::new() })
    }

    pub fn with_langs(mut self, langs: Vec<String>) -> Result<Self, PretrainError> {
        if langs.len() != self.lines.len() {
            return Err(PretrainError::TagMismatch {
                name: self.name.clone(),
                lines: self.lines.len(),
                tags: langs.len(),
            });
        }
        let mut order: Vec<String> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, lang) in langs.iter().enumerate() {
            match order.iter().position(|l| l == lang) {
                Some(g) => groups[g].push(i),
                None => {
                    order.push(lang.clone());
                    groups.push(vec![i]);
                }
            }
        }
        self.langs = Some(langs);
        self.lang_groups = groups;
        Ok(self)
    }

    /// Load a newline-delimited text file, with an optional sidecar holding
    /// one language tag per line.
    pub fn from_files(
        name: impl Into<String>,
        path: &Path,
        langs_path: Option<&Path>,
    ) -> Result<Self, PretrainError> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let corpus = Corpus::new(name, lines)?;
        match langs_path {
            Some(lp) => {
                let tags = fs::read_to_string(lp)?;
                corpus.with_langs(tags.lines().map(|l| l.trim().to_string()).collect())
            }
            None => Ok(corpus),
        }
    }
}

/// Weighted mixture over corpora. Within a language-balanced corpus the
/// language is drawn uniformly first, then a line within it.
#[derive(Debug, Clone)]
pub struct CorpusMixture {
    entries: Vec<(Corpus, f64, bool)>,
    cumulative: Vec<f64>,
}

impl CorpusMixture {
    pub fn new(entries: Vec<(Corpus, f64, bool)>) -> Result<Self, PretrainError> {
        if entries.is_empty() {
            return Err(PretrainError::EmptyCorpus("<mixture>".into()));
        }
        let total: f64 = entries.iter().map(|(_, w, _)| *w).sum();
        if entries.iter().any(|(_, w, _)| *w <= 0.0) || total <= 0.0 {
            return Err(PretrainError::BadWeights);
        }
        for (corpus, _, balanced) in &entries {
            if *balanced && corpus.langs.is_none() {
                return Err(PretrainError::BadConfig(format!(
                    "corpus {} is balanced but has no language tags",
                    corpus.name
                )));
            }
        }
        let mut acc = 0.0;
        let cumulative = entries
            .iter()
            .map(|(_, w, _)| {
                acc += *w / total;
                acc
            })
            .collect();
        Ok(CorpusMixture { entries, cumulative })
    }

    pub fn sample<'a, R: Rng>(&'a self, rng: &mut R) -> &'a str {
        let u: f64 = rng.random();
        let idx = self
            .cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.entries.len() - 1);
        let (corpus, _, balanced) = &self.entries[idx];
        let line = if *balanced {
            let g = rng.random_range(0..corpus.lang_groups.len());
            let group = &corpus.lang_groups[g];
            group[rng.random_range(0..group.len())]
        } else {
            rng.random_range(0..corpus.lines.len())
        };
        &corpus.lines[line]
    }

    /// Draw a batch and encode it (no prefix token; this is the denoising
    /// path).
    pub fn sample_batch<R: Rng>(
        &self,
        batch_size: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Vec<ByteSequence> {
        (0..batch_size).map(|_| encode_text(self.sample(rng), max_len, false)).collect()
    }
}
