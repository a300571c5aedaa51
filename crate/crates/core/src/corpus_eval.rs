//! Segmented-corpus ingestion, vocabulary construction, and word-level
//! precision/recall/F1 scoring in the Bakeoff style: one sentence per line,
//! words separated by whitespace, and a predicted word counted as correct
//! exactly when its character span matches a gold span.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use thiserror::Error;

use crate::tagger::Vocab;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid UTF-8 at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("empty word in segmentation")]
    EmptyWord,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("duplicate character {ch:?} in vocabulary list")]
    DuplicateVocabChar { ch: char },
    #[error("sentence count mismatch: gold has {gold}, prediction has {pred}")]
    SentenceCountMismatch { gold: usize, pred: usize },
    #[error("character mismatch between gold and prediction at sentence {index}")]
    CharacterMismatch { index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A list of segmented sentences, each a list of words. Characters are
/// preserved exactly as read.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<String>>,
    pub source: String,
}

impl Corpus {
    pub fn from_sentences(sentences: Vec<Vec<String>>, source: &str) -> Self {
        Corpus { sentences, source: source.to_string() }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Characters of sentence `i` with the separating whitespace removed.
    pub fn sentence_chars(&self, i: usize) -> Vec<char> {
        self.sentences[i].iter().flat_map(|w| w.chars()).collect()
    }
}

/// Word-level counts and derived precision/recall/F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub correct_words: u64,
    pub gold_words: u64,
    pub pred_words: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl EvalReport {
    pub fn from_counts(correct_words: u64, gold_words: u64, pred_words: u64) -> Self {
        let precision = if pred_words == 0 { 0.0 } else { correct_words as f64 / pred_words as f64 };
        let recall = if gold_words == 0 { 0.0 } else { correct_words as f64 / gold_words as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        EvalReport { correct_words, gold_words, pred_words, precision, recall, f1 }
    }

    /// The one-line rendering used by the CLI.
    pub fn render(&self) -> String {
        format!(
            "P={:.6} R={:.6} F={:.6} correct={} gold={} pred={}",
            self.precision, self.recall, self.f1, self.correct_words, self.gold_words, self.pred_words
        )
    }
}

/// Parse a segmented corpus: one sentence per line, words separated by runs
/// of Unicode whitespace, blank lines skipped. Invalid UTF-8 is fatal and
/// reported with its byte offset into the stream.
pub fn parse_corpus<R: BufRead>(mut reader: R, source: &str) -> Result<Corpus, CorpusError> {
    let mut sentences = Vec::new();
    let mut buf = Vec::new();
    let mut offset = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        let line = std::str::from_utf8(&buf)
            .map_err(|e| CorpusError::InvalidUtf8 { offset: offset + e.valid_up_to() })?;
        let words: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if !words.is_empty() {
            sentences.push(words);
        }
        offset += n;
    }
    Ok(Corpus { sentences, source: source.to_string() })
}

/// Collect every character with frequency at least `min_freq` into a
/// vocabulary, ids assigned in first-occurrence order with id 0 reserved for
/// unknowns.
pub fn build_vocab(corpus: &Corpus, min_freq: usize) -> Result<Vocab, CorpusError> {
    assert!(min_freq >= 1, "min_freq must be at least 1");
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut freq: HashMap<char, usize> = HashMap::new();
    let mut order = Vec::new();
    for sentence in &corpus.sentences {
        for word in sentence {
            for c in word.chars() {
                let count = freq.entry(c).or_insert(0);
                if *count == 0 {
                    order.push(c);
                }
                *count += 1;
            }
        }
    }
    let kept: Vec<char> = order.into_iter().filter(|c| freq[c] >= min_freq).collect();
    Vocab::from_chars(kept)
}

/// Character frequencies over a corpus (used by the rare-character policy).
pub fn char_frequencies(corpus: &Corpus) -> HashMap<char, usize> {
    let mut freq = HashMap::new();
    for sentence in &corpus.sentences {
        for word in sentence {
            for c in word.chars() {
                *freq.entry(c).or_insert(0) += 1;
            }
        }
    }
    freq
}

fn word_intervals(words: &[String]) -> Vec<(usize, usize)> {
    let mut intervals = Vec::with_capacity(words.len());
    let mut pos = 0;
    for w in words {
        let n = w.chars().count();
        intervals.push((pos, pos + n));
        pos += n;
    }
    intervals
}

/// Word-level scoring: a predicted word is correct iff its exact character
/// interval matches a gold interval in the same sentence. Counts aggregate
/// over the whole corpus before the ratios are taken. Both corpora must have
/// the same sentences character for character.
pub fn score_prf(gold: &Corpus, pred: &Corpus) -> Result<EvalReport, CorpusError> {
    if gold.len() != pred.len() {
        return Err(CorpusError::SentenceCountMismatch { gold: gold.len(), pred: pred.len() });
    }
    let mut correct = 0u64;
    let mut gold_total = 0u64;
    let mut pred_total = 0u64;
    for (i, (gs, ps)) in gold.sentences.iter().zip(pred.sentences.iter()).enumerate() {
        if gold.sentence_chars(i) != pred.sentence_chars(i) {
            return Err(CorpusError::CharacterMismatch { index: i });
        }
        let gold_set: HashSet<(usize, usize)> = word_intervals(gs).into_iter().collect();
        let pred_iv = word_intervals(ps);
        correct += pred_iv.iter().filter(|iv| gold_set.contains(iv)).count() as u64;
        gold_total += gs.len() as u64;
        pred_total += ps.len() as u64;
    }
    Ok(EvalReport::from_counts(correct, gold_total, pred_total))
}
