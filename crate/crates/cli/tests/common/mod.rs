//! Deterministic synthetic segmentation corpora for the test suites: a
//! seeded word inventory over a shared character pool, Zipf-like word
//! frequencies, and sentences sampled as word sequences. Everything is a
//! pure function of the seed.

use blstmseg_core::corpus_eval::Corpus;
use blstmseg_core::linalg::Rng;

pub struct CorpusSpec {
    pub n_chars: usize,
    pub n_words: usize,
    pub words_per_sentence: (usize, usize),
    pub seed: u64,
}

pub struct SyntheticCorpus {
    words: Vec<String>,
    cumulative: Vec<f64>,
    rng: Rng,
    words_per_sentence: (usize, usize),
}

impl SyntheticCorpus {
    pub fn new(spec: CorpusSpec) -> Self {
        let mut rng = Rng::new(spec.seed);
        let chars: Vec<char> = (0..spec.n_chars)
            .map(|k| char::from_u32(0x4E00 + k as u32).expect("CJK range"))
            .collect();

        let mut words = Vec::with_capacity(spec.n_words);
        let mut seen = std::collections::HashSet::new();
        while words.len() < spec.n_words {
            let len = match rng.below(100) {
                0..=29 => 1,
                30..=74 => 2,
                75..=92 => 3,
                _ => 4,
            };
            let w: String = (0..len).map(|_| chars[rng.below(chars.len())]).collect();
            if seen.insert(w.clone()) {
                words.push(w);
            }
        }

        // Zipf-like weights over the inventory
        let weights: Vec<f64> = (0..spec.n_words).map(|k| 1.0 / (k as f64 + 5.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut cumulative = Vec::with_capacity(spec.n_words);
        let mut acc = 0.0;
        for w in &weights {
            acc += w / total;
            cumulative.push(acc);
        }

        SyntheticCorpus { words, cumulative, rng, words_per_sentence: spec.words_per_sentence }
    }

    fn draw_word(&mut self) -> &str {
        let u = self.rng.next_f64();
        let idx = self.cumulative.partition_point(|&c| c < u).min(self.words.len() - 1);
        &self.words[idx]
    }

    pub fn sentence(&mut self) -> Vec<String> {
        let (lo, hi) = self.words_per_sentence;
        let n = lo + self.rng.below(hi - lo + 1);
        (0..n).map(|_| self.draw_word().to_string()).collect()
    }

    pub fn corpus(&mut self, sentences: usize, name: &str) -> Corpus {
        let s = (0..sentences).map(|_| self.sentence()).collect();
        Corpus::from_sentences(s, name)
    }
}

/// Render a corpus in the one-sentence-per-line, space-separated file format.
pub fn corpus_to_text(corpus: &Corpus) -> String {
    let mut out = String::new();
    for sentence in &corpus.sentences {
        out.push_str(&sentence.join(" "));
        out.push('\n');
    }
    out
}
