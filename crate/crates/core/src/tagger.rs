//! Character vocabulary, embedding lookup, the BMES output head, and the
//! mapping between tag sequences and segmentations.

use std::collections::HashMap;

use crate::corpus_eval::CorpusError;
use crate::linalg::{matvec, softmax, tanh, Matrix, Rng, Vector};

/// Reserved id for unknown characters.
pub const UNK_ID: usize = 0;

/// Bijective character-to-id dictionary. Id 0 is reserved for unknown
/// characters and never maps back to a real character; known characters get
/// dense ids `1..size()` in first-occurrence order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    char_to_id: HashMap<char, usize>,
    id_to_char: Vec<char>,
}

impl Vocab {
    /// Build from an ordered list of distinct characters (id `k+1` for the
    /// k-th entry). Duplicates are rejected.
    pub fn from_chars(chars: Vec<char>) -> Result<Self, CorpusError> {
        let mut char_to_id = HashMap::with_capacity(chars.len());
        for (k, &c) in chars.iter().enumerate() {
            if char_to_id.insert(c, k + 1).is_some() {
                return Err(CorpusError::DuplicateVocabChar { ch: c });
            }
        }
        Ok(Vocab { char_to_id, id_to_char: chars })
    }

    /// Total id count, unknown included.
    pub fn size(&self) -> usize {
        self.id_to_char.len() + 1
    }

    /// Id for a character; unknown characters map to [`UNK_ID`].
    pub fn id(&self, c: char) -> usize {
        self.char_to_id.get(&c).copied().unwrap_or(UNK_ID)
    }

    /// Character for an id; `None` for the unknown id.
    pub fn char_for(&self, id: usize) -> Option<char> {
        if id == UNK_ID {
            None
        } else {
            self.id_to_char.get(id - 1).copied()
        }
    }

    /// Known characters in id order (id 1 first).
    pub fn chars(&self) -> &[char] {
        &self.id_to_char
    }

    pub fn encode(&self, chars: &[char]) -> Vec<usize> {
        chars.iter().map(|&c| self.id(c)).collect()
    }
}

/// Trainable character embeddings: column `id` of a `d × |C|` matrix is the
/// vector for character id `id` (the unknown column included).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub m: Matrix,
}

impl EmbeddingTable {
    pub fn init(rng: &mut Rng, dim: usize, vocab_size: usize, scale: f64) -> Self {
        EmbeddingTable { m: crate::linalg::init_uniform(rng, dim, vocab_size, scale) }
    }

    pub fn dim(&self) -> usize {
        self.m.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.m.cols()
    }

    pub fn lookup(&self, id: usize) -> Vector {
        self.m.column(id)
    }

    pub fn lookup_ids(&self, ids: &[usize]) -> Vec<Vector> {
        ids.iter().map(|&id| self.lookup(id)).collect()
    }
}

/// Embedding lookup for a character sequence; unknown characters resolve to
/// the shared unknown column.
pub fn embed(vocab: &Vocab, table: &EmbeddingTable, chars: &[char]) -> Vec<Vector> {
    assert_eq!(
        vocab.size(),
        table.vocab_size(),
        "embedding table has {} columns but the vocabulary has {} ids",
        table.vocab_size(),
        vocab.size()
    );
    table.lookup_ids(&vocab.encode(chars))
}

/// The four position-in-word labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    /// Beginning of a multi-character word.
    B = 0,
    /// Middle of a multi-character word.
    M = 1,
    /// End of a multi-character word.
    E = 2,
    /// Single-character word.
    S = 3,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::B, Tag::M, Tag::E, Tag::S];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Tag {
        Tag::ALL[i]
    }

    pub fn letter(self) -> char {
        match self {
            Tag::B => 'B',
            Tag::M => 'M',
            Tag::E => 'E',
            Tag::S => 'S',
        }
    }
}

/// Classification head: a tanh hidden layer over the stack's `2d` features,
/// then a 4-way softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputHead {
    pub hidden: Matrix,
    pub b_hidden: Vector,
    pub out: Matrix,
    pub b_out: Vector,
}

impl OutputHead {
    pub fn zeros(hidden_dim: usize, feature_dim: usize) -> Self {
        OutputHead {
            hidden: Matrix::zeros(hidden_dim, feature_dim),
            b_hidden: Vector::zeros(hidden_dim),
            out: Matrix::zeros(Tag::COUNT, hidden_dim),
            b_out: Vector::zeros(Tag::COUNT),
        }
    }

    pub fn init(rng: &mut Rng, hidden_dim: usize, feature_dim: usize, scale: f64) -> Self {
        OutputHead {
            hidden: crate::linalg::init_uniform(rng, hidden_dim, feature_dim, scale),
            b_hidden: Vector::zeros(hidden_dim),
            out: crate::linalg::init_uniform(rng, Tag::COUNT, hidden_dim, scale),
            b_out: Vector::zeros(Tag::COUNT),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden.cols()
    }

    /// Forward for one position, keeping the intermediates the backward pass
    /// needs.
    pub fn forward_detailed(&self, feat: &Vector) -> HeadActivation {
        let mut h_lin = matvec(&self.hidden, feat);
        h_lin.add_assign(&self.b_hidden);
        let h_act = tanh(&h_lin);
        let mut logits = matvec(&self.out, &h_act);
        logits.add_assign(&self.b_out);
        let probs = softmax(&logits);
        HeadActivation { h_act, probs }
    }
}

/// Per-position head intermediates.
#[derive(Clone, Debug)]
pub struct HeadActivation {
    pub h_act: Vector,
    pub probs: Vector,
}

/// Per-position tag probabilities and the argmax tag (ties break toward the
/// lowest tag index, i.e. B before M before E before S).
pub fn predict_tags(head: &OutputHead, feats: &[Vector]) -> Vec<(Tag, Vector)> {
    feats
        .iter()
        .map(|f| {
            let act = head.forward_detailed(f);
            (Tag::from_index(act.probs.argmax()), act.probs)
        })
        .collect()
}

/// Gold tags for a segmented sentence: one-character words get `S`, longer
/// words get `B M… E`.
pub fn label_from_segmentation<S: AsRef<str>>(words: &[S]) -> Result<Vec<Tag>, CorpusError> {
    let mut tags = Vec::new();
    for w in words {
        let n = w.as_ref().chars().count();
        match n {
            0 => return Err(CorpusError::EmptyWord),
            1 => tags.push(Tag::S),
            _ => {
                tags.push(Tag::B);
                for _ in 0..n - 2 {
                    tags.push(Tag::M);
                }
                tags.push(Tag::E);
            }
        }
    }
    Ok(tags)
}

/// Invert the labeling scheme. Valid tag sequences reproduce the original
/// segmentation; invalid ones are repaired greedily: a boundary closes before
/// any B or S and after any E or S, and every other character attaches to the
/// open word. Never fails, and the output always concatenates back to the
/// input characters.
pub fn decode_segmentation(chars: &[char], tags: &[Tag]) -> Vec<String> {
    assert_eq!(
        chars.len(),
        tags.len(),
        "decode_segmentation length mismatch: {} characters vs {} tags",
        chars.len(),
        tags.len()
    );
    let mut words = Vec::new();
    let mut current = String::new();
    for (&c, &t) in chars.iter().zip(tags.iter()) {
        match t {
            Tag::B | Tag::S => {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                current.push(c);
            }
            Tag::M | Tag::E => current.push(c),
        }
        if matches!(t, Tag::E | Tag::S) {
            words.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}
