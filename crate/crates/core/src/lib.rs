//! A self-contained bidirectional LSTM engine for Chinese word segmentation.
//!
//! The pipeline: characters are mapped to trainable embeddings, fed through a
//! stack of bidirectional LSTM layers (with per-layer dimension compression
//! and inter-layer dropout), and classified per position into the four-tag
//! BMES scheme by a small softmax head. Training is exact backpropagation
//! through time with SGD and global-norm gradient clipping; every backward
//! pass is validated against central finite differences.
//!
//! Modules mirror the pipeline:
//! - [`linalg`]: dense f64 vectors/matrices, activations, seeded RNG
//! - [`lstm`]: one unidirectional LSTM layer, forward and backward
//! - [`blstm`]: bidirectional layers, stacking, compression, dropout
//! - [`tagger`]: vocabulary, embeddings, BMES tagging and decoding
//! - [`training`]: loss, batching, the train loop, gradient checking
//! - [`corpus_eval`]: Bakeoff corpus parsing and word-level P/R/F1
//! - [`model_io`]: versioned binary model files (f32 on disk)

pub mod blstm;
pub mod corpus_eval;
pub mod linalg;
pub mod lstm;
pub mod model_io;
pub mod tagger;
pub mod training;

pub use blstm::{BlstmLayer, DropoutMask, StackedBlstm};
pub use corpus_eval::{Corpus, CorpusError, EvalReport};
pub use linalg::{Matrix, Rng, Vector};
pub use lstm::{LstmParams, LstmState};
pub use model_io::ModelIoError;
pub use tagger::{EmbeddingTable, OutputHead, Tag, Vocab};
pub use training::{StackedModel, TrainConfig, TrainError};
