//! Versioned binary model files.
//!
//! Layout, version 1:
//!
//! ```text
//! BLSTMSEG1\n                 magic + version
//! embed_dim=<n>\n
//! depth=<n>\n
//! peepholes=<0|1>\n
//! dropout_keep=<f>\n          ┐
//! learning_rate=<f>\n         │
//! epochs=<n>\n                │ training-config snapshot
//! batch_size=<n>\n            │
//! seed=<n>\n                  │
//! grad_clip=<f>\n             ┘
//! vocab_len=<n>\n             number of known characters
//! vocab=<chars>\n             the characters, id order (id 1 first)
//! end_header\n
//! <payload>                   little-endian IEEE-754 f32, row-major
//! ```
//!
//! Payload order: the embedding matrix, then for each layer the forward
//! direction's gates z, i, f, o (each W, R, b, and the gate's peephole vector
//! when peepholes are on), the backward direction likewise, then the layer's
//! compression matrix (the top layer has none), and finally the head (hidden
//! weights, hidden bias, output weights, output bias).
//!
//! Parameters are stored as f32; loading widens back to f64, so
//! save → load → save reproduces the file byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::blstm::StackedBlstm;
use crate::linalg::Matrix;
use crate::tagger::{EmbeddingTable, OutputHead, Vocab};
use crate::training::{StackedModel, TrainConfig};

pub const MAGIC: &str = "BLSTMSEG1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("bad magic: expected {MAGIC}")]
    BadMagic,
    #[error("malformed header field: {field}")]
    MalformedHeader { field: String },
    #[error("truncated payload in section {section}: expected {expected} bytes, got {actual}")]
    Truncated { section: String, expected: usize, actual: usize },
    #[error("trailing data after payload")]
    TrailingData,
    #[error("vocabulary character {ch:?} cannot be serialized")]
    InvalidVocabChar { ch: char },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn save_model(model: &StackedModel, path: &Path) -> Result<(), ModelIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<StackedModel, ModelIoError> {
    let f = File::open(path)?;
    read_model(BufReader::new(f))
}

pub fn write_model<W: Write>(model: &StackedModel, w: &mut W) -> Result<(), ModelIoError> {
    for &c in model.vocab.chars() {
        if c == '\n' || c == '\r' {
            return Err(ModelIoError::InvalidVocabChar { ch: c });
        }
    }
    let cfg = &model.config;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "embed_dim={}", cfg.embed_dim)?;
    writeln!(w, "depth={}", cfg.depth)?;
    writeln!(w, "peepholes={}", u8::from(cfg.peepholes))?;
    writeln!(w, "dropout_keep={}", cfg.dropout_keep)?;
    writeln!(w, "learning_rate={}", cfg.learning_rate)?;
    writeln!(w, "epochs={}", cfg.epochs)?;
    writeln!(w, "batch_size={}", cfg.batch_size)?;
    writeln!(w, "seed={}", cfg.seed)?;
    writeln!(w, "grad_clip={}", cfg.grad_clip)?;
    writeln!(w, "vocab_len={}", model.vocab.chars().len())?;
    write!(w, "vocab=")?;
    let vocab_string: String = model.vocab.chars().iter().collect();
    w.write_all(vocab_string.as_bytes())?;
    writeln!(w)?;
    writeln!(w, "end_header")?;

    write_block(w, model.embeddings.m.as_slice())?;
    // block order shared with StackedModel::dense_blocks_mut
    let mut m = model.clone();
    for (_, block) in m.dense_blocks_mut() {
        write_block(w, block)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<StackedModel, ModelIoError> {
    let mut r = BufReader::new(r);

    let magic = read_line(&mut r, "magic")?;
    if magic != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let embed_dim: usize = read_field(&mut r, "embed_dim")?;
    let depth: usize = read_field(&mut r, "depth")?;
    let peepholes: u8 = read_field(&mut r, "peepholes")?;
    if peepholes > 1 {
        return Err(ModelIoError::MalformedHeader { field: "peepholes".into() });
    }
    let peepholes = peepholes == 1;
    let dropout_keep: f64 = read_field(&mut r, "dropout_keep")?;
    let learning_rate: f64 = read_field(&mut r, "learning_rate")?;
    let epochs: usize = read_field(&mut r, "epochs")?;
    let batch_size: usize = read_field(&mut r, "batch_size")?;
    let seed: u64 = read_field(&mut r, "seed")?;
    let grad_clip: f64 = read_field(&mut r, "grad_clip")?;
    let vocab_len: usize = read_field(&mut r, "vocab_len")?;
    let vocab_line = read_line(&mut r, "vocab")?;
    let vocab_chars: Vec<char> = vocab_line
        .strip_prefix("vocab=")
        .ok_or_else(|| ModelIoError::MalformedHeader { field: "vocab".into() })?
        .chars()
        .collect();
    if vocab_chars.len() != vocab_len {
        return Err(ModelIoError::MalformedHeader { field: "vocab_len".into() });
    }
    let terminator = read_line(&mut r, "end_header")?;
    if terminator != "end_header" {
        return Err(ModelIoError::MalformedHeader { field: "end_header".into() });
    }
    if embed_dim == 0 || depth == 0 {
        return Err(ModelIoError::MalformedHeader { field: "embed_dim/depth".into() });
    }

    let vocab = Vocab::from_chars(vocab_chars)
        .map_err(|_| ModelIoError::MalformedHeader { field: "vocab".into() })?;
    let config = TrainConfig {
        embed_dim,
        depth,
        dropout_keep,
        learning_rate,
        epochs,
        batch_size,
        seed,
        peepholes,
        grad_clip,
    };

    let mut model = StackedModel {
        embeddings: EmbeddingTable { m: Matrix::zeros(embed_dim, vocab.size()) },
        net: StackedBlstm::zeros(embed_dim, depth, peepholes),
        head: OutputHead::zeros(embed_dim, 2 * embed_dim),
        vocab,
        config,
    };

    read_block(&mut r, "embeddings", model.embeddings.m.as_mut_slice())?;
    for (name, block) in model.dense_blocks_mut() {
        read_block(&mut r, &name, block)?;
    }

    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(ModelIoError::TrailingData);
    }
    Ok(model)
}

fn write_block<W: Write>(w: &mut W, values: &[f64]) -> Result<(), ModelIoError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R, section: &str, out: &mut [f64]) -> Result<(), ModelIoError> {
    let expected = out.len() * 4;
    let mut bytes = vec![0u8; expected];
    let mut got = 0;
    while got < expected {
        let n = r.read(&mut bytes[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < expected {
        return Err(ModelIoError::Truncated { section: section.to_string(), expected, actual: got });
    }
    for (v, chunk) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
    }
    Ok(())
}

fn read_line<R: Read>(r: &mut BufReader<R>, field: &str) -> Result<String, ModelIoError> {
    use std::io::BufRead;
    let mut buf = Vec::new();
    let n = r.read_until(b'\n', &mut buf)?;
    if n == 0 || buf.last() != Some(&b'\n') {
        return Err(ModelIoError::MalformedHeader { field: field.to_string() });
    }
    buf.pop();
    String::from_utf8(buf).map_err(|_| ModelIoError::MalformedHeader { field: field.to_string() })
}

fn read_field<R: Read, T: std::str::FromStr>(r: &mut BufReader<R>, field: &str) -> Result<T, ModelIoError> {
    let line = read_line(r, field)?;
    let (key, value) = line
        .split_once('=')
        .ok_or_else(|| ModelIoError::MalformedHeader { field: field.to_string() })?;
    if key != field {
        return Err(ModelIoError::MalformedHeader { field: field.to_string() });
    }
    value.parse().map_err(|_| ModelIoError::MalformedHeader { field: field.to_string() })
}
