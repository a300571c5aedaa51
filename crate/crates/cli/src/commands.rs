use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::PathBuf;

use clap::Args;
use thiserror::Error;

use blstmseg_core::blstm::DropoutMask;
use blstmseg_core::corpus_eval::{build_vocab, parse_corpus, score_prf, Corpus, CorpusError};
use blstmseg_core::linalg::Rng;
use blstmseg_core::model_io::{load_model, save_model, ModelIoError};
use blstmseg_core::tagger::Tag;
use blstmseg_core::training::{grad_check_with_masks, train, StackedModel, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelIoError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    EvalMismatch(CorpusError),
    #[error("gradient check failed: max relative error {max_rel_err:e} exceeds tolerance {tolerance:e}")]
    GradCheckFailed { max_rel_err: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(ModelIoError::Io(_)) => 1,
            CliError::Model(_) => 3,
            CliError::EvalMismatch(_) => 4,
            _ => 1,
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Whitespace-segmented training corpus, one sentence per line
    #[arg(long)]
    pub corpus: PathBuf,
    /// Optional dev corpus for per-epoch evaluation and best-model selection
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Where to write the trained model
    #[arg(long)]
    pub out: PathBuf,
    /// Character embedding dimension
    #[arg(long, default_value_t = 200)]
    pub embed_dim: usize,
    /// Number of stacked bidirectional layers
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    /// Dropout keep probability (1.0 disables dropout)
    #[arg(long, default_value_t = 0.8)]
    pub dropout_keep: f64,
    /// SGD learning rate
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Training epochs (0 writes a randomly initialized model)
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Sentences per mini-batch
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// RNG seed for init, shuffling, and dropout
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Enable peephole connections in every LSTM
    #[arg(long, default_value_t = false)]
    pub peepholes: bool,
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let corpus = parse_corpus(open(&args.corpus)?, &args.corpus.display().to_string())?;
    let dev = match &args.dev {
        Some(path) => Some(parse_corpus(open(path)?, &path.display().to_string())?),
        None => None,
    };
    let config = TrainConfig {
        embed_dim: args.embed_dim,
        depth: args.layers,
        dropout_keep: args.dropout_keep,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        seed: args.seed,
        peepholes: args.peepholes,
        grad_clip: 5.0,
    };
    let vocab = build_vocab(&corpus, 1)?;
    let mut model = StackedModel::new_random(vocab, &config)?;
    if args.epochs > 0 {
        let stdout = io::stdout();
        let mut log = stdout.lock();
        train(&mut model, &corpus, dev.as_ref(), &config, &mut log)?;
    }
    save_model(&model, &args.out)?;
    Ok(())
}

#[derive(Args)]
pub struct SegmentArgs {
    /// Trained model file
    #[arg(long)]
    pub model: PathBuf,
    /// Raw input, one sentence per line (stdin when omitted)
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Output path (stdout when omitted)
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn cmd_segment(args: SegmentArgs) -> Result<(), CliError> {
    let model = load_model(&args.model)?;
    let mut reader: Box<dyn BufRead> = match &args.input {
        Some(path) => Box::new(open(path)?),
        None => Box::new(BufReader::new(io::stdin())),
    };
    let mut writer: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    };

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
        let line = line.strip_suffix('\n').unwrap_or(line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        let chars: Vec<char> = line.chars().collect();
        if chars.is_empty() {
            writeln!(writer)?;
        } else {
            let words = model.segment_sentence(&chars);
            writeln!(writer, "{}", words.join(" "))?;
        }
        offset += n;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Gold segmented corpus
    #[arg(long)]
    pub gold: PathBuf,
    /// Predicted segmented corpus to score directly
    #[arg(long, conflicts_with_all = ["model", "input"])]
    pub pred: Option<PathBuf>,
    /// Model to segment with before scoring
    #[arg(long, required_unless_present = "pred")]
    pub model: Option<PathBuf>,
    /// Raw input for the model (defaults to the gold text with whitespace removed)
    #[arg(long, requires = "model")]
    pub input: Option<PathBuf>,
}

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let gold = parse_corpus(open(&args.gold)?, &args.gold.display().to_string())?;

    let pred = if let Some(pred_path) = &args.pred {
        parse_corpus(open(pred_path)?, &pred_path.display().to_string())?
    } else {
        let model_path = args.model.as_ref().expect("clap enforces --pred or --model");
        let model = load_model(model_path)?;
        let raw_sentences: Vec<Vec<char>> = match &args.input {
            Some(path) => {
                // raw lines, whitespace removed, blank lines skipped, so line
                // alignment matches the gold parse
                let mut out = Vec::new();
                for line in read_lines(path)? {
                    let chars: Vec<char> = line.chars().filter(|c| !c.is_whitespace()).collect();
                    if !chars.is_empty() {
                        out.push(chars);
                    }
                }
                out
            }
            None => (0..gold.len()).map(|i| gold.sentence_chars(i)).collect(),
        };
        let sentences = raw_sentences.iter().map(|chars| model.segment_sentence(chars)).collect();
        Corpus::from_sentences(sentences, "model")
    };

    let report = score_prf(&gold, &pred).map_err(|e| match e {
        CorpusError::SentenceCountMismatch { .. } | CorpusError::CharacterMismatch { .. } => {
            CliError::EvalMismatch(e)
        }
        other => CliError::Corpus(other),
    })?;
    println!("{}", report.render());
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Embedding / hidden dimension of the test model
    #[arg(long, default_value_t = 4)]
    pub embed_dim: usize,
    /// Stacked bidirectional layers
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    /// Sentence length for the check
    #[arg(long, default_value_t = 6)]
    pub seq_len: usize,
    /// Seed for the model, sentence, and dropout mask
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Check the peephole gradient paths too
    #[arg(long, default_value_t = false)]
    pub peepholes: bool,
    /// Keep probability; below 1.0 a fixed dropout mask is checked as well
    #[arg(long, default_value_t = 1.0)]
    pub dropout_keep: f64,
    /// Maximum tolerated relative error per parameter block
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
}

/// Init range for gradient-check models; wider than the training init so
/// every block's gradient sits well above finite-difference noise.
const GRADCHECK_SCALE: f64 = 1.5;

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let vocab = blstmseg_core::tagger::Vocab::from_chars("零一二三四五六七八九十百".chars().collect())
        .expect("fixed vocabulary is duplicate-free");
    let config = TrainConfig {
        embed_dim: args.embed_dim,
        depth: args.layers,
        dropout_keep: args.dropout_keep,
        learning_rate: 0.1,
        epochs: 0,
        batch_size: 1,
        seed: args.seed,
        peepholes: args.peepholes,
        grad_clip: 5.0,
    };
    let mut model = StackedModel::new_random_scaled(vocab, &config, GRADCHECK_SCALE)?;
    let mut rng = Rng::new(args.seed ^ 0x5EED);
    let ids: Vec<usize> = (0..args.seq_len).map(|_| rng.below(model.vocab.size())).collect();
    let gold: Vec<Tag> = (0..args.seq_len).map(|_| Tag::from_index(rng.below(4))).collect();
    let masks = if args.dropout_keep < 1.0 {
        Some(DropoutMask::sample(
            &mut rng,
            args.dropout_keep,
            args.layers.saturating_sub(1),
            args.seq_len,
            args.embed_dim,
        ))
    } else {
        None
    };

    let report = grad_check_with_masks(&mut model, &ids, &gold, args.tolerance, masks.as_ref())?;
    for (name, err) in &report.blocks {
        println!("block={name} max_rel_err={err:.3e}");
    }
    println!(
        "grad_check max_rel_err={:.3e} tolerance={:.1e} status={}",
        report.max_rel_err,
        report.tolerance,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradCheckFailed { max_rel_err: report.max_rel_err, tolerance: report.tolerance })
    }
}

fn open(path: &PathBuf) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_lines(path: &PathBuf) -> Result<Vec<String>, CliError> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| CorpusError::InvalidUtf8 { offset: e.valid_up_to() })?;
    Ok(text.lines().map(str::to_string).collect())
}
