//! Tokenisation, word vectors and the recurrent sentence encoder.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use thiserror::Error;

use crate::moments::Span;
use crate::numerics::{
    lstm_sequence_backward, lstm_sequence_forward, Linear, LstmCache, LstmParams, NumericsError,
    Tensor2,
};

/// Token used for out-of-vocabulary words and empty descriptions.
pub const UNK_TOKEN: &str = "<unk>";

/// Longer descriptions are truncated.
pub const MAX_SENTENCE_TOKENS: usize = 50;

#[derive(Debug, Error)]
pub enum LanguageError {
    #[error("word-vector file line {line}: {reason}")]
    Format { line: usize, reason: String },
    #[error("word-vector file is empty")]
    Empty,
    #[error("token index {index} out of range for vocabulary of {size}")]
    Vocabulary { index: usize, size: usize },
    #[error("empty token sequence")]
    NoTokens,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Lowercases, splits on whitespace and drops punctuation other than
/// apostrophes inside a word.
pub fn tokenize(text: &str) -> Vec<String> {
    let tokens: Vec<String> = text
        .split_whitespace()
        .filter_map(|raw| {
            let kept: String = raw
                .chars()
                .flat_map(char::to_lowercase)
                .filter(|c| c.is_alphanumeric() || *c == '\'')
                .collect();
            let word = kept.trim_matches('\'');
            (!word.is_empty()).then(|| word.to_string())
        })
        .collect();
    if tokens.is_empty() {
        vec![UNK_TOKEN.to_string()]
    } else {
        tokens
    }
}

/// A description bound to a video, with its annotator spans.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub annotation_id: String,
    pub description: String,
    pub tokens: Vec<usize>,
    pub video_id: String,
    pub num_segments: usize,
    pub annotations: Vec<Span>,
}

/// Token index plus dense embedding table. The unknown token is the last row.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    table: Tensor2,
}

impl Vocabulary {
    /// `tokens` excludes the unknown token; `table` has one extra final row for it.
    pub fn from_parts(tokens: Vec<String>, table: Tensor2) -> Result<Self, LanguageError> {
        if table.rows() != tokens.len() + 1 {
            return Err(LanguageError::Format {
                line: 0,
                reason: format!(
                    "{} tokens need {} table rows, found {}",
                    tokens.len(),
                    tokens.len() + 1,
                    table.rows()
                ),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len() + 1);
        for (i, t) in tokens.iter().enumerate() {
            index.entry(t.clone()).or_insert(i);
        }
        index.insert(UNK_TOKEN.to_string(), tokens.len());
        Ok(Self {
            tokens,
            index,
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.table.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn unk(&self) -> usize {
        self.tokens.len()
    }

    /// Known tokens, in table order, without the unknown token.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn table(&self) -> &Tensor2 {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Tensor2 {
        &mut self.table
    }

    pub fn into_table(self) -> Tensor2 {
        self.table
    }

    pub fn lookup(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    pub fn row(&self, token: &str) -> &[f64] {
        self.table.row(self.lookup(token))
    }

    /// Maps tokens to indices, truncating to [`MAX_SENTENCE_TOKENS`].
    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        if tokens.len() > MAX_SENTENCE_TOKENS {
            warn!(
                "truncating description of {} tokens to {MAX_SENTENCE_TOKENS}",
                tokens.len()
            );
        }
        let mut ids: Vec<usize> = tokens
            .iter()
            .take(MAX_SENTENCE_TOKENS)
            .map(|t| self.lookup(t))
            .collect();
        if ids.is_empty() {
            ids.push(self.unk());
        }
        ids
    }
}

/// Reads a word-vector text file: one token per line followed by its values.
pub fn load_embeddings(path: &Path) -> Result<Vocabulary, LanguageError> {
    read_embeddings(BufReader::new(File::open(path)?), None)
}

/// Like [`load_embeddings`] but keeps only tokens in `keep`. The unknown
/// vector is still the mean over every row in the file.
pub fn load_embeddings_filtered(
    path: &Path,
    keep: &HashSet<String>,
) -> Result<Vocabulary, LanguageError> {
    read_embeddings(BufReader::new(File::open(path)?), Some(keep))
}

pub fn read_embeddings<R: BufRead>(
    reader: R,
    keep: Option<&HashSet<String>>,
) -> Result<Vocabulary, LanguageError> {
    let mut dim: Option<usize> = None;
    let mut seen: HashSet<String> = HashSet::new();
    let mut tokens = Vec::new();
    let mut data = Vec::new();
    let mut sum: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else {
            continue;
        };
        let values = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| LanguageError::Format {
                    line: line_no,
                    reason: format!("`{p}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        match dim {
            None => {
                if values.is_empty() {
                    return Err(LanguageError::Format {
                        line: line_no,
                        reason: "token has no vector".into(),
                    });
                }
                dim = Some(values.len());
                sum = vec![0.0; values.len()];
            }
            Some(d) if d != values.len() => {
                return Err(LanguageError::Format {
                    line: line_no,
                    reason: format!("expected {d} values, found {}", values.len()),
                });
            }
            Some(_) => {}
        }
        if let Some(j) = values.iter().position(|v| !v.is_finite()) {
            return Err(LanguageError::Format {
                line: line_no,
                reason: format!("non-finite value at position {j}"),
            });
        }
        if !seen.insert(token.to_string()) {
            warn!("duplicate token `{token}` on line {line_no}; keeping the first occurrence");
            continue;
        }
        rows += 1;
        for (s, v) in sum.iter_mut().zip(&values) {
            *s += v;
        }
        if keep.map_or(true, |k| k.contains(token)) {
            tokens.push(token.to_string());
            data.extend_from_slice(&values);
        }
    }
    let dim = dim.ok_or(LanguageError::Empty)?;
    data.extend(sum.iter().map(|s| s / rows as f64));
    let table = Tensor2::from_vec(tokens.len() + 1, dim, data)?;
    Vocabulary::from_parts(tokens, table)
}

/// Writes `tokens` with their rows of `table` in the word-vector text format.
pub fn write_embeddings(path: &Path, tokens: &[String], table: &Tensor2) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, t) in tokens.iter().enumerate() {
        write!(w, "{t}")?;
        for v in table.row(i) {
            // shortest representation that round-trips
            write!(w, " {v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()
}

/// LSTM over word vectors followed by a projection of the final hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceEncoder {
    pub lstm: LstmParams,
    pub projection: Linear,
}

/// Forward activations of [`SentenceEncoder::forward`].
#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Vec<usize>,
    steps: Vec<LstmCache>,
}

impl SentenceEncoder {
    pub fn init<R: Rng + ?Sized>(
        word_dim: usize,
        hidden: usize,
        joint: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            lstm: LstmParams::init(word_dim, hidden, rng),
            projection: Linear::init(hidden, joint, rng),
        }
    }

    pub fn zeros(word_dim: usize, hidden: usize, joint: usize) -> Self {
        Self {
            lstm: LstmParams::zeros(word_dim, hidden),
            projection: Linear::zeros(hidden, joint),
        }
    }

    pub fn forward(
        &self,
        table: &Tensor2,
        tokens: &[usize],
    ) -> Result<(Vec<f64>, EncoderCache), LanguageError> {
        if tokens.is_empty() {
            return Err(LanguageError::NoTokens);
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= table.rows()) {
            return Err(LanguageError::Vocabulary {
                index: bad,
                size: table.rows(),
            });
        }
        let inputs: Vec<&[f64]> = tokens.iter().map(|&t| table.row(t)).collect();
        let steps = lstm_sequence_forward(&self.lstm, &inputs)?;
        let h = &steps.last().expect("non-empty sequence").h;
        let out = self.projection.forward(h)?;
        Ok((
            out,
            EncoderCache {
                tokens: tokens.to_vec(),
                steps,
            },
        ))
    }

    /// Accumulates encoder gradients into `grads`, and word-vector gradients
    /// into `table_grads` when given.
    pub fn backward(
        &self,
        cache: &EncoderCache,
        upstream: &[f64],
        grads: &mut SentenceEncoder,
        table_grads: Option<&mut Tensor2>,
    ) -> Result<(), LanguageError> {
        let last = cache.steps.last().ok_or(LanguageError::NoTokens)?;
        let dh = self
            .projection
            .backward_into(&last.h, upstream, &mut grads.projection)?;
        let dxs = lstm_sequence_backward(&self.lstm, &cache.steps, &dh, &mut grads.lstm)?;
        if let Some(tg) = table_grads {
            for (&tok, dx) in cache.tokens.iter().zip(&dxs) {
                for (g, d) in tg.row_mut(tok).iter_mut().zip(dx) {
                    *g += d;
                }
            }
        }
        Ok(())
    }
}

pub fn encode_sentence(
    encoder: &SentenceEncoder,
    vocabulary: &Vocabulary,
    tokens: &[usize],
) -> Result<Vec<f64>, LanguageError> {
    encoder.forward(vocabulary.table(), tokens).map(|(v, _)| v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::lstm_step;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("A cat walks."), vec!["a", "cat", "walks"]);
        assert_eq!(tokenize(""), vec![UNK_TOKEN]);
        assert_eq!(tokenize("  ?! ..."), vec![UNK_TOKEN]);
        assert_eq!(tokenize("the little girl jumps back up after falling").len(), 8);
        assert_eq!(tokenize("The girl's 'red' hat, again!"), vec!["the", "girl's", "red", "hat", "again"]);
    }

    fn vocab_from(text: &str) -> Vocabulary {
        read_embeddings(text.as_bytes(), None).unwrap()
    }

    #[test]
    fn two_word_file() {
        let v = vocab_from("cat 1 2 3\ndog 3 4 5\n");
        assert_eq!(v.len(), 3);
        assert_eq!(v.row(UNK_TOKEN), &[2.0, 3.0, 4.0]);
        assert_eq!(v.row("zebra"), &[2.0, 3.0, 4.0]);
        assert_eq!(v.row("dog"), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn duplicate_keeps_first() {
        let v = vocab_from("cat 1 1\ncat 9 9\ndog 3 3\n");
        assert_eq!(v.len(), 3);
        assert_eq!(v.row("cat"), &[1.0, 1.0]);
        assert_eq!(v.row(UNK_TOKEN), &[2.0, 2.0]);
    }

    #[test]
    fn ragged_line_reports_line_number() {
        let err = read_embeddings("a 1 2\nb 1 2\nc 1\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, LanguageError::Format { line: 3, .. }), "{err}");
        assert!(matches!(read_embeddings("".as_bytes(), None), Err(LanguageError::Empty)));
        assert!(matches!(
            read_embeddings("a 1 x\n".as_bytes(), None),
            Err(LanguageError::Format { line: 1, .. })
        ));
    }

    #[test]
    fn filtered_load_keeps_global_unk() {
        let keep: HashSet<String> = ["dog".to_string()].into();
        let v = read_embeddings("cat 1 2\ndog 3 4\n".as_bytes(), Some(&keep)).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.lookup("cat"), v.unk());
        assert_eq!(v.row(UNK_TOKEN), &[2.0, 3.0]);
    }

    #[test]
    fn write_read_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let tokens: Vec<String> = (0..100).map(|i| format!("word{i}")).collect();
        let table = Tensor2::uniform(100, 7, 1.0, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.txt");
        write_embeddings(&path, &tokens, &table).unwrap();
        let v = load_embeddings(&path).unwrap();
        assert_eq!(v.row("word17"), table.row(17));
        assert_eq!(v.lookup("word17"), 17);
    }

    #[test]
    fn truncates_long_sentences() {
        let v = vocab_from("a 1\n");
        let toks: Vec<String> = (0..80).map(|_| "a".to_string()).collect();
        assert_eq!(v.encode(&toks).len(), MAX_SENTENCE_TOKENS);
    }

    #[test]
    fn zero_encoder_outputs_zero() {
        let v = vocab_from("a 1 2\nb 3 4\n");
        let enc = SentenceEncoder::zeros(2, 5, 3);
        assert_eq!(encode_sentence(&enc, &v, &[0, 1, 2]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn single_token_is_one_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = vocab_from("a 0.5 -0.2\nb 3 4\n");
        let enc = SentenceEncoder::init(2, 4, 3, &mut rng);
        let step = lstm_step(&enc.lstm, v.row("a"), &[0.0; 4], &[0.0; 4]).unwrap();
        let expected = enc.projection.forward(&step.h).unwrap();
        assert_eq!(encode_sentence(&enc, &v, &[0]).unwrap(), expected);
    }

    #[test]
    fn out_of_range_token_errors() {
        let v = vocab_from("a 1\n");
        let enc = SentenceEncoder::zeros(1, 2, 2);
        assert!(matches!(
            encode_sentence(&enc, &v, &[5]),
            Err(LanguageError::Vocabulary { index: 5, size: 2 })
        ));
        assert!(matches!(encode_sentence(&enc, &v, &[]), Err(LanguageError::NoTokens)));
    }

    #[test]
    fn word_order_matters() {
        let v = vocab_from("a 1 0\nb 0 1\nc 0.5 0.5\n");
        let mut differ = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = SentenceEncoder::init(2, 6, 4, &mut rng);
            let fwd = encode_sentence(&enc, &v, &[0, 1, 2]).unwrap();
            let rev = encode_sentence(&enc, &v, &[2, 1, 0]).unwrap();
            if fwd.iter().zip(&rev).any(|(x, y)| (x - y).abs() > 1e-9) {
                differ += 1;
            }
        }
        assert_eq!(differ, 100);
    }
}
