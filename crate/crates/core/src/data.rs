//! Word-level corpus handling: vocabulary, encoding and continuous batching
//! for truncated BPTT.
//!
//! Text is a whitespace-separated token stream; every newline becomes an
//! `<eos>` token. Unknown words map to `<unk>`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";

/// Splits text into word tokens, with `<eos>` after every newline-terminated line.
pub fn tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_inclusive('\n').flat_map(|line| {
        let eos = line.ends_with('\n').then_some(EOS);
        line.split_whitespace().chain(eos)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds the vocabulary from training text: ids follow first appearance,
    /// and `<eos>`/`<unk>` are appended if the text never produced them.
    pub fn build(train_text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let mut words = 0usize;
        for tok in tokenize(train_text) {
            if tok != EOS {
                words += 1;
            }
            if !index.contains_key(tok) {
                index.insert(tok.to_string(), tokens.len() as u32);
                tokens.push(tok.to_string());
            }
        }
        if words == 0 {
            return Err(Error::Data("corpus contains no tokens".into()));
        }
        for special in [EOS, UNK] {
            if !index.contains_key(special) {
                index.insert(special.to_string(), tokens.len() as u32);
                tokens.push(special.to_string());
            }
        }
        Ok(Self { tokens, index })
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "invalid vocabulary entry {t:?} at id {i}"
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        for special in [EOS, UNK] {
            if !index.contains_key(special) {
                return Err(Error::Data(format!("vocabulary is missing {special}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn unk_id(&self) -> u32 {
        self.index[UNK]
    }

    pub fn eos_id(&self) -> u32 {
        self.index[EOS]
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.unk_id())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|t| self.id(t)).collect()
    }

    /// Inverse of [`Vocab::encode`] up to whitespace normalisation and
    /// `<unk>` substitution.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("token id {id} out of range")))?;
            if tok == EOS {
                out.push('\n');
                line_start = true;
            } else {
                if !line_start {
                    out.push(' ');
                }
                out.push_str(tok);
                line_start = false;
            }
        }
        Ok(out)
    }

    /// One token per line; the line number is the id.
    pub fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_contents()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Reads a UTF-8 text file.
pub fn read_text(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes)
        .map_err(|_| Error::Data(format!("{} is not valid UTF-8", path.display())))
}

/// A vocabulary plus the encoded splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<u32>,
    pub valid: Vec<u32>,
    pub test: Vec<u32>,
}

impl Corpus {
    /// Loads the three splits; the vocabulary comes from the training split
    /// unless one is supplied.
    pub fn load(train: &Path, valid: &Path, test: &Path, vocab: Option<Vocab>) -> Result<Self> {
        let train_text = read_text(train)?;
        let vocab = match vocab {
            Some(v) => v,
            None => Vocab::build(&train_text)?,
        };
        let valid = vocab.encode(&read_text(valid)?);
        let test = vocab.encode(&read_text(test)?);
        Ok(Self {
            train: vocab.encode(&train_text),
            valid,
            test,
            vocab,
        })
    }
}

/// One `B x L` training segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// `inputs[b][t]`
    pub inputs: Vec<Vec<u32>>,
    /// `targets[b][t] == inputs[b][t + 1]` within the stream.
    pub targets: Vec<Vec<u32>>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.inputs.len()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

/// Continuous batching: the token stream is cut into `B` contiguous streams
/// that are consumed `L` tokens at a time. Segment `k` of stream `b`
/// continues segment `k - 1` of the same stream, so recurrent state may be
/// carried across batches (gradients are not). Tokens that do not fill a
/// whole segment are dropped.
#[derive(Debug, Clone)]
pub struct BatchCursor {
    streams: Vec<Vec<u32>>,
    seq_len: usize,
    position: usize,
    num_batches: usize,
}

impl BatchCursor {
    pub fn num_batches(&self) -> usize {
        self.num_batches
    }

    pub fn batch_size(&self) -> usize {
        self.streams.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn reset(&mut self) {
        self.position = 0;
    }
}

impl Iterator for BatchCursor {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.position >= self.num_batches {
            return None;
        }
        let start = self.position * self.seq_len;
        let end = start + self.seq_len;
        self.position += 1;
        Some(Batch {
            inputs: self
                .streams
                .iter()
                .map(|s| s[start..end].to_vec())
                .collect(),
            targets: self
                .streams
                .iter()
                .map(|s| s[start + 1..end + 1].to_vec())
                .collect(),
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.num_batches - self.position;
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchCursor {}

pub fn continuous_batches(ids: &[u32], batch_size: usize, seq_len: usize) -> Result<BatchCursor> {
    if batch_size == 0 || seq_len == 0 {
        return Err(Error::Data(
            "batch size and segment length must be positive".into(),
        ));
    }
    if ids.len() < batch_size * (seq_len + 1) {
        return Err(Error::Data(format!(
            "corpus of {} tokens is too small for {batch_size} streams of {} tokens",
            ids.len(),
            seq_len + 1
        )));
    }
    let stream_len = ids.len() / batch_size;
    let streams: Vec<Vec<u32>> = ids
        .chunks_exact(stream_len)
        .take(batch_size)
        .map(<[u32]>::to_vec)
        .collect();
    Ok(BatchCursor {
        streams,
        seq_len,
        position: 0,
        num_batches: (stream_len - 1) / seq_len,
    })
}
