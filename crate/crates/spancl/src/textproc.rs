//! Deterministic word-level tokenization with character-offset tracking,
//! answer alignment from character to token coordinates, and sliding-window
//! featurization of long passages.
//!
//! All character offsets are Unicode code-point indices into the source text,
//! matching the offset convention of the ingested datasets.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

/// Tokenized text with per-token character spans into the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// Lowercased surface forms.
    pub tokens: Vec<String>,
    /// Half-open `(start, end)` code-point offsets into the original text.
    pub char_spans: Vec<(usize, usize)>,
    /// Vocabulary ids; out-of-vocabulary tokens carry `UNK_ID`.
    pub vocab_ids: Vec<u32>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Split text into lowercased word and punctuation tokens.
///
/// Runs of alphanumeric characters form one token; every other
/// non-whitespace character is a token by itself. Returned spans are
/// code-point offsets into the original (un-lowercased) text.
pub fn split_tokens(text: &str) -> (Vec<String>, Vec<(usize, usize)>) {
    let mut tokens = Vec::new();
    let mut spans = Vec::new();
    let mut word_start: Option<usize> = None;
    let mut word = String::new();

    let flush = |start: Option<usize>,
                 end: usize,
                 word: &mut String,
                 tokens: &mut Vec<String>,
                 spans: &mut Vec<(usize, usize)>| {
        if let Some(s) = start {
            tokens.push(word.to_lowercase());
            spans.push((s, end));
            word.clear();
        }
    };

    let mut idx = 0usize;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if word_start.is_none() {
                word_start = Some(idx);
            }
            word.push(ch);
        } else {
            flush(word_start.take(), idx, &mut word, &mut tokens, &mut spans);
            if !ch.is_whitespace() {
                tokens.push(ch.to_lowercase().to_string());
                spans.push((idx, idx + 1));
            }
        }
        idx += 1;
    }
    flush(word_start.take(), idx, &mut word, &mut tokens, &mut spans);
    (tokens, spans)
}

/// Slice a string by code-point offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end.saturating_sub(start)).collect()
}

/// Count code points.
pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Closed vocabulary built from a corpus; ids are stable line numbers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Build from raw texts: specials first, then every token with
    /// frequency >= `min_freq`, ordered by descending frequency and then
    /// lexicographically so the id assignment is deterministic.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocab {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let (tokens, _) = split_tokens(text);
            for t in tokens {
                *freq.entry(t).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Tokenize and map to vocabulary ids in one pass.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let (tokens, char_spans) = split_tokens(text);
        let vocab_ids = tokens.iter().map(|t| self.id(t)).collect();
        TokenSequence {
            tokens,
            char_spans,
            vocab_ids,
        }
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            writeln!(out, "{t}").expect("write to string");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 4 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Input(format!(
                "not a vocabulary file: {}",
                path.display()
            )));
        }
        Ok(Vocab::from_tokens(tokens))
    }

    /// Stable content hash used to tie checkpoints to the vocabulary.
    pub fn sha256_hex(&self) -> String {
        let mut hasher = Sha256::new();
        for t in &self.tokens {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(64);
        for b in digest {
            write!(hex, "{b:02x}").expect("write to string");
        }
        hex
    }
}

/// Map an answer given by character offset to the minimal covering token range.
pub fn align_answer(
    passage_tokens: &TokenSequence,
    answer_char_start: usize,
    answer_text: &str,
) -> Result<(usize, usize)> {
    let answer_len = char_len(answer_text);
    let answer_end = answer_char_start + answer_len;
    let mut first = None;
    let mut last = None;
    for (i, &(s, e)) in passage_tokens.char_spans.iter().enumerate() {
        // token intersects [answer_char_start, answer_end)
        if e > answer_char_start && s < answer_end {
            if first.is_none() {
                first = Some(i);
            }
            last = Some(i);
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Ok((a, b)),
        _ => Err(Error::Alignment(format!(
            "answer at chars [{answer_char_start}, {answer_end}) covers no tokens"
        ))),
    }
}

/// One `[CLS] question [SEP] passage-slice [SEP]` model input.
///
/// Windows are emitted without trailing padding (their length is at most
/// `max_seq_len`); consumers may append `PAD_ID`s, which `valid_len`
/// excludes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureWindow {
    pub input_ids: Vec<u32>,
    /// Sequence index of the first passage token.
    pub passage_token_offset: usize,
    /// Start/end sequence positions of the gold span; `(0, 0)` means no answer.
    pub label_span: (usize, usize),
    /// Passage token index where this window's slice begins.
    pub window_start: usize,
    /// Number of passage tokens in this window's slice.
    pub slice_len: usize,
}

impl FeatureWindow {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn valid_len(&self) -> usize {
        let trailing_pad = self
            .input_ids
            .iter()
            .rev()
            .take_while(|&&id| id == PAD_ID)
            .count();
        self.input_ids.len() - trailing_pad
    }

    /// One past the last slice position in sequence coordinates
    /// (excludes the trailing `[SEP]`).
    pub fn passage_end(&self) -> usize {
        self.passage_token_offset + self.slice_len
    }

    /// Whether this window's label marks a real span (not the null span).
    pub fn has_answer_label(&self) -> bool {
        self.label_span != (0, 0)
    }

    /// Map a sequence position inside the slice back to a passage token index.
    pub fn to_passage_index(&self, seq_pos: usize) -> Option<usize> {
        if seq_pos >= self.passage_token_offset && seq_pos < self.passage_end() {
            Some(self.window_start + (seq_pos - self.passage_token_offset))
        } else {
            None
        }
    }
}

/// Slice a passage into overlapping feature windows.
///
/// The question is truncated to `max_query_len` tokens; window slices advance
/// by `doc_stride` until one reaches the end of the passage. A window is
/// labeled with the gold span only when its slice fully contains it.
pub fn make_windows(
    question: &TokenSequence,
    passage: &TokenSequence,
    gold: Option<(usize, usize)>,
    max_seq_len: usize,
    doc_stride: usize,
    max_query_len: usize,
) -> Result<Vec<FeatureWindow>> {
    if max_query_len + 3 >= max_seq_len {
        return Err(Error::Config(format!(
            "max_query_len {max_query_len} must be below max_seq_len {max_seq_len} minus 3 specials"
        )));
    }
    if doc_stride == 0 {
        return Err(Error::Config("doc_stride must be positive".into()));
    }
    let q_len = question.len().min(max_query_len);
    let q_ids = &question.vocab_ids[..q_len];
    let budget = max_seq_len - 3 - q_len;
    let p_len = passage.len();
    let passage_token_offset = 1 + q_len + 1;

    let mut windows = Vec::new();
    let mut start = 0usize;
    loop {
        let take = budget.min(p_len - start);
        let mut input_ids = Vec::with_capacity(3 + q_len + take);
        input_ids.push(CLS_ID);
        input_ids.extend_from_slice(q_ids);
        input_ids.push(SEP_ID);
        input_ids.extend_from_slice(&passage.vocab_ids[start..start + take]);
        input_ids.push(SEP_ID);

        let label_span = match gold {
            Some((ts, te)) if ts >= start && te < start + take => (
                passage_token_offset + (ts - start),
                passage_token_offset + (te - start),
            ),
            _ => (0, 0),
        };

        windows.push(FeatureWindow {
            input_ids,
            passage_token_offset,
            label_span,
            window_start: start,
            slice_len: take,
        });

        if start + budget >= p_len {
            break;
        }
        start += doc_stride;
    }
    Ok(windows)
}
