//! Sentence segmentation and greedy chunk packing.
//!
//! Boundaries fall after a maximal run of terminator characters
//! (`.` `!` `?` `。` `！` `？` and newlines). The run stays with the preceding
//! sentence; whatever follows (usually a space) opens the next one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

/// A contiguous, tokenized span of the source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// Position of the sentence in its document, starting at 0.
    pub id: usize,
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Offset in characters (not bytes) into the source document.
    pub char_start: usize,
    /// Offset in tokens into the tokenized source document.
    pub token_start: usize,
}

/// Sentences are the unit the cache stores.
pub type SentenceRecord = Sentence;

impl Sentence {
    pub fn token_len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Chunk {
    pub index: usize,
    pub sentences: Vec<Sentence>,
    pub token_count: usize,
}

impl Chunk {
    pub fn empty(index: usize) -> Self {
        Chunk {
            index,
            sentences: Vec::new(),
            token_count: 0,
        }
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。' | '！' | '？' | '\n' | '\r')
}

/// Byte ranges of the raw sentence pieces of `text`.
fn split_pieces(text: &str) -> Vec<(usize, usize)> {
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut in_run = false;
    for (i, c) in text.char_indices() {
        if is_terminator(c) {
            in_run = true;
        } else if in_run {
            pieces.push((start, i));
            start = i;
            in_run = false;
        }
    }
    if start < text.len() {
        pieces.push((start, text.len()));
    }
    pieces
}

/// Splits `text` into sentences and tokenizes each one.
///
/// A piece that tokenizes to nothing (possible with external tokenizers that
/// drop whitespace) is folded into its neighbour so that every sentence keeps
/// at least one token and the pieces still cover the text.
pub fn segment_sentences(text: &str, tokenizer: &dyn Tokenizer) -> Result<Vec<Sentence>> {
    let mut sentences: Vec<Sentence> = Vec::new();
    let mut pending: Option<usize> = None; // byte start of a carried-over empty piece

    for (start, end) in split_pieces(text) {
        let piece_start = pending.take().unwrap_or(start);
        let piece = &text[piece_start..end];
        let tokens = tokenizer.encode(piece)?;
        if tokens.is_empty() {
            match sentences.last_mut() {
                Some(prev) => {
                    prev.text.push_str(piece);
                    prev.tokens = tokenizer.encode(&prev.text)?;
                }
                None => pending = Some(piece_start),
            }
            continue;
        }
        sentences.push(Sentence {
            id: sentences.len(),
            text: piece.to_string(),
            tokens,
            char_start: 0,
            token_start: 0,
        });
    }
    if let Some(start) = pending {
        return Err(Error::Input(format!(
            "text from byte {start} produces no tokens under the active tokenizer"
        )));
    }

    // sentences tile the text, so offsets are running sums
    let (mut char_start, mut token_start) = (0, 0);
    for s in &mut sentences {
        s.char_start = char_start;
        s.token_start = token_start;
        char_start += s.text.chars().count();
        token_start += s.tokens.len();
    }
    Ok(sentences)
}

/// Greedy first-fit packing of sentences into chunks of at most `chunk_size`
/// tokens. A sentence longer than `chunk_size` becomes its own chunk.
pub fn build_chunks(sentences: &[Sentence], chunk_size: usize) -> Result<Vec<Chunk>> {
    if chunk_size < 1 {
        return Err(Error::config("chunk_size", "must be at least 1"));
    }
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut current = Chunk::empty(0);
    for sentence in sentences {
        let len = sentence.token_len();
        if !current.sentences.is_empty() && current.token_count + len > chunk_size {
            let index = current.index + 1;
            chunks.push(std::mem::replace(&mut current, Chunk::empty(index)));
        }
        current.token_count += len;
        current.sentences.push(sentence.clone());
    }
    if !current.sentences.is_empty() {
        chunks.push(current);
    }
    Ok(chunks)
}
