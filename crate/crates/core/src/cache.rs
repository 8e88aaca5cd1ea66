//! Cross-window memory of sentence token IDs.
//!
//! Each iteration feeds `cache ⧺ chunk ⧺ question` to the provider. After
//! retrieval the cache is replaced wholesale by the retained sentences, so an
//! older sentence survives only by being selected again.

use std::fmt::Write as _;
use std::ops::Range;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::textseg::{Chunk, SentenceRecord};
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheState {
    sentences: Vec<SentenceRecord>,
    token_total: usize,
    generation: usize,
}

impl CacheState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sentences(&self) -> &[SentenceRecord] {
        &self.sentences
    }

    pub fn token_total(&self) -> usize {
        self.token_total
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn ids(&self) -> Vec<usize> {
        self.sentences.iter().map(|s| s.id).collect()
    }

    pub fn contains(&self, sentence_id: usize) -> bool {
        self.sentences.binary_search_by_key(&sentence_id, |s| s.id).is_ok()
    }

    /// Line-oriented dump: a header, then `id<TAB>token ids<TAB>text` per sentence.
    pub fn to_snapshot(&self) -> String {
        let mut out = format!(
            "# cache generation={} sentences={} tokens={}\n",
            self.generation,
            self.sentences.len(),
            self.token_total
        );
        for s in &self.sentences {
            let ids: Vec<String> = s.tokens.iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}\t{}\t{}", s.id, ids.join(" "), escape(&s.text));
        }
        out
    }
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(Error::Input(format!("bad escape \\{other:?} in snapshot"))),
        }
    }
    Ok(out)
}

/// One parsed line of a cache snapshot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotLine {
    pub id: usize,
    pub tokens: Vec<TokenId>,
    pub text: String,
}

pub fn parse_snapshot(snapshot: &str) -> Result<Vec<SnapshotLine>> {
    snapshot
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|line| {
            let mut fields = line.splitn(3, '\t');
            let (Some(id), Some(tokens), Some(text)) = (fields.next(), fields.next(), fields.next()) else {
                return Err(Error::Input(format!("snapshot line has fewer than 3 fields: {line:?}")));
            };
            let id = id
                .parse()
                .map_err(|_| Error::Input(format!("bad sentence id {id:?}")))?;
            let tokens = tokens
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Input(format!("bad token id {t:?}"))))
                .collect::<Result<_>>()?;
            Ok(SnapshotLine {
                id,
                tokens,
                text: unescape(text)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Origin {
    Cache,
    Chunk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Cache { sentence_id: usize },
    Chunk { sentence_id: usize },
    Question,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LayoutEntry {
    start: usize,
    origin: Origin,
    sentence: SentenceRecord,
}

/// Which sentence each context position of a merged input belongs to.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SentenceLayout {
    entries: Vec<LayoutEntry>,
    context_len: usize,
}

impl SentenceLayout {
    pub fn from_sentences<'a>(sentences: impl IntoIterator<Item = &'a SentenceRecord>) -> Self {
        let mut layout = SentenceLayout::default();
        for s in sentences {
            layout.push(Origin::Chunk, s);
        }
        layout
    }

    fn push(&mut self, origin: Origin, sentence: &SentenceRecord) {
        self.entries.push(LayoutEntry {
            start: self.context_len,
            origin,
            sentence: sentence.clone(),
        });
        self.context_len += sentence.token_len();
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the layout slot holding context position `pos`.
    pub fn slot_of(&self, pos: usize) -> Option<usize> {
        if pos >= self.context_len {
            return None;
        }
        Some(self.entries.partition_point(|e| e.start <= pos) - 1)
    }

    pub fn sentence(&self, slot: usize) -> &SentenceRecord {
        &self.entries[slot].sentence
    }

    pub fn origin(&self, slot: usize) -> Origin {
        self.entries[slot].origin
    }

    /// Merged-input positions occupied by the sentence in `slot`.
    pub fn span(&self, slot: usize) -> Range<usize> {
        let e = &self.entries[slot];
        e.start..e.start + e.sentence.token_len()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &SentenceRecord> {
        self.entries.iter().map(|e| &e.sentence)
    }
}

/// `cache ⧺ chunk ⧺ question`, with provenance for every position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedInput {
    pub tokens: Vec<TokenId>,
    pub layout: SentenceLayout,
    pub context_len: usize,
    pub question_range: Range<usize>,
}

impl MergedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn provenance(&self, pos: usize) -> Option<Provenance> {
        if self.question_range.contains(&pos) {
            return Some(Provenance::Question);
        }
        let slot = self.layout.slot_of(pos)?;
        let sentence_id = self.layout.sentence(slot).id;
        Some(match self.layout.origin(slot) {
            Origin::Cache => Provenance::Cache { sentence_id },
            Origin::Chunk => Provenance::Chunk { sentence_id },
        })
    }
}

/// Concatenates cached sentences, the current chunk and the question.
pub fn merge(cache: &CacheState, chunk: &Chunk, question_tokens: &[TokenId]) -> Result<MergedInput> {
    if question_tokens.is_empty() {
        return Err(Error::Input("question must tokenize to at least one token".into()));
    }
    let mut layout = SentenceLayout::default();
    let mut tokens = Vec::with_capacity(cache.token_total + chunk.token_count + question_tokens.len());
    for s in &cache.sentences {
        layout.push(Origin::Cache, s);
        tokens.extend_from_slice(&s.tokens);
    }
    for s in &chunk.sentences {
        layout.push(Origin::Chunk, s);
        tokens.extend_from_slice(&s.tokens);
    }
    let context_len = tokens.len();
    tokens.extend_from_slice(question_tokens);
    Ok(MergedInput {
        question_range: context_len..tokens.len(),
        tokens,
        layout,
        context_len,
    })
}

/// Replaces the cache contents with `retained`, sorted into document order.
pub fn update(cache: &CacheState, retained: &[SentenceRecord]) -> Result<CacheState> {
    let mut sentences = retained.to_vec();
    sentences.sort_by_key(|s| s.id);
    if let Some(w) = sentences.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Logic(format!("sentence {} retained twice", w[0].id)));
    }
    Ok(CacheState {
        token_total: sentences.iter().map(|s| s.token_len()).sum(),
        sentences,
        generation: cache.generation + 1,
    })
}
