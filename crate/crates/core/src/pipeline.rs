//! The sliding-window retrieval loop.
//!
//! ```text
//! segment ─► for each chunk: merge(cache, chunk, question) ─► attention at one layer
//!            ─► sum heads ─► phrase features ─► token scores ─► top-k ─► sentences ─► new cache
//!         ─► generate from merge(cache, ∅, question)
//! ```
//!
//! Every forward pass sees at most `cache + chunk_size + question` tokens no
//! matter how long the document is.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::s;
use serde::Serialize;

use crate::attnkernel::{aggregate_heads, AggregatedAttention, AttentionTensor, PastState};
use crate::cache::{self, CacheState, MergedInput, Origin};
use crate::error::{Error, Result};
use crate::provider::{require_past_state, AttentionProvider, LayerSel, ProviderRequest};
use crate::retrieval::{expand_to_sentences, phrase_importance, select_top_k, token_importance};
use crate::textseg::{build_chunks, segment_sentences, Chunk, SentenceRecord};
use crate::tokenizer::TokenId;

pub const DEFAULT_CHUNK_SIZE: usize = 1024;
pub const DEFAULT_TOP_K: usize = 300;
pub const DEFAULT_PHRASE_TOKEN_NUM: usize = 15;
pub const DEFAULT_ANSWER_BUDGET: usize = 128;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Toy,
    Oracle,
    Proto,
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProviderKind::Toy => "toy",
            ProviderKind::Oracle => "oracle",
            ProviderKind::Proto => "proto",
        })
    }
}

impl FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "toy" => Ok(ProviderKind::Toy),
            "oracle" => Ok(ProviderKind::Oracle),
            "proto" => Ok(ProviderKind::Proto),
            other => Err(Error::config(
                "provider",
                format!("unknown provider {other:?} (toy|oracle|proto)"),
            )),
        }
    }
}

/// What the cache hands to the next window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub enum CacheMode {
    /// Sentence token IDs, re-read by the model every window.
    #[default]
    #[serde(rename = "token-ids")]
    TokenIds,
    /// The provider's keys/values for the cached sentences, reused as computed.
    #[serde(rename = "kv-state")]
    PastState,
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheMode::TokenIds => "token-ids",
            CacheMode::PastState => "kv-state",
        })
    }
}

impl FromStr for CacheMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "token-ids" => Ok(CacheMode::TokenIds),
            "kv-state" => Ok(CacheMode::PastState),
            other => Err(Error::config(
                "cache_mode",
                format!("unknown cache mode {other:?} (token-ids|kv-state)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PipelineConfig {
    /// Tokens per document chunk.
    pub chunk_size: usize,
    /// Context tokens whose sentences are kept each window.
    pub top_k: usize,
    /// Width of the ones kernel over adjacent keys.
    pub phrase_token_num: usize,
    pub layer: LayerSel,
    /// Maximum tokens generated for the answer.
    pub answer_budget: usize,
    pub provider: ProviderKind,
    pub cache_mode: CacheMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            top_k: DEFAULT_TOP_K,
            phrase_token_num: DEFAULT_PHRASE_TOKEN_NUM,
            layer: LayerSel::Last,
            answer_budget: DEFAULT_ANSWER_BUDGET,
            provider: ProviderKind::Toy,
            cache_mode: CacheMode::TokenIds,
        }
    }
}

fn parse_count(field: &'static str, value: &str) -> Result<usize> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::config(field, format!("expected a non-negative integer, got {value:?}")))
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 7] = [
        "chunk_size",
        "top_k",
        "phrase_token_num",
        "layer",
        "answer_budget",
        "provider",
        "cache_mode",
    ];

    /// Sets one field from its textual form. Does not validate ranges.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "chunk_size" => self.chunk_size = parse_count("chunk_size", value)?,
            "top_k" => self.top_k = parse_count("top_k", value)?,
            "phrase_token_num" => self.phrase_token_num = parse_count("phrase_token_num", value)?,
            "layer" => self.layer = value.parse()?,
            "answer_budget" => self.answer_budget = parse_count("answer_budget", value)?,
            "provider" => self.provider = value.parse()?,
            "cache_mode" => self.cache_mode = value.parse()?,
            other => {
                return Err(Error::Config {
                    field: "config",
                    reason: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_key_values(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                field: "config",
                reason: format!("line {} is not key=value: {line:?}", n + 1),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "chunk_size={}\ntop_k={}\nphrase_token_num={}\nlayer={}\nanswer_budget={}\nprovider={}\ncache_mode={}\n",
            self.chunk_size,
            self.top_k,
            self.phrase_token_num,
            self.layer,
            self.answer_budget,
            self.provider,
            self.cache_mode
        )
    }

    pub fn validate(&self) -> Result<()> {
        for (field, value) in [
            ("chunk_size", self.chunk_size),
            ("top_k", self.top_k),
            ("phrase_token_num", self.phrase_token_num),
            ("answer_budget", self.answer_budget),
        ] {
            if value < 1 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IterationRecord {
    pub chunk_index: usize,
    pub chunk_tokens: usize,
    pub cache_tokens_before: usize,
    pub question_tokens: usize,
    pub merged_len: usize,
    /// Positions that survived top-k with a non-zero score.
    pub selected_tokens: usize,
    pub retained_ids: Vec<usize>,
    pub cache_token_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunTrace {
    pub cache_mode: CacheMode,
    pub document_tokens: usize,
    pub document_sentences: usize,
    pub chunk_count: usize,
    pub question_tokens: usize,
    pub iterations: Vec<IterationRecord>,
    /// Retrieval passes plus the answer pass.
    pub forward_passes: usize,
    /// Longest sequence handed to the provider in one pass.
    pub max_merged_len: usize,
    pub total_tokens_fed: usize,
    pub answer_pass_len: usize,
    pub final_cache_tokens: usize,
    pub final_cache_ids: Vec<usize>,
    /// `max_merged_len / document_tokens`: the share of the document one pass has to hold.
    pub fed_ratio: f64,
    /// `final_cache_tokens / document_tokens`.
    pub retained_ratio: f64,
}

impl RunTrace {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub answer: String,
    pub answer_tokens: Vec<TokenId>,
    pub trace: RunTrace,
    pub cache: CacheState,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn window_error(iteration: Option<usize>, e: Error) -> Error {
    match e {
        Error::WindowExceeded { len, max_window, .. } => Error::WindowExceeded {
            iteration,
            len,
            max_window,
        },
        other => other,
    }
}

/// Sentences covering the `top_k` best-scored context tokens of one window.
///
/// Zero-score positions are dropped, so a window with no signal retains nothing.
pub fn retrieve(
    merged: &MergedInput,
    tensor: &AttentionTensor,
    config: &PipelineConfig,
) -> Result<(Vec<SentenceRecord>, usize)> {
    if tensor.n_keys() != merged.len() {
        return Err(Error::Shape(format!(
            "attention covers {} keys, merged input has {}",
            tensor.n_keys(),
            merged.len()
        )));
    }
    if merged.context_len == 0 {
        return Ok((Vec::new(), 0));
    }
    let summed = aggregate_heads(tensor)?;
    let context = AggregatedAttention {
        matrix: summed.matrix.slice(s![.., ..merged.context_len]).to_owned(),
    };
    let scores = token_importance(&phrase_importance(&context, config.phrase_token_num)?)?;
    let mut positions = select_top_k(&scores, config.top_k);
    positions.retain(|&p| scores.scores[p] > 0.0);
    Ok((expand_to_sentences(&positions, &merged.layout)?, positions.len()))
}

struct Prepared {
    chunks: Vec<Chunk>,
    question: Vec<TokenId>,
    document_tokens: usize,
    document_sentences: usize,
}

fn prepare(
    provider: &dyn AttentionProvider,
    document: &str,
    question: &str,
    config: &PipelineConfig,
) -> Result<Prepared> {
    config.validate()?;
    let tokenizer = provider.tokenizer();
    let question = tokenizer.encode(question)?;
    if question.is_empty() {
        return Err(Error::Input("question is empty".into()));
    }
    let sentences = segment_sentences(document, tokenizer)?;
    let document_tokens = sentences.iter().map(SentenceRecord::token_len).sum();
    let document_sentences = sentences.len();
    Ok(Prepared {
        chunks: build_chunks(&sentences, config.chunk_size)?,
        question,
        document_tokens,
        document_sentences,
    })
}

/// Runs the full loop over `document` and answers `question` from the final cache.
pub fn run(
    provider: &dyn AttentionProvider,
    document: &str,
    question: &str,
    config: &PipelineConfig,
) -> Result<RunOutput> {
    let prep = prepare(provider, document, question, config)?;
    match config.cache_mode {
        CacheMode::TokenIds => run_token_ids(provider, prep, config),
        CacheMode::PastState => run_past_state(provider, prep, config),
    }
}

struct TraceBuilder {
    iterations: Vec<IterationRecord>,
    max_merged_len: usize,
    total_tokens_fed: usize,
}

impl TraceBuilder {
    fn new() -> Self {
        TraceBuilder {
            iterations: Vec::new(),
            max_merged_len: 0,
            total_tokens_fed: 0,
        }
    }

    fn record(
        &mut self,
        chunk: &Chunk,
        cache_before: usize,
        merged: &MergedInput,
        selected: usize,
        cache: &CacheState,
    ) {
        self.max_merged_len = self.max_merged_len.max(merged.len());
        self.total_tokens_fed += merged.len();
        self.iterations.push(IterationRecord {
            chunk_index: chunk.index,
            chunk_tokens: chunk.token_count,
            cache_tokens_before: cache_before,
            question_tokens: merged.question_range.len(),
            merged_len: merged.len(),
            selected_tokens: selected,
            retained_ids: cache.ids(),
            cache_token_total: cache.token_total(),
        });
    }

    fn finish(mut self, prep: &Prepared, mode: CacheMode, answer_pass_len: usize, cache: &CacheState) -> RunTrace {
        self.max_merged_len = self.max_merged_len.max(answer_pass_len);
        self.total_tokens_fed += answer_pass_len;
        RunTrace {
            cache_mode: mode,
            document_tokens: prep.document_tokens,
            document_sentences: prep.document_sentences,
            chunk_count: prep.chunks.len(),
            question_tokens: prep.question.len(),
            forward_passes: self.iterations.len() + 1,
            iterations: self.iterations,
            max_merged_len: self.max_merged_len,
            total_tokens_fed: self.total_tokens_fed,
            answer_pass_len,
            final_cache_tokens: cache.token_total(),
            final_cache_ids: cache.ids(),
            fed_ratio: ratio(self.max_merged_len, prep.document_tokens),
            retained_ratio: ratio(cache.token_total(), prep.document_tokens),
        }
    }
}

fn run_token_ids(provider: &dyn AttentionProvider, prep: Prepared, config: &PipelineConfig) -> Result<RunOutput> {
    let max_window = provider.info().max_window;
    let mut cache = CacheState::new();
    let mut trace = TraceBuilder::new();

    for (i, chunk) in prep.chunks.iter().enumerate() {
        let merged = cache::merge(&cache, chunk, &prep.question)?;
        if merged.len() > max_window {
            return Err(Error::WindowExceeded {
                iteration: Some(i),
                len: merged.len(),
                max_window,
            });
        }
        let request = ProviderRequest::attention(merged.tokens.clone(), config.layer, merged.question_range.clone())
            .with_session(i as u64);
        let tensor = provider.get_attention(&request).map_err(|e| window_error(Some(i), e))?;
        let (retained, selected) = retrieve(&merged, &tensor, config)?;
        let before = cache.token_total();
        cache = cache::update(&cache, &retained)?;
        trace.record(chunk, before, &merged, selected, &cache);
    }

    let final_input = cache::merge(&cache, &Chunk::empty(prep.chunks.len()), &prep.question)?;
    let answer_tokens = generate_tokens(provider, &final_input.tokens, config)?;
    let answer = provider.tokenizer().decode(&answer_tokens)?;
    let trace = trace.finish(&prep, CacheMode::TokenIds, final_input.len(), &cache);
    Ok(RunOutput {
        answer,
        answer_tokens,
        trace,
        cache,
    })
}

fn generate_tokens(
    provider: &dyn AttentionProvider,
    tokens: &[TokenId],
    config: &PipelineConfig,
) -> Result<Vec<TokenId>> {
    let max_window = provider.info().max_window;
    if tokens.len() > max_window {
        return Err(Error::WindowExceeded {
            iteration: None,
            len: tokens.len(),
            max_window,
        });
    }
    provider.generate(&ProviderRequest::generate(tokens.to_vec(), config.answer_budget))
}

/// Greedy answer conditioned on `cache ⧺ question` only.
pub fn answer_from_cache(
    provider: &dyn AttentionProvider,
    cache: &CacheState,
    question: &str,
    config: &PipelineConfig,
) -> Result<String> {
    config.validate()?;
    let question = provider.tokenizer().encode(question)?;
    let merged = cache::merge(cache, &Chunk::empty(0), &question)?;
    let tokens = generate_tokens(provider, &merged.tokens, config)?;
    provider.tokenizer().decode(&tokens)
}

fn run_past_state(provider: &dyn AttentionProvider, prep: Prepared, config: &PipelineConfig) -> Result<RunOutput> {
    let stateful = require_past_state(provider)?;
    let max_window = provider.info().max_window;
    let mut cache = CacheState::new();
    // keys/values of each cached sentence, frozen at the pass that first read it
    let mut states: BTreeMap<usize, PastState> = BTreeMap::new();
    let mut trace = TraceBuilder::new();

    let gather = |cache: &CacheState, states: &BTreeMap<usize, PastState>| -> Result<PastState> {
        let mut past = stateful.empty_state();
        for s in cache.sentences() {
            past.append(&states[&s.id])?;
        }
        Ok(past)
    };

    for (i, chunk) in prep.chunks.iter().enumerate() {
        let merged = cache::merge(&cache, chunk, &prep.question)?;
        if merged.len() > max_window {
            return Err(Error::WindowExceeded {
                iteration: Some(i),
                len: merged.len(),
                max_window,
            });
        }
        let past = gather(&cache, &states)?;
        let cached = past.len();
        let (tensor, fresh) = stateful
            .attention_with_past(
                &past,
                &merged.tokens[cached..],
                config.layer,
                merged.question_range.clone(),
            )
            .map_err(|e| window_error(Some(i), e))?;
        let (retained, selected) = retrieve(&merged, &tensor, config)?;

        let mut next_states = BTreeMap::new();
        for slot in 0..merged.layout.len() {
            let id = merged.layout.sentence(slot).id;
            if !retained.iter().any(|s| s.id == id) {
                continue;
            }
            let state = match merged.layout.origin(slot) {
                Origin::Cache => states.remove(&id).expect("cached sentence has state"),
                Origin::Chunk => {
                    let span = merged.layout.span(slot);
                    fresh.slice(span.start - cached..span.end - cached)
                }
            };
            next_states.insert(id, state);
        }
        states = next_states;

        let before = cache.token_total();
        cache = cache::update(&cache, &retained)?;
        trace.record(chunk, before, &merged, selected, &cache);
    }

    let past = gather(&cache, &states)?;
    let answer_pass_len = past.len() + prep.question.len();
    if answer_pass_len > max_window {
        return Err(Error::WindowExceeded {
            iteration: None,
            len: answer_pass_len,
            max_window,
        });
    }
    let answer_tokens = stateful.generate_with_past(&past, &prep.question, config.answer_budget)?;
    let answer = provider.tokenizer().decode(&answer_tokens)?;
    let trace = trace.finish(&prep, CacheMode::PastState, answer_pass_len, &cache);
    Ok(RunOutput {
        answer,
        answer_tokens,
        trace,
        cache,
    })
}
