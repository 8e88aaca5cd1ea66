//! The attention-provider contract and its implementations.
//!
//! A provider tokenizes text, returns one layer's attention for a block of
//! query rows, and greedily generates continuations. The pipeline only ever
//! talks to this trait, so the built-in toy decoder, the planted oracle and an
//! external model behind the wire protocol are interchangeable.

mod oracle;
mod toy;
pub mod wire;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attnkernel::{AttentionTensor, PastState};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

pub use oracle::{PlantedOracle, PlantedOracleSpec, TargetSpan};
pub use toy::ToyProvider;
pub use wire::{serve, ProtocolClient};

/// Which layer's attention to read. Layers are zero-based.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub enum LayerSel {
    #[default]
    Last,
    Index(usize),
}

impl LayerSel {
    pub fn resolve(self, layers: usize) -> Result<usize> {
        match self {
            LayerSel::Last if layers > 0 => Ok(layers - 1),
            LayerSel::Index(i) if i < layers => Ok(i),
            _ => Err(Error::Input(format!(
                "layer {self} not available in a {layers}-layer model"
            ))),
        }
    }
}

impl fmt::Display for LayerSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSel::Last => f.write_str("last"),
            LayerSel::Index(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for LayerSel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "last" => Ok(LayerSel::Last),
            n => n
                .parse()
                .map(LayerSel::Index)
                .map_err(|_| Error::config("layer", format!("expected an integer or \"last\", got {s:?}"))),
        }
    }
}

impl Serialize for LayerSel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LayerSel::Last => serializer.serialize_str("last"),
            LayerSel::Index(i) => serializer.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for LayerSel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Index(usize),
            Name(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Index(i) => Ok(LayerSel::Index(i)),
            Raw::Name(s) if s == "last" => Ok(LayerSel::Last),
            Raw::Name(s) => Err(serde::de::Error::custom(format!("unknown layer {s:?}"))),
        }
    }
}

/// What a provider advertises about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderInfo {
    pub vocab_size: usize,
    pub layers: usize,
    pub max_window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestKind {
    Attention,
    Generate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProviderRequest {
    pub kind: RequestKind,
    pub tokens: Vec<TokenId>,
    pub layer: LayerSel,
    /// Rows to report for attention requests, as absolute positions in `tokens`.
    pub query_range: Range<usize>,
    pub max_new_tokens: usize,
    /// Opaque caller-chosen tag; providers may use it for logging.
    pub session: u64,
}

impl ProviderRequest {
    pub fn attention(tokens: Vec<TokenId>, layer: LayerSel, query_range: Range<usize>) -> Self {
        ProviderRequest {
            kind: RequestKind::Attention,
            tokens,
            layer,
            query_range,
            max_new_tokens: 0,
            session: 0,
        }
    }

    pub fn generate(tokens: Vec<TokenId>, max_new_tokens: usize) -> Self {
        ProviderRequest {
            kind: RequestKind::Generate,
            tokens,
            layer: LayerSel::Last,
            query_range: 0..0,
            max_new_tokens,
            session: 0,
        }
    }

    pub fn with_session(mut self, session: u64) -> Self {
        self.session = session;
        self
    }

    /// Checks the request against its kind and the provider's window.
    pub fn validate(&self, expected: RequestKind, info: &ProviderInfo) -> Result<()> {
        if self.kind != expected {
            return Err(Error::Protocol(format!(
                "expected a {expected:?} request, got {:?}",
                self.kind
            )));
        }
        if self.tokens.is_empty() {
            return Err(Error::Input("request carries no tokens".into()));
        }
        check_window(self.tokens.len(), info.max_window)?;
        match self.kind {
            RequestKind::Attention => {
                let q = &self.query_range;
                if q.is_empty() || q.end > self.tokens.len() {
                    return Err(Error::Input(format!(
                        "query range {q:?} not within {} tokens",
                        self.tokens.len()
                    )));
                }
            }
            RequestKind::Generate => {
                if self.max_new_tokens < 1 {
                    return Err(Error::Input("max_new_tokens must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_window(len: usize, max_window: usize) -> Result<()> {
    if len > max_window {
        return Err(Error::WindowExceeded {
            iteration: None,
            len,
            max_window,
        });
    }
    Ok(())
}

pub trait AttentionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn info(&self) -> ProviderInfo;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn get_attention(&self, request: &ProviderRequest) -> Result<AttentionTensor>;

    fn generate(&self, request: &ProviderRequest) -> Result<Vec<TokenId>>;

    /// Reuse of internal key/value state, if the provider supports it.
    fn past_state(&self) -> Option<&dyn PastStateProvider> {
        None
    }
}

/// Providers that can run a forward pass on top of previously computed
/// keys and values instead of re-reading the tokens.
pub trait PastStateProvider: Send + Sync {
    fn empty_state(&self) -> PastState;

    /// Attention for `query_range` (absolute, among the new tokens) over
    /// `past ⧺ tokens`, and the state of the new tokens.
    fn attention_with_past(
        &self,
        past: &PastState,
        tokens: &[TokenId],
        layer: LayerSel,
        query_range: Range<usize>,
    ) -> Result<(AttentionTensor, PastState)>;

    fn generate_with_past(&self, past: &PastState, tokens: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>>;
}

pub fn require_past_state(provider: &dyn AttentionProvider) -> Result<&dyn PastStateProvider> {
    provider.past_state().ok_or_else(|| {
        Error::UnsupportedMode(format!(
            "provider {:?} cannot reuse past key/value state",
            provider.name()
        ))
    })
}
