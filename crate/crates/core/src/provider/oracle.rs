//! A synthetic provider whose attention concentrates on known token spans.
//!
//! Every visible key gets `background_mass` (optionally jittered); every key
//! inside an occurrence of a target span additionally gets
//! `layer_profile[layer] * mass`. Rows are then normalized. Retrieval ground
//! truth is therefore exact, and the profile controls which layers "know"
//! where the answer is.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use std::ops::Range;

use super::{check_window, AttentionProvider, LayerSel, PastStateProvider, ProviderInfo, ProviderRequest, RequestKind};
use crate::attnkernel::{AttentionTensor, PastState};
use crate::error::{Error, Result};
use crate::tokenizer::{ByteTokenizer, TokenId, Tokenizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpan {
    pub tokens: Vec<TokenId>,
    /// Extra weight per target key, before the layer multiplier.
    pub mass: f64,
}

impl TargetSpan {
    pub fn from_text(text: &str, tokenizer: &dyn Tokenizer, mass: f64) -> Result<Self> {
        let tokens = tokenizer.encode(text)?;
        if tokens.is_empty() {
            return Err(Error::config("target", "target span must contain at least one token"));
        }
        Ok(TargetSpan { tokens, mass })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedOracleSpec {
    pub targets: Vec<TargetSpan>,
    pub background_mass: f64,
    /// Relative jitter on the background: each key gets
    /// `background_mass * (1 + noise * u)` with `u` in `[0, 1)`.
    pub noise: f64,
    /// One multiplier per layer; its length is the layer count.
    pub layer_profile: Vec<f64>,
    pub heads: usize,
    pub seed: u64,
    /// Generation echoes the first target span found in the input.
    pub echo: bool,
    pub max_window: usize,
}

impl Default for PlantedOracleSpec {
    fn default() -> Self {
        PlantedOracleSpec {
            targets: Vec::new(),
            background_mass: 0.01,
            noise: 0.0,
            layer_profile: vec![0.25, 0.5, 0.75, 1.0],
            heads: 2,
            seed: 0,
            echo: true,
            max_window: 1 << 20,
        }
    }
}

impl PlantedOracleSpec {
    /// Profile with multiplier 1 at `peak` falling off as `exp(-(l - peak)^2)`.
    pub fn peaked_profile(layers: usize, peak: usize) -> Vec<f64> {
        (0..layers)
            .map(|l| {
                let d = l as f64 - peak as f64;
                (-d * d).exp()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_profile.is_empty() {
            return Err(Error::config("layer_profile", "needs at least one layer"));
        }
        if self.layer_profile.iter().any(|&p| p.is_nan() || p < 0.0) {
            return Err(Error::config("layer_profile", "multipliers must be non-negative"));
        }
        if self.background_mass.is_nan() || self.background_mass <= 0.0 {
            return Err(Error::config("background_mass", "must be positive"));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::config("noise", "must be non-negative"));
        }
        if self.heads < 1 {
            return Err(Error::config("heads", "must be at least 1"));
        }
        if self
            .targets
            .iter()
            .any(|t| t.tokens.is_empty() || t.mass.is_nan() || t.mass < 0.0)
        {
            return Err(Error::config("targets", "spans need tokens and non-negative mass"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PlantedOracle {
    spec: PlantedOracleSpec,
    tokenizer: ByteTokenizer,
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(parts: &[u64]) -> f64 {
    let h = parts.iter().fold(0u64, |acc, &p| mix(acc ^ p));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn find_all(haystack: &[TokenId], needle: &[TokenId]) -> Vec<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return Vec::new();
    }
    haystack
        .windows(needle.len())
        .enumerate()
        .filter(|(_, w)| *w == needle)
        .map(|(i, _)| i)
        .collect()
}

impl PlantedOracle {
    pub fn new(spec: PlantedOracleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(PlantedOracle {
            spec,
            tokenizer: ByteTokenizer,
        })
    }

    pub fn spec(&self) -> &PlantedOracleSpec {
        &self.spec
    }

    /// Per-key target weight for `tokens[..context_end]`, before the layer multiplier.
    fn target_weights(&self, tokens: &[TokenId], context_end: usize) -> Vec<f64> {
        let mut w = vec![0.0; tokens.len()];
        let context = &tokens[..context_end];
        for target in &self.spec.targets {
            for start in find_all(context, &target.tokens) {
                for v in &mut w[start..start + target.tokens.len()] {
                    *v += target.mass;
                }
            }
        }
        w
    }
}

impl AttentionProvider for PlantedOracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn info(&self) -> ProviderInfo {
        ProviderInfo {
            vocab_size: ByteTokenizer::VOCAB_SIZE,
            layers: self.spec.layer_profile.len(),
            max_window: self.spec.max_window,
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn get_attention(&self, request: &ProviderRequest) -> Result<AttentionTensor> {
        let info = self.info();
        request.validate(RequestKind::Attention, &info)?;
        let layer = request.layer.resolve(info.layers)?;
        let tokens = &request.tokens;
        let q = request.query_range.clone();
        let m = tokens.len();
        let multiplier = self.spec.layer_profile[layer];
        let targets = self.target_weights(tokens, q.start);

        let heads = (0..self.spec.heads)
            .map(|head| {
                let weights: Vec<f64> = (0..m)
                    .map(|j| {
                        let jitter = if self.spec.noise > 0.0 {
                            self.spec.noise
                                * unit(&[self.spec.seed, layer as u64, head as u64, j as u64, tokens[j] as u64])
                        } else {
                            0.0
                        };
                        self.spec.background_mass * (1.0 + jitter) + multiplier * targets[j]
                    })
                    .collect();
                let mut mat = Array2::zeros((q.len(), m));
                for (r, mut row) in mat.rows_mut().into_iter().enumerate() {
                    let visible = q.start + r + 1;
                    let total: f64 = weights[..visible].iter().sum();
                    for (dst, &w) in row.iter_mut().zip(&weights[..visible]) {
                        *dst = w / total;
                    }
                }
                mat
            })
            .collect();
        AttentionTensor::new(layer, heads, q.start)
    }

    fn generate(&self, request: &ProviderRequest) -> Result<Vec<TokenId>> {
        request.validate(RequestKind::Generate, &self.info())?;
        if !self.spec.echo {
            return Ok(Vec::new());
        }
        let found = self
            .spec
            .targets
            .iter()
            .filter_map(|t| find_all(&request.tokens, &t.tokens).first().map(|&at| (at, t)))
            .min_by_key(|(at, _)| *at);
        Ok(match found {
            Some((_, t)) => t.tokens.iter().copied().take(request.max_new_tokens).collect(),
            None => Vec::new(),
        })
    }

    fn past_state(&self) -> Option<&dyn PastStateProvider> {
        Some(self)
    }
}

/// The oracle has no hidden state: its "past" is the token IDs it has read,
/// stored as a single one-column layer.
fn state_of(tokens: &[TokenId]) -> PastState {
    let column = Array2::from_shape_fn((tokens.len(), 1), |(i, _)| tokens[i] as f64);
    PastState {
        keys: vec![column.clone()],
        values: vec![column],
    }
}

fn tokens_of(past: &PastState) -> Result<Vec<TokenId>> {
    match past.keys.as_slice() {
        [column] if column.ncols() == 1 => Ok(column.iter().map(|&v| v as TokenId).collect()),
        _ => Err(Error::Shape("oracle past state must be one single-column layer".into())),
    }
}

impl PastStateProvider for PlantedOracle {
    fn empty_state(&self) -> PastState {
        PastState::empty(1, 1)
    }

    fn attention_with_past(
        &self,
        past: &PastState,
        tokens: &[TokenId],
        layer: LayerSel,
        query_range: Range<usize>,
    ) -> Result<(AttentionTensor, PastState)> {
        let mut all = tokens_of(past)?;
        all.extend_from_slice(tokens);
        let tensor = self.get_attention(&ProviderRequest::attention(all, layer, query_range))?;
        Ok((tensor, state_of(tokens)))
    }

    fn generate_with_past(&self, past: &PastState, tokens: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>> {
        let mut all = tokens_of(past)?;
        all.extend_from_slice(tokens);
        check_window(all.len(), self.spec.max_window)?;
        self.generate(&ProviderRequest::generate(all, max_new_tokens))
    }
}
