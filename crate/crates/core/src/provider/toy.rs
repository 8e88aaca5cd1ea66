use std::ops::Range;

use super::{check_window, AttentionProvider, LayerSel, PastStateProvider, ProviderInfo, ProviderRequest, RequestKind};
use crate::attnkernel::{AttentionTensor, ForwardRequest, PastState, ToyModel, ToyModelSpec};
use crate::error::Result;
use crate::tokenizer::{ByteTokenizer, TokenId, Tokenizer};

/// The built-in seeded decoder over the byte tokenizer.
#[derive(Debug, Clone)]
pub struct ToyProvider {
    model: ToyModel,
    tokenizer: ByteTokenizer,
}

impl ToyProvider {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        Ok(ToyProvider {
            model: ToyModel::new(spec)?,
            tokenizer: ByteTokenizer,
        })
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }
}

impl AttentionProvider for ToyProvider {
    fn name(&self) -> &str {
        "toy"
    }

    fn info(&self) -> ProviderInfo {
        let spec = self.model.spec();
        ProviderInfo {
            vocab_size: spec.vocab_size,
            layers: spec.layers,
            max_window: spec.max_window,
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn get_attention(&self, request: &ProviderRequest) -> Result<AttentionTensor> {
        let info = self.info();
        request.validate(RequestKind::Attention, &info)?;
        let layer = request.layer.resolve(info.layers)?;
        self.model
            .attention(&request.tokens, layer, request.query_range.clone())
    }

    fn generate(&self, request: &ProviderRequest) -> Result<Vec<TokenId>> {
        request.validate(RequestKind::Generate, &self.info())?;
        self.model.generate(None, &request.tokens, request.max_new_tokens)
    }

    fn past_state(&self) -> Option<&dyn PastStateProvider> {
        Some(self)
    }
}

impl PastStateProvider for ToyProvider {
    fn empty_state(&self) -> PastState {
        let spec = self.model.spec();
        PastState::empty(spec.layers, spec.model_dim())
    }

    fn attention_with_past(
        &self,
        past: &PastState,
        tokens: &[TokenId],
        layer: LayerSel,
        query_range: Range<usize>,
    ) -> Result<(AttentionTensor, PastState)> {
        let spec = self.model.spec();
        check_window(past.len() + tokens.len(), spec.max_window)?;
        let layer = layer.resolve(spec.layers)?;
        let out = self.model.forward(&ForwardRequest {
            tokens,
            past: Some(past),
            want_layers: &[layer],
            query_range,
            need_logits: false,
            need_state: true,
        })?;
        let state = out.state.expect("state requested");
        let tensor = out.attentions.into_iter().next().expect("one layer requested");
        Ok((tensor, state))
    }

    fn generate_with_past(&self, past: &PastState, tokens: &[TokenId], max_new_tokens: usize) -> Result<Vec<TokenId>> {
        check_window(past.len() + tokens.len(), self.model.spec().max_window)?;
        self.model.generate(Some(past), tokens, max_new_tokens)
    }
}
