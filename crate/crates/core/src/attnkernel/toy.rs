//! A small pre-norm decoder with seeded weights.
//!
//! Token embeddings plus sinusoidal positions, `layers` blocks of causal
//! multi-head self-attention and a GELU feed-forward, tied output projection.
//! Weights are drawn from a seeded uniform distribution, so a spec fully
//! determines the model bit-for-bit.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{attention_scores, AttentionTensor};
use crate::error::{Error, Result};
use crate::tokenizer::{ByteTokenizer, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Width of the feed-forward hidden layer.
    pub hidden_dim: usize,
    pub seed: u64,
    /// Largest sequence the model accepts per forward pass.
    pub max_window: usize,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        ToyModelSpec {
            vocab_size: ByteTokenizer::VOCAB_SIZE,
            layers: 2,
            heads: 2,
            head_dim: 16,
            hidden_dim: 64,
            seed: 0,
            max_window: 32_768,
        }
    }
}

impl ToyModelSpec {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("layers", self.layers),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("max_window", self.max_window),
        ];
        for (name, value) in fields {
            if value < 1 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Per-layer keys and values of already-processed positions.
///
/// Rows are positions, columns the concatenated heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PastState {
    pub keys: Vec<Array2<f64>>,
    pub values: Vec<Array2<f64>>,
}

impl PastState {
    pub fn empty(layers: usize, width: usize) -> Self {
        PastState {
            keys: vec![Array2::zeros((0, width)); layers],
            values: vec![Array2::zeros((0, width)); layers],
        }
    }

    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self, range: Range<usize>) -> PastState {
        PastState {
            keys: self
                .keys
                .iter()
                .map(|k| k.slice(s![range.clone(), ..]).to_owned())
                .collect(),
            values: self
                .values
                .iter()
                .map(|v| v.slice(s![range.clone(), ..]).to_owned())
                .collect(),
        }
    }

    pub fn append(&mut self, other: &PastState) -> Result<()> {
        if other.keys.len() != self.keys.len() {
            return Err(Error::Shape(format!(
                "past state has {} layers, appended state has {}",
                self.keys.len(),
                other.keys.len()
            )));
        }
        for (dst, src) in self.keys.iter_mut().zip(&other.keys) {
            dst.append(Axis(0), src.view())
                .map_err(|e| Error::Shape(e.to_string()))?;
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.append(Axis(0), src.view())
                .map_err(|e| Error::Shape(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    w1: Array2<f64>,
    w2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ToyModelSpec,
    embed: Array2<f64>,
    layers: Vec<LayerWeights>,
}

/// What a forward pass should compute.
#[derive(Debug, Clone)]
pub struct ForwardRequest<'a> {
    /// New tokens, placed after `past` if one is given.
    pub tokens: &'a [TokenId],
    pub past: Option<&'a PastState>,
    pub want_layers: &'a [usize],
    /// Absolute positions of the query rows to report; must lie among the new tokens.
    pub query_range: Range<usize>,
    pub need_logits: bool,
    pub need_state: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One tensor per requested layer, in the order requested.
    pub attentions: Vec<AttentionTensor>,
    /// Next-token logits at the final position.
    pub logits: Option<Vec<f64>>,
    /// Keys and values of the new tokens only.
    pub state: Option<PastState>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

fn layer_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d = spec.model_dim();
        let proj = (3.0 / d as f64).sqrt();
        let embed = uniform(&mut rng, spec.vocab_size, d, 1.0);
        let layers = (0..spec.layers)
            .map(|_| LayerWeights {
                // Q/K get extra gain so attention is peaked rather than flat.
                wq: uniform(&mut rng, d, d, 2.0 * proj),
                wk: uniform(&mut rng, d, d, 2.0 * proj),
                wv: uniform(&mut rng, d, d, proj),
                wo: uniform(&mut rng, d, d, proj),
                w1: uniform(&mut rng, d, spec.hidden_dim, proj),
                w2: uniform(&mut rng, spec.hidden_dim, d, (3.0 / spec.hidden_dim as f64).sqrt()),
            })
            .collect();
        Ok(ToyModel { spec, embed, layers })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn embed_tokens(&self, tokens: &[TokenId], first_pos: usize) -> Result<Array2<f64>> {
        let d = self.spec.model_dim();
        let mut x = Array2::zeros((tokens.len(), d));
        for (r, &t) in tokens.iter().enumerate() {
            let t = t as usize;
            if t >= self.spec.vocab_size {
                return Err(Error::Input(format!(
                    "token {t} outside vocabulary of {}",
                    self.spec.vocab_size
                )));
            }
            let pos = (first_pos + r) as f64;
            let mut row = x.row_mut(r);
            row.assign(&self.embed.row(t));
            for i in 0..d {
                let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
                row[i] += if i % 2 == 0 {
                    (pos * freq).sin()
                } else {
                    (pos * freq).cos()
                };
            }
        }
        Ok(x)
    }

    pub fn forward(&self, req: &ForwardRequest<'_>) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let d = spec.model_dim();
        let dh = spec.head_dim;
        let past_len = req.past.map_or(0, PastState::len);
        let n = req.tokens.len();
        let total = past_len + n;

        if n == 0 {
            return Err(Error::Input("forward pass needs at least one new token".into()));
        }
        if total > spec.max_window {
            return Err(Error::WindowExceeded {
                iteration: None,
                len: total,
                max_window: spec.max_window,
            });
        }
        if let Some(past) = req.past {
            if past.keys.len() != spec.layers || past.keys.iter().any(|k| k.ncols() != d) {
                return Err(Error::Shape("past state does not match the model".into()));
            }
        }
        let q_range = &req.query_range;
        if !req.want_layers.is_empty() && (q_range.start < past_len || q_range.end > total || q_range.is_empty()) {
            return Err(Error::Input(format!(
                "query range {q_range:?} must be non-empty and within new positions {past_len}..{total}"
            )));
        }
        if let Some(&l) = req.want_layers.iter().find(|&&l| l >= spec.layers) {
            return Err(Error::Input(format!("layer {l} outside 0..{}", spec.layers)));
        }

        let full_depth = req.need_logits || req.need_state;
        let last_layer = if full_depth {
            spec.layers - 1
        } else {
            match req.want_layers.iter().max() {
                Some(&l) => l,
                None => {
                    return Ok(ForwardOutput {
                        attentions: Vec::new(),
                        logits: None,
                        state: None,
                    })
                }
            }
        };

        let mut x = self.embed_tokens(req.tokens, past_len)?;
        let mut captured: Vec<Option<AttentionTensor>> = vec![None; req.want_layers.len()];
        let mut state = req.need_state.then(|| PastState::empty(spec.layers, d));
        let local_q = q_range.start.saturating_sub(past_len)..q_range.end.saturating_sub(past_len);

        for (l, w) in self.layers.iter().enumerate().take(last_layer + 1) {
            let wanted: Vec<usize> = (0..req.want_layers.len())
                .filter(|&i| req.want_layers[i] == l)
                .collect();
            // Past the last layer anyone needs, only the reported rows matter.
            let rows_only = !full_depth && l == last_layer;

            let h = layer_norm(&x);
            let k_new = h.dot(&w.wk);
            let v_new = h.dot(&w.wv);
            let (k_all, v_all) = match req.past {
                Some(p) if past_len > 0 => (
                    concatenate![Axis(0), p.keys[l], k_new],
                    concatenate![Axis(0), p.values[l], v_new],
                ),
                _ => (k_new.clone(), v_new.clone()),
            };
            if let Some(st) = state.as_mut() {
                st.keys[l] = k_new;
                st.values[l] = v_new;
            }

            let (q_rows, q_offset) = if rows_only {
                (h.slice(s![local_q.clone(), ..]).dot(&w.wq), q_range.start)
            } else {
                (h.dot(&w.wq), past_len)
            };

            let mut heads = Vec::with_capacity(spec.heads);
            let mut mixed = Array2::zeros((q_rows.nrows(), d));
            for head in 0..spec.heads {
                let cols = head * dh..(head + 1) * dh;
                let scores = attention_scores(
                    q_rows.slice(s![.., cols.clone()]),
                    k_all.slice(s![.., cols.clone()]),
                    Some(q_offset),
                )?;
                if !rows_only {
                    mixed
                        .slice_mut(s![.., cols.clone()])
                        .assign(&scores.dot(&v_all.slice(s![.., cols])));
                }
                if !wanted.is_empty() {
                    let rows = if rows_only {
                        scores
                    } else {
                        scores.slice(s![local_q.clone(), ..]).to_owned()
                    };
                    heads.push(rows);
                }
            }
            if !wanted.is_empty() {
                let tensor = AttentionTensor::new(l, heads, q_range.start)?;
                for i in wanted {
                    captured[i] = Some(tensor.clone());
                }
            }
            if rows_only {
                break;
            }

            x = x + mixed.dot(&w.wo);
            let ff = layer_norm(&x).dot(&w.w1).mapv(gelu).dot(&w.w2);
            x = x + ff;
        }

        let logits = if req.need_logits {
            let last = layer_norm(&x.slice(s![n - 1..n, ..]).to_owned());
            let row: Array1<f64> = last.row(0).dot(&self.embed.t());
            Some(row.to_vec())
        } else {
            None
        };

        Ok(ForwardOutput {
            attentions: captured
                .into_iter()
                .map(|t| t.expect("every wanted layer ran"))
                .collect(),
            logits,
            state,
        })
    }

    /// Attention of `layer` for `query_range` over `tokens` (no past state).
    pub fn attention(&self, tokens: &[TokenId], layer: usize, query_range: Range<usize>) -> Result<AttentionTensor> {
        let out = self.forward(&ForwardRequest {
            tokens,
            past: None,
            want_layers: &[layer],
            query_range,
            need_logits: false,
            need_state: false,
        })?;
        Ok(out.attentions.into_iter().next().expect("one layer requested"))
    }

    /// Greedy decoding of up to `max_new_tokens` after `past` + `tokens`.
    pub fn generate(
        &self,
        past: Option<&PastState>,
        tokens: &[TokenId],
        max_new_tokens: usize,
    ) -> Result<Vec<TokenId>> {
        let d = self.spec.model_dim();
        let mut cache = past.cloned().unwrap_or_else(|| PastState::empty(self.spec.layers, d));
        let mut next_input: Vec<TokenId> = tokens.to_vec();
        let mut out = Vec::with_capacity(max_new_tokens);
        while out.len() < max_new_tokens {
            if cache.len() + next_input.len() > self.spec.max_window && !out.is_empty() {
                break;
            }
            let step = self.forward(&ForwardRequest {
                tokens: &next_input,
                past: Some(&cache),
                want_layers: &[],
                query_range: 0..0,
                need_logits: true,
                need_state: true,
            })?;
            cache.append(step.state.as_ref().expect("state requested"))?;
            let logits = step.logits.expect("logits requested");
            let next = argmax(&logits) as TokenId;
            out.push(next);
            next_input = vec![next];
        }
        Ok(out)
    }
}

/// Index of the largest value; the smallest index wins ties.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One-shot forward pass: attention tensors for `want_layers` restricted to
/// `query_range`, plus next-token logits at the last position.
pub fn toy_forward(
    spec: &ToyModelSpec,
    tokens: &[TokenId],
    want_layers: &[usize],
    query_range: Range<usize>,
) -> Result<(Vec<AttentionTensor>, Vec<f64>)> {
    let model = ToyModel::new(spec.clone())?;
    let out = model.forward(&ForwardRequest {
        tokens,
        past: None,
        want_layers,
        query_range,
        need_logits: true,
        need_state: false,
    })?;
    Ok((out.attentions, out.logits.expect("logits requested")))
}
