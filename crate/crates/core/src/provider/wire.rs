//! Newline-delimited JSON protocol between the engine and an external
//! attention adapter.
//!
//! The adapter speaks first with a handshake line
//! `{"vocab_size":…,"layers":…,"max_window":…}`. Each request is one line:
//!
//! ```text
//! {"id":1,"kind":"attention","tokens":[…],"text":null,"layer":"last","query_start":5,"query_len":3,"max_new_tokens":0}
//! ```
//!
//! and is answered by exactly one line echoing its `id`. Attention replies
//! carry `heads`, `rows`, `cols` and `data_b64`, the base64 of little-endian
//! `f32` values in head-major, row-major order. Generate and tokenize replies
//! carry `tokens`, detokenize replies `text`. Failures are `{"id":…,"error":…}`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_window, AttentionProvider, LayerSel, ProviderInfo, ProviderRequest, RequestKind};
use crate::attnkernel::AttentionTensor;
use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireKind {
    Attention,
    Generate,
    Tokenize,
    Detokenize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub id: u64,
    pub kind: WireKind,
    pub tokens: Option<Vec<TokenId>>,
    pub text: Option<String>,
    pub layer: LayerSel,
    pub query_start: usize,
    pub query_len: usize,
    pub max_new_tokens: usize,
}

impl WireRequest {
    fn new(id: u64, kind: WireKind) -> Self {
        WireRequest {
            id,
            kind,
            tokens: None,
            text: None,
            layer: LayerSel::Last,
            query_start: 0,
            query_len: 0,
            max_new_tokens: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cols: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Handshake {
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default)]
    pub layers: usize,
    #[serde(default)]
    pub max_window: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Packs head matrices as base64 little-endian `f32`, head-major then row-major.
pub fn encode_heads(heads: &[Array2<f64>]) -> String {
    let mut bytes = Vec::with_capacity(heads.iter().map(|h| h.len() * 4).sum());
    for head in heads {
        for &v in head.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    B64.encode(bytes)
}

pub fn decode_heads(data_b64: &str, heads: usize, rows: usize, cols: usize) -> Result<Vec<Array2<f64>>> {
    if heads == 0 || rows == 0 || cols == 0 {
        return Err(Error::Protocol(format!(
            "empty attention payload {heads}x{rows}x{cols}"
        )));
    }
    let bytes = B64
        .decode(data_b64)
        .map_err(|e| Error::Protocol(format!("bad base64 payload: {e}")))?;
    let expected = heads * rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Protocol(format!(
            "payload holds {} bytes, {heads}x{rows}x{cols} floats need {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(values
        .chunks_exact(rows * cols)
        .map(|block| Array2::from_shape_vec((rows, cols), block.to_vec()).expect("length checked"))
        .collect())
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

impl Connection {
    fn read_line(&mut self) -> Result<String> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Protocol("adapter closed the connection".into()));
        }
        Ok(line)
    }
}

/// Client side of the protocol. Requests on one connection are serialized.
pub struct ProtocolClient {
    conn: Mutex<Connection>,
    info: ProviderInfo,
    child: Option<Child>,
}

impl std::fmt::Debug for ProtocolClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProtocolClient")
            .field("info", &self.info)
            .finish_non_exhaustive()
    }
}

impl ProtocolClient {
    /// Runs `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Protocol(format!("cannot launch adapter {command:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let mut client = Self::from_streams(BufReader::new(stdout), stdin)?;
        client.child = Some(child);
        Ok(client)
    }

    /// Wraps an established byte stream pair and reads the handshake from it.
    pub fn from_streams(reader: impl BufRead + Send + 'static, writer: impl Write + Send + 'static) -> Result<Self> {
        let mut conn = Connection {
            reader: Box::new(reader),
            writer: Box::new(writer),
            next_id: 1,
        };
        let line = conn.read_line()?;
        let hs: Handshake = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("bad handshake {:?}: {e}", line.trim_end())))?;
        if let Some(err) = hs.error {
            return Err(Error::Protocol(format!("adapter failed to start: {err}")));
        }
        if hs.layers == 0 || hs.vocab_size == 0 || hs.max_window == 0 {
            return Err(Error::Protocol(format!("handshake advertises an empty model: {hs:?}")));
        }
        Ok(ProtocolClient {
            conn: Mutex::new(conn),
            info: ProviderInfo {
                vocab_size: hs.vocab_size,
                layers: hs.layers,
                max_window: hs.max_window,
            },
            child: None,
        })
    }

    fn call(&self, build: impl FnOnce(u64) -> WireRequest) -> Result<WireResponse> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::Protocol("connection poisoned".into()))?;
        let id = conn.next_id;
        conn.next_id += 1;
        let request = build(id);
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        conn.writer.write_all(line.as_bytes())?;
        conn.writer.flush()?;

        let reply = conn.read_line()?;
        let resp: WireResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Protocol(format!("bad reply to request {id}: {e}")))?;
        if resp.id != id {
            return Err(Error::Protocol(format!(
                "reply id {} does not match request {id}",
                resp.id
            )));
        }
        if let Some(err) = resp.error {
            return Err(Error::Protocol(format!("adapter error on request {id}: {err}")));
        }
        Ok(resp)
    }
}

impl Drop for ProtocolClient {
    fn drop(&mut self) {
        if let Some(mut child) = self.child.take() {
            if let Ok(mut conn) = self.conn.lock() {
                // closing stdin lets a well-behaved adapter exit on its own
                conn.writer = Box::new(std::io::sink());
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl Tokenizer for ProtocolClient {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        let resp = self.call(|id| WireRequest {
            text: Some(text.to_string()),
            ..WireRequest::new(id, WireKind::Tokenize)
        })?;
        resp.tokens
            .ok_or_else(|| Error::Protocol("tokenize reply without tokens".into()))
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String> {
        let resp = self.call(|id| WireRequest {
            tokens: Some(tokens.to_vec()),
            ..WireRequest::new(id, WireKind::Detokenize)
        })?;
        resp.text
            .ok_or_else(|| Error::Protocol("detokenize reply without text".into()))
    }

    fn vocab_size(&self) -> usize {
        self.info.vocab_size
    }
}

impl AttentionProvider for ProtocolClient {
    fn name(&self) -> &str {
        "proto"
    }

    fn info(&self) -> ProviderInfo {
        self.info
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self
    }

    fn get_attention(&self, request: &ProviderRequest) -> Result<AttentionTensor> {
        request.validate(RequestKind::Attention, &self.info)?;
        let layer = request.layer.resolve(self.info.layers)?;
        let q = request.query_range.clone();
        log::debug!(
            "session {}: attention over {} tokens",
            request.session,
            request.tokens.len()
        );
        let resp = self.call(|id| WireRequest {
            tokens: Some(request.tokens.clone()),
            layer: request.layer,
            query_start: q.start,
            query_len: q.len(),
            ..WireRequest::new(id, WireKind::Attention)
        })?;
        let (Some(heads), Some(rows), Some(cols), Some(data)) = (resp.heads, resp.rows, resp.cols, resp.data_b64)
        else {
            return Err(Error::Protocol("attention reply lacks heads/rows/cols/data_b64".into()));
        };
        if rows != q.len() || cols != request.tokens.len() || heads == 0 {
            return Err(Error::Protocol(format!(
                "attention reply is {heads}x{rows}x{cols}, expected Hx{}x{}",
                q.len(),
                request.tokens.len()
            )));
        }
        AttentionTensor::new(layer, decode_heads(&data, heads, rows, cols)?, q.start)
    }

    fn generate(&self, request: &ProviderRequest) -> Result<Vec<TokenId>> {
        request.validate(RequestKind::Generate, &self.info)?;
        log::debug!(
            "session {}: generate after {} tokens",
            request.session,
            request.tokens.len()
        );
        let resp = self.call(|id| WireRequest {
            tokens: Some(request.tokens.clone()),
            max_new_tokens: request.max_new_tokens,
            ..WireRequest::new(id, WireKind::Generate)
        })?;
        let mut tokens = resp
            .tokens
            .ok_or_else(|| Error::Protocol("generate reply without tokens".into()))?;
        tokens.truncate(request.max_new_tokens);
        Ok(tokens)
    }
}

fn answer(provider: &dyn AttentionProvider, req: WireRequest) -> Result<WireResponse> {
    let id = req.id;
    let info = provider.info();
    let tokens = || {
        req.tokens
            .clone()
            .ok_or_else(|| Error::Protocol("request needs tokens".into()))
    };
    Ok(match req.kind {
        WireKind::Tokenize => {
            let text = req
                .text
                .as_deref()
                .ok_or_else(|| Error::Protocol("tokenize needs text".into()))?;
            WireResponse {
                id,
                tokens: Some(provider.tokenizer().encode(text)?),
                ..Default::default()
            }
        }
        WireKind::Detokenize => WireResponse {
            id,
            text: Some(provider.tokenizer().decode(&tokens()?)?),
            ..Default::default()
        },
        WireKind::Generate => {
            let tokens = tokens()?;
            check_window(tokens.len(), info.max_window)?;
            let out = provider.generate(&ProviderRequest::generate(tokens, req.max_new_tokens))?;
            WireResponse {
                id,
                tokens: Some(out),
                ..Default::default()
            }
        }
        WireKind::Attention => {
            let range = req.query_start..req.query_start + req.query_len;
            let t = provider.get_attention(&ProviderRequest::attention(tokens()?, req.layer, range))?;
            WireResponse {
                id,
                heads: Some(t.num_heads()),
                rows: Some(t.n_queries()),
                cols: Some(t.n_keys()),
                data_b64: Some(encode_heads(&t.heads)),
                ..Default::default()
            }
        }
    })
}

/// Serves `provider` over the protocol until `reader` reaches end of input.
///
/// Per-request failures become error replies; the loop only stops on I/O
/// errors or EOF.
pub fn serve(provider: &dyn AttentionProvider, reader: impl BufRead, mut writer: impl Write) -> Result<()> {
    let info = provider.info();
    let hs = Handshake {
        vocab_size: info.vocab_size,
        layers: info.layers,
        max_window: info.max_window,
        error: None,
    };
    writeln!(writer, "{}", serde_json::to_string(&hs)?)?;
    writer.flush()?;

    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => {
                let id = req.id;
                answer(provider, req).unwrap_or_else(|e| WireResponse {
                    id,
                    error: Some(e.to_string()),
                    ..Default::default()
                })
            }
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|id| id.as_u64()))
                    .unwrap_or(0);
                WireResponse {
                    id,
                    error: Some(format!("malformed request: {e}")),
                    ..Default::default()
                }
            }
        };
        writeln!(writer, "{}", serde_json::to_string(&resp)?)?;
        writer.flush()?;
    }
    Ok(())
}
