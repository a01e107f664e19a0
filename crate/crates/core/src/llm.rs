//! Transport to a chat-completion endpoint, plus the fine-tuning dataset
//! exporter.
//!
//! One request shape (chat messages, first choice taken), one credential
//! (`LLMPOET_API_KEY`), retries with exponential backoff on transport
//! failures and 429/5xx, and a hard cap on concurrent in-flight requests.

use crate::grid::{render_grid, validate_terrain, VoxelGrid, DEFAULT_SPAWN_WIDTH};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// The only environment variable the crate reads credentials from.
pub const API_KEY_ENV: &str = "LLMPOET_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_name: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.user_text.is_empty() {
            return Err(ClientError::InvalidRequest("user_text must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(ClientError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Additional attempts after the first (3 means up to 4 tries total).
    pub max_retries: u32,
    /// First backoff; doubles per retry.
    pub backoff_base: Duration,
    /// Maximum concurrent in-flight requests.
    pub rate_limit: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            backoff_base: Duration::from_secs(1),
            rate_limit: 2,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("endpoint returned status {status} (after {attempts} attempts)")]
    Status { status: u16, attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { message: String, attempts: u32 },
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unusable completion payload: {0}")]
    InvalidResponse(String),
}

impl ClientError {
    pub fn attempts(&self) -> u32 {
        match self {
            ClientError::Status { attempts, .. }
            | ClientError::Transport { attempts, .. }
            | ClientError::Timeout { attempts } => *attempts,
            _ => 0,
        }
    }
}

/// Anything able to produce completions.
pub trait CompletionClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError>;
}

/// One wire round-trip, divorced from retry/limit concerns.
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<TransportReply, String>;
}

/// HTTP JSON transport speaking the chat-completions shape against a
/// configurable base URL. The API key is optional so unauthenticated local
/// endpoints work.
pub struct HttpTransport {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(base_url: &str, timeout: Duration) -> HttpTransport {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build();
        HttpTransport {
            agent: ureq::Agent::new_with_config(config),
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &CompletionRequest) -> Result<TransportReply, String> {
        let mut messages = Vec::new();
        if !request.system_text.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system_text}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user_text}));
        let payload = serde_json::json!({
            "model": request.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let url = format!("{}/chat/completions", self.base_url);
        let mut builder = self.agent.post(&url).header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            builder = builder.header("authorization", format!("Bearer {key}"));
        }
        let mut response = builder.send_json(&payload).map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(TransportReply { status, body })
    }
}

/// Scripted transport for tests: replies (or failures) are played back in
/// order, and every received request is recorded.
#[derive(Default)]
pub struct ScriptedTransport {
    script: Mutex<std::collections::VecDeque<Result<TransportReply, String>>>,
    requests: Mutex<Vec<CompletionRequest>>,
}

impl ScriptedTransport {
    pub fn new() -> ScriptedTransport {
        ScriptedTransport::default()
    }

    /// Queue a 200 reply whose first choice contains `text`.
    pub fn push_text(&self, text: &str) {
        self.push_reply(200, &chat_body(text));
    }

    pub fn push_reply(&self, status: u16, body: &str) {
        self.script
            .lock()
            .unwrap()
            .push_back(Ok(TransportReply { status, body: body.to_string() }));
    }

    pub fn push_failure(&self, message: &str) {
        self.script.lock().unwrap().push_back(Err(message.to_string()));
    }

    pub fn requests(&self) -> Vec<CompletionRequest> {
        self.requests.lock().unwrap().clone()
    }
}

/// Serialize a chat-completions body with a single choice.
pub fn chat_body(text: &str) -> String {
    serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]}).to_string()
}

impl Transport for ScriptedTransport {
    fn send(&self, request: &CompletionRequest) -> Result<TransportReply, String> {
        self.requests.lock().unwrap().push(request.clone());
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err("scripted transport exhausted".to_string()))
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(max: usize) -> Gate {
        Gate {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.gate.in_flight.lock().unwrap();
        *n -= 1;
        self.gate.freed.notify_one();
    }
}

struct RequestLog {
    path: PathBuf,
    hash_prompts: bool,
}

impl RequestLog {
    fn write(&self, request: &CompletionRequest, outcome: &Result<String, ClientError>, attempts: u32) {
        let redact = |s: &str| {
            if self.hash_prompts {
                use sha2::{Digest, Sha256};
                let digest = Sha256::digest(s.as_bytes());
                format!("sha256:{}", digest[..8].iter().map(|b| format!("{b:02x}")).collect::<String>())
            } else {
                s.to_string()
            }
        };
        let entry = serde_json::json!({
            "model": request.model_name,
            "temperature": request.temperature,
            "prompt": redact(&request.user_text),
            "outcome": match outcome {
                Ok(text) => serde_json::json!({"text": redact(text)}),
                Err(e) => serde_json::json!({"error": e.to_string()}),
            },
            "attempts": attempts,
        });
        if let Ok(mut file) = std::fs::OpenOptions::new().create(true).append(true).open(&self.path) {
            let _ = writeln!(file, "{entry}");
        }
    }
}

/// Retry/limit/logging wrapper around a [`Transport`].
pub struct Client {
    transport: Box<dyn Transport>,
    policy: RetryPolicy,
    gate: Gate,
    log: Option<RequestLog>,
}

impl Client {
    pub fn new(transport: Box<dyn Transport>, policy: RetryPolicy) -> Client {
        let gate = Gate::new(policy.rate_limit);
        Client {
            transport,
            policy,
            gate,
            log: None,
        }
    }

    pub fn with_log(mut self, path: &Path, hash_prompts: bool) -> Client {
        self.log = Some(RequestLog {
            path: path.to_path_buf(),
            hash_prompts,
        });
        self
    }

    fn attempt_loop(&self, request: &CompletionRequest) -> (Result<String, ClientError>, u32) {
        let tries = self.policy.max_retries + 1;
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = self.transport.send(request);
            match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return (parse_completion(&reply.body), attempt);
                }
                Ok(reply) if reply.status == 429 || (500..600).contains(&reply.status) => {
                    if attempt >= tries {
                        return (
                            Err(ClientError::Status {
                                status: reply.status,
                                attempts: attempt,
                            }),
                            attempt,
                        );
                    }
                }
                Ok(reply) => {
                    return (
                        Err(ClientError::Status {
                            status: reply.status,
                            attempts: attempt,
                        }),
                        attempt,
                    );
                }
                Err(message) => {
                    if attempt >= tries {
                        let err = if message.to_lowercase().contains("timeout") {
                            ClientError::Timeout { attempts: attempt }
                        } else {
                            ClientError::Transport { message, attempts: attempt }
                        };
                        return (Err(err), attempt);
                    }
                }
            }
            let backoff = self.policy.backoff_base * 2u32.saturating_pow(attempt - 1);
            if !backoff.is_zero() {
                std::thread::sleep(backoff);
            }
        }
    }
}

impl CompletionClient for Client {
    fn complete(&self, request: &CompletionRequest) -> Result<String, ClientError> {
        request.validate()?;
        let _slot = self.gate.acquire();
        let (outcome, attempts) = self.attempt_loop(request);
        if let Some(log) = &self.log {
            log.write(request, &outcome, attempts);
        }
        outcome
    }
}

/// Extract the first completion's text from a chat-completions body
/// (`choices[0].message.content`, falling back to `choices[0].text`).
pub fn parse_completion(body: &str) -> Result<String, ClientError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| ClientError::InvalidResponse(format!("body is not JSON: {e}")))?;
    let first = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::InvalidResponse("no choices in response".into()))?;
    first
        .pointer("/message/content")
        .or_else(|| first.get("text"))
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| ClientError::InvalidResponse("choice carries no text".into()))
}

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("caption {caption:?} appears with two different grids")]
    DuplicateCaption { caption: String },
    #[error("pair {index} ({caption:?}) is not simulable terrain")]
    InvalidTerrain { index: usize, caption: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct ChatMessage {
    role: String,
    content: String,
}

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    messages: Vec<ChatMessage>,
}

/// Write (caption, grid) pairs as chat-format JSONL, one example per line.
/// Returns the number of lines written. Conflicting grids under one caption
/// are refused unless `allow_dup`.
pub fn export_finetune_dataset(
    pairs: &[(String, VoxelGrid)],
    path: &Path,
    allow_dup: bool,
) -> Result<usize, ExportError> {
    let mut seen: BTreeMap<&str, String> = BTreeMap::new();
    let mut lines = Vec::with_capacity(pairs.len());
    for (index, (caption, grid)) in pairs.iter().enumerate() {
        if !validate_terrain(grid, DEFAULT_SPAWN_WIDTH).is_empty() {
            return Err(ExportError::InvalidTerrain {
                index,
                caption: caption.clone(),
            });
        }
        let rendered = render_grid(grid);
        if let Some(before) = seen.get(caption.as_str()) {
            if *before != rendered && !allow_dup {
                return Err(ExportError::DuplicateCaption {
                    caption: caption.clone(),
                });
            }
        } else {
            seen.insert(caption, rendered.clone());
        }
        let line = DatasetLine {
            messages: vec![
                ChatMessage {
                    role: "user".into(),
                    content: caption.clone(),
                },
                ChatMessage {
                    role: "assistant".into(),
                    content: rendered,
                },
            ],
        };
        lines.push(serde_json::to_string(&line).expect("dataset line serializes"));
    }
    let mut out = String::new();
    for line in &lines {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(lines.len())
}

/// Read a dataset produced by [`export_finetune_dataset`] back into pairs.
pub fn read_finetune_dataset(path: &Path) -> Result<Vec<(String, String)>, ExportError> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for line in text.lines() {
        let parsed: DatasetLine = serde_json::from_str(line)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let caption = parsed
            .messages
            .iter()
            .find(|m| m.role == "user")
            .map(|m| m.content.clone())
            .unwrap_or_default();
        let grid_text = parsed
            .messages
            .iter()
            .find(|m| m.role == "assistant")
            .map(|m| m.content.clone())
            .unwrap_or_default();
        pairs.push((caption, grid_text));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{parse_grid, Voxel};
    use std::sync::atomic::{AtomicIsize, Ordering};
    use std::sync::Arc;

    fn request() -> CompletionRequest {
        CompletionRequest {
            system_text: String::new(),
            user_text: "Create a 4*2 size environment. flat".into(),
            temperature: 0.7,
            max_tokens: 256,
            model_name: "test-model".into(),
        }
    }

    fn fast_policy() -> RetryPolicy {
        RetryPolicy {
            max_retries: 3,
            backoff_base: Duration::ZERO,
            rate_limit: 2,
        }
    }

    #[test]
    fn completion_text_is_returned() {
        let transport = ScriptedTransport::new();
        transport.push_text("HHHH");
        let client = Client::new(Box::new(transport), fast_policy());
        assert_eq!(client.complete(&request()).unwrap(), "HHHH");
    }

    #[test]
    fn rate_limited_retries_then_succeeds() {
        let transport = ScriptedTransport::new();
        transport.push_reply(429, "slow down");
        transport.push_reply(429, "slow down");
        transport.push_text("HHHH");
        let client = Client::new(Box::new(transport), fast_policy());
        assert_eq!(client.complete(&request()).unwrap(), "HHHH");
    }

    #[test]
    fn retry_exhaustion_reports_attempts() {
        let transport = ScriptedTransport::new();
        for _ in 0..4 {
            transport.push_reply(500, "boom");
        }
        let client = Client::new(Box::new(transport), fast_policy());
        let err = client.complete(&request()).unwrap_err();
        assert_eq!(err, ClientError::Status { status: 500, attempts: 4 });
    }

    #[test]
    fn transport_failures_also_retry() {
        let transport = ScriptedTransport::new();
        transport.push_failure("connection refused");
        transport.push_failure("connection refused");
        transport.push_failure("connection refused");
        transport.push_text("SSSS");
        let client = Client::new(Box::new(transport), fast_policy());
        assert_eq!(client.complete(&request()).unwrap(), "SSSS");
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let transport = ScriptedTransport::new();
        transport.push_reply(400, "bad request");
        transport.push_text("unexpected");
        let client = Client::new(Box::new(transport), fast_policy());
        let err = client.complete(&request()).unwrap_err();
        assert_eq!(err, ClientError::Status { status: 400, attempts: 1 });
    }

    #[test]
    fn empty_user_text_is_rejected() {
        let client = Client::new(Box::new(ScriptedTransport::new()), fast_policy());
        let mut req = request();
        req.user_text.clear();
        assert!(matches!(client.complete(&req), Err(ClientError::InvalidRequest(_))));
    }

    #[test]
    fn malformed_body_is_invalid_response() {
        let transport = ScriptedTransport::new();
        transport.push_reply(200, "{}");
        let client = Client::new(Box::new(transport), fast_policy());
        assert!(matches!(client.complete(&request()), Err(ClientError::InvalidResponse(_))));
    }

    /// Transport that observes its own concurrency.
    struct CountingTransport {
        current: Arc<AtomicIsize>,
        peak: Arc<AtomicIsize>,
    }

    impl Transport for CountingTransport {
        fn send(&self, _request: &CompletionRequest) -> Result<TransportReply, String> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(TransportReply { status: 200, body: chat_body("ok") })
        }
    }

    #[test]
    fn in_flight_requests_never_exceed_rate_limit() {
        let peak = Arc::new(AtomicIsize::new(0));
        let transport = Box::new(CountingTransport {
            current: Arc::new(AtomicIsize::new(0)),
            peak: Arc::clone(&peak),
        });
        let client = Arc::new(Client::new(transport, fast_policy()));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let client = Arc::clone(&client);
            handles.push(std::thread::spawn(move || {
                client.complete(&request()).unwrap();
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        let peak = peak.load(Ordering::SeqCst);
        assert!((1..=2).contains(&peak), "peak in-flight {peak}");
    }

    fn flat_grid(w: usize, h: usize) -> VoxelGrid {
        let mut g = VoxelGrid::new(w, h).unwrap();
        for x in 0..w {
            g.set(x, h - 1, Voxel::Rigid);
        }
        g
    }

    #[test]
    fn export_writes_one_line_per_pair() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let pairs = vec![
            ("flat terrain".to_string(), flat_grid(8, 3)),
            ("small hill".to_string(), flat_grid(10, 4)),
        ];
        let n = export_finetune_dataset(&pairs, &path, false).unwrap();
        assert_eq!(n, 2);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn export_rejects_conflicting_duplicate_captions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let pairs = vec![
            ("flat".to_string(), flat_grid(8, 3)),
            ("flat".to_string(), flat_grid(9, 3)),
        ];
        let err = export_finetune_dataset(&pairs, &path, false).unwrap_err();
        assert!(matches!(err, ExportError::DuplicateCaption { .. }));
        assert_eq!(export_finetune_dataset(&pairs, &path, true).unwrap(), 2);
    }

    #[test]
    fn exported_assistant_content_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let pairs = vec![
            ("flat terrain".to_string(), flat_grid(8, 3)),
            ("wider flat terrain".to_string(), flat_grid(12, 2)),
        ];
        export_finetune_dataset(&pairs, &path, false).unwrap();
        let read_back = read_finetune_dataset(&path).unwrap();
        assert_eq!(read_back.len(), 2);
        for ((caption, grid), (caption2, grid_text)) in pairs.iter().zip(&read_back) {
            assert_eq!(caption, caption2);
            assert_eq!(&parse_grid(grid_text).unwrap(), grid);
        }
    }

    #[test]
    fn log_hashes_prompts_when_asked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let transport = ScriptedTransport::new();
        transport.push_text("HHHH");
        let client = Client::new(Box::new(transport), fast_policy()).with_log(&path, true);
        client.complete(&request()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("sha256:"));
        assert!(!text.contains("flat"));
    }
}
