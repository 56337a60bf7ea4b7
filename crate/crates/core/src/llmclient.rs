//! Chat-completion transport: an OpenAI-compatible HTTP client, deterministic
//! offline stubs, and a JSONL transcript recorder/replayer.
//!
//! The wire protocol is fixed to `POST {endpoint}/chat/completions` with a
//! single user message. Everything above this module speaks [`ChatBackend`],
//! so agents cannot tell a live server from a stub or a replayed transcript.

use crate::prompting::PromptText;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("empty completion in response")]
    EmptyCompletion,
    #[error("transcript replay has no response for this prompt (hash {0})")]
    ReplayMiss(String),
    #[error("transcript io: {0}")]
    Io(#[from] std::io::Error),
}

/// Connection and sampling settings for a chat backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout_s: u64,
    pub max_retries: u32,
    /// Name of the environment variable holding the API key. Keys never
    /// appear in config files; an empty name means no Authorization header.
    pub api_key_env_var: String,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "http://127.0.0.1:8000/v1".into(),
            model: "local".into(),
            temperature: 0.0,
            top_p: 1.0,
            timeout_s: 120,
            max_retries: 2,
            api_key_env_var: String::new(),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.endpoint.is_empty() {
            return Err(BackendError::InvalidRequest("endpoint is empty".into()));
        }
        if self.temperature < 0.0 || !self.temperature.is_finite() {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be ≥ 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// One request/response pair, recorded verbatim for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub response: String,
    pub latency_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// Stable identifier for a prompt, used to key canned and replayed responses.
pub fn prompt_hash(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// A source of chat completions. `&mut self` because stubs and recorders keep
/// cursors; live HTTP backends are free to ignore the mutability.
pub trait ChatBackend {
    fn name(&self) -> &str;

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError>;

    /// `k` independent completions of the same prompt, order-preserved.
    /// Partial failure returns the successes with a logged warning as long as
    /// at least one attempt succeeded.
    fn sample_k(&mut self, prompt: &PromptText, k: usize) -> Result<Vec<String>, BackendError> {
        if k == 0 {
            return Err(BackendError::InvalidRequest("sample_k needs k ≥ 1".into()));
        }
        let mut texts = Vec::with_capacity(k);
        let mut last_err = None;
        for _ in 0..k {
            match self.complete(prompt) {
                Ok(text) => texts.push(text),
                Err(e) => last_err = Some(e),
            }
        }
        match (texts.is_empty(), last_err) {
            (true, Some(e)) => Err(e),
            (_, Some(e)) => {
                log::warn!("sample_k: {} of {} completions failed, last error: {e}", k - texts.len(), k);
                Ok(texts)
            }
            _ => Ok(texts),
        }
    }
}

impl ChatBackend for Box<dyn ChatBackend> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError> {
        (**self).complete(prompt)
    }

    fn sample_k(&mut self, prompt: &PromptText, k: usize) -> Result<Vec<String>, BackendError> {
        (**self).sample_k(prompt, k)
    }
}

// ---------------------------------------------------------------------------
// Live HTTP backend.

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
    temperature: f64,
    top_p: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: Option<u64>,
    #[serde(default)]
    completion_tokens: Option<u64>,
}

/// OpenAI-compatible chat-completions client with exponential-backoff retry.
/// Transport errors and 5xx responses are retried; 401/403 fail immediately.
pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    last_exchange: Option<ChatExchange>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<HttpBackend, BackendError> {
        config.validate()?;
        let api_key = if config.api_key_env_var.is_empty() {
            None
        } else {
            match std::env::var(&config.api_key_env_var) {
                Ok(v) => Some(v),
                Err(_) => {
                    return Err(BackendError::Auth(format!(
                        "environment variable {} is not set",
                        config.api_key_env_var
                    )))
                }
            }
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend {
            config,
            client,
            api_key,
            last_exchange: None,
        })
    }

    /// The most recent exchange, for transcript recording.
    pub fn last_exchange(&self) -> Option<&ChatExchange> {
        self.last_exchange.as_ref()
    }

    fn attempt(&self, body: &WireRequest<'_>) -> Result<(String, Option<WireUsage>), BackendError> {
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(BackendError::Auth(format!("status {status}")));
        }
        if status >= 400 {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Status { status, body: text });
        }
        let parsed: WireResponse = resp.json().map_err(|e| BackendError::Transport(e.to_string()))?;
        let first = parsed.choices.into_iter().next().ok_or(BackendError::EmptyCompletion)?;
        Ok((first.message.content, parsed.usage))
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.model
    }

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError> {
        let messages = vec![ChatMessage {
            role: "user".into(),
            content: prompt.text.clone(),
        }];
        let body = WireRequest {
            model: &self.config.model,
            messages: messages.clone(),
            temperature: self.config.temperature,
            top_p: self.config.top_p,
        };
        let start = Instant::now();
        let mut last_err = BackendError::Transport("no attempt made".into());
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let backoff = Duration::from_millis(100u64.saturating_mul(1 << attempt.min(5)));
                std::thread::sleep(backoff);
            }
            match self.attempt(&body) {
                Ok((text, usage)) => {
                    self.last_exchange = Some(ChatExchange {
                        model: self.config.model.clone(),
                        messages,
                        temperature: self.config.temperature,
                        top_p: self.config.top_p,
                        response: text.clone(),
                        latency_s: start.elapsed().as_secs_f64(),
                        prompt_tokens: usage.as_ref().and_then(|u| u.prompt_tokens),
                        completion_tokens: usage.as_ref().and_then(|u| u.completion_tokens),
                    });
                    return Ok(text);
                }
                // Authentication failures will not improve on retry.
                Err(e @ BackendError::Auth(_)) => return Err(e),
                Err(e) => {
                    log::warn!("completion attempt {} failed: {e}", attempt + 1);
                    last_err = e;
                }
            }
        }
        Err(last_err)
    }
}

// ---------------------------------------------------------------------------
// Offline stubs.

/// How a [`StubBackend`] chooses its response.
pub enum StubMode {
    /// Fixed map from prompt hash to response; misses are errors.
    Canned(BTreeMap<String, String>),
    /// Cycles through a fixed list regardless of the prompt.
    RoundRobin(Vec<String>),
    /// Reads the "- Early queued: ... (Total)" lines out of the rendered
    /// prompt and answers with the phase holding the longest queue, ties
    /// broken in canonical phase order. Mirrors the greedy controller, which
    /// makes full prompt→completion→parse loops exactly reproducible offline.
    GreedyFromPrompt,
}

pub struct StubBackend {
    mode: StubMode,
    cursor: usize,
    label: String,
}

impl StubBackend {
    pub fn canned(map: BTreeMap<String, String>) -> StubBackend {
        StubBackend {
            mode: StubMode::Canned(map),
            cursor: 0,
            label: "stub-canned".into(),
        }
    }

    pub fn round_robin(responses: Vec<String>) -> StubBackend {
        StubBackend {
            mode: StubMode::RoundRobin(responses),
            cursor: 0,
            label: "stub-round-robin".into(),
        }
    }

    pub fn greedy() -> StubBackend {
        StubBackend {
            mode: StubMode::GreedyFromPrompt,
            cursor: 0,
            label: "stub-greedy".into(),
        }
    }

    /// Per-phase queued totals scraped from a rendered prompt.
    pub fn scrape_queued_totals(text: &str) -> BTreeMap<crate::netmodel::PhaseId, u64> {
        let mut totals = BTreeMap::new();
        let mut current: Option<crate::netmodel::PhaseId> = None;
        for line in text.lines() {
            if let Some(name) = line.strip_prefix("Signal: ") {
                current = name.trim().parse().ok();
            } else if let Some(rest) = line.strip_prefix("- Early queued: ") {
                if let (Some(phase), Some(total_str)) = (
                    current,
                    rest.strip_suffix(" (Total)").and_then(|s| s.rsplit(", ").next()),
                ) {
                    if let Ok(total) = total_str.trim().parse::<u64>() {
                        totals.insert(phase, total);
                    }
                }
            }
        }
        totals
    }

    fn greedy_response(text: &str) -> String {
        let totals = Self::scrape_queued_totals(text);
        let mut best = crate::netmodel::PhaseId::Etwt;
        let mut best_total = 0i128;
        let mut first = true;
        for phase in crate::netmodel::PhaseId::ALL {
            let total = i128::from(*totals.get(&phase).unwrap_or(&0));
            if first || total > best_total {
                best = phase;
                best_total = total;
                first = false;
            }
        }
        let listing: Vec<String> = crate::netmodel::PhaseId::ALL
            .iter()
            .map(|p| format!("signal {} has {} early queued vehicles", p, totals.get(p).unwrap_or(&0)))
            .collect();
        format!(
            "Step 1: Comparing early queues, {}. The allowed lanes of signal {} demonstrate the heaviest \
             congestion, so releasing them improves the traffic condition most significantly.\n\
             Step 2: <signal>{}</signal>",
            listing.join(", "),
            best,
            best
        )
    }
}

impl ChatBackend for StubBackend {
    fn name(&self) -> &str {
        &self.label
    }

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError> {
        match &self.mode {
            StubMode::Canned(map) => map
                .get(&prompt_hash(&prompt.text))
                .cloned()
                .ok_or_else(|| BackendError::ReplayMiss(prompt_hash(&prompt.text))),
            StubMode::RoundRobin(responses) => {
                if responses.is_empty() {
                    return Err(BackendError::InvalidRequest("round-robin stub has no responses".into()));
                }
                let text = responses[self.cursor % responses.len()].clone();
                self.cursor += 1;
                Ok(text)
            }
            StubMode::GreedyFromPrompt => Ok(Self::greedy_response(&prompt.text)),
        }
    }
}

/// A backend that always fails with a transport error; exercises retry and
/// fallback paths without any network.
pub struct FailingBackend;

impl ChatBackend for FailingBackend {
    fn name(&self) -> &str {
        "stub-failing"
    }

    fn complete(&mut self, _prompt: &PromptText) -> Result<String, BackendError> {
        Err(BackendError::Transport("stub refuses all requests".into()))
    }
}

// ---------------------------------------------------------------------------
// Transcript record/replay.

/// One transcript line: the exchange plus the prompt hash it answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub prompt_hash: String,
    pub exchange: ChatExchange,
}

/// Wraps a backend and appends every exchange to a JSONL transcript.
pub struct TranscriptRecorder<B: ChatBackend, W: Write> {
    inner: B,
    sink: W,
}

impl<B: ChatBackend, W: Write> TranscriptRecorder<B, W> {
    pub fn new(inner: B, sink: W) -> Self {
        TranscriptRecorder { inner, sink }
    }

    pub fn into_inner(self) -> (B, W) {
        (self.inner, self.sink)
    }
}

impl<B: ChatBackend, W: Write> ChatBackend for TranscriptRecorder<B, W> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError> {
        let start = Instant::now();
        let response = self.inner.complete(prompt)?;
        let record = TranscriptRecord {
            prompt_hash: prompt_hash(&prompt.text),
            exchange: ChatExchange {
                model: self.inner.name().to_string(),
                messages: vec![ChatMessage {
                    role: "user".into(),
                    content: prompt.text.clone(),
                }],
                temperature: 0.0,
                top_p: 1.0,
                response: response.clone(),
                latency_s: start.elapsed().as_secs_f64(),
                prompt_tokens: None,
                completion_tokens: None,
            },
        };
        let line = serde_json::to_string(&record).map_err(|e| BackendError::Transport(e.to_string()))?;
        writeln!(self.sink, "{line}")?;
        Ok(response)
    }
}

/// Replays a recorded transcript: responses are served per prompt hash in
/// recorded order, so repeated identical prompts replay faithfully.
pub struct TranscriptReplay {
    responses: HashMap<String, VecDeque<String>>,
    label: String,
}

impl TranscriptReplay {
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<TranscriptReplay, BackendError> {
        let mut responses: HashMap<String, VecDeque<String>> = HashMap::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TranscriptRecord =
                serde_json::from_str(&line).map_err(|e| BackendError::InvalidRequest(format!("bad transcript line: {e}")))?;
            responses.entry(record.prompt_hash).or_default().push_back(record.exchange.response);
        }
        Ok(TranscriptReplay {
            responses,
            label: "transcript-replay".into(),
        })
    }

    pub fn from_path(path: &Path) -> Result<TranscriptReplay, BackendError> {
        Ok(Self::from_reader(std::fs::File::open(path)?)?)
    }
}

impl ChatBackend for TranscriptReplay {
    fn name(&self) -> &str {
        &self.label
    }

    fn complete(&mut self, prompt: &PromptText) -> Result<String, BackendError> {
        let hash = prompt_hash(&prompt.text);
        self.responses
            .get_mut(&hash)
            .and_then(|queue| queue.pop_front())
            .ok_or(BackendError::ReplayMiss(hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netmodel::PhaseId;
    use std::io::Read;
    use std::net::TcpListener;

    fn prompt(text: &str) -> PromptText {
        PromptText {
            intersection: "intersection_1_1".into(),
            t: 0,
            text: text.into(),
        }
    }

    /// Serves scripted HTTP responses on a local port, one per connection,
    /// and captures the request bodies it saw.
    fn scripted_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 65536];
                let mut req = Vec::new();
                // Read until the full content-length body has arrived.
                loop {
                    let n = stream.read(&mut buf).unwrap();
                    req.extend_from_slice(&buf[..n]);
                    let text = String::from_utf8_lossy(&req);
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let content_len = text
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if req.len() >= head_end + 4 + content_len {
                            bodies.push(text[head_end + 4..].to_string());
                            break;
                        }
                    }
                    if n == 0 {
                        break;
                    }
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}"), handle)
    }

    fn ok_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5}
        })
        .to_string()
    }

    #[test]
    fn http_backend_posts_openai_body_and_returns_content() {
        let (endpoint, server) = scripted_server(vec![(200, ok_body("hello <signal>NTST</signal>"))]);
        let mut backend = HttpBackend::new(BackendConfig {
            endpoint,
            model: "test-model".into(),
            max_retries: 0,
            ..BackendConfig::default()
        })
        .unwrap();
        let text = backend.complete(&prompt("the prompt body")).unwrap();
        assert_eq!(text, "hello <signal>NTST</signal>");
        let bodies = server.join().unwrap();
        let body: serde_json::Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["top_p"], 1.0);
        assert_eq!(body["messages"].as_array().unwrap().len(), 1);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "the prompt body");
        let exchange = backend.last_exchange().unwrap();
        assert_eq!(exchange.prompt_tokens, Some(10));
        assert_eq!(exchange.completion_tokens, Some(5));
    }

    #[test]
    fn http_backend_retries_5xx_then_succeeds() {
        let (endpoint, server) = scripted_server(vec![
            (500, "{\"error\": \"overloaded\"}".into()),
            (200, ok_body("recovered")),
        ]);
        let mut backend = HttpBackend::new(BackendConfig {
            endpoint,
            max_retries: 1,
            ..BackendConfig::default()
        })
        .unwrap();
        assert_eq!(backend.complete(&prompt("p")).unwrap(), "recovered");
        assert_eq!(server.join().unwrap().len(), 2);
    }

    #[test]
    fn http_backend_does_not_retry_auth_failures() {
        let (endpoint, server) = scripted_server(vec![(401, "{}".into())]);
        let mut backend = HttpBackend::new(BackendConfig {
            endpoint,
            max_retries: 3,
            ..BackendConfig::default()
        })
        .unwrap();
        match backend.complete(&prompt("p")) {
            Err(BackendError::Auth(_)) => {}
            other => panic!("expected Auth error, got {other:?}"),
        }
        // Exactly one connection was consumed; a retry would hang on accept.
        assert_eq!(server.join().unwrap().len(), 1);
    }

    #[test]
    fn http_backend_exhausts_retries_into_error() {
        let (endpoint, server) = scripted_server(vec![
            (500, "{}".into()),
            (502, "{}".into()),
        ]);
        let mut backend = HttpBackend::new(BackendConfig {
            endpoint,
            max_retries: 1,
            ..BackendConfig::default()
        })
        .unwrap();
        match backend.complete(&prompt("p")) {
            Err(BackendError::Status { status: 502, .. }) => {}
            other => panic!("expected Status 502, got {other:?}"),
        }
        server.join().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_sampling_params() {
        assert!(BackendConfig { temperature: -0.1, ..BackendConfig::default() }.validate().is_err());
        assert!(BackendConfig { top_p: 0.0, ..BackendConfig::default() }.validate().is_err());
        assert!(BackendConfig { top_p: 1.5, ..BackendConfig::default() }.validate().is_err());
        assert!(BackendConfig::default().validate().is_ok());
    }

    #[test]
    fn canned_stub_returns_mapped_text_and_misses_error() {
        let p = prompt("what signal?");
        let mut map = BTreeMap::new();
        map.insert(prompt_hash(&p.text), "<signal>ELWL</signal>".to_string());
        let mut stub = StubBackend::canned(map);
        assert_eq!(stub.complete(&p).unwrap(), "<signal>ELWL</signal>");
        assert!(matches!(stub.complete(&prompt("unknown")), Err(BackendError::ReplayMiss(_))));
    }

    #[test]
    fn round_robin_stub_cycles_in_order() {
        let mut stub = StubBackend::round_robin(vec!["a".into(), "b".into(), "c".into()]);
        let p = prompt("x");
        let draws: Vec<String> = (0..5).map(|_| stub.complete(&p).unwrap()).collect();
        assert_eq!(draws, ["a", "b", "c", "a", "b"]);
    }

    #[test]
    fn sample_k_preserves_order_and_equals_complete_for_k1() {
        let p = prompt("x");
        let mut stub = StubBackend::round_robin(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        assert_eq!(stub.sample_k(&p, 4).unwrap(), ["a", "b", "c", "d"]);
        let mut stub = StubBackend::round_robin(vec!["only".into()]);
        assert_eq!(stub.sample_k(&p, 1).unwrap(), [stub.complete(&p).unwrap()]);
        assert!(matches!(stub.sample_k(&p, 0), Err(BackendError::InvalidRequest(_))));
        assert!(FailingBackend.sample_k(&p, 3).is_err());
    }

    #[test]
    fn greedy_stub_picks_longest_queue_from_prompt_text() {
        let text = "Signal: ETWT\n- Early queued: 1 (East), 4 (West), 5 (Total)\n\
                    Signal: NTST\n- Early queued: 2 (North), 0 (South), 2 (Total)\n\
                    Signal: ELWL\n- Early queued: 0 (East), 0 (West), 0 (Total)\n\
                    Signal: NLSL\n- Early queued: 4 (North), 3 (South), 7 (Total)";
        let mut stub = StubBackend::greedy();
        let response = stub.complete(&prompt(text)).unwrap();
        let parsed = crate::prompting::parse_decision(&response);
        assert_eq!(parsed.phase, Some(PhaseId::Nlsl));
        let totals = StubBackend::scrape_queued_totals(text);
        assert_eq!(totals[&PhaseId::Etwt], 5);
        assert_eq!(totals[&PhaseId::Nlsl], 7);
    }

    #[test]
    fn greedy_stub_breaks_ties_in_canonical_order() {
        let text = "Signal: NTST\n- Early queued: 1 (North), 1 (South), 2 (Total)\n\
                    Signal: ETWT\n- Early queued: 2 (East), 0 (West), 2 (Total)";
        let mut stub = StubBackend::greedy();
        let parsed = crate::prompting::parse_decision(&stub.complete(&prompt(text)).unwrap());
        assert_eq!(parsed.phase, Some(PhaseId::Etwt));
    }

    #[test]
    fn transcript_records_then_replays_identically() {
        let inner = StubBackend::round_robin(vec!["first".into(), "second".into()]);
        let mut recorder = TranscriptRecorder::new(inner, Vec::new());
        let p = prompt("same prompt");
        let a = recorder.complete(&p).unwrap();
        let b = recorder.complete(&p).unwrap();
        let (_, transcript) = recorder.into_inner();

        let mut replay = TranscriptReplay::from_reader(transcript.as_slice()).unwrap();
        assert_eq!(replay.complete(&p).unwrap(), a);
        assert_eq!(replay.complete(&p).unwrap(), b);
        assert!(matches!(replay.complete(&p), Err(BackendError::ReplayMiss(_))));
    }

    #[test]
    fn transcript_rejects_malformed_lines() {
        let err = TranscriptReplay::from_reader("not json\n".as_bytes());
        assert!(matches!(err, Err(BackendError::InvalidRequest(_))));
    }
}
