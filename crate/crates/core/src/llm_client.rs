//! Generation backends.
//!
//! [`HttpBackend`] speaks a minimal JSON protocol: one `POST` per request
//! with body `{"request_id", "prompt", "max_tokens"}` (plus `"soft_prefix"`
//! when enabled) and a `{"text"}` response. Transient failures (transport
//! errors, timeouts, HTTP 429 and 5xx) are retried with exponential backoff,
//! reusing the same `request_id`.
//!
//! [`MockBackend`] is a deterministic 1-nearest-neighbour decoder, and
//! [`RecordingBackend`] / [`ReplayBackend`] capture and replay transcripts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::pipeline::PromptPayload;
use crate::retrieval::retrieve_topk;
use crate::store::{CaptionDatastore, EmbeddingSupport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub request_id: String,
    pub prompt: String,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_prefix: Option<Vec<f32>>,
}

/// Everything a backend may look at for one item.
pub struct BackendCall<'a> {
    pub request: &'a GenerationRequest,
    pub payload: &'a PromptPayload,
    /// The embedding handed to the decoder (projected, or raw when projection is off).
    pub projected: &'a Embedding,
    pub datastore: &'a CaptionDatastore,
    pub support: &'a EmbeddingSupport,
}

pub trait CaptionBackend: Send + Sync {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String>;
}

impl<B: CaptionBackend + ?Sized> CaptionBackend for &B {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        (**self).generate(call)
    }
}

impl<B: CaptionBackend + ?Sized> CaptionBackend for Box<B> {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        (**self).generate(call)
    }
}

/// Text of the datastore entry nearest to `projected` (ties by id). With an
/// empty datastore, the first similar caption in the payload.
pub fn mock_generate(payload: &PromptPayload, ds: &CaptionDatastore, projected: &Embedding) -> Result<String> {
    if !ds.is_empty() {
        let best = retrieve_topk(projected, ds, 1)?;
        return Ok(best[0].entry.text.clone());
    }
    payload.similar_captions.first().cloned().ok_or(Error::NoSource)
}

/// Deterministic stand-in for a language model.
///
/// Decodes with [`mock_generate`]; if both the datastore and the retrieved
/// captions are empty it decodes against the support instead. Requests whose
/// id is listed in `fail_ids` fail with `BackendUnavailable`.
#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    pub fail_ids: BTreeSet<String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing_on<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            fail_ids: ids.into_iter().map(Into::into).collect(),
        }
    }
}

impl CaptionBackend for MockBackend {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        if self.fail_ids.contains(&call.request.request_id) {
            return Err(Error::BackendUnavailable {
                attempts: 1,
                reason: "mock configured to fail".into(),
            });
        }
        match mock_generate(call.payload, call.datastore, call.projected) {
            Err(Error::NoSource) if !call.support.is_empty() => {
                mock_generate(call.payload, call.support, call.projected)
            }
            other => other,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    /// Name of the environment variable holding the bearer token.
    pub token_env: Option<String>,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
    /// Send the mapped embedding as `soft_prefix`.
    pub send_soft_prefix: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/generate".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            max_in_flight: 4,
            token_env: None,
            backoff_ms: 200,
            send_soft_prefix: false,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::InvalidConfig("backend timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.endpoint.is_empty() {
            return Err(Error::InvalidConfig("backend endpoint is empty".into()));
        }
        Ok(())
    }
}

/// Counting admission gate.
struct Gate {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

struct GateGuard<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            busy: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut busy = self.busy.lock().unwrap();
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.busy.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// A completed remote generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub text: String,
    pub attempts: u32,
}

enum Failure {
    Transient(String),
    TimedOut,
    Fatal(Error),
}

#[derive(Serialize)]
struct WireRequest<'a> {
    request_id: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    soft_prefix: Option<&'a [f32]>,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
}

pub struct HttpBackend {
    cfg: BackendConfig,
    agent: ureq::Agent,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self> {
        cfg.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self { cfg, agent, gate })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn token(&self) -> Option<String> {
        self.cfg
            .token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|t| !t.is_empty())
    }

    fn attempt(&self, body: &str, token: Option<&str>) -> std::result::Result<String, Failure> {
        let mut req = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = match req.send(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Err(Failure::TimedOut),
            Err(e) => return Err(Failure::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(ureq::Error::Timeout(_)) => return Err(Failure::TimedOut),
            Err(e) => return Err(Failure::Transient(format!("reading body: {e}"))),
        };
        match status {
            200..=299 => {}
            429 | 500..=599 => return Err(Failure::Transient(format!("HTTP {status}"))),
            _ => {
                return Err(Failure::Fatal(Error::BackendUnavailable {
                    attempts: 1,
                    reason: format!("HTTP {status}"),
                }))
            }
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| Failure::Fatal(Error::MalformedResponse(e.to_string())))?;
        if parsed.text.trim().is_empty() {
            return Err(Failure::Fatal(Error::MalformedResponse("empty text".into())));
        }
        Ok(parsed.text)
    }

    /// Send one request, retrying transient failures up to `max_retries` times.
    pub fn generate_request(&self, req: &GenerationRequest) -> Result<Generation> {
        let body = serde_json::to_string(&WireRequest {
            request_id: &req.request_id,
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            soft_prefix: if self.cfg.send_soft_prefix {
                req.soft_prefix.as_deref()
            } else {
                None
            },
        })?;
        let token = self.token();
        let _slot = self.gate.enter();
        let max_attempts = self.cfg.max_retries + 1;
        let mut last_timed_out = false;
        let mut last_reason = String::new();
        for attempt in 1..=max_attempts {
            match self.attempt(&body, token.as_deref()) {
                Ok(text) => {
                    log::debug!("request {} succeeded on attempt {attempt}", req.request_id);
                    return Ok(Generation {
                        text,
                        attempts: attempt,
                    });
                }
                Err(Failure::Fatal(e)) => {
                    return Err(match e {
                        Error::BackendUnavailable { reason, .. } => Error::BackendUnavailable {
                            attempts: attempt,
                            reason,
                        },
                        e => e,
                    })
                }
                Err(Failure::TimedOut) => {
                    last_timed_out = true;
                    last_reason = "timeout".into();
                }
                Err(Failure::Transient(reason)) => {
                    last_timed_out = false;
                    last_reason = reason;
                }
            }
            log::warn!(
                "request {} attempt {attempt}/{max_attempts} failed: {last_reason}",
                req.request_id
            );
            if attempt < max_attempts {
                let factor = 1u64 << (attempt - 1).min(16);
                let delay = self.cfg.backoff_ms.saturating_mul(factor).min(10_000);
                thread::sleep(Duration::from_millis(delay));
            }
        }
        if last_timed_out {
            Err(Error::Timeout { attempts: max_attempts })
        } else {
            Err(Error::BackendUnavailable {
                attempts: max_attempts,
                reason: last_reason,
            })
        }
    }
}

impl CaptionBackend for HttpBackend {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        self.generate_request(call.request).map(|g| g.text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub request_id: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub text: String,
}

/// Request/response pairs keyed by request id, stored one JSON object per
/// line in id order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    records: BTreeMap<String, TranscriptRecord>,
}

impl Transcript {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, request_id: &str) -> Option<&TranscriptRecord> {
        self.records.get(request_id)
    }

    pub fn insert(&mut self, rec: TranscriptRecord) {
        self.records.insert(rec.request_id.clone(), rec);
    }

    pub fn parse(content: &str) -> Result<Self> {
        let mut t = Self::default();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TranscriptRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            t.insert(rec);
        }
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = BufWriter::new(w);
        for rec in self.records.values() {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(fs::File::create(path)?)
    }
}

/// Wraps a backend and records every successful exchange.
pub struct RecordingBackend<B> {
    inner: B,
    transcript: Mutex<Transcript>,
}

impl<B> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            transcript: Mutex::new(Transcript::default()),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().unwrap().clone()
    }
}

impl<B: CaptionBackend> CaptionBackend for RecordingBackend<B> {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        let text = self.inner.generate(call)?;
        self.transcript.lock().unwrap().insert(TranscriptRecord {
            request_id: call.request.request_id.clone(),
            prompt: call.request.prompt.clone(),
            max_tokens: call.request.max_tokens,
            text: text.clone(),
        });
        Ok(text)
    }
}

/// Answers from a transcript without any network activity. A request whose
/// id is missing, or whose prompt differs from the recorded one, is a miss.
pub struct ReplayBackend {
    transcript: Transcript,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript) -> Self {
        Self { transcript }
    }
}

impl CaptionBackend for ReplayBackend {
    fn generate(&self, call: &BackendCall<'_>) -> Result<String> {
        match self.transcript.get(&call.request.request_id) {
            Some(rec) if rec.prompt == call.request.prompt => Ok(rec.text.clone()),
            _ => Err(Error::TranscriptMiss(call.request.request_id.clone())),
        }
    }
}
