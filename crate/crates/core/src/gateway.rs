//! Chat-completion gateway: bounded-concurrency HTTP client with retries and
//! a content-addressed response cache.
//!
//! Requests are keyed by [`PromptRequest::content_hash`]; the cache is
//! checked before any network traffic, so an interrupted batch never
//! re-issues a request whose response already landed on disk. Cached files
//! carry a digest of their own payload and are treated as misses when it
//! fails to verify.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use once_cell::sync::Lazy;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{ModelParams, PromptRequest};
use crate::records::sha256_hex;

/// Endpoint scheme selecting the offline echo transport: the "response" is
/// the timestamped payload tail of the prompt itself. Useful for exercising
/// the full pipeline without a model server.
pub const ECHO_ENDPOINT: &str = "echo:";

/// Environment variable consulted for the API key by default.
pub const DEFAULT_API_KEY_ENV: &str = "CAPLIGN_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Sampling temperature; zero by default so runs are reproducible.
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_timeout_s: f64,
    /// Additional attempts after the first on 429/5xx/transport errors.
    pub max_retries: u32,
    pub concurrency_limit: usize,
    pub cache_dir: PathBuf,
    pub backoff_base_ms: u64,
    pub api_key_env: String,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: ECHO_ENDPOINT.into(),
            model_name: "default".into(),
            temperature: 0.0,
            max_output_tokens: 1024,
            request_timeout_s: 60.0,
            max_retries: 3,
            concurrency_limit: 4,
            cache_dir: PathBuf::from("cache"),
            backoff_base_ms: 250,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
        }
    }
}

impl GatewayConfig {
    pub fn model_params(&self) -> ModelParams {
        ModelParams {
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
        }
    }
}

/// One model response, in memory. `latency_ms` and `from_cache` are
/// observability fields; persisted records must not include them or
/// resumed runs would differ byte-wise from uninterrupted ones.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub content_hash: String,
    pub raw_text: String,
    pub model_name: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("retries exhausted after {attempts} attempts (last HTTP status: {last_status:?})")]
    ExhaustedRetries { attempts: u32, last_status: Option<u16> },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("cache i/o: {0}")]
    Cache(#[from] std::io::Error),
    #[error("client construction failed: {0}")]
    Client(String),
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequestBody<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: Option<ChoiceMessage>,
    text: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

/// On-disk cache entry; `text_sha256` guards against torn or corrupted
/// files.
#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    content_hash: String,
    model_name: String,
    raw_text: String,
    text_sha256: String,
}

pub struct Gateway {
    config: GatewayConfig,
    client: Option<reqwest::blocking::Client>,
    api_key: Option<String>,
}

/// Result of one item inside a batch; `index` refers to the input slice.
pub struct BatchOutcome {
    pub index: usize,
    pub result: Result<LlmResponse, GatewayError>,
}

static ECHO_PAYLOAD_START: Lazy<Regex> = Lazy::new(|| Regex::new(r"\d+\s*s:\s").unwrap());
static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        let client = if config.endpoint_url.starts_with(ECHO_ENDPOINT) {
            None
        } else {
            Some(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(config.request_timeout_s))
                    .build()
                    .map_err(|e| GatewayError::Client(e.to_string()))?,
            )
        };
        let api_key = std::env::var(&config.api_key_env).ok();
        Ok(Gateway { config, client, api_key })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    fn cache_path(&self, content_hash: &str) -> PathBuf {
        // Two-level hex fan-out keeps directories small at large scale.
        self.config
            .cache_dir
            .join(&content_hash[..2])
            .join(&content_hash[2..4])
            .join(format!("{content_hash}.json"))
    }

    fn cache_lookup(&self, content_hash: &str) -> Option<String> {
        let path = self.cache_path(content_hash);
        let bytes = std::fs::read(&path).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        let intact = entry.content_hash == content_hash
            && sha256_hex(entry.raw_text.as_bytes()) == entry.text_sha256;
        intact.then_some(entry.raw_text)
    }

    fn cache_store(&self, content_hash: &str, raw_text: &str) -> std::io::Result<()> {
        let entry = CacheEntry {
            content_hash: content_hash.to_string(),
            model_name: self.config.model_name.clone(),
            raw_text: raw_text.to_string(),
            text_sha256: sha256_hex(raw_text.as_bytes()),
        };
        let path = self.cache_path(content_hash);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // Unique temp name per writer: duplicate writers of the same key
        // write identical content, but must not share a temp file.
        let tmp = path.with_extension(format!(
            "tmp.{}.{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, serde_json::to_vec(&entry)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }

    /// Complete one request: cache first, then the network with exponential
    /// backoff on 429/5xx/transport errors.
    pub fn complete(&self, request: &PromptRequest) -> Result<LlmResponse, GatewayError> {
        if let Some(raw_text) = self.cache_lookup(&request.content_hash) {
            return Ok(LlmResponse {
                content_hash: request.content_hash.clone(),
                raw_text,
                model_name: self.config.model_name.clone(),
                latency_ms: 0,
                from_cache: true,
            });
        }

        let started = Instant::now();
        let raw_text = match &self.client {
            None => echo_response(&request.rendered_user),
            Some(client) => self.fetch_with_retries(client, request)?,
        };
        self.cache_store(&request.content_hash, &raw_text)?;
        Ok(LlmResponse {
            content_hash: request.content_hash.clone(),
            raw_text,
            model_name: self.config.model_name.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: false,
        })
    }

    fn fetch_with_retries(
        &self,
        client: &reqwest::blocking::Client,
        request: &PromptRequest,
    ) -> Result<String, GatewayError> {
        let body = ChatRequestBody {
            model: &self.config.model_name,
            messages: [
                ChatMessage { role: "system", content: &request.rendered_system },
                ChatMessage { role: "user", content: &request.rendered_user },
            ],
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
        };

        let attempts = self.config.max_retries + 1;
        let mut last_status: Option<u16> = None;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_delay(attempt));
            }
            let mut req = client.post(&self.config.endpoint_url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Err(_) => {
                    // Connect errors and timeouts are retryable.
                    last_status = None;
                }
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        let parsed: ChatResponseBody = response
                            .json()
                            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
                        return extract_text(parsed);
                    }
                    last_status = Some(status.as_u16());
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    if !retryable {
                        return Err(GatewayError::ExhaustedRetries {
                            attempts: attempt + 1,
                            last_status,
                        });
                    }
                }
            }
        }
        Err(GatewayError::ExhaustedRetries { attempts, last_status })
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms;
        let exp = base.saturating_mul(1u64 << (attempt - 1).min(16)).min(30_000);
        let jitter = if base > 0 { rand::thread_rng().gen_range(0..=base) } else { 0 };
        Duration::from_millis(exp + jitter)
    }

    /// Complete many requests with at most `concurrency_limit` in flight.
    ///
    /// Outcomes come back in input order. Per-item failures are reported in
    /// their outcome slot and never abort the batch, so a partially failed
    /// run can be retried: anything cached is served without network I/O.
    pub fn batch_complete(&self, requests: &[PromptRequest]) -> Vec<BatchOutcome> {
        let workers = self.config.concurrency_limit.max(1).min(requests.len().max(1));
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<BatchOutcome>>> =
            Mutex::new((0..requests.len()).map(|_| None).collect());

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let index = next.fetch_add(1, Ordering::Relaxed);
                    if index >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[index]);
                    results.lock().expect("result sink poisoned")[index] =
                        Some(BatchOutcome { index, result });
                });
            }
        });

        results
            .into_inner()
            .expect("result sink poisoned")
            .into_iter()
            .map(|o| o.expect("every index visited"))
            .collect()
    }
}

fn extract_text(parsed: ChatResponseBody) -> Result<String, GatewayError> {
    let first = parsed
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| GatewayError::MalformedResponse("no choices in response".into()))?;
    if let Some(message) = first.message {
        if let Some(content) = message.content {
            return Ok(content);
        }
    }
    first
        .text
        .ok_or_else(|| GatewayError::MalformedResponse("choice carries neither message nor text".into()))
}

/// Echo transport: return the prompt's payload tail (everything from the
/// first timestamped line on). Assumes a payload-at-end template like the
/// default one; with no payload in sight the response is empty, which the
/// parser treats as a structure failure.
pub fn echo_response(rendered_user: &str) -> String {
    match ECHO_PAYLOAD_START.find(rendered_user) {
        Some(m) => rendered_user[m.start()..].to_string(),
        None => String::new(),
    }
}
