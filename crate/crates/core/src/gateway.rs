//! Chat-completion and embedding client for OpenAI-compatible endpoints.
//!
//! The [`Gateway`] sits in front of a [`ChatBackend`] and adds a persistent
//! response cache, an in-flight request limit and call counters. Backends
//! are either live HTTP ([`OpenAiChatBackend`]), fixture driven
//! ([`MockBackend`]) or arbitrary closures ([`FnBackend`]) for tests.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::extraction::last_delimited_text;

/// Environment variable consulted for the API key when a config names none.
pub const DEFAULT_API_KEY_ENV: &str = "LLHKG_API_KEY";

/// Dimension of [`stub_embed`] vectors.
pub const STUB_DIMENSION: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("endpoint returned an empty response")]
    EmptyResponse,
    #[error("no mock fixture for request digest {digest}")]
    MockMiss { digest: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("cache error: {0}")]
    Cache(String),
}

/// Which of the two pipeline LLMs a request is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Extractor,
    Corrector,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Extractor => "extractor",
            Role::Corrector => "corrector",
        })
    }
}

/// API key that never appears in Debug output or serialized configs.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<Secret>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<i64>,
    /// Texts per embeddings request.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: Some(0),
            batch_size: default_batch(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0) {
            return Err(format!("{}: timeout_secs must be > 0", self.model));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("{}: temperature must lie in [0, 2]", self.model));
        }
        if self.batch_size == 0 {
            return Err(format!("{}: batch_size must be >= 1", self.model));
        }
        Ok(())
    }

    /// Fills `api_key` from the configured (or default) environment variable.
    pub fn resolve_api_key(&mut self) {
        if self.api_key.is_none() {
            let var = self.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
            self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty()).map(Secret::new);
        }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChatRequest {
    pub role: Role,
    pub system: String,
    pub user: String,
}

impl ChatRequest {
    pub fn new(role: Role, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            role,
            system: system.into(),
            user: user.into(),
        }
    }
}

fn put_field(hasher: &mut Sha256, bytes: &[u8]) {
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

/// SHA-256 over a fixed byte layout, hex encoded.
///
/// Layout: each of `"llhkg-cache-v1"`, model, system and user is written as a
/// little-endian u64 byte length followed by its UTF-8 bytes; then the
/// temperature as the little-endian bits of an f64, max tokens as a
/// little-endian u64, and the seed as `0x00` when absent or `0x01` followed by
/// a little-endian i64.
pub fn cache_key(config: &EndpointConfig, system: &str, user: &str) -> String {
    let mut h = Sha256::new();
    put_field(&mut h, b"llhkg-cache-v1");
    put_field(&mut h, config.model.as_bytes());
    put_field(&mut h, system.as_bytes());
    put_field(&mut h, user.as_bytes());
    // -0.0 and 0.0 are the same sampling setting
    let temperature = if config.temperature == 0.0 { 0.0 } else { config.temperature };
    h.update(temperature.to_bits().to_le_bytes());
    h.update(u64::from(config.max_tokens).to_le_bytes());
    match config.seed {
        None => h.update([0u8]),
        Some(seed) => {
            h.update([1u8]);
            h.update(seed.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model: String,
    pub response: String,
    pub timestamp: String,
}

/// One JSON file per entry, named `<digest>.json`.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CacheEntry> {
        let bytes = std::fs::read(self.path(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key => Some(entry),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> Result<(), GatewayError> {
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let path = self.path(&entry.key);
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(entry).map_err(|e| GatewayError::Cache(e.to_string()))?;
        std::fs::write(&tmp, bytes)
            .and_then(|_| std::fs::rename(&tmp, &path))
            .map_err(|e| GatewayError::Cache(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("request timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connection(String),
}

/// Minimal HTTP surface: POST a JSON body, get status and body back.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&Secret>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let config = ureq::Agent::config_builder().http_status_as_error(false).build();
        Self {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        api_key: Option<&Secret>,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut request = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build()
            .header("Content-Type", "application/json");
        if let Some(key) = api_key {
            request = request.header("Authorization", &format!("Bearer {}", key.expose()));
        }
        let mut response = request.send_json(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Connection(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// One scripted transport outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptStep {
    /// `{"timeout": true}`
    Timeout { timeout: bool },
    /// Wraps `content` in a chat-completions body.
    Content {
        #[serde(default = "ok_status")]
        status: u16,
        content: String,
    },
    /// Raw status and body.
    Raw { status: u16, body: String },
}

fn ok_status() -> u16 {
    200
}

impl ScriptStep {
    pub fn ok(content: impl Into<String>) -> Self {
        ScriptStep::Content {
            status: 200,
            content: content.into(),
        }
    }

    pub fn status(status: u16) -> Self {
        ScriptStep::Raw {
            status,
            body: format!("{{\"error\":\"scripted {status}\"}}"),
        }
    }
}

/// Replays a fixed list of outcomes, one per POST.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    steps: Mutex<VecDeque<ScriptStep>>,
    posts: AtomicU64,
}

impl ScriptedTransport {
    pub fn new(steps: impl IntoIterator<Item = ScriptStep>) -> Self {
        Self {
            steps: Mutex::new(steps.into_iter().collect()),
            posts: AtomicU64::new(0),
        }
    }

    pub fn posts(&self) -> u64 {
        self.posts.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.steps.lock().map(|s| s.len()).unwrap_or(0)
    }
}

impl Transport for ScriptedTransport {
    fn post_json(
        &self,
        _url: &str,
        _api_key: Option<&Secret>,
        _body: &serde_json::Value,
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        self.posts.fetch_add(1, Ordering::SeqCst);
        let step = self
            .steps
            .lock()
            .map_err(|_| TransportError::Connection("script lock poisoned".into()))?
            .pop_front();
        match step {
            None => Err(TransportError::Connection("script exhausted".into())),
            Some(ScriptStep::Timeout { .. }) => Err(TransportError::Timeout),
            Some(ScriptStep::Raw { status, body }) => Ok(HttpResponse { status, body }),
            Some(ScriptStep::Content { status, content }) => Ok(HttpResponse {
                status,
                body: serde_json::json!({
                    "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]
                })
                .to_string(),
            }),
        }
    }
}

pub type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub fn thread_sleeper() -> Sleeper {
    Arc::new(std::thread::sleep)
}

/// Exponential backoff: `base * factor^retry`, stretched by up to `jitter`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        let nominal = self.base.as_secs_f64() * self.factor.powi(retry as i32);
        let stretch = if self.jitter > 0.0 {
            rand::rng().random_range(0.0..self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(nominal * (1.0 + stretch))
    }
}

/// Shared retry loop for chat and embeddings POSTs.
struct HttpCaller {
    transport: Arc<dyn Transport>,
    sleeper: Sleeper,
    policy: RetryPolicy,
    attempts: AtomicU64,
}

impl HttpCaller {
    fn post(&self, config: &EndpointConfig, url: &str, body: &serde_json::Value) -> Result<String, GatewayError> {
        let max_attempts = config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                (self.sleeper)(self.policy.delay(attempt - 1));
            }
            self.attempts.fetch_add(1, Ordering::Relaxed);
            match self.transport.post_json(url, config.api_key.as_ref(), body, config.timeout()) {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok(resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("HTTP {}: {}", resp.status, truncate(&resp.body, 200));
                }
                Ok(resp) => {
                    return Err(GatewayError::Request {
                        status: resp.status,
                        body: truncate(&resp.body, 500),
                    })
                }
                Err(e) => last = e.to_string(),
            }
            log::debug!("{url}: attempt {} failed: {last}", attempt + 1);
        }
        Err(GatewayError::Transport {
            attempts: max_attempts,
            message: last,
        })
    }
}

fn truncate(text: &str, max: usize) -> String {
    match text.char_indices().nth(max) {
        Some((i, _)) => format!("{}...", &text[..i]),
        None => text.to_string(),
    }
}

/// Produces the assistant text for one fully resolved request.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        config: &EndpointConfig,
        request: &ChatRequest,
        digest: &str,
    ) -> Result<String, GatewayError>;
}

/// Live backend speaking the OpenAI chat-completions wire format.
pub struct OpenAiChatBackend {
    http: HttpCaller,
}

impl OpenAiChatBackend {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        Self::with_retry(transport, thread_sleeper(), RetryPolicy::default())
    }

    pub fn with_retry(transport: Arc<dyn Transport>, sleeper: Sleeper, policy: RetryPolicy) -> Self {
        Self {
            http: HttpCaller {
                transport,
                sleeper,
                policy,
                attempts: AtomicU64::new(0),
            },
        }
    }

    /// HTTP attempts made so far, including retries.
    pub fn http_attempts(&self) -> u64 {
        self.http.attempts.load(Ordering::Relaxed)
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiChatBackend {
    fn complete(
        &self,
        config: &EndpointConfig,
        request: &ChatRequest,
        _digest: &str,
    ) -> Result<String, GatewayError> {
        let mut messages = Vec::with_capacity(2);
        if !request.system.is_empty() {
            messages.push(serde_json::json!({"role": "system", "content": request.system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user}));
        let mut body = serde_json::json!({
            "model": config.model,
            "messages": messages,
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
            "stream": false,
        });
        if let Some(seed) = config.seed {
            body["seed"] = seed.into();
        }
        let raw = self.http.post(config, &config.endpoint("chat/completions"), &body)?;
        let parsed: ChatCompletion = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Backend(format!("unexpected chat response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or(GatewayError::EmptyResponse)
    }
}

/// Mock fixture file: exact-digest responses, per-role responses keyed by
/// the delimited input text, and a transport script.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixtures {
    #[serde(default = "fixture_version")]
    pub format_version: String,
    #[serde(default)]
    pub responses: BTreeMap<String, String>,
    #[serde(default)]
    pub by_input: BTreeMap<Role, BTreeMap<String, String>>,
    #[serde(default)]
    pub script: Vec<ScriptStep>,
}

fn fixture_version() -> String {
    crate::hrkg::FORMAT_VERSION.to_string()
}

impl MockFixtures {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let bytes = std::fs::read(path)
            .map_err(|e| GatewayError::Backend(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::Backend(format!("{}: {e}", path.display())))
    }
}

/// Resolves requests from fixtures: digest first, then role + delimited
/// input text, then the transport script.
pub struct MockBackend {
    responses: BTreeMap<String, String>,
    by_input: BTreeMap<Role, BTreeMap<String, String>>,
    scripted: Option<OpenAiChatBackend>,
}

impl MockBackend {
    pub fn new(fixtures: MockFixtures) -> Self {
        Self::with_sleeper(fixtures, Arc::new(|_| {}))
    }

    pub fn with_sleeper(fixtures: MockFixtures, sleeper: Sleeper) -> Self {
        let scripted = (!fixtures.script.is_empty()).then(|| {
            OpenAiChatBackend::with_retry(
                Arc::new(ScriptedTransport::new(fixtures.script)),
                sleeper,
                RetryPolicy::default(),
            )
        });
        Self {
            responses: fixtures.responses,
            by_input: fixtures.by_input,
            scripted,
        }
    }
}

impl ChatBackend for MockBackend {
    fn complete(
        &self,
        config: &EndpointConfig,
        request: &ChatRequest,
        digest: &str,
    ) -> Result<String, GatewayError> {
        if let Some(text) = self.responses.get(digest) {
            return Ok(text.clone());
        }
        if let Some(text) = last_delimited_text(&request.user)
            .and_then(|input| self.by_input.get(&request.role)?.get(&input))
        {
            return Ok(text.clone());
        }
        match &self.scripted {
            Some(backend) => backend.complete(config, request, digest),
            None => Err(GatewayError::MockMiss {
                digest: digest.to_string(),
            }),
        }
    }
}

/// Backend defined by a closure.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, _config: &EndpointConfig, request: &ChatRequest, _digest: &str) -> Result<String, GatewayError> {
        (self.0)(request)
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
struct InFlight {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|p| p.into_inner());
        while *active >= self.limit {
            active = self.freed.wait(active).unwrap_or_else(|p| p.into_inner());
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.0.active.lock().unwrap_or_else(|p| p.into_inner());
        *active -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct GatewayStats {
    /// Every `chat` call, cache hits included.
    pub chat_requests: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub text: String,
    pub digest: String,
    pub from_cache: bool,
}

pub struct Gateway {
    roles: RwLock<BTreeMap<Role, EndpointConfig>>,
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    in_flight: InFlight,
    chat_requests: AtomicU64,
    cache_hits: AtomicU64,
    backend_calls: AtomicU64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            roles: RwLock::new(BTreeMap::new()),
            backend,
            cache: None,
            in_flight: InFlight::new(4),
            chat_requests: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
        }
    }

    pub fn with_role(self, role: Role, config: EndpointConfig) -> Self {
        self.roles.write().unwrap_or_else(|p| p.into_inner()).insert(role, config);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.in_flight = InFlight::new(limit);
        self
    }

    pub fn role_config(&self, role: Role) -> Option<EndpointConfig> {
        self.roles.read().unwrap_or_else(|p| p.into_inner()).get(&role).cloned()
    }

    /// Cache key this request would be stored under.
    pub fn digest(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let config = self.config_for(request.role)?;
        Ok(cache_key(&config, &request.system, &request.user))
    }

    fn config_for(&self, role: Role) -> Result<EndpointConfig, GatewayError> {
        self.role_config(role)
            .ok_or_else(|| GatewayError::Backend(format!("no endpoint configured for role {role}")))
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        self.chat_requests.fetch_add(1, Ordering::SeqCst);
        let config = self.config_for(request.role)?;
        let digest = cache_key(&config, &request.system, &request.user);
        if let Some(entry) = self.cache.as_ref().and_then(|c| c.get(&digest)) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(ChatReply {
                text: entry.response,
                digest,
                from_cache: true,
            });
        }
        let text = {
            let _permit = self.in_flight.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            self.backend.complete(&config, request, &digest)?
        };
        if text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        if let Some(cache) = &self.cache {
            cache.put(&CacheEntry {
                key: digest.clone(),
                model: config.model.clone(),
                response: text.clone(),
                timestamp: chrono::Utc::now().to_rfc3339(),
            })?;
        }
        Ok(ChatReply {
            text,
            digest,
            from_cache: false,
        })
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            chat_requests: self.chat_requests.load(Ordering::SeqCst),
            cache_hits: self.cache_hits.load(Ordering::SeqCst),
            backend_calls: self.backend_calls.load(Ordering::SeqCst),
        }
    }
}

/// An L2-normalized embedding; the zero vector is kept and flagged degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    values: Vec<f64>,
    degenerate: bool,
}

impl UnitVector {
    pub fn normalize(values: Vec<f64>) -> Self {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self {
                values: vec![0.0; values.len()],
                degenerate: true,
            };
        }
        Self {
            values: values.into_iter().map(|v| v / norm).collect(),
            degenerate: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Dot product; 0.0 when either side is degenerate or dimensions differ.
    pub fn cosine(&self, other: &UnitVector) -> f64 {
        if self.degenerate || other.degenerate || self.values.len() != other.values.len() {
            return 0.0;
        }
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Offline hashed bag-of-words embedding over lowercased whitespace tokens.
pub fn stub_embed(text: &str) -> UnitVector {
    let mut counts = vec![0.0; STUB_DIMENSION];
    for token in text.to_lowercase().split_whitespace() {
        counts[(fnv1a64(token.as_bytes()) % STUB_DIMENSION as u64) as usize] += 1.0;
    }
    UnitVector::normalize(counts)
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> String;
    fn embed(&self, texts: &[String]) -> Result<Vec<UnitVector>, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StubEmbedder;

impl Embedder for StubEmbedder {
    fn model_id(&self) -> String {
        format!("stub-fnv1a-{STUB_DIMENSION}")
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<UnitVector>, GatewayError> {
        Ok(texts.iter().map(|t| stub_embed(t)).collect())
    }
}

/// OpenAI-compatible `/embeddings` client; vectors are normalized here
/// whatever the backend returns.
pub struct HttpEmbedder {
    config: EndpointConfig,
    http: HttpCaller,
}

impl HttpEmbedder {
    pub fn new(config: EndpointConfig, transport: Arc<dyn Transport>) -> Self {
        Self::with_retry(config, transport, thread_sleeper(), RetryPolicy::default())
    }

    pub fn with_retry(config: EndpointConfig, transport: Arc<dyn Transport>, sleeper: Sleeper, policy: RetryPolicy) -> Self {
        Self {
            config,
            http: HttpCaller {
                transport,
                sleeper,
                policy,
                attempts: AtomicU64::new(0),
            },
        }
    }
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl Embedder for HttpEmbedder {
    fn model_id(&self) -> String {
        self.config.model.clone()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<UnitVector>, GatewayError> {
        let mut out: Vec<UnitVector> = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.batch_size.max(1)) {
            let body = serde_json::json!({"model": self.config.model, "input": batch});
            let raw = self.http.post(&self.config, &self.config.endpoint("embeddings"), &body)?;
            let mut parsed: EmbeddingResponse = serde_json::from_str(&raw)
                .map_err(|e| GatewayError::Backend(format!("unexpected embeddings response: {e}")))?;
            if parsed.data.len() != batch.len() {
                return Err(GatewayError::Backend(format!(
                    "expected {} embeddings, got {}",
                    batch.len(),
                    parsed.data.len()
                )));
            }
            if parsed.data.iter().all(|d| d.index.is_some()) {
                parsed.data.sort_by_key(|d| d.index);
            }
            for datum in parsed.data {
                out.push(UnitVector::normalize(datum.embedding));
            }
        }
        if let Some(first) = out.first() {
            if out.iter().any(|v| v.dim() != first.dim()) {
                return Err(GatewayError::Backend("embedding dimensions differ across the batch".into()));
            }
        }
        Ok(out)
    }
}
