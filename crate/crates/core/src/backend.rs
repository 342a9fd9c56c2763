//! Chat-completion backends and the shared client that adds retries,
//! admission control and budgets.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::prompts::{PromptBundle, PromptTechnique, StepId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    System,
    User,
}

impl Role {
    fn api_name(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn from_bundle(b: &PromptBundle) -> Vec<ChatTurn> {
        vec![
            ChatTurn {
                role: Role::System,
                content: b.system.clone(),
            },
            ChatTurn {
                role: Role::User,
                content: b.user.clone(),
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_output: Option<u32>,
    pub model_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: None,
            max_output: None,
            model_name: "scripted".to_string(),
            request_seed: None,
        }
    }
}

impl SamplingParams {
    /// Temperature as recorded in reports.
    pub fn temperature_label(&self) -> String {
        match self.temperature {
            Some(t) => format!("{t}"),
            None => "provider-default".to_string(),
        }
    }
}

/// Identifies one exchange; `attempt` is 0 for the first prompt and counts repair re-prompts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RequestKey {
    pub group_id: String,
    pub step: StepId,
    pub technique: PromptTechnique,
    pub run_index: u32,
    #[serde(default)]
    pub attempt: u32,
}

impl fmt::Display for RequestKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}/{}/{}/{}",
            self.group_id,
            self.step.slug(),
            self.technique.slug(),
            self.run_index
        )?;
        if self.attempt > 0 {
            write!(f, "+repair{}", self.attempt)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub key: RequestKey,
    pub turns: Vec<ChatTurn>,
    pub params: SamplingParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request: ChatRequest,
    pub response_text: String,
    pub latency_ms: u64,
    pub attempt_count: u32,
    pub backend_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens_used: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub tokens_used: Option<u64>,
}

impl Reply {
    pub fn text(text: impl Into<String>) -> Self {
        Reply {
            text: text.into(),
            tokens_used: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend refused: {0}")]
    Refusal(String),
    #[error("budget exceeded: {0}")]
    BudgetExceeded(String),
    #[error("no scripted reply for {0}")]
    UnscriptedKey(RequestKey),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// Outcome of a single attempt; only `Transient` is retried.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttemptError {
    Transient(String),
    Refusal(String),
    Fatal(BackendError),
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> String;

    fn send(&self, req: &ChatRequest) -> Result<Reply, AttemptError>;

    /// Remote backends must run under a request and token budget.
    fn requires_budget(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub max_requests: Option<u64>,
    pub max_tokens: Option<u64>,
}

impl Budget {
    pub fn is_complete(&self) -> bool {
        self.max_requests.is_some() && self.max_tokens.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    /// Extra attempts after the first one for transient failures.
    pub retry_limit: u32,
    pub backoff_base: Duration,
    pub backoff_max: Duration,
    pub max_in_flight: usize,
    /// Minimum spacing between admissions; zero disables rate limiting.
    pub min_interval: Duration,
    pub budget: Budget,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            retry_limit: 3,
            backoff_base: Duration::from_millis(500),
            backoff_max: Duration::from_secs(30),
            max_in_flight: 8,
            min_interval: Duration::ZERO,
            budget: Budget::default(),
        }
    }
}

#[derive(Debug, Default)]
struct Admission {
    in_flight: usize,
    high_water: usize,
    next_slot: Option<Instant>,
}

/// Shared handle over a backend. Admission is serialized; execution is not.
pub struct Client {
    backend: Box<dyn ChatBackend>,
    cfg: ClientConfig,
    state: Mutex<Admission>,
    freed: Condvar,
    requests: AtomicU64,
    tokens: AtomicU64,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("backend", &self.backend.id())
            .field("cfg", &self.cfg)
            .finish()
    }
}

struct Permit<'a>(&'a Client);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_flight -= 1;
        self.0.freed.notify_one();
    }
}

impl Client {
    pub fn new(backend: Box<dyn ChatBackend>, cfg: ClientConfig) -> Result<Self, BackendError> {
        if cfg.max_in_flight == 0 {
            return Err(BackendError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if backend.requires_budget() && !cfg.budget.is_complete() {
            return Err(BackendError::Config(format!(
                "backend `{}` needs both a request budget and a token budget",
                backend.id()
            )));
        }
        Ok(Client {
            backend,
            cfg,
            state: Mutex::new(Admission::default()),
            freed: Condvar::new(),
            requests: AtomicU64::new(0),
            tokens: AtomicU64::new(0),
        })
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    /// Attempts sent to the backend so far, including retries.
    pub fn requests_sent(&self) -> u64 {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn tokens_used(&self) -> u64 {
        self.tokens.load(Ordering::SeqCst)
    }

    /// Largest number of simultaneously admitted requests observed.
    pub fn high_water_mark(&self) -> usize {
        self.state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .high_water
    }

    fn admit(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.in_flight >= self.cfg.max_in_flight {
            st = self.freed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.in_flight += 1;
        st.high_water = st.high_water.max(st.in_flight);
        let wait_until = if self.cfg.min_interval.is_zero() {
            None
        } else {
            let now = Instant::now();
            let slot = st.next_slot.map_or(now, |s| s.max(now));
            st.next_slot = Some(slot + self.cfg.min_interval);
            Some(slot)
        };
        drop(st);
        if let Some(slot) = wait_until {
            let now = Instant::now();
            if slot > now {
                std::thread::sleep(slot - now);
            }
        }
        Permit(self)
    }

    fn charge_request(&self) -> Result<(), BackendError> {
        let b = self.cfg.budget;
        if let Some(max) = b.max_tokens {
            if self.tokens.load(Ordering::SeqCst) >= max {
                return Err(BackendError::BudgetExceeded(format!(
                    "token budget {max} spent"
                )));
            }
        }
        let n = self.requests.fetch_add(1, Ordering::SeqCst);
        if let Some(max) = b.max_requests {
            if n >= max {
                self.requests.fetch_sub(1, Ordering::SeqCst);
                return Err(BackendError::BudgetExceeded(format!(
                    "request budget {max} spent"
                )));
            }
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(20)).unwrap_or(u32::MAX);
        self.cfg
            .backoff_base
            .saturating_mul(factor)
            .min(self.cfg.backoff_max)
    }

    pub fn complete(&self, req: ChatRequest) -> Result<CompletionRecord, BackendError> {
        validate_turns(&req.turns)?;
        let start = Instant::now();
        let mut attempts = 0u32;
        loop {
            self.charge_request()?;
            attempts += 1;
            let result = {
                let _permit = self.admit();
                self.backend.send(&req)
            };
            match result {
                Ok(reply) => {
                    let used = reply
                        .tokens_used
                        .unwrap_or_else(|| estimate_tokens(&req, &reply.text));
                    self.tokens.fetch_add(used, Ordering::SeqCst);
                    return Ok(CompletionRecord {
                        request: req,
                        response_text: reply.text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        attempt_count: attempts,
                        backend_id: self.backend.id(),
                        tokens_used: reply.tokens_used,
                    });
                }
                Err(AttemptError::Transient(detail)) => {
                    if attempts > self.cfg.retry_limit {
                        return Err(BackendError::Transport(format!(
                            "{detail} (after {attempts} attempts)"
                        )));
                    }
                    tracing::debug!(key = %req.key, attempt = attempts, %detail, "transient failure, retrying");
                    std::thread::sleep(self.backoff(attempts - 1));
                }
                Err(AttemptError::Refusal(detail)) => return Err(BackendError::Refusal(detail)),
                Err(AttemptError::Fatal(e)) => return Err(e),
            }
        }
    }
}

/// Rough count used only for budget accounting when the backend reports none.
fn estimate_tokens(req: &ChatRequest, reply: &str) -> u64 {
    let chars: usize = req
        .turns
        .iter()
        .map(|t| t.content.chars().count())
        .sum::<usize>()
        + reply.chars().count();
    (chars as u64).div_ceil(4)
}

fn validate_turns(turns: &[ChatTurn]) -> Result<(), BackendError> {
    match turns.first() {
        Some(t) if t.role == Role::System => {}
        _ => {
            return Err(BackendError::InvalidRequest(
                "first turn must be the system turn".into(),
            ))
        }
    }
    if turns.iter().filter(|t| t.role == Role::System).count() != 1 {
        return Err(BackendError::InvalidRequest(
            "exactly one system turn is allowed".into(),
        ));
    }
    if turns.iter().any(|t| t.content.trim().is_empty()) {
        return Err(BackendError::InvalidRequest("turn content is empty".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scripted backend

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScriptKey {
    pub group_id: String,
    pub step: StepId,
    pub technique: PromptTechnique,
    pub run_index: u32,
    #[serde(default)]
    pub attempt: u32,
}

impl ScriptKey {
    pub fn new(
        group_id: impl Into<String>,
        step: StepId,
        technique: PromptTechnique,
        run_index: u32,
    ) -> Self {
        ScriptKey {
            group_id: group_id.into(),
            step,
            technique,
            run_index,
            attempt: 0,
        }
    }

    fn of(key: &RequestKey) -> Self {
        ScriptKey {
            group_id: key.group_id.clone(),
            step: key.step,
            technique: key.technique,
            run_index: key.run_index,
            attempt: key.attempt,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ScriptLine {
    #[serde(flatten)]
    key: ScriptKey,
    text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    pub entries: BTreeMap<ScriptKey, String>,
}

impl Script {
    pub fn insert(&mut self, key: ScriptKey, text: impl Into<String>) {
        self.entries.insert(key, text.into());
    }

    pub fn get(&self, key: &ScriptKey) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One JSON object per line, sorted by key.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (key, text) in &self.entries {
            let line = ScriptLine {
                key: key.clone(),
                text: text.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("script lines serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Script, String> {
        let mut s = Script::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ScriptLine =
                serde_json::from_str(line).map_err(|e| format!("script line {}: {e}", i + 1))?;
            s.entries.insert(l.key, l.text);
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Script, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Script::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fallback {
    Error,
    Canned(String),
}

/// Replies from a fixed script. Repair attempts without their own entry reuse
/// the first-attempt text.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    fallback: Fallback,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: Script, fallback: Fallback) -> Self {
        ScriptedBackend {
            script,
            fallback,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> String {
        "scripted".to_string()
    }

    fn send(&self, req: &ChatRequest) -> Result<Reply, AttemptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let key = ScriptKey::of(&req.key);
        let base = ScriptKey {
            attempt: 0,
            ..key.clone()
        };
        match self.script.get(&key).or_else(|| self.script.get(&base)) {
            Some(text) => Ok(Reply::text(text)),
            None => match &self.fallback {
                Fallback::Error => Err(AttemptError::Fatal(BackendError::UnscriptedKey(
                    req.key.clone(),
                ))),
                Fallback::Canned(text) => Ok(Reply::text(text.clone())),
            },
        }
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn send(&self, req: &ChatRequest) -> Result<Reply, AttemptError> {
        (**self).send(req)
    }

    fn requires_budget(&self) -> bool {
        (**self).requires_budget()
    }
}

// ---------------------------------------------------------------------------
// remote backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub base_url: String,
    #[serde(default = "default_path")]
    pub path: String,
    /// Environment variable holding the bearer token.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout: Duration,
}

fn default_path() -> String {
    "/chat/completions".to_string()
}

fn default_key_env() -> String {
    "CHATDECIDE_API_KEY".to_string()
}

fn default_timeout() -> Duration {
    Duration::from_secs(300)
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        RemoteConfig {
            base_url: base_url.into(),
            path: default_path(),
            api_key_env: default_key_env(),
            timeout: default_timeout(),
        }
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            self.path.trim_start_matches('/')
        )
    }
}

/// Chat-completions style JSON over HTTP.
pub struct RemoteBackend {
    cfg: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl RemoteBackend {
    pub fn new(cfg: RemoteConfig) -> Result<Self, BackendError> {
        url::Url::parse(&cfg.base_url)
            .map_err(|e| BackendError::Config(format!("base url `{}`: {e}", cfg.base_url)))?;
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(RemoteBackend {
            cfg,
            api_key,
            agent,
        })
    }

    /// Fails fast when the server cannot be reached; any HTTP status counts as reachable.
    pub fn probe(&self) -> Result<(), BackendError> {
        match self.agent.get(&self.cfg.base_url).call() {
            Ok(_) => Ok(()),
            Err(e) => Err(BackendError::Transport(format!(
                "cannot reach {}: {e}",
                self.cfg.base_url
            ))),
        }
    }

    fn body(req: &ChatRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = req
            .turns
            .iter()
            .map(|t| serde_json::json!({"role": t.role.api_name(), "content": t.content}))
            .collect();
        let mut body = serde_json::json!({
            "model": req.params.model_name,
            "messages": messages,
        });
        let obj = body.as_object_mut().expect("json object");
        if let Some(t) = req.params.temperature {
            obj.insert("temperature".into(), t.into());
        }
        if let Some(m) = req.params.max_output {
            obj.insert("max_tokens".into(), m.into());
        }
        if let Some(s) = req.params.request_seed {
            obj.insert("seed".into(), s.into());
        }
        body
    }
}

fn read_reply(status: u16, body: &str) -> Result<Reply, AttemptError> {
    if status == 429 || status >= 500 {
        return Err(AttemptError::Transient(format!("HTTP {status}")));
    }
    if !(200..300).contains(&status) {
        let snippet: String = body.chars().take(300).collect();
        return Err(AttemptError::Fatal(BackendError::Transport(format!(
            "HTTP {status}: {snippet}"
        ))));
    }
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| {
        AttemptError::Fatal(BackendError::Transport(format!("unreadable body: {e}")))
    })?;
    let choice = &v["choices"][0];
    if choice["finish_reason"].as_str() == Some("content_filter") {
        return Err(AttemptError::Refusal("content filtered".into()));
    }
    let text = choice["message"]["content"].as_str().unwrap_or("");
    if text.trim().is_empty() {
        let why = choice["message"]["refusal"]
            .as_str()
            .unwrap_or("empty completion");
        return Err(AttemptError::Refusal(why.to_string()));
    }
    Ok(Reply {
        text: text.to_string(),
        tokens_used: v["usage"]["total_tokens"].as_u64(),
    })
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.cfg.base_url)
    }

    fn requires_budget(&self) -> bool {
        true
    }

    fn send(&self, req: &ChatRequest) -> Result<Reply, AttemptError> {
        let payload = Self::body(req).to_string();
        let mut call = self
            .agent
            .post(self.cfg.endpoint())
            .header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = call
            .send(payload)
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| AttemptError::Transient(e.to_string()))?;
        read_reply(status, &body)
    }
}
