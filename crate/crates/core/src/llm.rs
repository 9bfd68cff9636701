//! Prompt templates, chat-completion backends and reply parsers.
//!
//! A backend is either an HTTP chat-completion endpoint or a mock that
//! replays recorded replies from a fixture file. Mock lookups are keyed by
//! the template name plus a stable hash of the slot bindings, so a pipeline
//! run against the mock is bit-reproducible.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration as StdDuration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{Schedule, Step, MAX_SCHEDULE_STEPS};
use crate::temporal::{find_duration_phrases, parse_duration, Duration};

pub const ENV_URL: &str = "CHRONOCHAT_LLM_URL";
pub const ENV_KEY_VAR: &str = "CHRONOCHAT_LLM_KEY_VAR";
pub const ENV_MODEL: &str = "CHRONOCHAT_LLM_MODEL";
pub const ENV_MODE: &str = "CHRONOCHAT_LLM_MODE";
pub const ENV_FIXTURES: &str = "CHRONOCHAT_LLM_FIXTURES";

const BUNDLED_FIXTURES: &str = include_str!("../fixtures/mock_llm.json");

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("template `{template}` needs slot `{slot}`")]
    MissingSlot { template: String, slot: String },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {0}")]
    HttpError(u16),
    #[error("rate limited by endpoint")]
    RateLimited,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded reply for `{0}`")]
    MissingFixture(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("fixture file: {0}")]
    Fixture(String),
    #[error("completion request has no messages")]
    EmptyMessages,
    #[error("input text is empty")]
    EmptyInput,
    #[error("model reply is empty")]
    EmptyReply,
    #[error("no duration phrase in reply `{0}`")]
    NoDurationInReply(String),
    #[error("no parsable schedule steps in reply")]
    NoParsableSteps,
}

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub body: String,
    pub required_slots: BTreeSet<String>,
}

fn slot_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{([a-z_][a-z0-9_]*)\}\}").expect("static regex"))
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, body: impl Into<String>) -> Self {
        let body = body.into();
        let required_slots = slot_regex()
            .captures_iter(&body)
            .map(|c| c[1].to_string())
            .collect();
        PromptTemplate {
            name: name.into(),
            body,
            required_slots,
        }
    }

    /// Single-pass substitution of `{{slot}}` markers. Extra bindings are
    /// ignored.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
        if let Some(missing) = self.required_slots.iter().find(|s| !bindings.contains_key(*s)) {
            return Err(LlmError::MissingSlot {
                template: self.name.clone(),
                slot: missing.clone(),
            });
        }
        Ok(slot_regex()
            .replace_all(&self.body, |caps: &regex::Captures| bindings[&caps[1]].clone())
            .into_owned())
    }
}

macro_rules! shipped {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../templates/", $name, ".txt")))),*]
    };
}

const SHIPPED: &[(&str, &str)] = shipped![
    "extract_events",
    "extract_events_slot_filling",
    "extract_events_qa",
    "estimate_duration",
    "craft_event_steps",
    "get_schedule",
    "generate_life_events",
    "chatgpt_first_session",
    "chatgpt_subsequent_session",
    "chatgpt_subsequent_session_gap",
    "chatgpt_subsequent_session_progress",
    "chatgpt_subsequent_session_schedule",
    "chatgpt_subsequent_session_both",
    "self_chat_turn",
];

pub fn shipped_template_names() -> impl Iterator<Item = &'static str> {
    SHIPPED.iter().map(|(name, _)| *name)
}

pub fn template(name: &str) -> Result<PromptTemplate, LlmError> {
    SHIPPED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, body)| PromptTemplate::new(*n, *body))
        .ok_or_else(|| LlmError::UnknownTemplate(name.to_string()))
}

pub fn bindings<I, K, V>(pairs: I) -> BTreeMap<String, String>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<String>,
{
    pairs.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

/// Renders a shipped template by name.
pub fn render_prompt(name: &str, bindings: &BTreeMap<String, String>) -> Result<String, LlmError> {
    template(name)?.render(bindings)
}

// ---------------------------------------------------------------------------
// Requests and backends

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    /// Mock lookup key: `<template>:<hash>`.
    pub fixture_key: String,
}

fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable key for a template rendered with `bindings`.
pub fn fixture_key(template: &str, bindings: &BTreeMap<String, String>) -> String {
    let canonical = serde_json::to_vec(bindings).expect("string map serializes");
    format!("{template}:{}", short_hash(&canonical))
}

impl CompletionRequest {
    pub fn from_template(name: &str, bindings: &BTreeMap<String, String>) -> Result<Self, LlmError> {
        let prompt = render_prompt(name, bindings)?;
        Ok(CompletionRequest {
            messages: vec![ChatMessage::user(prompt)],
            fixture_key: fixture_key(name, bindings),
        })
    }

    pub fn raw(messages: Vec<ChatMessage>) -> Self {
        let canonical = serde_json::to_vec(&messages).expect("messages serialize");
        CompletionRequest {
            fixture_key: format!("raw:{}", short_hash(&canonical)),
            messages,
        }
    }

    pub fn template_name(&self) -> &str {
        self.fixture_key.split_once(':').map_or("", |(t, _)| t)
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub mode: BackendMode,
    pub endpoint: Option<String>,
    /// Name of the environment variable that holds the API key.
    pub credential_env: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub retry_backoff_ms: u64,
    pub calls_per_minute: Option<u32>,
    /// `None` in mock mode selects the bundled fixtures.
    pub fixture_path: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            mode: BackendMode::Mock,
            endpoint: None,
            credential_env: None,
            model: "gpt-3.5-turbo".to_string(),
            timeout_secs: 60,
            max_retries: 3,
            retry_backoff_ms: 500,
            calls_per_minute: None,
            fixture_path: None,
        }
    }
}

impl BackendConfig {
    pub fn mock() -> Self {
        BackendConfig::default()
    }

    pub fn http(endpoint: impl Into<String>, credential_env: impl Into<String>) -> Self {
        BackendConfig {
            mode: BackendMode::Http,
            endpoint: Some(endpoint.into()),
            credential_env: Some(credential_env.into()),
            ..BackendConfig::default()
        }
    }

    /// Reads `CHRONOCHAT_LLM_*` variables on top of the defaults.
    pub fn from_env() -> Result<Self, LlmError> {
        let mut config = BackendConfig::default();
        if let Ok(mode) = std::env::var(ENV_MODE) {
            config.mode = match mode.to_lowercase().as_str() {
                "http" => BackendMode::Http,
                "mock" => BackendMode::Mock,
                other => return Err(LlmError::Config(format!("unknown mode `{other}`"))),
            };
        }
        config.endpoint = std::env::var(ENV_URL).ok();
        config.credential_env = std::env::var(ENV_KEY_VAR).ok();
        if let Ok(model) = std::env::var(ENV_MODEL) {
            config.model = model;
        }
        config.fixture_path = std::env::var_os(ENV_FIXTURES).map(PathBuf::from);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        match self.mode {
            BackendMode::Http => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(LlmError::Config("http mode requires an endpoint".into()));
                }
                if self.credential_env.as_deref().is_none_or(str::is_empty) {
                    return Err(LlmError::Config("http mode requires a credential variable".into()));
                }
                Ok(())
            }
            BackendMode::Mock => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ChatBackend>, LlmError> {
        self.validate()?;
        Ok(match self.mode {
            BackendMode::Http => Box::new(HttpBackend::new(self)?),
            BackendMode::Mock => Box::new(match &self.fixture_path {
                Some(path) => MockBackend::from_file(path)?,
                None => MockBackend::bundled(),
            }),
        })
    }
}

/// One-shot completion through the backend described by `config`.
pub fn complete(config: &BackendConfig, messages: Vec<ChatMessage>) -> Result<String, LlmError> {
    if messages.is_empty() {
        return Err(LlmError::EmptyMessages);
    }
    config.build()?.complete(&CompletionRequest::raw(messages))
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Deserialize)]
struct FixtureRecord {
    #[serde(default)]
    key: Option<String>,
    #[serde(default)]
    template: Option<String>,
    #[serde(default)]
    bindings: BTreeMap<String, String>,
    reply: String,
}

#[derive(Debug, Default, Deserialize)]
struct FixtureFile {
    #[serde(default)]
    fixtures: Vec<FixtureRecord>,
    /// Per-template reply pools for open-ended requests such as dialogue
    /// turns; one reply is picked by the request hash.
    #[serde(default)]
    pools: BTreeMap<String, Vec<String>>,
}

/// Replays recorded replies. Unknown keys are an error, never invented.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    replies: BTreeMap<String, String>,
    pools: BTreeMap<String, Vec<String>>,
}

impl MockBackend {
    pub fn from_json(text: &str) -> Result<Self, LlmError> {
        let file: FixtureFile = serde_json::from_str(text).map_err(|e| LlmError::Fixture(e.to_string()))?;
        let mut mock = MockBackend {
            replies: BTreeMap::new(),
            pools: file.pools,
        };
        for record in file.fixtures {
            let key = match (record.key, record.template) {
                (Some(key), _) => key,
                (None, Some(template)) => fixture_key(&template, &record.bindings),
                (None, None) => return Err(LlmError::Fixture("record needs `key` or `template`".into())),
            };
            mock.replies.insert(key, record.reply);
        }
        Ok(mock)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| LlmError::Fixture(format!("{}: {e}", path.display())))?;
        MockBackend::from_json(&text)
    }

    /// Fixtures shipped with the crate.
    pub fn bundled() -> Self {
        MockBackend::from_json(BUNDLED_FIXTURES).expect("bundled fixtures parse")
    }

    pub fn insert(&mut self, key: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(key.into(), reply.into());
    }

    pub fn insert_pool(&mut self, template: impl Into<String>, replies: Vec<String>) {
        self.pools.insert(template.into(), replies);
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        if let Some(reply) = self.replies.get(&request.fixture_key) {
            return Ok(reply.clone());
        }
        match self.pools.get(request.template_name()) {
            Some(pool) if !pool.is_empty() => {
                let digest = Sha256::digest(request.fixture_key.as_bytes());
                let pick = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
                Ok(pool[(pick % pool.len() as u64) as usize].clone())
            }
            _ => Err(LlmError::MissingFixture(request.fixture_key.clone())),
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP backend

/// Token bucket allowing at most `per_minute` acquisitions per minute.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(per_minute: u32) -> Self {
        let capacity = per_minute.max(1) as f64;
        RateLimiter {
            capacity,
            refill_per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    fn refill(&self, state: &mut (f64, Instant)) {
        let now = Instant::now();
        let elapsed = now.duration_since(state.1).as_secs_f64();
        state.0 = (state.0 + elapsed * self.refill_per_sec).min(self.capacity);
        state.1 = now;
    }

    pub fn try_acquire(&self) -> bool {
        let mut state = self.state.lock().expect("rate limiter lock");
        self.refill(&mut state);
        if state.0 >= 1.0 {
            state.0 -= 1.0;
            true
        } else {
            false
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter lock");
                self.refill(&mut state);
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                (1.0 - state.0) / self.refill_per_sec
            };
            std::thread::sleep(StdDuration::from_secs_f64(wait));
        }
    }
}

fn process_limiter(endpoint: &str, per_minute: u32) -> Arc<RateLimiter> {
    static LIMITERS: OnceLock<Mutex<HashMap<String, Arc<RateLimiter>>>> = OnceLock::new();
    let mut map = LIMITERS.get_or_init(Default::default).lock().expect("limiter registry");
    map.entry(format!("{endpoint}#{per_minute}"))
        .or_insert_with(|| Arc::new(RateLimiter::per_minute(per_minute)))
        .clone()
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
}

pub struct HttpBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    model: String,
    max_retries: u32,
    backoff: StdDuration,
    limiter: Option<Arc<RateLimiter>>,
}

enum Attempt {
    Done(String),
    Retry(LlmError),
    Fail(LlmError),
}

impl HttpBackend {
    pub fn new(config: &BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let key_var = config.credential_env.clone().unwrap_or_default();
        let api_key = std::env::var(&key_var)
            .map_err(|_| LlmError::Config(format!("credential variable `{key_var}` is not set")))?;
        let agent = ureq::AgentBuilder::new()
            .timeout(StdDuration::from_secs(config.timeout_secs.max(1)))
            .build();
        Ok(HttpBackend {
            limiter: config.calls_per_minute.map(|r| process_limiter(&endpoint, r)),
            agent,
            endpoint,
            api_key,
            model: config.model.clone(),
            max_retries: config.max_retries,
            backoff: StdDuration::from_millis(config.retry_backoff_ms),
        })
    }

    fn attempt(&self, messages: &[ChatMessage]) -> Attempt {
        let body = WireRequest {
            model: &self.model,
            messages,
        };
        let response = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        match response {
            Ok(resp) => match resp.into_json::<serde_json::Value>() {
                Ok(value) => match value.pointer("/choices/0/message/content").and_then(|v| v.as_str()) {
                    Some(text) => Attempt::Done(text.to_string()),
                    None => Attempt::Fail(LlmError::Transport("response has no choices[0].message.content".into())),
                },
                Err(e) => Attempt::Fail(LlmError::Transport(e.to_string())),
            },
            Err(ureq::Error::Status(429, _)) => Attempt::Retry(LlmError::RateLimited),
            Err(ureq::Error::Status(code, _)) if code >= 500 => Attempt::Retry(LlmError::HttpError(code)),
            Err(ureq::Error::Status(code, _)) => Attempt::Fail(LlmError::HttpError(code)),
            Err(ureq::Error::Transport(t)) => {
                let text = t.to_string();
                if text.to_lowercase().contains("timed out") {
                    Attempt::Retry(LlmError::Timeout)
                } else {
                    Attempt::Retry(LlmError::Transport(text))
                }
            }
        }
    }
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        if request.messages.is_empty() {
            return Err(LlmError::EmptyMessages);
        }
        let mut attempt = 0;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.attempt(&request.messages) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(err) => return Err(err),
                Attempt::Retry(err) if attempt >= self.max_retries => return Err(err),
                Attempt::Retry(err) => {
                    tracing::warn!(attempt, error = %err, "retrying chat completion");
                    std::thread::sleep(self.backoff * 2u32.pow(attempt.min(6)));
                    attempt += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Event extraction

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEvent {
    pub speaker: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_duration: Option<Duration>,
}

impl ExtractedEvent {
    /// `B: executing a social media marketing (about 3 months)`
    pub fn to_line(&self) -> String {
        match self.estimated_duration {
            Some(d) => format!("{}: {} (about {})", self.speaker, self.description, d),
            None => format!("{}: {}", self.speaker, self.description),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extraction {
    pub events: Vec<ExtractedEvent>,
    /// Speakers the model reported as mentioning nothing.
    pub not_mentioned: Vec<String>,
    /// Non-blank reply lines that matched no grammar.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStyle {
    /// Instruction plus worked instances; the default.
    #[default]
    Completion,
    SlotFilling,
    QuestionAnswering,
}

const NOT_MENTIONED: &str = "something is not mentioned";

fn event_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:[Ss]peaker\s+)?([A-Za-z0-9]{1,16})\s*:\s*(.+?)\s*(?:\(\s*(?:about\s+)?([^()]*?)\s*\))?\s*\.?\s*$")
            .expect("static regex")
    })
}

fn engaging_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?:[Ss]peaker\s+)?\b([A-Za-z0-9]{1,16}) is engaging in ([^.,]+(?:,[^.,]+?)*?)(?:, which takes about ([^.]+?))?(?: to finish)?(?:\.|$)",
        )
        .expect("static regex")
    })
}

fn is_not_mentioned(description: &str) -> bool {
    description.trim().trim_end_matches('.').eq_ignore_ascii_case(NOT_MENTIONED)
}

/// Parses `<speaker>: <description> (about <duration>)` lines. Never fails;
/// lines outside the grammar are counted in `skipped`.
pub fn parse_extraction_reply(reply: &str) -> Extraction {
    let mut out = Extraction::default();
    for line in reply.lines().filter(|l| !l.trim().is_empty()) {
        let Some(caps) = event_line_regex().captures(line) else {
            out.skipped += 1;
            continue;
        };
        let speaker = caps[1].to_string();
        let description = caps[2].trim().to_string();
        if is_not_mentioned(&description) {
            out.not_mentioned.push(speaker);
            continue;
        }
        let estimated_duration = match caps.get(3) {
            Some(m) => match parse_duration(m.as_str()) {
                Ok(d) => Some(d),
                Err(_) => {
                    out.skipped += 1;
                    continue;
                }
            },
            None => None,
        };
        if description.is_empty() {
            out.skipped += 1;
            continue;
        }
        out.events.push(ExtractedEvent {
            speaker,
            description,
            estimated_duration,
        });
    }
    out
}

/// Parses `X is engaging in Y[, which takes about D][ to finish].` sentences.
pub fn parse_engaging_reply(reply: &str) -> Extraction {
    let mut out = Extraction::default();
    for line in reply.lines().filter(|l| !l.trim().is_empty()) {
        let mut matched = false;
        for caps in engaging_regex().captures_iter(line) {
            let speaker = caps[1].to_string();
            let description = caps[2].trim().to_string();
            if speaker == "____" || description.contains("____") {
                continue;
            }
            matched = true;
            if is_not_mentioned(&description) {
                out.not_mentioned.push(speaker);
                continue;
            }
            let estimated_duration = caps.get(3).and_then(|m| {
                find_duration_phrases(m.as_str()).first().map(|p| p.duration)
            });
            out.events.push(ExtractedEvent {
                speaker,
                description,
                estimated_duration,
            });
        }
        if !matched {
            out.skipped += 1;
        }
    }
    out
}

fn speakers_in(history: &str) -> Vec<String> {
    let mut seen = Vec::new();
    for line in history.lines() {
        if let Some((speaker, _)) = line.split_once(':') {
            let speaker = speaker.trim();
            if !speaker.is_empty() && speaker.len() <= 16 && speaker.chars().all(char::is_alphanumeric) {
                if !seen.iter().any(|s| s == speaker) {
                    seen.push(speaker.to_string());
                }
            }
        }
    }
    if seen.is_empty() {
        seen = vec!["A".to_string(), "B".to_string()];
    }
    seen
}

fn answered_yes(reply: &str) -> bool {
    reply.trim_start().to_lowercase().starts_with("yes")
}

fn extract_question_answering(history: &str, backend: &dyn ChatBackend) -> Result<Extraction, LlmError> {
    let mut transcript = String::new();
    let mut engaged = Vec::new();
    let mut number = 1;
    let mut ask = |transcript: &mut String, question: String| -> Result<String, LlmError> {
        let questions = format!("{transcript}Question {number}:\n{question}\nAnswer:");
        number += 1;
        let request = CompletionRequest::from_template(
            "extract_events_qa",
            &bindings([("history", history.to_string()), ("questions", questions)]),
        )?;
        let reply = backend.complete(&request)?;
        transcript.push_str(&format!("Question {}:\n{question}\nAnswer: {}\n", number - 1, reply.trim()));
        Ok(reply)
    };
    for speaker in speakers_in(history) {
        let reply = ask(
            &mut transcript,
            format!("Did speaker {speaker} mention any events that speaker {speaker} is engaging? Answer with Yes or No"),
        )?;
        if answered_yes(&reply) {
            engaged.push(speaker);
        }
    }
    let mut out = Extraction::default();
    for speaker in engaged {
        let reply = ask(
            &mut transcript,
            format!(
                "What are the events that speaker {speaker} is engaging? Answer the content of the event and an estimated time to finish that event."
            ),
        )?;
        let part = parse_engaging_reply(&reply);
        out.events.extend(part.events);
        out.not_mentioned.extend(part.not_mentioned);
        out.skipped += part.skipped;
    }
    Ok(out)
}

/// Asks the backend which events the speakers are engaged in.
pub fn extract_events(
    history: &str,
    backend: &dyn ChatBackend,
    style: ExtractionStyle,
) -> Result<Extraction, LlmError> {
    if history.trim().is_empty() {
        return Err(LlmError::EmptyInput);
    }
    let history_binding = bindings([("history", history.trim_end().to_string())]);
    let extraction = match style {
        ExtractionStyle::Completion => {
            let reply = backend.complete(&CompletionRequest::from_template("extract_events", &history_binding)?)?;
            if reply.trim().is_empty() {
                return Err(LlmError::EmptyReply);
            }
            parse_extraction_reply(&reply)
        }
        ExtractionStyle::SlotFilling => {
            let reply = backend.complete(&CompletionRequest::from_template(
                "extract_events_slot_filling",
                &history_binding,
            )?)?;
            if reply.trim().is_empty() {
                return Err(LlmError::EmptyReply);
            }
            parse_engaging_reply(&reply)
        }
        ExtractionStyle::QuestionAnswering => extract_question_answering(history, backend)?,
    };
    if extraction.skipped > 0 {
        tracing::warn!(skipped = extraction.skipped, "dropped unparsable extraction lines");
    }
    Ok(extraction)
}

// ---------------------------------------------------------------------------
// Duration estimation and schedules

/// Asks for a typical duration and keeps the first duration phrase found.
pub fn estimate_event_duration(description: &str, backend: &dyn ChatBackend) -> Result<Duration, LlmError> {
    if description.trim().is_empty() {
        return Err(LlmError::EmptyInput);
    }
    let request = CompletionRequest::from_template("estimate_duration", &bindings([("event", description.trim())]))?;
    let reply = backend.complete(&request)?;
    first_duration_in(&reply)
}

pub fn first_duration_in(reply: &str) -> Result<Duration, LlmError> {
    find_duration_phrases(reply)
        .first()
        .map(|p| p.duration)
        .ok_or_else(|| LlmError::NoDurationInReply(reply.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedSchedule {
    pub steps: Vec<Step>,
    /// Steps found beyond the seven-step cap and dropped.
    pub truncated: usize,
}

fn step_start_is_delimited(text: &str, start: usize) -> bool {
    let before = text[..start].trim_end();
    if before.is_empty() {
        return true;
    }
    if before.ends_with([',', ';', '.', ':', '\n', '-', '*']) || before.ends_with(" and") || before == "and" {
        return true;
    }
    // numbered list item such as "2)" or "3."
    let last = before.rsplit(char::is_whitespace).next().unwrap_or(before);
    last.trim_end_matches(['.', ')']).chars().all(|c| c.is_ascii_digit()) && last.len() > 1
}

fn clean_step_text(text: &str) -> String {
    let mut t = text.trim();
    loop {
        let before = t;
        t = t.trim_end_matches([',', ';', '.', ' ', '\n', '\r']);
        t = t.strip_suffix(" and").unwrap_or(t);
        if t == before {
            break;
        }
    }
    t.trim_start_matches(['-', '*', ' ']).trim().to_string()
}

/// Parses `<duration> for <step>` items separated by commas, semicolons,
/// "and" or line breaks. At most seven steps are kept.
pub fn parse_schedule_reply(reply: &str) -> ParsedSchedule {
    let starts: Vec<_> = find_duration_phrases(reply)
        .into_iter()
        .filter_map(|p| {
            let rest = &reply[p.end..];
            let after = rest.trim_start();
            let gap = rest.len() - after.len();
            (gap > 0 && after.to_lowercase().starts_with("for ") && step_start_is_delimited(reply, p.start))
                .then_some((p.duration, p.start, p.end + gap + 4))
        })
        .collect();
    let mut steps = Vec::new();
    for (i, (duration, _, body_start)) in starts.iter().enumerate() {
        let body_end = starts.get(i + 1).map_or(reply.len(), |next| next.1);
        let description = clean_step_text(&reply[*body_start..body_end]);
        if !description.is_empty() {
            steps.push(Step::new(description, *duration));
        }
    }
    let truncated = steps.len().saturating_sub(MAX_SCHEDULE_STEPS);
    steps.truncate(MAX_SCHEDULE_STEPS);
    ParsedSchedule { steps, truncated }
}

/// Asks for a step schedule of an event that takes about `duration`.
pub fn generate_event_schedule(
    description: &str,
    duration: Duration,
    backend: &dyn ChatBackend,
) -> Result<Schedule, LlmError> {
    if description.trim().is_empty() || duration.is_zero() {
        return Err(LlmError::EmptyInput);
    }
    let request = CompletionRequest::from_template(
        "get_schedule",
        &bindings([("event", description.trim().to_string()), ("duration", duration.to_string())]),
    )?;
    let reply = backend.complete(&request)?;
    let parsed = parse_schedule_reply(&reply);
    if parsed.steps.is_empty() {
        return Err(LlmError::NoParsableSteps);
    }
    if parsed.truncated > 0 {
        tracing::warn!(dropped = parsed.truncated, "schedule reply exceeded seven steps");
    }
    Ok(Schedule::new(parsed.steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::MINUTES_PER_MONTH;

    #[test]
    fn render_substitutes_every_slot() {
        let out = render_prompt(
            "get_schedule",
            &bindings([("event", "getting a driver license"), ("duration", "2 months")]),
        )
        .unwrap();
        assert!(out.contains("getting a driver license"));
        assert!(out.contains("2 months"));
        assert!(!out.contains("{{"));
    }

    #[test]
    fn missing_slot_is_named() {
        match render_prompt("get_schedule", &bindings([("event", "x")])) {
            Err(LlmError::MissingSlot { slot, .. }) => assert_eq!(slot, "duration"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            render_prompt("nope", &BTreeMap::new()),
            Err(LlmError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn every_shipped_template_loads() {
        for name in shipped_template_names() {
            let t = template(name).unwrap();
            assert!(!t.required_slots.is_empty(), "{name}");
        }
    }

    #[test]
    fn fixture_key_is_order_independent() {
        let a = bindings([("a", "1"), ("b", "2")]);
        let b = bindings([("b", "2"), ("a", "1")]);
        assert_eq!(fixture_key("t", &a), fixture_key("t", &b));
        assert_ne!(fixture_key("t", &a), fixture_key("u", &a));
        assert_eq!(fixture_key("t", &a).len(), "t:".len() + 16);
    }

    #[test]
    fn mock_lookup() {
        let mut mock = MockBackend::default();
        let request = CompletionRequest::from_template("estimate_duration", &bindings([("event", "x")])).unwrap();
        assert!(matches!(mock.complete(&request), Err(LlmError::MissingFixture(_))));
        mock.insert(request.fixture_key.clone(), "about 2 days");
        assert_eq!(mock.complete(&request).unwrap(), "about 2 days");
        mock.insert_pool("estimate_duration", vec!["one".into(), "two".into()]);
        let other = CompletionRequest::from_template("estimate_duration", &bindings([("event", "y")])).unwrap();
        let first = mock.complete(&other).unwrap();
        assert_eq!(mock.complete(&other).unwrap(), first);
    }

    #[test]
    fn http_config_requires_endpoint_and_credential() {
        let mut config = BackendConfig::http("", "KEY");
        assert!(matches!(config.validate(), Err(LlmError::Config(_))));
        config.endpoint = Some("http://localhost:1".into());
        config.credential_env = None;
        assert!(matches!(config.validate(), Err(LlmError::Config(_))));
    }

    #[test]
    fn extraction_line_grammar() {
        let got = parse_extraction_reply("B: executing a social media marketing (about 3 months)");
        assert_eq!(got.events.len(), 1);
        assert_eq!(got.events[0].speaker, "B");
        assert_eq!(got.events[0].description, "executing a social media marketing");
        assert_eq!(got.events[0].estimated_duration.unwrap().minutes(), 3 * MINUTES_PER_MONTH);
        assert_eq!(got.skipped, 0);

        let got = parse_extraction_reply("A: something is not mentioned\nB: paper writing (about 2 weeks)");
        assert_eq!(got.not_mentioned, vec!["A"]);
        assert_eq!(got.events.len(), 1);

        let got = parse_extraction_reply("lorem ipsum\n???\n\n(about 3 days)\nA: thing (about forever)");
        assert!(got.events.is_empty());
        assert_eq!(got.skipped, 4);

        let got = parse_extraction_reply("Speaker A: moving house.");
        assert_eq!(got.events[0].description, "moving house");
        assert_eq!(got.events[0].estimated_duration, None);
    }

    #[test]
    fn engaging_sentences() {
        let reply = "In the above conversation, speakers talked about the events they are engaging. A is engaging in something is not mentioned. B is engaging in executing a social media marketing, which takes about 3 months.";
        let got = parse_engaging_reply(reply);
        assert_eq!(got.not_mentioned, vec!["A"]);
        assert_eq!(got.events.len(), 1);
        assert_eq!(got.events[0].description, "executing a social media marketing");
        assert_eq!(got.events[0].estimated_duration.unwrap().minutes(), 3 * MINUTES_PER_MONTH);

        let got = parse_engaging_reply("Speaker B is engaging in paper writing, which takes about 2 weeks to finish.");
        assert_eq!(got.events[0].speaker, "B");
        assert_eq!(got.events[0].description, "paper writing");
    }

    #[test]
    fn first_duration_rule() {
        assert_eq!(first_duration_in("It usually takes about 3 months.").unwrap().minutes(), 3 * MINUTES_PER_MONTH);
        assert_eq!(first_duration_in("2 weeks to 2 months").unwrap().to_string(), "2 weeks");
        assert!(matches!(first_duration_in("it depends"), Err(LlmError::NoDurationInReply(_))));
    }

    #[test]
    fn schedule_reply_parsing() {
        let got = parse_schedule_reply(
            "one week for learning rules, 2 weeks for practicing, 2 weeks for passing exams, one week for road check, one week for getting license.",
        );
        assert_eq!(got.truncated, 0);
        let text: Vec<_> = got.steps.iter().map(Step::to_string).collect();
        assert_eq!(
            text,
            [
                "one week for learning rules",
                "2 weeks for practicing",
                "2 weeks for passing exams",
                "one week for road check",
                "one week for getting license"
            ]
        );

        let got = parse_schedule_reply(
            "one month for revising the whole thesis for clarity, coherence and flow, one month for revising the thesis based on feedback",
        );
        assert_eq!(got.steps.len(), 2);
        assert_eq!(got.steps[0].description, "revising the whole thesis for clarity, coherence and flow");

        let got = parse_schedule_reply("1. 2 days for packing\n2. one day for moving\n3) 3 days for unpacking and 2 hours for a party");
        assert_eq!(got.steps.len(), 4);
        assert_eq!(got.steps[2].description, "unpacking");

        let nine = (1..=9).map(|i| format!("{i} days for step {i}")).collect::<Vec<_>>().join(", ");
        let got = parse_schedule_reply(&nine);
        assert_eq!(got.steps.len(), 7);
        assert_eq!(got.truncated, 2);

        assert!(parse_schedule_reply("").steps.is_empty());
        assert!(parse_schedule_reply("Week 1-4: research the audience").steps.is_empty());
    }
}
