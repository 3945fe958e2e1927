//! Chat-completion backends.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, FeatureId, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn new(role: &str, content: &str) -> Self {
        Self {
            role: role.to_string(),
            content: content.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Generate,
    Classify,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CallContext {
    pub purpose: Purpose,
    pub feature_id: FeatureId,
    pub doc_id: Option<String>,
    /// 0 for the first try of a prompt.
    pub attempt: usize,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, messages: &[Message], ctx: &CallContext) -> Result<String>;

    /// Model name plus any settings recorded alongside descriptions.
    fn model_id(&self) -> String;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningEffort {
    Low,
    Medium,
    High,
}

impl ReasoningEffort {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningEffort::Low => "low",
            ReasoningEffort::Medium => "medium",
            ReasoningEffort::High => "high",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmBackendConfig {
    pub mode: BackendMode,
    pub endpoint_url: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub generation_effort: ReasoningEffort,
    pub detection_effort: ReasoningEffort,
    pub timeout_secs: u64,
    pub retries: usize,
    pub max_in_flight: usize,
    pub cache_dir: Option<PathBuf>,
    pub mock: MockConfig,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Mock,
            endpoint_url: None,
            model: "gpt-oss-20b".into(),
            api_key_env: None,
            generation_effort: ReasoningEffort::Medium,
            detection_effort: ReasoningEffort::Low,
            timeout_secs: 120,
            retries: 2,
            max_in_flight: 8,
            cache_dir: None,
            mock: MockConfig::default(),
        }
    }
}

impl LlmBackendConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == BackendMode::Live && (self.endpoint_url.is_none() || self.api_key_env.is_none()) {
            return Err(Error::Config("live backend needs endpoint_url and api_key_env".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be positive".into()));
        }
        Ok(())
    }

    /// The configured backend wrapped in a response cache.
    pub fn build(&self) -> Result<Box<dyn ChatBackend>> {
        self.validate()?;
        let (inner, endpoint): (Box<dyn ChatBackend>, String) = match self.mode {
            BackendMode::Mock => (Box::new(MockBackend::new(self.mock.clone())), "mock".into()),
            BackendMode::Live => {
                let url = self.endpoint_url.clone().expect("validated");
                (Box::new(LiveBackend::from_config(self)?), url)
            }
        };
        Ok(Box::new(CachingBackend::new(inner, endpoint, self.cache_dir.clone())?))
    }
}

/// OpenAI-compatible `chat/completions` client.
pub struct LiveBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    api_key: String,
    generation_effort: ReasoningEffort,
    detection_effort: ReasoningEffort,
    retries: usize,
}

impl LiveBackend {
    pub fn from_config(cfg: &LlmBackendConfig) -> Result<Self> {
        let url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("live backend needs endpoint_url".into()))?;
        let var = cfg
            .api_key_env
            .as_deref()
            .ok_or_else(|| Error::Config("live backend needs api_key_env".into()))?;
        let api_key = std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(true)
            .build()
            .into();
        Ok(Self {
            agent,
            url,
            model: cfg.model.clone(),
            api_key,
            generation_effort: cfg.generation_effort,
            detection_effort: cfg.detection_effort,
            retries: cfg.retries,
        })
    }

    fn post(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("response has no choices[0].message.content: {value}"))
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, messages: &[Message], ctx: &CallContext) -> Result<String> {
        let effort = match ctx.purpose {
            Purpose::Generate => self.generation_effort,
            Purpose::Classify => self.detection_effort,
        };
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "reasoning_effort": effort.as_str(),
        });
        let mut last = String::new();
        for attempt in 0..=self.retries {
            match self.post(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("chat request for feature {} failed (try {}): {e}", ctx.feature_id, attempt + 1);
                    last = e;
                    if attempt < self.retries {
                        std::thread::sleep(Duration::from_millis(250 << attempt.min(4)));
                    }
                }
            }
        }
        Err(Error::Backend(last))
    }

    fn model_id(&self) -> String {
        format!(
            "{} (generation effort {}, detection effort {})",
            self.model,
            self.generation_effort.as_str(),
            self.detection_effort.as_str()
        )
    }
}

/// Content-addressed response cache in front of another backend.
///
/// Responses are keyed by a hash of the endpoint, model and messages; retries
/// (`attempt > 0`) get their own key so a rejected response is not served
/// again.
pub struct CachingBackend {
    inner: Box<dyn ChatBackend>,
    endpoint: String,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    misses: AtomicUsize,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    response: String,
}

impl CachingBackend {
    pub fn new(inner: Box<dyn ChatBackend>, endpoint: impl Into<String>, dir: Option<PathBuf>) -> Result<Self> {
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        Ok(Self {
            inner,
            endpoint: endpoint.into(),
            dir,
            memory: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        })
    }

    /// Calls forwarded to the wrapped backend so far.
    pub fn inner_calls(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn key(&self, messages: &[Message], attempt: usize) -> String {
        let mut key = serde_json::json!({
            "endpoint": self.endpoint,
            "model": self.inner.model_id(),
            "messages": messages,
        });
        if attempt > 0 {
            key["attempt"] = attempt.into();
        }
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }
}

impl ChatBackend for CachingBackend {
    fn complete(&self, messages: &[Message], ctx: &CallContext) -> Result<String> {
        let key = self.key(messages, ctx.attempt);
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let path = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(p) = &path {
            if let Ok(bytes) = std::fs::read(p) {
                if let Ok(entry) = serde_json::from_slice::<CacheEntry>(&bytes) {
                    self.memory.lock().expect("cache lock").insert(key, entry.response.clone());
                    return Ok(entry.response);
                }
                log::warn!("ignoring unreadable cache entry {}", p.display());
            }
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let response = self.inner.complete(messages, ctx)?;
        if let Some(p) = &path {
            let json = serde_json::to_vec(&CacheEntry { response: response.clone() }).expect("entry serializes");
            std::fs::write(p, json).map_err(|e| Error::io(p, e))?;
        }
        self.memory.lock().expect("cache lock").insert(key, response.clone());
        Ok(response)
    }

    fn model_id(&self) -> String {
        self.inner.model_id()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockRule {
    /// 1 when the text contains one of the feature's keywords
    /// (case-insensitive); keywords default to the description's words of
    /// four or more letters.
    #[default]
    Keyword,
    /// Always `constant`.
    Constant,
    /// Looks up `labels[feature][doc]`; missing entries answer 0.
    Table,
}

/// Canned offline behavior. Maps are keyed by feature id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    pub descriptions: BTreeMap<String, String>,
    pub rule: MockRule,
    pub keywords: BTreeMap<String, Vec<String>>,
    pub constant: u8,
    pub labels: BTreeMap<String, BTreeMap<String, u8>>,
}

/// Deterministic, network-free backend.
pub struct MockBackend {
    cfg: MockConfig,
}

impl MockBackend {
    pub fn new(cfg: MockConfig) -> Self {
        Self { cfg }
    }

    pub fn description_for(&self, feature: FeatureId) -> String {
        self.cfg
            .descriptions
            .get(&feature.to_string())
            .cloned()
            .unwrap_or_else(|| format!("feature {feature}"))
    }

    fn label(&self, ctx: &CallContext, description: &str, text: &str) -> u8 {
        let fid = ctx.feature_id.to_string();
        match self.cfg.rule {
            MockRule::Constant => self.cfg.constant.min(1),
            MockRule::Table => ctx
                .doc_id
                .as_ref()
                .and_then(|d| self.cfg.labels.get(&fid)?.get(d).copied())
                .unwrap_or(0)
                .min(1),
            MockRule::Keyword => {
                let words: Vec<String> = match self.cfg.keywords.get(&fid) {
                    Some(k) => k.iter().map(|w| w.to_lowercase()).collect(),
                    None => description
                        .split(|c: char| !c.is_alphanumeric())
                        .filter(|w| w.chars().count() >= 4)
                        .map(str::to_lowercase)
                        .collect(),
                };
                let text = text.to_lowercase();
                u8::from(words.iter().any(|w| text.contains(w.as_str())))
            }
        }
    }
}

/// Pulls `LATENT ATTRIBUTE` and `TEXT EXAMPLE` back out of a detection prompt.
fn detection_fields(user: &str) -> (&str, &str) {
    let desc_tag = "LATENT ATTRIBUTE: ";
    let text_tag = "\n    TEXT EXAMPLE: ";
    let Some(d) = user.find(desc_tag) else {
        return ("", user);
    };
    let after = &user[d + desc_tag.len()..];
    match after.rfind(text_tag) {
        Some(t) => {
            let text = &after[t + text_tag.len()..];
            (&after[..t], text.strip_suffix('\n').unwrap_or(text))
        }
        None => (after, ""),
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, messages: &[Message], ctx: &CallContext) -> Result<String> {
        match ctx.purpose {
            Purpose::Generate => Ok(format!(
                "The highlighted tokens share a theme. [[{}]]",
                self.description_for(ctx.feature_id)
            )),
            Purpose::Classify => {
                let user = messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("");
                let (description, text) = detection_fields(user);
                Ok(self.label(ctx, description, text).to_string())
            }
        }
    }

    fn model_id(&self) -> String {
        "mock".into()
    }
}
