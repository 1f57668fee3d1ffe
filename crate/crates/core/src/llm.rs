//! Model clients: the director that proposes steps and the judges used by the
//! data pipeline and the metrics.
//!
//! Two transports ship: [`ChatCompletionsClient`] talks to any
//! chat-completions-compatible HTTP endpoint, and [`ReplayModel`] serves canned
//! texts from a JSONL file so every pipeline runs offline.

use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("model endpoint unavailable: {0}")]
    Unavailable(String),
    #[error("unexpected model response: {0}")]
    BadResponse(String),
    #[error("replay has no entry for this request")]
    ReplayExhausted,
    #[error("replay file: {0}")]
    ReplayFile(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub seed: u64,
}

impl SamplingParams {
    /// Stochastic decoding used when drawing alternative candidates.
    pub fn sampling(seed: u64) -> Self {
        SamplingParams {
            temperature: 0.6,
            top_p: 0.95,
            top_k: 20,
            seed,
        }
    }

    /// Greedy decoding for reproducible evaluation runs.
    pub fn evaluation() -> Self {
        SamplingParams {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams::evaluation()
    }
}

/// Proposes the next step given the canonical transcript so far.
pub trait DirectorClient: Send + Sync {
    fn generate(&self, prefix: &str, sampling: &SamplingParams) -> Result<String, ModelError>;
}

/// Free-form prompt completion used by every judge-style call.
pub trait JudgeClient: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, ModelError>;
}

impl<T: DirectorClient + ?Sized> DirectorClient for Arc<T> {
    fn generate(&self, prefix: &str, sampling: &SamplingParams) -> Result<String, ModelError> {
        (**self).generate(prefix, sampling)
    }
}

impl<T: JudgeClient + ?Sized> JudgeClient for Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        (**self).complete(prompt)
    }
}

/// Adapts a closure into a director; handy for scripted worlds in tests.
pub struct FnDirector<F>(pub F);

impl<F> DirectorClient for FnDirector<F>
where
    F: Fn(&str, &SamplingParams) -> Result<String, ModelError> + Send + Sync,
{
    fn generate(&self, prefix: &str, sampling: &SamplingParams) -> Result<String, ModelError> {
        (self.0)(prefix, sampling)
    }
}

/// Adapts a closure into a judge.
pub struct FnJudge<F> {
    pub id: String,
    pub f: F,
}

impl<F> FnJudge<F> {
    pub fn new(id: impl Into<String>, f: F) -> Self {
        FnJudge { id: id.into(), f }
    }
}

impl<F> JudgeClient for FnJudge<F>
where
    F: Fn(&str) -> Result<String, ModelError> + Send + Sync,
{
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        (self.f)(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpoint {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub system_prompt: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct ChatCompletionsClient {
    endpoint: ChatEndpoint,
    id: String,
    agent: ureq::Agent,
}

impl ChatCompletionsClient {
    pub fn new(endpoint: ChatEndpoint) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(endpoint.timeout_secs)))
            .build()
            .into();
        let id = format!("{}@{}", endpoint.model, endpoint.base_url);
        ChatCompletionsClient { endpoint, id, agent }
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn chat(&self, user: &str, sampling: &SamplingParams) -> Result<String, ModelError> {
        let mut messages = Vec::new();
        if let Some(system) = &self.endpoint.system_prompt {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "seed": sampling.seed,
        });
        if sampling.top_k > 0 {
            body["top_k"] = json!(sampling.top_k);
        }
        let mut req = self.agent.post(&self.url());
        if let Some(var) = &self.endpoint.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| ModelError::Unavailable(format!("environment variable {var} is not set")))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| ModelError::Unavailable(e.to_string()))?;
        let value: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ModelError::BadResponse(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ModelError::BadResponse("missing choices[0].message.content".into()))
    }
}

impl DirectorClient for ChatCompletionsClient {
    fn generate(&self, prefix: &str, sampling: &SamplingParams) -> Result<String, ModelError> {
        self.chat(prefix, sampling)
    }
}

impl JudgeClient for ChatCompletionsClient {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        self.chat(prompt, &SamplingParams::evaluation())
    }
}

/// One canned model output plus the guards that select it.
///
/// Every guard that is present must hold: `case_id` against the case the
/// replay is bound to, `seed` against the sampling seed, `step` against the
/// index of the step being generated, `contains` against the prompt text.
/// Judge calls carry no seed and no step, so entries guarded on either are
/// director-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub text: String,
}

impl ReplayEntry {
    pub fn text(text: impl Into<String>) -> Self {
        ReplayEntry {
            case_id: None,
            seed: None,
            step: None,
            contains: None,
            text: text.into(),
        }
    }
}

struct Call<'a> {
    prompt: &'a str,
    seed: Option<u64>,
    step: Option<usize>,
}

/// Deterministic replay of canned model outputs.
///
/// A call takes the first unused matching entry; once all matching entries
/// are used, the last one keeps being served. A fresh [`ReplayModel::for_case`]
/// starts with nothing used, so re-running a bank is bit-identical.
pub struct ReplayModel {
    id: String,
    entries: Arc<Vec<ReplayEntry>>,
    case_id: Option<String>,
    used: Mutex<Vec<bool>>,
}

impl ReplayModel {
    pub fn new(entries: Vec<ReplayEntry>) -> Self {
        let n = entries.len();
        ReplayModel {
            id: "replay".into(),
            entries: Arc::new(entries),
            case_id: None,
            used: Mutex::new(vec![false; n]),
        }
    }

    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        ReplayModel::new(texts.into_iter().map(ReplayEntry::text).collect())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| ModelError::ReplayFile(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(line)
                .map_err(|e| ModelError::ReplayFile(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(ReplayModel::new(entries))
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// A fresh cursor restricted to entries for `case_id` (or unguarded ones).
    pub fn for_case(&self, case_id: &str) -> ReplayModel {
        ReplayModel {
            id: self.id.clone(),
            entries: Arc::clone(&self.entries),
            case_id: Some(case_id.to_string()),
            used: Mutex::new(vec![false; self.entries.len()]),
        }
    }

    fn matches(&self, e: &ReplayEntry, call: &Call<'_>) -> bool {
        let case_ok = match (&e.case_id, &self.case_id) {
            (None, _) => true,
            (Some(want), Some(have)) => want == have,
            (Some(_), None) => false,
        };
        case_ok
            && e.seed.is_none_or(|s| call.seed == Some(s))
            && e.step.is_none_or(|s| call.step == Some(s))
            && e.contains.as_deref().is_none_or(|c| call.prompt.contains(c))
    }

    fn serve(&self, call: Call<'_>) -> Result<String, ModelError> {
        let mut used = self.used.lock().expect("replay cursor poisoned");
        let mut last = None;
        for (i, e) in self.entries.iter().enumerate() {
            if self.matches(e, &call) {
                if !used[i] {
                    used[i] = true;
                    return Ok(e.text.clone());
                }
                last = Some(i);
            }
        }
        last.map(|i| self.entries[i].text.clone())
            .ok_or(ModelError::ReplayExhausted)
    }
}

/// Number of the step a director is being asked for, read from the prefix.
pub fn next_step_index(prefix: &str) -> usize {
    prefix
        .lines()
        .filter(|l| l.starts_with("[Question] "))
        .count()
        + 1
}

impl DirectorClient for ReplayModel {
    fn generate(&self, prefix: &str, sampling: &SamplingParams) -> Result<String, ModelError> {
        self.serve(Call {
            prompt: prefix,
            seed: Some(sampling.seed),
            step: Some(next_step_index(prefix)),
        })
    }
}

impl JudgeClient for ReplayModel {
    fn id(&self) -> &str {
        &self.id
    }
    fn complete(&self, prompt: &str) -> Result<String, ModelError> {
        self.serve(Call {
            prompt,
            seed: None,
            step: None,
        })
    }
}
