//! The slow system: prompt construction, the four-step inference chain
//! (intention → style → action → eHMI) through a pluggable backend, and
//! validation of the structured answer.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{
    parse_style, DrivingStyle, EhmiMessage, Instruction, Intention, MetaAction, ScenarioDescription, VocabError,
};

pub const HEURISTIC_LABEL: &str = "heuristic";
pub const FALLBACK_LABEL: &str = "heuristic-fallback";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out after {0:.1} s")]
    Timeout(f64),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server answered with status {0}")]
    Status(u16),
    #[error("response body lacks a `response` string")]
    Body,
    #[error("backend misconfigured: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
#[error("{reason} (raw: {raw:?})")]
pub struct ResponseError {
    pub reason: String,
    pub raw: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Heuristic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    /// Seconds.
    pub timeout: f64,
    pub max_retries: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Heuristic,
            endpoint: None,
            model: None,
            timeout: 15.0,
            max_retries: 1,
        }
    }
}

impl BackendConfig {
    pub fn remote(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Remote,
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.kind == BackendKind::Remote && (self.endpoint.is_none() || self.model.is_none()) {
            return Err(BackendError::Config("remote backend needs an endpoint and a model".into()));
        }
        if !(self.timeout > 0.0) {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub built_from_version: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerOutput {
    pub intention: Intention,
    pub style: DrivingStyle,
    pub action: MetaAction,
    pub ehmi: EhmiMessage,
    /// Seconds spent in the backend.
    pub latency: f64,
    pub backend: String,
}

impl ReasonerOutput {
    pub fn is_fallback(&self) -> bool {
        self.backend == FALLBACK_LABEL
    }

    /// The answer object in the exact shape the backend is asked to produce.
    pub fn to_response_json(&self) -> String {
        serde_json::json!({
            "intention": self.intention.as_str(),
            "style": self.style.as_str(),
            "action": self.action.as_str(),
            "ehmi": self.ehmi.as_str(),
        })
        .to_string()
    }
}

const PREAMBLE: &str = "You are the reasoning module of an autonomous vehicle (AV) negotiating a \
conflict point with one human-driven vehicle (HV). Positions are in metres, velocities in m/s, \
and conflict_time is the smaller of the two vehicles' times to reach the conflict point (s, capped at 10).";

const SUB_QUESTIONS: [&str; 4] = [
    "1. Intention: given the scenario and the instruction, will the HV yield or rush?",
    "2. Style: given that intention, is the HV driver general, aggressive, or conservative?",
    "3. Action: given intention and style, should the AV ACCELERATE, DECELERATE, or MAINTAIN?",
    "4. eHMI: given the chosen action, what short message (at most 64 characters) should the AV display to the HV?",
];

const SCHEMA: &str = r#"{"intention": "yield|rush", "style": "general|aggressive|conservative", "action": "ACCELERATE|DECELERATE|MAINTAIN", "ehmi": "<text>"}"#;

pub fn build_prompt(s: &ScenarioDescription, i: &Instruction, last_ehmi: Option<&EhmiMessage>) -> Prompt {
    let mut text = String::with_capacity(1024);
    text.push_str(PREAMBLE);
    text.push_str("\n\n## Scenario\n");
    for (label, value) in ScenarioDescription::LABELS.iter().zip(s.values()) {
        let _ = writeln!(text, "{label}: {value:.2}");
    }
    text.push_str("\n## Current AV eHMI display\n");
    match last_ehmi.filter(|e| !e.is_empty()) {
        Some(e) => text.push_str(e.as_str()),
        None => text.push_str("none"),
    }
    text.push_str("\n\n## HV instruction\n");
    if i.is_empty() {
        text.push_str("none");
    } else {
        text.push_str(&i.text);
    }
    text.push_str("\n\n## Answer these sub-questions in order\n");
    for q in SUB_QUESTIONS {
        text.push_str(q);
        text.push('\n');
    }
    text.push_str("\n## Response format\nReply with exactly one JSON object:\n");
    text.push_str(SCHEMA);
    text.push('\n');
    Prompt {
        text,
        built_from_version: 0,
    }
}

/// Deterministic rule-based stand-in for the language model.
pub fn heuristic_infer(s: &ScenarioDescription, i: &Instruction) -> ReasonerOutput {
    let hv_speed = s.hv_speed();
    let says_slower = i.text.to_ascii_lowercase().contains("slower");
    let intention = if hv_speed < 0.5 || says_slower {
        Intention::Yield
    } else {
        Intention::Rush
    };
    let style = if hv_speed > 4.0 {
        DrivingStyle::Aggressive
    } else if hv_speed < 1.5 || (intention == Intention::Yield && hv_speed < 0.1) {
        DrivingStyle::Conservative
    } else {
        DrivingStyle::General
    };
    let action = match intention {
        Intention::Rush if s.conflict_time() < 3.0 => MetaAction::Decelerate,
        Intention::Yield => MetaAction::Accelerate,
        Intention::Rush => MetaAction::Maintain,
    };
    ReasonerOutput {
        intention,
        style,
        action,
        ehmi: EhmiMessage::for_action(action),
        latency: 0.0,
        backend: HEURISTIC_LABEL.to_string(),
    }
}

fn first_object(raw: &str) -> Option<serde_json::Map<String, Value>> {
    raw.match_indices('{').find_map(|(at, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[at..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts and validates the first well-formed JSON object in `raw`.
pub fn parse_response(raw: &str) -> Result<ReasonerOutput, ResponseError> {
    let fail = |reason: String| ResponseError {
        reason,
        raw: raw.to_string(),
    };
    let obj = first_object(raw).ok_or_else(|| fail("no JSON object found".into()))?;
    let field = |key: &str| -> Result<&str, ResponseError> {
        obj.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| fail(format!("missing string field `{key}`")))
    };
    let vocab = |e: VocabError| fail(e.to_string());
    Ok(ReasonerOutput {
        intention: field("intention")?.parse().map_err(vocab)?,
        style: parse_style(field("style")?).map_err(vocab)?,
        action: field("action")?.parse().map_err(vocab)?,
        ehmi: EhmiMessage::new(field("ehmi")?).map_err(vocab)?,
        latency: 0.0,
        backend: String::new(),
    })
}

/// A text-completion service.
pub trait Completion: Send + Sync {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError>;
    fn label(&self) -> String;
}

/// `POST <endpoint>/api/generate` with `{"model", "prompt", "stream": false}`.
pub struct HttpCompletion {
    url: String,
    model: String,
    timeout: f64,
    max_retries: u32,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    stream: bool,
}

impl HttpCompletion {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg.endpoint.as_deref().unwrap_or_default().trim_end_matches('/');
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpCompletion {
            url: format!("{endpoint}/api/generate"),
            model: cfg.model.clone().unwrap_or_default(),
            timeout: cfg.timeout,
            max_retries: cfg.max_retries,
            agent,
        })
    }

    fn attempt(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let body = GenerateRequest {
            model: &self.model,
            prompt: &prompt.text,
            stream: false,
        };
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(self.timeout),
            other => BackendError::Transport(other.to_string()),
        };
        let mut resp = self.agent.post(&self.url).send_json(&body).map_err(map_err)?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(BackendError::Status(status));
        }
        let value: Value = resp.body_mut().read_json().map_err(map_err)?;
        value
            .get("response")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or(BackendError::Body)
    }
}

impl Completion for HttpCompletion {
    fn complete(&self, prompt: &Prompt) -> Result<String, BackendError> {
        let mut last = None;
        for _ in 0..=self.max_retries {
            match self.attempt(prompt) {
                Ok(text) => return Ok(text),
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }

    fn label(&self) -> String {
        self.model.clone()
    }
}

/// Sends a prompt to the configured remote backend; returns the completion
/// and the wall-clock latency in seconds.
pub fn infer_remote(p: &Prompt, cfg: &BackendConfig) -> Result<(String, f64), BackendError> {
    if cfg.kind != BackendKind::Remote {
        return Err(BackendError::Config("backend kind is not remote".into()));
    }
    let client = HttpCompletion::new(cfg)?;
    let start = Instant::now();
    let text = client.complete(p)?;
    Ok((text, start.elapsed().as_secs_f64()))
}

enum Backend {
    Heuristic,
    Completion(Box<dyn Completion>),
}

/// Front door of the slow system. Never fails: any backend or parse error
/// falls back to the heuristic answer, flagged as such.
pub struct Reasoner {
    backend: Backend,
}

impl Reasoner {
    pub fn heuristic() -> Self {
        Reasoner {
            backend: Backend::Heuristic,
        }
    }

    pub fn with_completion(completion: Box<dyn Completion>) -> Self {
        Reasoner {
            backend: Backend::Completion(completion),
        }
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        match cfg.kind {
            BackendKind::Heuristic => Ok(Self::heuristic()),
            BackendKind::Remote => Ok(Self::with_completion(Box::new(HttpCompletion::new(cfg)?))),
        }
    }

    pub fn is_heuristic(&self) -> bool {
        matches!(self.backend, Backend::Heuristic)
    }

    pub fn reason_with_prompt(&self, prompt: &Prompt, s: &ScenarioDescription, i: &Instruction) -> ReasonerOutput {
        let Backend::Completion(client) = &self.backend else {
            return heuristic_infer(s, i);
        };
        let start = Instant::now();
        let parsed = client
            .complete(prompt)
            .map_err(|e| e.to_string())
            .and_then(|raw| parse_response(&raw).map_err(|e| e.to_string()));
        let latency = start.elapsed().as_secs_f64();
        match parsed {
            Ok(out) => ReasonerOutput {
                latency,
                backend: client.label(),
                ..out
            },
            Err(_) => ReasonerOutput {
                latency,
                backend: FALLBACK_LABEL.to_string(),
                ..heuristic_infer(s, i)
            },
        }
    }

    pub fn reason(&self, s: &ScenarioDescription, i: &Instruction, last_ehmi: Option<&EhmiMessage>) -> ReasonerOutput {
        let prompt = build_prompt(s, i, last_ehmi);
        self.reason_with_prompt(&prompt, s, i)
    }
}

/// One-shot reasoning from a configuration.
pub fn reason(s: &ScenarioDescription, i: &Instruction, cfg: &BackendConfig) -> ReasonerOutput {
    match Reasoner::from_config(cfg) {
        Ok(r) => r.reason(s, i, None),
        Err(_) => ReasonerOutput {
            backend: FALLBACK_LABEL.to_string(),
            ..heuristic_infer(s, i)
        },
    }
}
