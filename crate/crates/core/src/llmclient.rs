//! Zero-shot moderation prompts, verdict parsing and a replayable
//! chat-completions batch runner.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::{KEEP, REMOVE};

pub const FORUM_RULES_SHORT: &str = include_str!("../resources/forenregeln_kurz.txt");

const INTRO: &str =
    "Du bist ein Forenmoderator und dafür zuständig, Kommentare unter einem Zeitungsartikel zu moderieren.";
const TASK: &str = "Mache eine Prediction zur Moderationsentscheidung ob das Kommentar Online bleiben soll \"0\" oder Offline genommen werden soll \"1\".";
const FORMAT_HEAD: &str = "Antworte ausschließlich im Json Format {\"Moderationsentscheidung\": prediction";
const DECISION_KEY: &str = "Moderationsentscheidung";
const STRENGTH_KEY: &str = "Stärke";
const EXPLANATION_KEY: &str = "Erklärung";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("variant {variant} needs `{field}` but it was not supplied")]
    MissingContext {
        variant: PromptVariant,
        field: ContextField,
    },
    #[error("unknown prompt variant `{0}`")]
    UnknownVariant(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("authentication rejected by {endpoint} (HTTP {status})")]
    Auth { endpoint: String, status: u16 },
    #[error("transcript: {0}")]
    Transcript(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextField {
    Title,
    Path,
    Ratio,
    ForumRules,
}

impl fmt::Display for ContextField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextField::Title => "title",
            ContextField::Path => "path",
            ContextField::Ratio => "ratio",
            ContextField::ForumRules => "forum_rules",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PromptVariant {
    #[serde(rename = "GPT_base")]
    Base,
    #[serde(rename = "GPT_mod_title")]
    Title,
    #[serde(rename = "GPT_mod_title_strength")]
    TitleStrength,
    #[serde(rename = "GPT_mod_title_ratio")]
    TitleRatio,
    #[serde(rename = "GPT_mod_title_path")]
    TitlePath,
    #[serde(rename = "GPT_mod_title_erklaerung")]
    TitleExplanation,
    #[serde(rename = "GPT_mod_title_forenregeln_kurz_erklaerung")]
    TitleRulesExplanation,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 7] = [
        PromptVariant::Base,
        PromptVariant::Title,
        PromptVariant::TitleStrength,
        PromptVariant::TitleRatio,
        PromptVariant::TitlePath,
        PromptVariant::TitleExplanation,
        PromptVariant::TitleRulesExplanation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptVariant::Base => "GPT_base",
            PromptVariant::Title => "GPT_mod_title",
            PromptVariant::TitleStrength => "GPT_mod_title_strength",
            PromptVariant::TitleRatio => "GPT_mod_title_ratio",
            PromptVariant::TitlePath => "GPT_mod_title_path",
            PromptVariant::TitleExplanation => "GPT_mod_title_erklaerung",
            PromptVariant::TitleRulesExplanation => "GPT_mod_title_forenregeln_kurz_erklaerung",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, LlmError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| LlmError::UnknownVariant(name.to_string()))
    }

    /// Context each variant adds to the base prompt.
    pub fn required_context(self) -> &'static [ContextField] {
        use ContextField::*;
        match self {
            PromptVariant::Base => &[],
            PromptVariant::Title | PromptVariant::TitleStrength | PromptVariant::TitleExplanation => &[Title],
            PromptVariant::TitleRatio => &[Title, Ratio],
            PromptVariant::TitlePath => &[Title, Path],
            PromptVariant::TitleRulesExplanation => &[Title, ForumRules],
        }
    }

    pub fn requests_strength(self) -> bool {
        self == PromptVariant::TitleStrength
    }

    pub fn requests_explanation(self) -> bool {
        matches!(
            self,
            PromptVariant::TitleExplanation | PromptVariant::TitleRulesExplanation
        )
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inputs available for one comment; variants pick what they need.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub comment: String,
    pub title: Option<String>,
    pub path: Option<String>,
    pub ratio: Option<f64>,
    pub rules: Option<String>,
}

impl PromptContext {
    pub fn comment(comment: impl Into<String>) -> Self {
        Self {
            comment: comment.into(),
            ..Self::default()
        }
    }
}

/// Renders the moderation prompt for one comment.
///
/// The base variant is the fixed German base prompt. Other variants insert
/// context sentences after the role sentence and optional requests before
/// the comment; the reply-format instruction always comes last.
pub fn render_prompt(variant: PromptVariant, ctx: &PromptContext) -> Result<String, LlmError> {
    let need = |field: ContextField| LlmError::MissingContext { variant, field };
    let mut parts: Vec<String> = vec![INTRO.to_string()];
    for &field in variant.required_context() {
        let sentence = match field {
            ContextField::Title => {
                let t = ctx.title.as_deref().ok_or_else(|| need(field))?;
                format!("Das Kommentar wurde unter einem Artikel mit dem Titel \"{t}\" gepostet.")
            }
            ContextField::Path => {
                let p = ctx.path.as_deref().ok_or_else(|| need(field))?;
                format!("Der Artikel ist in der Rubrik \"{p}\" erschienen.")
            }
            ContextField::Ratio => {
                let r = ctx.ratio.ok_or_else(|| need(field))?;
                format!("Der Anteil der bisherigen Kommentare dieses Users, die online geblieben sind, beträgt {r:.2}.")
            }
            ContextField::ForumRules => {
                let rules = ctx.rules.as_deref().ok_or_else(|| need(field))?;
                let rules = rules.split_whitespace().collect::<Vec<_>>().join(" ");
                format!("Beachte dabei die Forenregeln der Zeitung, kurz zusammengefasst: {rules}")
            }
        };
        parts.push(sentence);
    }
    parts.push(TASK.to_string());
    if variant.requests_strength() {
        parts.push("Gib zusätzlich die Stärke deiner Prediction als Zahl zwischen 0 und 1 an.".to_string());
    }
    if variant.requests_explanation() {
        parts.push("Erkläre zusätzlich kurz deine Entscheidung.".to_string());
    }
    parts.push(format!("Das Kommentar ist: \"{}\".", ctx.comment));
    let mut format = FORMAT_HEAD.to_string();
    if variant.requests_strength() {
        format.push_str(&format!(", \"{STRENGTH_KEY}\": strength"));
    }
    if variant.requests_explanation() {
        format.push_str(&format!(", \"{EXPLANATION_KEY}\": explanation"));
    }
    format.push('}');
    parts.push(format);
    Ok(parts.join(" "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Remove,
    Missing,
}

impl Decision {
    pub fn label(self) -> Option<u8> {
        match self {
            Decision::Keep => Some(KEEP),
            Decision::Remove => Some(REMOVE),
            Decision::Missing => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub decision: Decision,
    pub raw_response: String,
    pub strength: Option<f64>,
    pub explanation: Option<String>,
}

impl Verdict {
    pub fn missing(raw: impl Into<String>) -> Self {
        Self {
            decision: Decision::Missing,
            raw_response: raw.into(),
            strength: None,
            explanation: None,
        }
    }
}

/// Byte offsets of balanced `{...}` spans, string literals respected.
fn object_spans(raw: &str) -> Vec<(usize, usize)> {
    let bytes = raw.as_bytes();
    let mut spans = Vec::new();
    for start in (0..bytes.len()).filter(|&i| bytes[i] == b'{') {
        let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
        for (off, &b) in bytes[start..].iter().enumerate() {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        spans.push((start, start + off + 1));
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    spans
}

fn as_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Extracts the verdict from a model reply.
///
/// The first JSON object carrying `Moderationsentscheidung` is used, whether
/// bare, fenced or surrounded by prose. The decision must be 0 or 1 as a
/// number or numeric string; anything else yields [`Decision::Missing`].
pub fn parse_response(raw: &str) -> Verdict {
    for (a, b) in object_spans(raw) {
        let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(&raw[a..b]) else {
            continue;
        };
        let Some(decision) = obj.get(DECISION_KEY) else {
            continue;
        };
        let decision = match as_number(decision) {
            Some(0.0) => Decision::Keep,
            Some(1.0) => Decision::Remove,
            _ => Decision::Missing,
        };
        return Verdict {
            decision,
            raw_response: raw.to_string(),
            strength: obj.get(STRENGTH_KEY).and_then(as_number),
            explanation: obj.get(EXPLANATION_KEY).and_then(Value::as_str).map(str::to_string),
        };
    }
    Verdict::missing(raw)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApiConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Requests per minute across all workers; 0 disables the cap.
    pub requests_per_minute: u32,
    pub concurrency: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Environment variable holding the API key.
    pub api_key_env: String,
}

impl Default for ApiConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            top_p: 0.95,
            max_retries: 5,
            timeout_secs: 60,
            requests_per_minute: 0,
            concurrency: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }
}

impl ApiConfig {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(30))
            .min(self.backoff_max_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// 401/403: abort the whole batch.
    Auth(u16),
    /// 429, 5xx, timeouts, connection failures.
    Retryable(String),
    /// Anything else; the example becomes a missing answer.
    Permanent(String),
}

/// One chat-completions round trip.
pub trait Transport: Send + Sync {
    fn name(&self) -> String;
    fn send(&self, index: usize, prompt: &str, api: &ApiConfig) -> Result<String, TransportError>;
}

/// Live OpenAI-compatible endpoint.
pub struct HttpTransport {
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from `api.api_key_env` (absent keys are sent unauthenticated).
    pub fn new(api: &ApiConfig) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(api.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Self {
            agent: config.into(),
            api_key: std::env::var(&api.api_key_env).ok(),
        }
    }
}

impl Transport for HttpTransport {
    fn name(&self) -> String {
        "http".into()
    }

    fn send(&self, _index: usize, prompt: &str, api: &ApiConfig) -> Result<String, TransportError> {
        let body = serde_json::json!({
            "model": api.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": api.temperature,
            "top_p": api.top_p,
        });
        let mut req = self.agent.post(&api.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(status)),
            408 | 429 | 500..=599 => return Err(TransportError::Retryable(format!("HTTP {status}"))),
            _ => return Err(TransportError::Permanent(format!("HTTP {status}: {text}"))),
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Permanent(format!("bad completion body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| TransportError::Permanent("completion without message content".into()))
    }
}

/// One persisted request/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub index: usize,
    pub variant: String,
    pub prompt: String,
    /// Final raw reply; `None` when every attempt failed.
    pub response: Option<String>,
    pub attempts: u32,
    pub error: Option<String>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, LlmError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| LlmError::Transcript(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_transcript(path: &Path, records: &[TranscriptRecord]) -> Result<(), LlmError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| LlmError::Transcript(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Serves recorded replies by request index; prompts must match the recording.
pub struct ReplayTransport {
    records: BTreeMap<usize, TranscriptRecord>,
}

impl ReplayTransport {
    pub fn new(records: Vec<TranscriptRecord>) -> Self {
        Self {
            records: records.into_iter().map(|r| (r.index, r)).collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(read_transcript(path)?))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl Transport for ReplayTransport {
    fn name(&self) -> String {
        "replay".into()
    }

    fn send(&self, index: usize, prompt: &str, _api: &ApiConfig) -> Result<String, TransportError> {
        let rec = self
            .records
            .get(&index)
            .ok_or_else(|| TransportError::Permanent(format!("no recorded reply for index {index}")))?;
        if rec.prompt != prompt {
            return Err(TransportError::Permanent(format!(
                "prompt for index {index} differs from the recording"
            )));
        }
        rec.response
            .clone()
            .ok_or_else(|| TransportError::Permanent(rec.error.clone().unwrap_or_else(|| "recorded failure".into())))
    }
}

/// Deterministic offline responder for pipelines run without API access.
///
/// Replies are derived from a hash of the prompt: mostly well-formed JSON,
/// some fenced, a fixed share of refusals. It carries no moderation skill.
pub struct StubTransport {
    pub seed: u64,
}

impl Transport for StubTransport {
    fn name(&self) -> String {
        format!("stub(seed={})", self.seed)
    }

    fn send(&self, _index: usize, prompt: &str, _api: &ApiConfig) -> Result<String, TransportError> {
        // FNV-1a
        let mut h: u64 = 0xcbf29ce484222325 ^ self.seed;
        for b in prompt.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        let decision = (h >> 7) & 1;
        Ok(match h % 16 {
            0 => "Das kann ich leider nicht beurteilen.".to_string(),
            1 | 2 => format!("```json\n{{\"Moderationsentscheidung\": {decision}}}\n```"),
            _ => format!("{{\"Moderationsentscheidung\": {decision}}}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub variant: String,
    pub model: String,
    pub transport: String,
    pub temperature: f64,
    pub top_p: f64,
    pub n_requests: usize,
    pub missing_answers: usize,
    pub retries: u32,
    /// Indices whose retries were exhausted.
    pub retry_exhausted: Vec<usize>,
    /// Indices that failed without retry.
    pub failed: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct BatchRun {
    pub verdicts: Vec<Verdict>,
    pub log: RunLog,
    /// Sorted by index.
    pub transcript: Vec<TranscriptRecord>,
}

struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Instant>,
}

impl RateLimiter {
    fn new(per_minute: u32) -> Self {
        Self {
            interval: (per_minute > 0).then(|| Duration::from_secs_f64(60.0 / per_minute as f64)),
            next: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let Some(interval) = self.interval else {
            return;
        };
        let wait = {
            let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + interval;
            slot - now
        };
        if !wait.is_zero() {
            thread::sleep(wait);
        }
    }
}

struct Outcome {
    record: TranscriptRecord,
    retries: u32,
    exhausted: bool,
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn run_one(
    index: usize,
    variant: PromptVariant,
    prompt: &str,
    api: &ApiConfig,
    transport: &dyn Transport,
    limiter: &RateLimiter,
) -> Result<Outcome, u16> {
    let started_at = now_rfc3339();
    let mut attempts = 0;
    let (response, error, exhausted) = loop {
        limiter.acquire();
        attempts += 1;
        match transport.send(index, prompt, api) {
            Ok(text) => break (Some(text), None, false),
            Err(TransportError::Auth(status)) => return Err(status),
            Err(TransportError::Permanent(e)) => break (None, Some(e), false),
            Err(TransportError::Retryable(e)) => {
                if attempts > api.max_retries {
                    break (None, Some(format!("retries exhausted: {e}")), true);
                }
                thread::sleep(api.backoff(attempts - 1));
            }
        }
    };
    Ok(Outcome {
        record: TranscriptRecord {
            index,
            variant: variant.name().to_string(),
            prompt: prompt.to_string(),
            response,
            attempts,
            error,
            started_at,
            finished_at: now_rfc3339(),
        },
        retries: attempts - 1,
        exhausted,
    })
}

/// Classifies every context with `variant`, preserving input order.
///
/// Up to `api.concurrency` requests run at once. Retryable failures back off
/// exponentially up to `api.max_retries`, then become missing answers. When
/// `live_transcript` is given, each finished record is appended to it.
/// Authentication failures abort the batch.
pub fn classify_batch(
    contexts: &[PromptContext],
    variant: PromptVariant,
    api: &ApiConfig,
    transport: &dyn Transport,
    live_transcript: Option<&Path>,
) -> Result<BatchRun, LlmError> {
    let prompts: Vec<String> = contexts
        .iter()
        .map(|c| render_prompt(variant, c))
        .collect::<Result<_, _>>()?;

    let sink = match live_transcript {
        Some(p) => Some(Mutex::new(
            fs::OpenOptions::new().create(true).truncate(true).write(true).open(p)?,
        )),
        None => None,
    };
    let limiter = RateLimiter::new(api.requests_per_minute);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let auth_status = Mutex::new(None);
    let results: Mutex<Vec<Option<Outcome>>> = Mutex::new((0..prompts.len()).map(|_| None).collect());

    let workers = api.concurrency.max(1).min(prompts.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= prompts.len() {
                    return;
                }
                match run_one(i, variant, &prompts[i], api, transport, &limiter) {
                    Ok(outcome) => {
                        if let Some(sink) = &sink {
                            let line = serde_json::to_string(&outcome.record).expect("transcript record serializes");
                            let mut f = sink.lock().unwrap_or_else(|e| e.into_inner());
                            let _ = writeln!(f, "{line}");
                        }
                        results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(outcome);
                    }
                    Err(status) => {
                        *auth_status.lock().unwrap_or_else(|e| e.into_inner()) = Some(status);
                        abort.store(true, Ordering::SeqCst);
                        return;
                    }
                }
            });
        }
    });

    if let Some(status) = auth_status.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(LlmError::Auth {
            endpoint: api.endpoint.clone(),
            status,
        });
    }

    let mut log = RunLog {
        variant: variant.name().to_string(),
        model: api.model.clone(),
        transport: transport.name(),
        temperature: api.temperature,
        top_p: api.top_p,
        n_requests: prompts.len(),
        missing_answers: 0,
        retries: 0,
        retry_exhausted: Vec::new(),
        failed: Vec::new(),
    };
    let mut verdicts = Vec::with_capacity(prompts.len());
    let mut transcript = Vec::with_capacity(prompts.len());
    for (i, outcome) in results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .enumerate()
    {
        let outcome = outcome.expect("every index is processed when no worker aborts");
        log.retries += outcome.retries;
        if outcome.exhausted {
            log.retry_exhausted.push(i);
        } else if outcome.record.response.is_none() {
            log.failed.push(i);
        }
        let verdict = match &outcome.record.response {
            Some(raw) => parse_response(raw),
            None => Verdict::missing(""),
        };
        if verdict.decision == Decision::Missing {
            log.missing_answers += 1;
        }
        verdicts.push(verdict);
        transcript.push(outcome.record);
    }
    Ok(BatchRun {
        verdicts,
        log,
        transcript,
    })
}
