//! OpenAI-compatible chat-completions backend.
//!
//! Judge queries request top-k token logprobs at the first generated position
//! and read the Correct/Incorrect pair out of that list; hosted APIs expose
//! no direct logit access, so a missing token substitutes a floor logit of
//! (min returned logprob - 5), which the reports document per request.
//!
//! Packed verification needs a custom attention mask, which standard serving
//! APIs cannot accept: `judge_packed` reports a capability error and the
//! engine uses the sequential fallback (one prefill per boundary) instead.
//!
//! Token ids on this backend are word-interning ids: the engine's chunk
//! arithmetic needs stable token sequences, and the interner gives a
//! reversible desk-scale stand-in for the server's real tokenizer. Prefill
//! and decode counts come from the server's usage fields when present.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::judge::JudgeLogits;
use crate::prefix_verify::{PackedVerification, TokenId};

use super::templates::{PromptTemplate, CHATML_SUFFIX};
use super::{
    approx_text_tokens, Backend, BackendDescriptor, BackendError, BackendKind, FinishReason,
    GenerationResult, JudgeReadout, LatencyCounts, PackedReadout, Role, ScoreReadout,
    DEFAULT_DRAFT_SPEED_FACTOR,
};

/// Logit substituted for a judge token absent from the top-logprobs list:
/// (minimum returned logprob) + FLOOR_LOGIT_OFFSET.
pub const FLOOR_LOGIT_OFFSET: f64 = -5.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    /// Full chat-completions URL, e.g. `http://127.0.0.1:30000/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    pub retries: u32,
    pub max_in_flight: usize,
    pub top_logprobs: u8,
    pub correct_token: String,
    pub incorrect_token: String,
    /// Ask the server to continue the trailing assistant message verbatim
    /// (SGLang/vLLM extension) instead of starting a fresh turn.
    pub continue_final_message: bool,
    pub suffix_text: String,
    pub speed_factor: f64,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:30000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: Some("PARSE_API_KEY".into()),
            timeout_secs: 120,
            retries: 2,
            max_in_flight: 8,
            top_logprobs: 20,
            correct_token: "Correct".into(),
            incorrect_token: "Incorrect".into(),
            continue_final_message: true,
            suffix_text: CHATML_SUFFIX.into(),
            speed_factor: 1.0,
        }
    }
}

// ---------------------------------------------------------------------------
// Wire types
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    max_tokens: usize,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    top_logprobs: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stop: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    continue_final_message: Option<bool>,
}

#[derive(Debug, Deserialize)]
pub struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: Option<ChatRespMessage>,
    finish_reason: Option<String>,
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct ChatRespMessage {
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    content: Option<Vec<PositionLogprobs>>,
}

#[derive(Debug, Deserialize)]
struct PositionLogprobs {
    #[allow(dead_code)]
    token: String,
    #[allow(dead_code)]
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TokenLogprob>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Debug, Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<usize>,
    completion_tokens: Option<usize>,
}

/// Reads (logit_correct, logit_incorrect) from the first generated position's
/// top-logprobs list. A judge token may appear as its first subtoken, so a
/// returned token matches when its trimmed form is a non-empty prefix of the
/// target word; exact matches win, then the highest-logprob prefix match.
/// Targets absent from the list get the floor value.
pub fn extract_judge_logits(
    response: &ChatResponse,
    correct_token: &str,
    incorrect_token: &str,
) -> Result<JudgeLogits, BackendError> {
    let entries = response
        .choices
        .first()
        .and_then(|c| c.logprobs.as_ref())
        .and_then(|lp| lp.content.as_ref())
        .and_then(|positions| positions.first())
        .map(|p| &p.top_logprobs)
        .filter(|tl| !tl.is_empty())
        .ok_or_else(|| {
            BackendError::Transport("server returned no top_logprobs for the judge token".into())
        })?;

    let floor = entries
        .iter()
        .map(|e| e.logprob)
        .fold(f64::INFINITY, f64::min)
        + FLOOR_LOGIT_OFFSET;

    let lookup = |target: &str| -> f64 {
        let mut exact: Option<f64> = None;
        let mut prefix: Option<f64> = None;
        for e in entries {
            let t = e.token.trim();
            if t.is_empty() {
                continue;
            }
            if t == target {
                exact = Some(exact.map_or(e.logprob, |x: f64| x.max(e.logprob)));
            } else if target.starts_with(t) {
                prefix = Some(prefix.map_or(e.logprob, |x: f64| x.max(e.logprob)));
            }
        }
        exact.or(prefix).unwrap_or(floor)
    };

    JudgeLogits::new(lookup(correct_token), lookup(incorrect_token)).map_err(BackendError::from)
}

// ---------------------------------------------------------------------------
// Word interner: reversible text <-> token-id mapping
// ---------------------------------------------------------------------------

#[derive(Default)]
struct Interner {
    ids: HashMap<String, TokenId>,
    words: Vec<String>,
}

impl Interner {
    fn encode(&mut self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| match self.ids.get(w) {
                Some(&id) => id,
                None => {
                    let id = self.words.len() as TokenId;
                    self.ids.insert(w.to_string(), id);
                    self.words.push(w.to_string());
                    id
                }
            })
            .collect()
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| {
                self.words
                    .get(t as usize)
                    .map(String::as_str)
                    .unwrap_or("<?>")
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Counting gate bounding in-flight requests.
struct Gate {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            permits: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock().expect("gate poisoned");
        while *p == 0 {
            p = self.cv.wait(p).expect("gate poisoned");
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock().expect("gate poisoned") += 1;
        self.cv.notify_one();
    }
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    role: Role,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    interner: Mutex<Interner>,
    gate: Gate,
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig, role: Role) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = match &cfg.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        let gate = Gate::new(cfg.max_in_flight);
        Ok(Self {
            cfg,
            role,
            client,
            api_key,
            interner: Mutex::new(Interner::default()),
            gate,
        })
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.interner.lock().expect("interner poisoned").encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        self.interner.lock().expect("interner poisoned").decode(tokens)
    }

    fn post(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.gate.acquire();
        let result = self.post_inner(request);
        self.gate.release();
        result
    }

    fn post_inner(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            let mut req = self.client.post(&self.cfg.endpoint).json(request);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if !status.is_success() {
                        last_err = format!(
                            "{} returned {status}: {}",
                            self.cfg.endpoint,
                            resp.text().unwrap_or_default()
                        );
                        continue;
                    }
                    match resp.json::<ChatResponse>() {
                        Ok(parsed) => return Ok(parsed),
                        Err(e) => {
                            last_err = format!("invalid response body: {e}");
                            continue;
                        }
                    }
                }
                Err(e) => {
                    last_err = e.to_string();
                    continue;
                }
            }
        }
        Err(BackendError::Transport(last_err))
    }

    fn completion_of(
        &self,
        response: ChatResponse,
        fallback_prefill: usize,
    ) -> GenerationResult {
        let choice = response.choices.into_iter().next();
        let (content, finish) = match choice {
            Some(c) => {
                let finish = match c.finish_reason.as_deref() {
                    Some("length") => FinishReason::Length,
                    _ => FinishReason::Stop,
                };
                (
                    c.message.and_then(|m| m.content).unwrap_or_default(),
                    finish,
                )
            }
            None => (String::new(), FinishReason::Stop),
        };
        let tokens = self.encode(&content);
        let decoded_len = tokens.len();
        let usage = response.usage;
        GenerationResult {
            tokens,
            finish,
            latency_model: LatencyCounts {
                prefill_tokens: usage
                    .as_ref()
                    .and_then(|u| u.prompt_tokens)
                    .unwrap_or(fallback_prefill),
                decode_tokens: usage
                    .and_then(|u| u.completion_tokens)
                    .unwrap_or(decoded_len),
            },
            diagnostic: None,
        }
    }

    fn generation_request(
        &self,
        question: &str,
        prefix_text: Option<String>,
        max_new: usize,
        stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError> {
        let mut messages = vec![ChatMessage {
            role: "user",
            content: question.to_string(),
        }];
        let continuing = prefix_text.is_some();
        if let Some(prefix) = prefix_text {
            messages.push(ChatMessage {
                role: "assistant",
                content: prefix,
            });
        }
        let stop_texts: Vec<String> = stops
            .iter()
            .map(|&t| self.decode(&[t]))
            .filter(|s| s != "<?>")
            .collect();
        let request = ChatRequest {
            model: &self.cfg.model,
            messages,
            max_tokens: max_new,
            temperature: 0.0,
            logprobs: None,
            top_logprobs: None,
            stop: if stop_texts.is_empty() {
                None
            } else {
                Some(stop_texts)
            },
            continue_final_message: if continuing && self.cfg.continue_final_message {
                Some(true)
            } else {
                None
            },
        };
        let fallback_prefill = approx_text_tokens(question);
        // Generation transport failures degrade to an Error finish so the
        // engine can fail the request and keep the batch going.
        match self.post(&request) {
            Ok(resp) => Ok(self.completion_of(resp, fallback_prefill)),
            Err(BackendError::Transport(diag)) => Ok(GenerationResult {
                tokens: Vec::new(),
                finish: FinishReason::Error,
                latency_model: LatencyCounts::default(),
                diagnostic: Some(diag),
            }),
            Err(other) => Err(other),
        }
    }

    fn judge_request(
        &self,
        system: String,
        user: String,
    ) -> Result<(JudgeLogits, usize), BackendError> {
        let fallback_prefill = approx_text_tokens(&system) + approx_text_tokens(&user);
        let request = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: system,
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
            max_tokens: 1,
            temperature: 0.0,
            logprobs: Some(true),
            top_logprobs: Some(self.cfg.top_logprobs),
            stop: None,
            continue_final_message: None,
        };
        let response = self.post(&request)?;
        let prefill = response
            .usage
            .as_ref()
            .and_then(|u| u.prompt_tokens)
            .unwrap_or(fallback_prefill);
        let logits =
            extract_judge_logits(&response, &self.cfg.correct_token, &self.cfg.incorrect_token)?;
        Ok((logits, prefill))
    }
}

impl Backend for HttpBackend {
    fn descriptor(&self) -> BackendDescriptor {
        let speed_factor = match self.role {
            Role::Draft if self.cfg.speed_factor == 1.0 => DEFAULT_DRAFT_SPEED_FACTOR,
            _ => self.cfg.speed_factor,
        };
        BackendDescriptor {
            kind: BackendKind::Http,
            role: self.role,
            speed_factor,
        }
    }

    fn suffix_tokens(&self) -> Vec<TokenId> {
        let text = self.cfg.suffix_text.clone();
        self.encode(&text)
    }

    fn generate(
        &self,
        question: &str,
        max_new: usize,
        stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError> {
        self.generation_request(question, None, max_new, stops)
    }

    fn continue_from(
        &self,
        question: &str,
        prefix: &[TokenId],
        max_new: usize,
    ) -> Result<GenerationResult, BackendError> {
        let prefix_text = self.decode(prefix);
        self.generation_request(question, Some(prefix_text), max_new, &[])
    }

    fn judge_full(
        &self,
        question: &str,
        answer: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<JudgeReadout, BackendError> {
        let user = template.user_prompt(question, &self.decode(answer));
        let (logits, prefill_tokens) = self.judge_request(template.system_prompt(), user)?;
        Ok(JudgeReadout {
            logits,
            prefill_tokens,
        })
    }

    fn judge_packed(
        &self,
        _question: &str,
        _packed: &PackedVerification,
        _template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        Err(BackendError::Capability {
            backend: "http",
            operation: "run packed verification (custom attention masks)",
        })
    }

    fn score_first_digit(
        &self,
        question: &str,
        answer_so_far: &[TokenId],
        chunk: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<ScoreReadout, BackendError> {
        let user = template.user_prompt_score(
            question,
            &self.decode(answer_so_far),
            &self.decode(chunk),
        );
        let fallback_prefill = approx_text_tokens(&user);
        let request = ChatRequest {
            model: &self.cfg.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: template.system_prompt(),
                },
                ChatMessage {
                    role: "user",
                    content: user,
                },
            ],
            max_tokens: 3,
            temperature: 0.0,
            logprobs: None,
            top_logprobs: None,
            stop: None,
            continue_final_message: None,
        };
        let response = self.post(&request)?;
        let prefill_tokens = response
            .usage
            .as_ref()
            .and_then(|u| u.prompt_tokens)
            .unwrap_or(fallback_prefill);
        let content = response
            .choices
            .first()
            .and_then(|c| c.message.as_ref())
            .and_then(|m| m.content.as_ref())
            .cloned()
            .unwrap_or_default();
        let score = content
            .trim()
            .chars()
            .next()
            .and_then(|c| c.to_digit(10))
            .map(|d| d as u8);
        Ok(ScoreReadout {
            score,
            prefill_tokens,
        })
    }

    fn detokenize(&self, tokens: &[TokenId]) -> String {
        self.decode(tokens)
    }
}
