//! Worker abstraction over draft generation, target generation, and judge
//! queries, with three implementations: scripted replay (tests and fixtures),
//! the seeded reference decoder (oracle), and an OpenAI-compatible HTTP
//! client (real servers).

pub mod http;
pub mod refdecoder;
pub mod scripted;
pub mod templates;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{JudgeError, JudgeLogits};
use crate::prefix_verify::{BoundarySet, PackedVerification, PrefixVerifyError, TokenId};
use templates::PromptTemplate;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{backend} backend cannot {operation}")]
    Capability {
        backend: &'static str,
        operation: &'static str,
    },
    #[error("script violation: {0}")]
    Script(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    PrefixVerify(#[from] PrefixVerifyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    /// Natural stop (EOS or stop token).
    Stop,
    /// Hit the max_new budget.
    Length,
    /// Transport-level failure; the diagnostic carries details.
    Error,
}

/// Prefill/decode token counts feeding the cost ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyCounts {
    pub prefill_tokens: usize,
    pub decode_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub finish: FinishReason,
    pub latency_model: LatencyCounts,
    pub diagnostic: Option<String>,
}

impl GenerationResult {
    pub fn is_error(&self) -> bool {
        matches!(self.finish, FinishReason::Error)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Scripted,
    RefDecoder,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Draft,
    Target,
    Judge,
}

/// Draft workers default to 4x the target's decode rate; the ratio drives the
/// cost model only, never wall-clock accounting.
pub const DEFAULT_DRAFT_SPEED_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub role: Role,
    pub speed_factor: f64,
}

impl BackendDescriptor {
    pub fn new(kind: BackendKind, role: Role, speed_factor: f64) -> Result<Self, BackendError> {
        if !speed_factor.is_finite() || speed_factor <= 0.0 {
            return Err(BackendError::Config(format!(
                "speed_factor must be finite and positive, got {speed_factor}"
            )));
        }
        Ok(Self {
            kind,
            role,
            speed_factor,
        })
    }
}

/// One judge readout plus how many prefill tokens it cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JudgeReadout {
    pub logits: JudgeLogits,
    pub prefill_tokens: usize,
}

/// A partial-verify readout: one logit pair per boundary, in boundary order.
/// `passes` is 1 for a true packed pass and K for the sequential route.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedReadout {
    pub logits: Vec<JudgeLogits>,
    pub prefill_tokens: usize,
    pub passes: usize,
    pub packed: bool,
}

/// First-digit score for the sequential baseline; `None` when the scorer's
/// first token is not a digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreReadout {
    pub score: Option<u8>,
    pub prefill_tokens: usize,
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> BackendDescriptor;

    /// Chat-template suffix this backend's judge expects after judged content.
    fn suffix_tokens(&self) -> Vec<TokenId>;

    /// Generate up to `max_new` tokens for `question`. Transport failures
    /// surface as `FinishReason::Error` with a diagnostic, never as Err: the
    /// engine downgrades them to failed requests and keeps going.
    fn generate(
        &self,
        question: &str,
        max_new: usize,
        stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError>;

    /// Continuation conditioned on `question || prefix`; the caller
    /// concatenates.
    fn continue_from(
        &self,
        question: &str,
        prefix: &[TokenId],
        max_new: usize,
    ) -> Result<GenerationResult, BackendError>;

    /// One forward pass judging the complete `answer`.
    fn judge_full(
        &self,
        question: &str,
        answer: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<JudgeReadout, BackendError>;

    /// One packed forward pass judging every boundary at once. Backends that
    /// cannot take a custom attention mask return a Capability error and the
    /// engine falls back to `sequential_fallback`.
    fn judge_packed(
        &self,
        question: &str,
        packed: &PackedVerification,
        template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError>;

    /// The naive route: one prefill per boundary. Semantically identical
    /// output to `judge_packed`; the ledger records K passes instead of 1.
    fn sequential_fallback(
        &self,
        question: &str,
        draft: &[TokenId],
        bounds: &BoundarySet,
        template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        let mut logits = Vec::with_capacity(bounds.chunk_count());
        let mut prefill_tokens = 0;
        for &t_i in &bounds.boundaries {
            let readout = self.judge_full(question, &draft[..t_i], template)?;
            logits.push(readout.logits);
            prefill_tokens += readout.prefill_tokens;
        }
        Ok(PackedReadout {
            logits,
            prefill_tokens,
            passes: bounds.chunk_count(),
            packed: false,
        })
    }

    /// Single-token 1-10 quality score of `chunk` given the answer so far.
    fn score_first_digit(
        &self,
        question: &str,
        answer_so_far: &[TokenId],
        chunk: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<ScoreReadout, BackendError>;

    /// Human-readable rendering of a token sequence for reports.
    fn detokenize(&self, tokens: &[TokenId]) -> String;
}

/// Rough word-level token estimate for text whose real tokenizer lives
/// elsewhere (scripted prompts, report previews).
pub fn approx_text_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}
