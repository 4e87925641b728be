//! Scripted replay backend.
//!
//! Every question carries its own script: a draft token stream, a target
//! token stream, and queues of judge responses and segment scores. Calls
//! replay the script deterministically and are recorded in a per-question
//! trace; a call with nothing scripted for it is an error, which makes any
//! deviation in call order a test failure in itself.
//!
//! Stream semantics: `generate` reads a stream from the start;
//! `continue_from` reads from offset `|prefix|`. A request that exhausts the
//! stream finishes with `Stop`, otherwise `Length`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::judge::JudgeLogits;
use crate::prefix_verify::{PackedVerification, TokenId};

use super::templates::PromptTemplate;
use super::{
    approx_text_tokens, Backend, BackendDescriptor, BackendError, BackendKind, FinishReason,
    GenerationResult, JudgeReadout, LatencyCounts, PackedReadout, Role, ScoreReadout,
    DEFAULT_DRAFT_SPEED_FACTOR,
};

/// Serializable per-question script, embeddable in dataset fixture files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptSpec {
    /// Draft-model token stream.
    #[serde(default)]
    pub draft: Vec<TokenId>,
    /// Target-model token stream. `generate` reads it from the start;
    /// `continue_from` with an adopted prefix of length L reads `target[L..]`,
    /// so one stream scripts restarts, continuations, and chunk regeneration
    /// consistently.
    #[serde(default)]
    pub target: Vec<TokenId>,
    /// Queue of full-verify responses as (logit_correct, logit_incorrect).
    #[serde(default)]
    pub full_judge: Vec<(f64, f64)>,
    /// Queue of partial-verify responses, one row of logit pairs per pass.
    #[serde(default)]
    pub packed_judge: Vec<Vec<(f64, f64)>>,
    /// Queue of segment scores; `None` scripts a non-digit first token.
    #[serde(default)]
    pub scores: Vec<Option<u8>>,
}

/// The call types a script can observe, in order of arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Generate,
    ContinueFrom,
    JudgeFull,
    JudgePacked,
    SequentialFallback,
    Score,
}

#[derive(Debug, Default)]
struct ScriptState {
    spec: ScriptSpec,
    full_cursor: usize,
    packed_cursor: usize,
    score_cursor: usize,
    trace: Vec<CallKind>,
}

#[derive(Debug, Default)]
struct ScriptedCore {
    scripts: Mutex<HashMap<String, ScriptState>>,
}

impl ScriptedCore {
    fn with_state<T>(
        &self,
        question: &str,
        f: impl FnOnce(&mut ScriptState) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut guard = self.scripts.lock().expect("script map poisoned");
        let state = guard
            .get_mut(question)
            .ok_or_else(|| BackendError::Script(format!("no script for question {question:?}")))?;
        f(state)
    }
}

/// Builder/owner of the shared scripts; hand out one backend view per role.
#[derive(Clone, Default)]
pub struct ScriptedWorkers {
    core: Arc<ScriptedCore>,
    suffix: Vec<TokenId>,
    draft_speed_factor: f64,
}

/// Suffix tokens the scripted judge pretends its chat template uses.
pub const SCRIPTED_SUFFIX: [TokenId; 2] = [9001, 9002];

impl ScriptedWorkers {
    pub fn new() -> Self {
        Self {
            core: Arc::new(ScriptedCore::default()),
            suffix: SCRIPTED_SUFFIX.to_vec(),
            draft_speed_factor: DEFAULT_DRAFT_SPEED_FACTOR,
        }
    }

    pub fn with_draft_speed_factor(mut self, speed_factor: f64) -> Self {
        self.draft_speed_factor = speed_factor;
        self
    }

    pub fn add_script(&self, question: impl Into<String>, spec: ScriptSpec) {
        let mut guard = self.core.scripts.lock().expect("script map poisoned");
        guard.insert(
            question.into(),
            ScriptState {
                spec,
                ..ScriptState::default()
            },
        );
    }

    pub fn backend(&self, role: Role) -> Arc<ScriptedBackend> {
        let speed_factor = match role {
            Role::Draft => self.draft_speed_factor,
            _ => 1.0,
        };
        Arc::new(ScriptedBackend {
            core: self.core.clone(),
            role,
            suffix: self.suffix.clone(),
            speed_factor,
        })
    }

    /// Observed call order for a question, across all role views.
    pub fn trace(&self, question: &str) -> Vec<CallKind> {
        let guard = self.core.scripts.lock().expect("script map poisoned");
        guard
            .get(question)
            .map(|s| s.trace.clone())
            .unwrap_or_default()
    }
}

pub struct ScriptedBackend {
    core: Arc<ScriptedCore>,
    role: Role,
    suffix: Vec<TokenId>,
    speed_factor: f64,
}

impl ScriptedBackend {
    fn stream_of(spec: &ScriptSpec, role: Role) -> Result<&[TokenId], BackendError> {
        match role {
            Role::Draft => Ok(&spec.draft),
            Role::Target => Ok(&spec.target),
            Role::Judge => Err(BackendError::Capability {
                backend: "scripted judge",
                operation: "generate text",
            }),
        }
    }

    fn read_stream(
        &self,
        question: &str,
        offset: usize,
        max_new: usize,
        kind: CallKind,
    ) -> Result<GenerationResult, BackendError> {
        let role = self.role;
        self.core.with_state(question, |state| {
            state.trace.push(kind);
            let stream = Self::stream_of(&state.spec, role)?;
            let start = offset.min(stream.len());
            let end = (start + max_new).min(stream.len());
            let tokens = stream[start..end].to_vec();
            let finish = if end == stream.len() {
                FinishReason::Stop
            } else {
                FinishReason::Length
            };
            let latency_model = LatencyCounts {
                prefill_tokens: approx_text_tokens(question) + start,
                decode_tokens: tokens.len(),
            };
            Ok(GenerationResult {
                tokens,
                finish,
                latency_model,
                diagnostic: None,
            })
        })
    }

    fn pop_packed_row(
        &self,
        question: &str,
        expected: usize,
        kind: CallKind,
    ) -> Result<Vec<JudgeLogits>, BackendError> {
        self.core.with_state(question, |state| {
            state.trace.push(kind);
            let row = state
                .spec
                .packed_judge
                .get(state.packed_cursor)
                .ok_or_else(|| {
                    BackendError::Script(format!(
                        "partial-verify call #{} has no scripted response for {question:?}",
                        state.packed_cursor + 1
                    ))
                })?
                .clone();
            state.packed_cursor += 1;
            if row.len() != expected {
                return Err(BackendError::Script(format!(
                    "scripted partial-verify row has {} entries, packed layout expects {expected}",
                    row.len()
                )));
            }
            row.into_iter()
                .map(|(lc, li)| JudgeLogits::new(lc, li).map_err(BackendError::from))
                .collect()
        })
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Scripted,
            role: self.role,
            speed_factor: self.speed_factor,
        }
    }

    fn suffix_tokens(&self) -> Vec<TokenId> {
        self.suffix.clone()
    }

    fn generate(
        &self,
        question: &str,
        max_new: usize,
        _stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError> {
        self.read_stream(question, 0, max_new, CallKind::Generate)
    }

    fn continue_from(
        &self,
        question: &str,
        prefix: &[TokenId],
        max_new: usize,
    ) -> Result<GenerationResult, BackendError> {
        self.read_stream(question, prefix.len(), max_new, CallKind::ContinueFrom)
    }

    fn judge_full(
        &self,
        question: &str,
        answer: &[TokenId],
        _template: &PromptTemplate,
    ) -> Result<JudgeReadout, BackendError> {
        let suffix_len = self.suffix.len();
        self.core.with_state(question, |state| {
            state.trace.push(CallKind::JudgeFull);
            let (lc, li) = *state
                .spec
                .full_judge
                .get(state.full_cursor)
                .ok_or_else(|| {
                    BackendError::Script(format!(
                        "full-verify call #{} has no scripted response for {question:?}",
                        state.full_cursor + 1
                    ))
                })?;
            state.full_cursor += 1;
            Ok(JudgeReadout {
                logits: JudgeLogits::new(lc, li)?,
                prefill_tokens: approx_text_tokens(question) + answer.len() + suffix_len,
            })
        })
    }

    fn judge_packed(
        &self,
        question: &str,
        packed: &PackedVerification,
        _template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        let logits = self.pop_packed_row(
            question,
            packed.judgment_positions.len(),
            CallKind::JudgePacked,
        )?;
        Ok(PackedReadout {
            logits,
            prefill_tokens: approx_text_tokens(question) + packed.len(),
            passes: 1,
            packed: true,
        })
    }

    /// Pops the same queue as `judge_packed`: one scripted row per
    /// partial-verify operation, whatever the transport. Only the ledger
    /// shape differs (K passes, per-prefix prefill cost).
    fn sequential_fallback(
        &self,
        question: &str,
        draft: &[TokenId],
        bounds: &crate::prefix_verify::BoundarySet,
        _template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        let logits = self.pop_packed_row(
            question,
            bounds.chunk_count(),
            CallKind::SequentialFallback,
        )?;
        debug_assert_eq!(draft.len(), bounds.draft_len);
        let qt = approx_text_tokens(question);
        let prefill_tokens = bounds
            .boundaries
            .iter()
            .map(|t_i| qt + t_i + self.suffix.len())
            .sum();
        Ok(PackedReadout {
            logits,
            prefill_tokens,
            passes: bounds.chunk_count(),
            packed: false,
        })
    }

    fn score_first_digit(
        &self,
        question: &str,
        answer_so_far: &[TokenId],
        chunk: &[TokenId],
        _template: &PromptTemplate,
    ) -> Result<ScoreReadout, BackendError> {
        self.core.with_state(question, |state| {
            state.trace.push(CallKind::Score);
            let score = *state.spec.scores.get(state.score_cursor).ok_or_else(|| {
                BackendError::Script(format!(
                    "score call #{} has no scripted response for {question:?}",
                    state.score_cursor + 1
                ))
            })?;
            state.score_cursor += 1;
            Ok(ScoreReadout {
                score,
                prefill_tokens: approx_text_tokens(question) + answer_so_far.len() + chunk.len(),
            })
        })
    }

    fn detokenize(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::templates::TaskCategory;
    use crate::prefix_verify::{build_packed, place_boundaries};

    const Q: &str = "what is 2+2";

    fn workers_with(spec: ScriptSpec) -> ScriptedWorkers {
        let w = ScriptedWorkers::new();
        w.add_script(Q, spec);
        w
    }

    #[test]
    fn canned_answer_shorter_than_budget_stops() {
        let w = workers_with(ScriptSpec {
            draft: vec![1, 2, 3, 4, 5, 6, 7],
            ..ScriptSpec::default()
        });
        let d = w.backend(Role::Draft);
        let r = d.generate(Q, 300, &[]).unwrap();
        assert_eq!(r.tokens, vec![1, 2, 3, 4, 5, 6, 7]);
        assert_eq!(r.finish, FinishReason::Stop);
    }

    #[test]
    fn canned_answer_longer_than_budget_truncates() {
        let w = workers_with(ScriptSpec {
            draft: (0..500).collect(),
            ..ScriptSpec::default()
        });
        let d = w.backend(Role::Draft);
        let r = d.generate(Q, 300, &[]).unwrap();
        assert_eq!(r.tokens.len(), 300);
        assert_eq!(r.finish, FinishReason::Length);
    }

    #[test]
    fn continue_from_returns_second_half() {
        let target: Vec<TokenId> = (100..110).collect();
        let w = workers_with(ScriptSpec {
            target: target.clone(),
            ..ScriptSpec::default()
        });
        let t = w.backend(Role::Target);
        let r = t.continue_from(Q, &target[..5], 100).unwrap();
        assert_eq!(r.tokens, target[5..].to_vec());
        assert_eq!(r.finish, FinishReason::Stop);

        // Full answer as prefix: nothing left to say.
        let r = t.continue_from(Q, &target, 100).unwrap();
        assert!(r.tokens.is_empty());
        assert_eq!(r.finish, FinishReason::Stop);
    }

    #[test]
    fn judge_full_replays_and_then_errors() {
        let w = workers_with(ScriptSpec {
            full_judge: vec![(9.0, 0.0)],
            ..ScriptSpec::default()
        });
        let j = w.backend(Role::Judge);
        let template = PromptTemplate::full_verify(TaskCategory::Math);
        let r = j.judge_full(Q, &[1, 2], &template).unwrap();
        assert_eq!(r.logits.logit_correct(), 9.0);
        assert_eq!(r.logits.logit_incorrect(), 0.0);
        // Second call has no script: call-order deviation is an error.
        assert!(matches!(
            j.judge_full(Q, &[1, 2], &template),
            Err(BackendError::Script(_))
        ));
    }

    #[test]
    fn packed_row_length_must_match_layout() {
        let w = workers_with(ScriptSpec {
            packed_judge: vec![vec![(3.0, 0.0), (0.0, 3.0)]],
            ..ScriptSpec::default()
        });
        let j = w.backend(Role::Judge);
        let template = PromptTemplate::partial_verify(TaskCategory::Math);
        let bounds = place_boundaries(6, 2).unwrap(); // 3 chunks, row has 2
        let packed = build_packed(&[1, 2, 3, 4, 5, 6], &bounds, &j.suffix_tokens()).unwrap();
        assert!(matches!(
            j.judge_packed(Q, &packed, &template),
            Err(BackendError::Script(_))
        ));
    }

    #[test]
    fn sequential_fallback_shares_packed_queue_with_k_passes() {
        let w = workers_with(ScriptSpec {
            packed_judge: vec![vec![(3.0, 0.0), (0.0, 3.0)], vec![(3.0, 0.0), (3.0, 0.0)]],
            ..ScriptSpec::default()
        });
        let j = w.backend(Role::Judge);
        let template = PromptTemplate::partial_verify(TaskCategory::Math);
        let draft = [1, 2, 3, 4];
        let bounds = place_boundaries(4, 2).unwrap();
        let packed = build_packed(&draft, &bounds, &j.suffix_tokens()).unwrap();

        let a = j.judge_packed(Q, &packed, &template).unwrap();
        assert_eq!(a.passes, 1);
        assert!(a.packed);

        let b = j.sequential_fallback(Q, &draft, &bounds, &template).unwrap();
        assert_eq!(b.passes, 2);
        assert!(!b.packed);
        assert_eq!(
            w.trace(Q),
            vec![CallKind::JudgePacked, CallKind::SequentialFallback]
        );
    }

    #[test]
    fn score_queue_replays_none_as_non_digit() {
        let w = workers_with(ScriptSpec {
            scores: vec![Some(9), None],
            ..ScriptSpec::default()
        });
        let j = w.backend(Role::Judge);
        let template = PromptTemplate::score(TaskCategory::Math);
        assert_eq!(
            j.score_first_digit(Q, &[], &[1], &template).unwrap().score,
            Some(9)
        );
        assert_eq!(
            j.score_first_digit(Q, &[], &[1], &template).unwrap().score,
            None
        );
    }

    #[test]
    fn unknown_question_is_a_script_error() {
        let w = ScriptedWorkers::new();
        let d = w.backend(Role::Draft);
        assert!(matches!(
            d.generate("unscripted", 10, &[]),
            Err(BackendError::Script(_))
        ));
    }
}
