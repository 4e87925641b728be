//! Sequential segment-level baseline.
//!
//! The draft worker proposes one chunk at a time; the big worker scores each
//! chunk 1-10 with a single-token query and regenerates rejected chunks. One
//! judge query per chunk, strictly serialized: the contrast with packed
//! verification shows up directly in the ledger's pass counts.

use super::{CostLedger, EngineError};
use crate::backends::templates::{PromptTemplate, TaskCategory};
use crate::backends::BackendError;
use crate::engine::WorkerSet;
use crate::policy::{FulfilmentLabel, PipelineStage};
use crate::prefix_verify::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecReasonParams {
    /// Chunk size in tokens.
    pub chunk_tokens: usize,
    /// Accept a chunk iff its first-digit score reaches this value.
    pub score_threshold: u8,
    /// Stop once the answer reaches this many tokens.
    pub token_budget: usize,
}

impl Default for SpecReasonParams {
    fn default() -> Self {
        Self {
            chunk_tokens: 40,
            score_threshold: 7,
            token_budget: 1300,
        }
    }
}

fn backend_err(stage: PipelineStage) -> impl Fn(BackendError) -> EngineError {
    move |source| EngineError::Backend { stage, source }
}

/// One question through the sequential baseline. The returned ledger labels
/// the answer Sm when every chunk came from the draft, Lg when every chunk
/// was regenerated, and Sm+Lg for a mix.
pub fn specreason_baseline(
    question: &str,
    category: TaskCategory,
    workers: &WorkerSet,
    params: &SpecReasonParams,
) -> Result<(Vec<TokenId>, CostLedger), EngineError> {
    let template = PromptTemplate::score(category);
    let mut answer: Vec<TokenId> = Vec::new();
    let mut ledger = CostLedger::default();
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut draft_eos = false;

    while answer.len() < params.token_budget && !draft_eos {
        let chunk = workers
            .draft
            .continue_from(question, &answer, params.chunk_tokens)
            .map_err(backend_err(PipelineStage::Draft))?;
        if chunk.is_error() {
            return Err(EngineError::WorkerFailed(
                chunk.diagnostic.unwrap_or_default(),
            ));
        }
        ledger.draft_decode_tokens += chunk.tokens.len();
        if chunk.tokens.is_empty() {
            break;
        }
        if matches!(chunk.finish, crate::backends::FinishReason::Stop) {
            draft_eos = true;
        }

        let readout = workers
            .judge
            .score_first_digit(question, &answer, &chunk.tokens, &template)
            .map_err(backend_err(PipelineStage::PartialVerify))?;
        ledger.judge_passes += 1;
        ledger.judge_prefill_tokens += readout.prefill_tokens;
        let score = match readout.score {
            Some(s) => s,
            None => {
                log::warn!("scorer emitted a non-digit first token for {question:?}; treating as 0");
                0
            }
        };

        if score >= params.score_threshold {
            answer.extend_from_slice(&chunk.tokens);
            accepted += 1;
        } else {
            rejected += 1;
            let regen = workers
                .target
                .continue_from(question, &answer, params.chunk_tokens)
                .map_err(backend_err(PipelineStage::Restart))?;
            if regen.is_error() {
                return Err(EngineError::WorkerFailed(
                    regen.diagnostic.unwrap_or_default(),
                ));
            }
            ledger.target_decode_tokens += regen.tokens.len();
            if regen.tokens.is_empty() {
                break;
            }
            answer.extend_from_slice(&regen.tokens);
        }
    }

    ledger.label = Some(if rejected == 0 {
        FulfilmentLabel::Sm
    } else if accepted == 0 {
        FulfilmentLabel::Lg
    } else {
        FulfilmentLabel::SmLg
    });
    Ok((answer, ledger))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::scripted::{ScriptSpec, ScriptedWorkers};
    use crate::backends::Role;

    const Q: &str = "a scripted question";

    fn workers(spec: ScriptSpec) -> (ScriptedWorkers, WorkerSet) {
        let w = ScriptedWorkers::new();
        w.add_script(Q, spec);
        let set = WorkerSet {
            draft: w.backend(Role::Draft),
            target: w.backend(Role::Target),
            judge: w.backend(Role::Judge),
        };
        (w, set)
    }

    #[test]
    fn accept_all_ships_draft_with_one_query_per_chunk() {
        let draft: Vec<TokenId> = (0..100).collect();
        let (_, set) = workers(ScriptSpec {
            draft: draft.clone(),
            scores: vec![Some(9); 3],
            ..ScriptSpec::default()
        });
        let (answer, ledger) =
            specreason_baseline(Q, TaskCategory::Math, &set, &SpecReasonParams::default()).unwrap();
        assert_eq!(answer, draft);
        assert_eq!(ledger.judge_passes, 3); // ceil(100/40)
        assert_eq!(ledger.label, Some(FulfilmentLabel::Sm));
        assert_eq!(ledger.target_decode_tokens, 0);
    }

    #[test]
    fn reject_all_regenerates_every_chunk() {
        let (_, set) = workers(ScriptSpec {
            draft: (0..120).collect(),
            target: (1000..1120).collect(),
            scores: vec![Some(1); 3],
            ..ScriptSpec::default()
        });
        let (answer, ledger) =
            specreason_baseline(Q, TaskCategory::Math, &set, &SpecReasonParams::default()).unwrap();
        assert_eq!(ledger.label, Some(FulfilmentLabel::Lg));
        assert_eq!(answer, (1000..1120).collect::<Vec<_>>());
        assert_eq!(ledger.target_decode_tokens, 120);
        assert_eq!(ledger.judge_passes, 3);
    }

    #[test]
    fn alternating_scores_mix_sources() {
        let (_, set) = workers(ScriptSpec {
            draft: (0..160).collect(),
            target: (1000..1160).collect(),
            scores: vec![Some(9), Some(1), Some(9), Some(1)],
            ..ScriptSpec::default()
        });
        let (answer, ledger) =
            specreason_baseline(Q, TaskCategory::Math, &set, &SpecReasonParams::default()).unwrap();
        assert_eq!(ledger.label, Some(FulfilmentLabel::SmLg));
        assert_eq!(ledger.judge_passes, 4);
        // Chunks alternate draft/target sources.
        assert_eq!(answer[0..40], (0..40).collect::<Vec<TokenId>>()[..]);
        assert_eq!(answer[40..80], (1040..1080).collect::<Vec<TokenId>>()[..]);
        assert_eq!(answer[80..120], (80..120).collect::<Vec<TokenId>>()[..]);
        assert_eq!(answer[120..160], (1120..1160).collect::<Vec<TokenId>>()[..]);
    }

    #[test]
    fn non_digit_score_rejects_chunk() {
        let (_, set) = workers(ScriptSpec {
            draft: (0..40).collect(),
            target: (1000..1040).collect(),
            scores: vec![None],
            ..ScriptSpec::default()
        });
        let (answer, ledger) =
            specreason_baseline(Q, TaskCategory::Math, &set, &SpecReasonParams::default()).unwrap();
        assert_eq!(ledger.label, Some(FulfilmentLabel::Lg));
        assert_eq!(answer, (1000..1040).collect::<Vec<_>>());
    }

    #[test]
    fn budget_stops_the_loop() {
        let params = SpecReasonParams {
            chunk_tokens: 40,
            score_threshold: 7,
            token_budget: 80,
        };
        let (_, set) = workers(ScriptSpec {
            draft: (0..4000).collect(),
            scores: vec![Some(9); 2],
            ..ScriptSpec::default()
        });
        let (answer, ledger) = specreason_baseline(Q, TaskCategory::Math, &set, &params).unwrap();
        assert_eq!(answer.len(), 80);
        assert_eq!(ledger.judge_passes, 2);
    }
}
