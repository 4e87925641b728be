//! Per-request orchestration and batch running.
//!
//! `run_request` drives one question through draft -> (optional premature
//! partial verify) -> the policy pipeline, and fills a cost ledger from the
//! backend call records. `run_batch` runs a dataset through a worker set with
//! bounded concurrency and produces per-request records plus an aggregate
//! report.
//!
//! Costs are abstract time units (tokens at the target's decode rate), never
//! wall clock: desk-scale backends have meaningless latencies, and the
//! speedups under study are rate-ratio phenomena.

pub mod report;
pub mod specreason;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::templates::{PromptTemplate, TaskCategory};
use crate::backends::{Backend, BackendError, FinishReason, GenerationResult, LatencyCounts};
use crate::dataset::DatasetRecord;
use crate::policy::{
    premature_check, run_policy, stage6_handoff, FulfilmentLabel, Outcome, PipelineStage,
    PolicyConfig, PolicyError, PolicyHooks, PrematureDecision,
};
use crate::prefix_verify::{
    build_packed, extract_chunk_verdicts, place_boundaries, BoundarySet, PrefixVerifyError,
    TokenId,
};

pub use report::{aggregate, render_table, AggregateReport, CategoryRow, RequestRecord};
pub use specreason::{specreason_baseline, SpecReasonParams};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("backend failed during {stage:?}: {source}")]
    Backend {
        stage: PipelineStage,
        source: BackendError,
    },
    #[error("worker reported an error finish: {0}")]
    WorkerFailed(String),
    #[error(transparent)]
    Verification(#[from] PrefixVerifyError),
    #[error("cannot aggregate an empty outcome list")]
    EmptyReport,
}

/// Per-request cost bookkeeping. Counts, not wall clock.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub draft_decode_tokens: usize,
    pub target_decode_tokens: usize,
    pub judge_prefill_tokens: usize,
    /// Judge forward passes: a packed partial verify counts 1, the
    /// sequential fallback counts one per boundary.
    pub judge_passes: usize,
    pub packed_passes: usize,
    pub label: Option<FulfilmentLabel>,
}

impl CostLedger {
    /// Adds `other`'s counts into `self`; an unset label is taken from `other`.
    pub fn absorb(&mut self, other: &CostLedger) {
        self.draft_decode_tokens += other.draft_decode_tokens;
        self.target_decode_tokens += other.target_decode_tokens;
        self.judge_prefill_tokens += other.judge_prefill_tokens;
        self.judge_passes += other.judge_passes;
        self.packed_passes += other.packed_passes;
        if self.label.is_none() {
            self.label = other.label;
        }
    }
}

/// Cost-model output: abstract time units and their ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupEstimate {
    pub baseline_cost: f64,
    pub parse_cost: f64,
    pub speedup: f64,
}

/// Per-token cost factor applied to judge prefill tokens. Verification is
/// prefill-only and compute-bound, hence far cheaper than decode; the exact
/// ratio is hardware-dependent, so it stays a knob.
pub const DEFAULT_PREFILL_COST_FACTOR: f64 = 0.01;

/// Baseline: the target decodes the whole `final_len` at unit rate. Pipeline
/// cost: draft tokens at `1/speed_ratio` rate, target tokens at unit rate,
/// judge prefill scaled by `prefill_cost_factor`.
pub fn estimate_speedup(
    ledger: &CostLedger,
    speed_ratio: f64,
    final_len: usize,
    prefill_cost_factor: f64,
) -> SpeedupEstimate {
    debug_assert!(speed_ratio > 0.0);
    let baseline_cost = final_len as f64;
    let parse_cost = ledger.draft_decode_tokens as f64 / speed_ratio
        + ledger.target_decode_tokens as f64
        + prefill_cost_factor * ledger.judge_prefill_tokens as f64;
    let speedup = baseline_cost / parse_cost.max(1e-12);
    SpeedupEstimate {
        baseline_cost,
        parse_cost,
        speedup,
    }
}

/// The three worker roles a request needs. The judge is usually the same
/// server as the target; desk-scale backends keep them separate instances.
#[derive(Clone)]
pub struct WorkerSet {
    pub draft: Arc<dyn Backend>,
    pub target: Arc<dyn Backend>,
    pub judge: Arc<dyn Backend>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    #[serde(rename = "parse")]
    Parse,
    #[serde(rename = "specreason")]
    Specreason,
    #[serde(rename = "target-only")]
    TargetOnly,
    #[serde(rename = "draft-only")]
    DraftOnly,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub prefill_cost_factor: f64,
    pub concurrency: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            prefill_cost_factor: DEFAULT_PREFILL_COST_FACTOR,
            concurrency: 1,
        }
    }
}

/// One partial-verify operation: packed when the judge supports custom
/// masks, otherwise the sequential per-boundary fallback.
fn partial_verify_op(
    judge: &dyn Backend,
    question: &str,
    draft: &[TokenId],
    bounds: &BoundarySet,
    template: &PromptTemplate,
) -> Result<crate::backends::PackedReadout, BackendError> {
    let suffix = judge.suffix_tokens();
    let packed = build_packed(draft, bounds, &suffix)?;
    match judge.judge_packed(question, &packed, template) {
        Err(BackendError::Capability { backend, operation }) => {
            log::debug!("{backend} cannot {operation}; using sequential fallback");
            judge.sequential_fallback(question, draft, bounds, template)
        }
        other => other,
    }
}

fn finish_ok(r: GenerationResult) -> Result<GenerationResult, EngineError> {
    if r.is_error() {
        Err(EngineError::WorkerFailed(
            r.diagnostic.unwrap_or_else(|| "unknown transport failure".into()),
        ))
    } else {
        Ok(r)
    }
}

/// Runs one question end to end and returns the outcome plus its ledger.
pub fn run_request(
    question: &str,
    category: TaskCategory,
    workers: &WorkerSet,
    cfg: &PolicyConfig,
) -> Result<(Outcome, CostLedger), EngineError> {
    cfg.validate()?;
    let full_template = PromptTemplate::full_verify(category);
    let partial_template = PromptTemplate::partial_verify(category);
    let mut stage1 = CostLedger::default();

    // Target-side closures for stage 6; the continuation budget is whatever
    // the output cap leaves after the adopted prefix.
    let max_new = cfg.max_output;
    let (t1, q1) = (workers.target.clone(), question.to_string());
    let mut target_restart = move || t1.generate(&q1, max_new, &[]);
    let (t2, q2) = (workers.target.clone(), question.to_string());
    let mut target_continue = move |prefix: &[TokenId]| {
        t2.continue_from(&q2, prefix, max_new.saturating_sub(prefix.len()).max(1))
    };

    // Stage 1: draft, optionally short-circuiting at t_premature tokens.
    let draft_result: GenerationResult = if cfg.premature_enabled() {
        let head = finish_ok(
            workers
                .draft
                .generate(question, cfg.t_premature, &[])
                .map_err(|source| EngineError::Backend {
                    stage: PipelineStage::Draft,
                    source,
                })?,
        )?;
        stage1.draft_decode_tokens += head.tokens.len();
        if matches!(head.finish, FinishReason::Stop) || head.tokens.is_empty() {
            // Full draft already produced; nothing to early-exit on.
            head
        } else {
            let bounds = place_boundaries(head.tokens.len(), cfg.delta)?;
            let readout = partial_verify_op(
                workers.judge.as_ref(),
                question,
                &head.tokens,
                &bounds,
                &partial_template,
            )
            .map_err(|source| EngineError::Backend {
                stage: PipelineStage::PrematureVerify,
                source,
            })?;
            stage1.judge_passes += readout.passes;
            stage1.packed_passes += usize::from(readout.packed);
            stage1.judge_prefill_tokens += readout.prefill_tokens;
            let cv =
                extract_chunk_verdicts(&readout.logits, cfg.tau_partial, bounds.chunk_count())?;

            match premature_check(&cv, head.tokens.len(), cfg) {
                PrematureDecision::AbortDrafting { adopted_len } => {
                    // The target takes over right here; stages 2-5 never run.
                    let mut never_full = |_: &[TokenId]| -> Result<
                        crate::backends::JudgeReadout,
                        BackendError,
                    > {
                        unreachable!("no full verify on the abort path")
                    };
                    let mut never_partial = |_: &[TokenId],
                                             _: &BoundarySet|
                     -> Result<crate::backends::PackedReadout, BackendError> {
                        unreachable!("no partial verify on the abort path")
                    };
                    let mut hooks = PolicyHooks {
                        judge_full: &mut never_full,
                        judge_partial: &mut never_partial,
                        target_restart: &mut target_restart,
                        target_continue: &mut target_continue,
                    };
                    let mut outcome = stage6_handoff(
                        &head.tokens,
                        adopted_len,
                        0.0,
                        Some(cv),
                        &mut hooks,
                        CostLedger::default(),
                    )?;
                    outcome.cost.absorb(&stage1);
                    let ledger = outcome.cost.clone();
                    return Ok((outcome, ledger));
                }
                PrematureDecision::ContinueDrafting => {
                    let tail = finish_ok(
                        workers
                            .draft
                            .continue_from(question, &head.tokens, max_new - cfg.t_premature)
                            .map_err(|source| EngineError::Backend {
                                stage: PipelineStage::Draft,
                                source,
                            })?,
                    )?;
                    stage1.draft_decode_tokens += tail.tokens.len();
                    let mut tokens = head.tokens;
                    tokens.extend_from_slice(&tail.tokens);
                    GenerationResult {
                        tokens,
                        finish: tail.finish,
                        latency_model: LatencyCounts {
                            prefill_tokens: head.latency_model.prefill_tokens,
                            decode_tokens: head.latency_model.decode_tokens
                                + tail.latency_model.decode_tokens,
                        },
                        diagnostic: None,
                    }
                }
            }
        }
    } else {
        let d = finish_ok(
            workers
                .draft
                .generate(question, max_new, &[])
                .map_err(|source| EngineError::Backend {
                    stage: PipelineStage::Draft,
                    source,
                })?,
        )?;
        stage1.draft_decode_tokens += d.tokens.len();
        d
    };

    // Stages 2-6.
    let (judge, q_full) = (workers.judge.clone(), question.to_string());
    let mut judge_full =
        move |answer: &[TokenId]| judge.judge_full(&q_full, answer, &full_template);
    let (judge2, q_partial) = (workers.judge.clone(), question.to_string());
    let mut judge_partial = move |draft: &[TokenId], bounds: &BoundarySet| {
        partial_verify_op(judge2.as_ref(), &q_partial, draft, bounds, &partial_template)
    };
    let mut hooks = PolicyHooks {
        judge_full: &mut judge_full,
        judge_partial: &mut judge_partial,
        target_restart: &mut target_restart,
        target_continue: &mut target_continue,
    };
    let mut outcome = run_policy(question, &draft_result, &mut hooks, cfg)?;
    outcome.cost.absorb(&stage1);
    let ledger = outcome.cost.clone();
    Ok((outcome, ledger))
}

/// What a mode run produces before it becomes a report record.
struct RunOutput {
    answer: Vec<TokenId>,
    label: FulfilmentLabel,
    adopted_len: usize,
    full_confidence: Option<f64>,
    ledger: CostLedger,
}

fn run_one(
    record: &DatasetRecord,
    workers: &WorkerSet,
    cfg: &PolicyConfig,
    engine_cfg: &EngineConfig,
    mode: RunMode,
) -> RequestRecord {
    let draft_speed = workers.draft.descriptor().speed_factor;
    let result: Result<RunOutput, EngineError> = match mode {
        RunMode::Parse => {
            run_request(&record.question, record.category, workers, cfg).map(|(o, ledger)| {
                RunOutput {
                    answer: o.answer,
                    label: o.label,
                    adopted_len: o.adopted_len,
                    full_confidence: Some(o.full_confidence),
                    ledger,
                }
            })
        }
        RunMode::Specreason => specreason_baseline(
            &record.question,
            record.category,
            workers,
            &SpecReasonParams::default(),
        )
        .map(|(answer, ledger)| RunOutput {
            label: ledger.label.unwrap_or(FulfilmentLabel::Lg),
            adopted_len: 0,
            full_confidence: None,
            answer,
            ledger,
        }),
        RunMode::TargetOnly => {
            single_worker_run(workers.target.as_ref(), record, cfg, FulfilmentLabel::Lg)
        }
        RunMode::DraftOnly => {
            single_worker_run(workers.draft.as_ref(), record, cfg, FulfilmentLabel::Sm)
        }
    };

    let detok = |tokens: &[TokenId]| match mode {
        RunMode::DraftOnly => workers.draft.detokenize(tokens),
        _ => workers.target.detokenize(tokens),
    };

    match result {
        Ok(out) => {
            let estimate = estimate_speedup(
                &out.ledger,
                draft_speed,
                out.answer.len().max(1),
                engine_cfg.prefill_cost_factor,
            );
            RequestRecord {
                schema_version: report::SCHEMA_VERSION,
                id: record.id.clone(),
                category: record.category,
                mode,
                label: Some(out.label),
                draft_len: out.ledger.draft_decode_tokens,
                adopted_len: out.adopted_len,
                answer_len: out.answer.len(),
                answer_preview: preview(&detok(&out.answer)),
                full_confidence: out.full_confidence,
                ledger: out.ledger,
                speedup: Some(estimate.speedup),
                failed: false,
                error: None,
            }
        }
        Err(err) => RequestRecord {
            schema_version: report::SCHEMA_VERSION,
            id: record.id.clone(),
            category: record.category,
            mode,
            label: None,
            draft_len: 0,
            adopted_len: 0,
            answer_len: 0,
            answer_preview: String::new(),
            full_confidence: None,
            ledger: CostLedger::default(),
            speedup: None,
            failed: true,
            error: Some(err.to_string()),
        },
    }
}

fn single_worker_run(
    backend: &dyn Backend,
    record: &DatasetRecord,
    cfg: &PolicyConfig,
    label: FulfilmentLabel,
) -> Result<RunOutput, EngineError> {
    let gen = finish_ok(
        backend
            .generate(&record.question, cfg.max_output, &[])
            .map_err(|source| EngineError::Backend {
                stage: PipelineStage::Draft,
                source,
            })?,
    )?;
    let mut ledger = CostLedger::default();
    match label {
        FulfilmentLabel::Sm => ledger.draft_decode_tokens = gen.tokens.len(),
        _ => ledger.target_decode_tokens = gen.tokens.len(),
    }
    ledger.label = Some(label);
    let adopted_len = match label {
        FulfilmentLabel::Lg => 0,
        _ => gen.tokens.len(),
    };
    Ok(RunOutput {
        answer: gen.tokens,
        label,
        adopted_len,
        full_confidence: None,
        ledger,
    })
}

fn preview(text: &str) -> String {
    const LIMIT: usize = 120;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let cut = text
            .char_indices()
            .take_while(|(i, _)| *i < LIMIT)
            .last()
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or(0);
        format!("{}...", &text[..cut])
    }
}

/// Runs every dataset record through the selected mode with bounded
/// concurrency. Records come back in dataset order regardless of scheduling;
/// a failed request is recorded, not fatal.
pub fn run_batch(
    records: &[DatasetRecord],
    workers: &WorkerSet,
    cfg: &PolicyConfig,
    engine_cfg: &EngineConfig,
    mode: RunMode,
) -> Vec<RequestRecord> {
    let slots: Mutex<Vec<Option<RequestRecord>>> = Mutex::new(vec![None; records.len()]);
    let cursor = AtomicUsize::new(0);
    let threads = engine_cfg.concurrency.max(1).min(records.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::Relaxed);
                if i >= records.len() {
                    break;
                }
                let rec = run_one(&records[i], workers, cfg, engine_cfg, mode);
                slots.lock().expect("slot vector poisoned")[i] = Some(rec);
            });
        }
    });

    slots
        .into_inner()
        .expect("slot vector poisoned")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}
