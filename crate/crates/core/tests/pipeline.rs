//! Cross-module integration: the full pipeline over the toy-model backend,
//! packed/sequential substitutability, and outcome invariants.

use std::sync::Arc;

use parse_core::backends::refdecoder::RefDecoderBackend;
use parse_core::backends::scripted::{ScriptSpec, ScriptedWorkers};
use parse_core::backends::templates::{PromptTemplate, TaskCategory};
use parse_core::backends::{
    Backend, BackendDescriptor, BackendError, GenerationResult, JudgeReadout, PackedReadout, Role,
    ScoreReadout,
};
use parse_core::engine::{run_request, WorkerSet};
use parse_core::judge::JudgeLogits;
use parse_core::policy::FulfilmentLabel;
use parse_core::prefix_verify::{PackedVerification, TokenId};
use parse_core::profiles::builtin_profile;
use parse_core::refdecoder::ToyModelSpec;

fn toy_spec(seed: u64) -> ToyModelSpec {
    ToyModelSpec {
        vocab_size: 64,
        dim: 16,
        layers: 2,
        heads: 2,
        seed,
        correct_token_id: 11,
        incorrect_token_id: 12,
    }
}

fn toy_workers(seed: u64) -> WorkerSet {
    let suffix = vec![60u32, 61];
    WorkerSet {
        draft: Arc::new(
            RefDecoderBackend::new(toy_spec(seed ^ 1), Role::Draft, suffix.clone()).unwrap(),
        ),
        target: Arc::new(
            RefDecoderBackend::new(toy_spec(seed ^ 2), Role::Target, suffix.clone()).unwrap(),
        ),
        judge: Arc::new(RefDecoderBackend::new(toy_spec(seed ^ 2), Role::Judge, suffix).unwrap()),
    }
}

/// Delegating wrapper that refuses packed execution, forcing the engine onto
/// the sequential fallback.
struct SequentialOnly(Arc<RefDecoderBackend>);

impl Backend for SequentialOnly {
    fn descriptor(&self) -> BackendDescriptor {
        self.0.descriptor()
    }
    fn suffix_tokens(&self) -> Vec<TokenId> {
        self.0.suffix_tokens()
    }
    fn generate(
        &self,
        question: &str,
        max_new: usize,
        stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError> {
        self.0.generate(question, max_new, stops)
    }
    fn continue_from(
        &self,
        question: &str,
        prefix: &[TokenId],
        max_new: usize,
    ) -> Result<GenerationResult, BackendError> {
        self.0.continue_from(question, prefix, max_new)
    }
    fn judge_full(
        &self,
        question: &str,
        answer: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<JudgeReadout, BackendError> {
        self.0.judge_full(question, answer, template)
    }
    fn judge_packed(
        &self,
        _question: &str,
        _packed: &PackedVerification,
        _template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        Err(BackendError::Capability {
            backend: "sequential-only wrapper",
            operation: "run packed verification",
        })
    }
    fn score_first_digit(
        &self,
        question: &str,
        answer_so_far: &[TokenId],
        chunk: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<ScoreReadout, BackendError> {
        self.0.score_first_digit(question, answer_so_far, chunk, template)
    }
    fn detokenize(&self, tokens: &[TokenId]) -> String {
        self.0.detokenize(tokens)
    }
}

#[test]
fn refdecoder_pipeline_completes_with_valid_outcome() {
    let workers = toy_workers(21);
    let mut cfg = builtin_profile("qwen").unwrap();
    cfg.max_output = 32;
    cfg.delta = 8;

    let (outcome, ledger) =
        run_request("what is the answer", TaskCategory::Math, &workers, &cfg).unwrap();
    // No premature pass at this output budget: at most full + partial.
    assert!(ledger.judge_passes <= 2, "judge passes {}", ledger.judge_passes);
    match outcome.label {
        FulfilmentLabel::Sm => {
            assert_eq!(outcome.adopted_len, outcome.answer.len());
            assert_eq!(ledger.target_decode_tokens, 0);
        }
        FulfilmentLabel::SmLg => {
            assert!(outcome.adopted_len > 0);
            assert_eq!(
                outcome.adopted_len + ledger.target_decode_tokens,
                outcome.answer.len(),
                "adopted draft tokens + target tokens must equal the answer"
            );
        }
        FulfilmentLabel::Lg => {
            assert_eq!(outcome.adopted_len, 0);
            assert_eq!(ledger.target_decode_tokens, outcome.answer.len());
        }
    }
}

/// The pipeline's outcome is the same whether partial verification runs
/// packed or sequentially; only the ledger shape changes.
#[test]
fn packed_and_sequential_routes_agree_end_to_end() {
    let mut cfg = builtin_profile("qwen").unwrap();
    cfg.max_output = 48;
    cfg.delta = 8;

    let question = "compare the two verification routes";
    let packed_workers = toy_workers(33);
    let (packed_outcome, packed_ledger) =
        run_request(question, TaskCategory::Math, &packed_workers, &cfg).unwrap();

    let sequential_judge = Arc::new(
        RefDecoderBackend::new(toy_spec(33 ^ 2), Role::Judge, vec![60, 61]).unwrap(),
    );
    let sequential_workers = WorkerSet {
        judge: Arc::new(SequentialOnly(sequential_judge)),
        ..toy_workers(33)
    };
    let (seq_outcome, seq_ledger) =
        run_request(question, TaskCategory::Math, &sequential_workers, &cfg).unwrap();

    assert_eq!(packed_outcome.answer, seq_outcome.answer);
    assert_eq!(packed_outcome.label, seq_outcome.label);
    assert_eq!(packed_outcome.adopted_len, seq_outcome.adopted_len);
    // Both ran a partial verify (strict accept does not fire on a toy judge
    // whose confidences hover near 0.5).
    assert_eq!(packed_ledger.packed_passes, 1);
    assert_eq!(seq_ledger.packed_passes, 0);
    assert!(
        seq_ledger.judge_passes > packed_ledger.judge_passes,
        "sequential {} vs packed {}",
        seq_ledger.judge_passes,
        packed_ledger.judge_passes
    );
}

#[test]
fn outcome_invariants_on_scripted_branches() {
    let question = "invariants";
    let conf = |p: f64| {
        let l = JudgeLogits::from_confidence(p).unwrap();
        (l.logit_correct(), l.logit_incorrect())
    };
    let workers = ScriptedWorkers::new();
    workers.add_script(
        question,
        ScriptSpec {
            draft: (0..160).collect(),
            target: (1000..1160).collect(),
            full_judge: vec![conf(0.5)],
            packed_judge: vec![vec![conf(0.99), conf(0.99), conf(0.01), conf(0.01)]],
            scores: vec![],
        },
    );
    let set = WorkerSet {
        draft: workers.backend(Role::Draft),
        target: workers.backend(Role::Target),
        judge: workers.backend(Role::Judge),
    };
    let mut cfg = builtin_profile("qwen").unwrap();
    cfg.max_output = 200;
    let (outcome, ledger) = run_request(question, TaskCategory::Math, &set, &cfg).unwrap();

    assert_eq!(outcome.label, FulfilmentLabel::SmLg);
    assert!(outcome.adopted_len > 0 && outcome.adopted_len <= 160);
    assert_eq!(&outcome.answer[..outcome.adopted_len], &(0..80).collect::<Vec<u32>>()[..]);
    assert_eq!(
        outcome.adopted_len + ledger.target_decode_tokens,
        outcome.answer.len()
    );
    assert_eq!(ledger.label, Some(FulfilmentLabel::SmLg));
}

/// The toy target model never generates judge calls on its own: draft-only
/// and target-only style usage keeps ledgers one-sided.
#[test]
fn glm_profile_runs_the_same_pipeline() {
    let workers = toy_workers(5);
    let mut cfg = builtin_profile("glm").unwrap();
    cfg.max_output = 32;
    cfg.delta = 8;
    let (outcome, ledger) =
        run_request("cross-family profile", TaskCategory::OpenEnded, &workers, &cfg).unwrap();
    assert!(ledger.judge_passes <= 2);
    assert!(!outcome.answer.is_empty() || outcome.label == FulfilmentLabel::Lg);
}
