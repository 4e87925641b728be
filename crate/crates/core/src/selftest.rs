//! Built-in verification suites.
//!
//! Two suites back the `selftest` subcommand and the acceptance tests:
//!
//! - the packed-verification oracle: across randomized layouts and toy-model
//!   seeds, judgment-position logits from one packed pass must equal the
//!   logits from independent per-prefix passes within 1e-5 (with an optional
//!   injected mask bug as a negative control);
//! - the policy branch suite: scripted-judge fixtures drive every labeled
//!   decision branch and assert the exact label, adopted length, and ledger
//!   call counts.
//!
//! A calibration sweep over random logit pairs rounds things out.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::backends::refdecoder::RefDecoderBackend;
use crate::backends::scripted::{CallKind, ScriptSpec, ScriptedWorkers};
use crate::backends::templates::{PromptTemplate, TaskCategory};
use crate::backends::{Backend, Role};
use crate::engine::{run_request, CostLedger, WorkerSet};
use crate::judge::{two_way_confidence, JudgeLogits};
use crate::policy::{FulfilmentLabel, Outcome, PolicyConfig};
use crate::prefix_verify::{build_packed, place_boundaries, TokenId};
use crate::profiles::builtin_profile;
use crate::refdecoder::ToyModelSpec;

pub const DEFAULT_SELFTEST_SEED: u64 = 0x5eed_cafe;
pub const DEFAULT_SELFTEST_CASES: usize = 100;

/// Tolerance for packed-vs-sequential logit agreement.
pub const ORACLE_LOGIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub cases: usize,
    pub seed: u64,
    /// Negative control: perturb the packed mask and expect the oracle to
    /// catch it.
    pub inject_mask_bug: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            cases: DEFAULT_SELFTEST_CASES,
            seed: DEFAULT_SELFTEST_SEED,
            inject_mask_bug: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl PropertyResult {
    fn new(name: &str, failures: Vec<String>, success_detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: failures.is_empty(),
            detail: if failures.is_empty() {
                success_detail
            } else {
                failures.join("; ")
            },
        }
    }
}

/// Randomized packed-verification oracle. Returns two properties: logit
/// equivalence and the packed-cost/ledger shape.
pub fn packed_oracle_sweep(opts: &SelftestOptions) -> Vec<PropertyResult> {
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let template = PromptTemplate::partial_verify(TaskCategory::Math);

    let mut logit_failures = Vec::new();
    let mut cost_failures = Vec::new();
    let mut worst_diff = 0.0f64;
    let mut multi_chunk_cases = 0usize;

    for case in 0..opts.cases {
        let dim = *[8usize, 16].get(rng.gen_range(0..2)).unwrap();
        let heads = *[1usize, 2].get(rng.gen_range(0..2)).unwrap();
        let vocab = rng.gen_range(16..=64usize);
        let spec = ToyModelSpec {
            vocab_size: vocab,
            dim,
            layers: rng.gen_range(1..=2),
            heads,
            seed: rng.gen(),
            correct_token_id: rng.gen_range(0..vocab as u32 / 2),
            incorrect_token_id: rng.gen_range(vocab as u32 / 2..vocab as u32),
        };
        let suffix_len = rng.gen_range(1..=8usize);
        let suffix: Vec<TokenId> = (0..suffix_len)
            .map(|_| rng.gen_range(0..vocab as u32))
            .collect();
        let backend = match RefDecoderBackend::new(spec, Role::Judge, suffix) {
            Ok(b) => b,
            Err(e) => {
                logit_failures.push(format!("case {case}: backend construction failed: {e}"));
                continue;
            }
        };
        backend.inject_mask_bug(opts.inject_mask_bug);

        let t = rng.gen_range(1..=64usize);
        let delta = rng.gen_range(1..=16usize);
        let draft: Vec<TokenId> = (0..t).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let question = format!("case {case} question {}", rng.gen_range(0..1000u32));

        let bounds = place_boundaries(t, delta).expect("t >= 1");
        let k = bounds.chunk_count();
        if k > 1 {
            multi_chunk_cases += 1;
        }
        let packed = build_packed(&draft, &bounds, &backend.suffix_tokens()).expect("layout");
        if packed.len() != t + k * backend.suffix_tokens().len() {
            cost_failures.push(format!(
                "case {case}: packed length {} != T + K*S = {}",
                packed.len(),
                t + k * backend.suffix_tokens().len()
            ));
        }

        let fast = match backend.judge_packed(&question, &packed, &template) {
            Ok(r) => r,
            Err(e) => {
                logit_failures.push(format!("case {case}: packed pass failed: {e}"));
                continue;
            }
        };
        backend.inject_mask_bug(false); // the sequential reference is never perturbed
        let slow = match backend.sequential_fallback(&question, &draft, &bounds, &template) {
            Ok(r) => r,
            Err(e) => {
                logit_failures.push(format!("case {case}: sequential pass failed: {e}"));
                continue;
            }
        };
        backend.inject_mask_bug(opts.inject_mask_bug);

        if fast.passes != 1 || !fast.packed {
            cost_failures.push(format!("case {case}: packed route recorded {} passes", fast.passes));
        }
        if slow.passes != k || slow.packed {
            cost_failures.push(format!(
                "case {case}: sequential route recorded {} passes, expected {k}",
                slow.passes
            ));
        }

        for (i, (a, b)) in fast.logits.iter().zip(&slow.logits).enumerate() {
            let diff = (a.logit_correct() - b.logit_correct())
                .abs()
                .max((a.logit_incorrect() - b.logit_incorrect()).abs());
            if diff > worst_diff {
                worst_diff = diff;
            }
            if diff > ORACLE_LOGIT_TOLERANCE {
                logit_failures.push(format!(
                    "case {case} boundary {i} (T={t}, delta={delta}, K={k}): |diff| = {diff:.3e}"
                ));
            }
        }
    }

    // Keep failure details readable.
    logit_failures.truncate(5);
    cost_failures.truncate(5);

    vec![
        PropertyResult::new(
            "packed logits equal sequential within 1e-5",
            logit_failures,
            format!(
                "{} cases ({} multi-chunk), worst |diff| {:.3e}",
                opts.cases, multi_chunk_cases, worst_diff
            ),
        ),
        PropertyResult::new(
            "packed length T + K*S; 1 packed pass vs K sequential",
            cost_failures,
            format!("{} layouts checked", opts.cases),
        ),
    ]
}

/// Confidence pair for a scripted judge response.
fn conf_pair(p: f64) -> (f64, f64) {
    let l = JudgeLogits::from_confidence(p).expect("p in [0,1]");
    (l.logit_correct(), l.logit_incorrect())
}

fn qwen_with(max_output: usize) -> PolicyConfig {
    let mut cfg = builtin_profile("qwen").expect("builtin profile");
    cfg.max_output = max_output;
    cfg
}

struct Branch {
    name: &'static str,
    cfg: PolicyConfig,
    script: ScriptSpec,
    expect: Expect,
}

struct Expect {
    label: FulfilmentLabel,
    adopted_len: usize,
    answer: Option<Vec<TokenId>>,
    judge_passes: usize,
    packed_passes: usize,
    target_decode: usize,
    draft_decode: usize,
    trace: Vec<CallKind>,
}

fn run_branch(branch: &Branch) -> PropertyResult {
    let question = format!("branch {}", branch.name);
    let workers = ScriptedWorkers::new();
    workers.add_script(&question, branch.script.clone());
    let set = WorkerSet {
        draft: workers.backend(Role::Draft),
        target: workers.backend(Role::Target),
        judge: workers.backend(Role::Judge),
    };

    let mut failures = Vec::new();
    match run_request(&question, TaskCategory::Math, &set, &branch.cfg) {
        Ok((outcome, ledger)) => {
            check_outcome(&mut failures, &outcome, &ledger, &branch.expect);
            let trace = workers.trace(&question);
            if trace != branch.expect.trace {
                failures.push(format!(
                    "call order {:?}, expected {:?}",
                    trace, branch.expect.trace
                ));
            }
        }
        Err(e) => failures.push(format!("pipeline failed: {e}")),
    }
    PropertyResult::new(
        &format!("branch: {}", branch.name),
        failures,
        "label, adopted length, ledger, and call order all match".into(),
    )
}

fn check_outcome(
    failures: &mut Vec<String>,
    outcome: &Outcome,
    ledger: &CostLedger,
    expect: &Expect,
) {
    if outcome.label != expect.label {
        failures.push(format!("label {:?}, expected {:?}", outcome.label, expect.label));
    }
    if outcome.adopted_len != expect.adopted_len {
        failures.push(format!(
            "adopted_len {}, expected {}",
            outcome.adopted_len, expect.adopted_len
        ));
    }
    if let Some(answer) = &expect.answer {
        if &outcome.answer != answer {
            failures.push(format!(
                "answer mismatch: got {} tokens, expected {}",
                outcome.answer.len(),
                answer.len()
            ));
        }
    }
    if ledger.judge_passes != expect.judge_passes {
        failures.push(format!(
            "judge_passes {}, expected {}",
            ledger.judge_passes, expect.judge_passes
        ));
    }
    if ledger.packed_passes != expect.packed_passes {
        failures.push(format!(
            "packed_passes {}, expected {}",
            ledger.packed_passes, expect.packed_passes
        ));
    }
    if ledger.target_decode_tokens != expect.target_decode {
        failures.push(format!(
            "target_decode_tokens {}, expected {}",
            ledger.target_decode_tokens, expect.target_decode
        ));
    }
    if ledger.draft_decode_tokens != expect.draft_decode {
        failures.push(format!(
            "draft_decode_tokens {}, expected {}",
            ledger.draft_decode_tokens, expect.draft_decode
        ));
    }
}

/// Scripted fixtures for every decision branch: strict accept, short-draft
/// fast-accept, relaxed accept, continue, restart, premature abort (both
/// trigger rules), premature continue, and the early-stop and empty-draft
/// degenerate paths.
pub fn policy_branch_suite() -> Vec<PropertyResult> {
    let mut results = Vec::new();
    let draft160: Vec<TokenId> = (0..160).collect();
    let draft400: Vec<TokenId> = (0..400).collect();
    let target50: Vec<TokenId> = (5000..5050).collect();
    // Continuation scripting rides the target stream: an adopted prefix of
    // length L makes continue_from read target[L..].
    let target90: Vec<TokenId> = (7000..7090).collect();
    let target130: Vec<TokenId> = (7000..7130).collect();
    let target310: Vec<TokenId> = (7000..7310).collect();

    // Premature PV is disabled below by max_output <= t_premature (300).
    results.push(run_branch(&Branch {
        name: "strict accept ships the draft",
        cfg: qwen_with(200),
        script: ScriptSpec {
            draft: draft160.clone(),
            full_judge: vec![conf_pair(0.999)],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Sm,
            adopted_len: 160,
            answer: Some(draft160.clone()),
            judge_passes: 1,
            packed_passes: 0,
            target_decode: 0,
            draft_decode: 160,
            trace: vec![CallKind::Generate, CallKind::JudgeFull],
        },
    }));

    results.push(run_branch(&Branch {
        name: "short-draft fast-accept skips partial verify",
        cfg: qwen_with(200),
        script: ScriptSpec {
            draft: (0..60).collect(),
            full_judge: vec![conf_pair(0.96)],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Sm,
            adopted_len: 60,
            answer: None,
            judge_passes: 1,
            packed_passes: 0,
            target_decode: 0,
            draft_decode: 60,
            trace: vec![CallKind::Generate, CallKind::JudgeFull],
        },
    }));

    results.push(run_branch(&Branch {
        name: "relaxed accept overrides the strict miss",
        cfg: qwen_with(200),
        script: ScriptSpec {
            draft: (0..120).collect(),
            full_judge: vec![conf_pair(0.96)],
            packed_judge: vec![vec![conf_pair(0.95), conf_pair(0.93), conf_pair(0.92)]],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Sm,
            adopted_len: 120,
            answer: None,
            judge_passes: 2,
            packed_passes: 1,
            target_decode: 0,
            draft_decode: 120,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgeFull,
                CallKind::JudgePacked,
            ],
        },
    }));

    // Continue: verdicts [C, C, I, I] -> k* = 1 -> adopt 2 chunks = 80 tokens;
    // the target stream supplies 10 continuation tokens past the prefix.
    let mut continue_answer = draft160[..80].to_vec();
    continue_answer.extend_from_slice(&target90[80..]);
    results.push(run_branch(&Branch {
        name: "continue from the adopted prefix",
        cfg: qwen_with(200),
        script: ScriptSpec {
            draft: draft160.clone(),
            target: target90.clone(),
            full_judge: vec![conf_pair(0.50)],
            packed_judge: vec![vec![
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.01),
                conf_pair(0.01),
            ]],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::SmLg,
            adopted_len: 80,
            answer: Some(continue_answer),
            judge_passes: 2,
            packed_passes: 1,
            target_decode: 10,
            draft_decode: 160,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgeFull,
                CallKind::JudgePacked,
                CallKind::ContinueFrom,
            ],
        },
    }));

    results.push(run_branch(&Branch {
        name: "restart when nothing is adoptable",
        cfg: qwen_with(200),
        script: ScriptSpec {
            draft: (0..120).collect(),
            target: target50.clone(),
            full_judge: vec![conf_pair(0.10)],
            packed_judge: vec![vec![conf_pair(0.01), conf_pair(0.01), conf_pair(0.01)]],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Lg,
            adopted_len: 0,
            answer: Some(target50.clone()),
            judge_passes: 2,
            packed_passes: 1,
            target_decode: 50,
            draft_decode: 120,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgeFull,
                CallKind::JudgePacked,
                CallKind::Generate,
            ],
        },
    }));

    // Premature abort via the Incorrect-fraction rule: 8 premature chunks,
    // 3 Incorrect (0.375 > rho_p 0.20), leading run CCC -> adopt 120 tokens.
    let mut abort_answer = draft400[..120].to_vec();
    abort_answer.extend_from_slice(&target130[120..]);
    results.push(run_branch(&Branch {
        name: "premature abort on incorrect fraction",
        cfg: qwen_with(400),
        script: ScriptSpec {
            draft: draft400.clone(),
            target: target130.clone(),
            packed_judge: vec![vec![
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.01),
                conf_pair(0.99),
                conf_pair(0.01),
                conf_pair(0.99),
                conf_pair(0.01),
            ]],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::SmLg,
            adopted_len: 120,
            answer: Some(abort_answer),
            judge_passes: 1,
            packed_passes: 1,
            target_decode: 10,
            draft_decode: 300,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgePacked,
                CallKind::ContinueFrom,
            ],
        },
    }));

    // Premature abort via the low-confidence count: every chunk verdict stays
    // Correct under a loose tau_partial, but three confidences sit below the
    // relaxed chunk bar.
    let mut low_conf_cfg = qwen_with(400);
    low_conf_cfg.tau_partial = 0.50;
    results.push(run_branch(&Branch {
        name: "premature abort on low-confidence chunk count",
        cfg: low_conf_cfg,
        script: ScriptSpec {
            draft: draft400.clone(),
            target: target310.clone(),
            packed_judge: vec![vec![
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.99),
                conf_pair(0.85),
                conf_pair(0.86),
                conf_pair(0.87),
            ]],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::SmLg,
            // All 8 chunks are Correct: k* = 7, adopt min(300, 320) = 300.
            adopted_len: 300,
            answer: None,
            judge_passes: 1,
            packed_passes: 1,
            target_decode: 10,
            draft_decode: 300,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgePacked,
                CallKind::ContinueFrom,
            ],
        },
    }));

    // Premature continue: clean prefix, drafting resumes, then strict accept.
    results.push(run_branch(&Branch {
        name: "premature continue then strict accept",
        cfg: qwen_with(400),
        script: ScriptSpec {
            draft: draft400.clone(),
            packed_judge: vec![vec![conf_pair(0.999); 8]],
            full_judge: vec![conf_pair(0.999)],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Sm,
            adopted_len: 400,
            answer: Some(draft400.clone()),
            judge_passes: 2,
            packed_passes: 1,
            target_decode: 0,
            draft_decode: 400,
            trace: vec![
                CallKind::Generate,
                CallKind::JudgePacked,
                CallKind::ContinueFrom,
                CallKind::JudgeFull,
            ],
        },
    }));

    // Draft finishes inside the premature window: no premature pass at all.
    results.push(run_branch(&Branch {
        name: "early-stopping draft skips the premature pass",
        cfg: qwen_with(400),
        script: ScriptSpec {
            draft: (0..100).collect(),
            full_judge: vec![conf_pair(0.999)],
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Sm,
            adopted_len: 100,
            answer: None,
            judge_passes: 1,
            packed_passes: 0,
            target_decode: 0,
            draft_decode: 100,
            trace: vec![CallKind::Generate, CallKind::JudgeFull],
        },
    }));

    results.push(run_branch(&Branch {
        name: "empty draft restarts without judging",
        cfg: qwen_with(200),
        script: ScriptSpec {
            target: target50.clone(),
            ..ScriptSpec::default()
        },
        expect: Expect {
            label: FulfilmentLabel::Lg,
            adopted_len: 0,
            answer: Some(target50),
            judge_passes: 0,
            packed_passes: 0,
            target_decode: 50,
            draft_decode: 0,
            trace: vec![CallKind::Generate, CallKind::Generate],
        },
    }));

    results
}

/// Calibration properties over random logit pairs: complement-to-one, shift
/// invariance, monotonicity, and the conservative tie.
pub fn calibration_sweep(pairs: usize, seed: u64) -> Vec<PropertyResult> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut complement = Vec::new();
    let mut shift = Vec::new();
    let mut monotone = Vec::new();

    for i in 0..pairs {
        let lc = rng.gen_range(-50.0..50.0);
        let li = rng.gen_range(-50.0..50.0);
        let c = rng.gen_range(-200.0..200.0);
        let d = rng.gen_range(0.0..10.0);
        let a = two_way_confidence(JudgeLogits::new(lc, li).unwrap());
        let b = two_way_confidence(JudgeLogits::new(li, lc).unwrap());
        if (a + b - 1.0).abs() > 1e-12 {
            complement.push(format!("pair {i}: {lc},{li} sum error {:.2e}", (a + b - 1.0).abs()));
        }
        let shifted = two_way_confidence(JudgeLogits::new(lc + c, li + c).unwrap());
        if (a - shifted).abs() > 1e-12 {
            shift.push(format!("pair {i}: shift by {c} moved conf by {:.2e}", (a - shifted).abs()));
        }
        let bumped = two_way_confidence(JudgeLogits::new(lc + d, li).unwrap());
        if bumped < a - 1e-15 {
            monotone.push(format!("pair {i}: conf decreased when logit_correct rose"));
        }
    }
    complement.truncate(3);
    shift.truncate(3);
    monotone.truncate(3);

    let tie_failures = {
        let mut f = Vec::new();
        for tau in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let v = crate::judge::thresholded_verdict(JudgeLogits::new(3.3, 3.3).unwrap(), tau)
                .unwrap();
            if v.is_accepted() || v.raw.is_correct() {
                f.push(format!("tie accepted at tau={tau}"));
            }
        }
        f
    };

    vec![
        PropertyResult::new(
            "confidence complement-to-one within 1e-12",
            complement,
            format!("{pairs} pairs"),
        ),
        PropertyResult::new(
            "confidence shift invariance within 1e-12",
            shift,
            format!("{pairs} pairs"),
        ),
        PropertyResult::new(
            "confidence monotone in logit_correct",
            monotone,
            format!("{pairs} pairs"),
        ),
        PropertyResult::new(
            "tie logits break to Incorrect at any threshold",
            tie_failures,
            "5 thresholds".into(),
        ),
    ]
}

/// The full suite, in print order.
pub fn run_selftest(opts: &SelftestOptions) -> Vec<PropertyResult> {
    let mut results = packed_oracle_sweep(opts);
    results.extend(policy_branch_suite());
    results.extend(calibration_sweep(10_000, opts.seed ^ 0x9e3779b9));
    results
}
