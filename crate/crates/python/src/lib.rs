//! Python bindings for the engine's main types and operations: confidence
//! calibration, packed-mask layout, the adopted-prefix rule, the cost model,
//! shipped profiles, the seeded reference decoder, and scripted fixture runs.

// The pyfunction macro expands `?` into a PyErr -> PyErr conversion.
#![allow(clippy::useless_conversion)]

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use parse_core::backends::scripted::ScriptedWorkers;
use parse_core::backends::Role;
use parse_core::dataset::load_dataset;
use parse_core::engine::{
    aggregate, estimate_speedup as core_estimate_speedup, run_batch, CostLedger, EngineConfig,
    RunMode, WorkerSet,
};
use parse_core::judge::{
    thresholded_verdict as core_thresholded_verdict, two_way_confidence as core_two_way,
    JudgeLogits, Judgment,
};
use parse_core::policy::{
    adopted_prefix_len as core_adopted_prefix_len,
    short_draft_threshold as core_short_draft_threshold, PolicyConfig,
};
use parse_core::prefix_verify::{build_packed, place_boundaries as core_place_boundaries};
use parse_core::profiles::builtin_profile;
use parse_core::refdecoder::{ToyModel, ToyModelSpec};
use parse_core::selftest::{packed_oracle_sweep, SelftestOptions};

/// Half-open (start, end) index pair.
type Span = (usize, usize);

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn judgment_str(j: Judgment) -> &'static str {
    match j {
        Judgment::Correct => "Correct",
        Judgment::Incorrect => "Incorrect",
    }
}

/// Calibrated verdict: raw argmax, two-way confidence, and the final
/// decision after the threshold downgrade.
#[pyclass(name = "Verdict")]
struct PyVerdict {
    #[pyo3(get)]
    raw: String,
    #[pyo3(get)]
    confidence: f64,
    #[pyo3(get, name = "final")]
    decision: String,
    #[pyo3(get)]
    threshold: f64,
}

#[pymethods]
impl PyVerdict {
    fn __repr__(&self) -> String {
        format!(
            "Verdict(raw={:?}, confidence={:.6}, final={:?}, threshold={})",
            self.raw, self.confidence, self.decision, self.threshold
        )
    }
}

#[pyfunction]
fn two_way_confidence(logit_correct: f64, logit_incorrect: f64) -> PyResult<f64> {
    let logits = JudgeLogits::new(logit_correct, logit_incorrect).map_err(value_err)?;
    Ok(core_two_way(logits))
}

#[pyfunction]
fn thresholded_verdict(logit_correct: f64, logit_incorrect: f64, tau: f64) -> PyResult<PyVerdict> {
    let logits = JudgeLogits::new(logit_correct, logit_incorrect).map_err(value_err)?;
    let v = core_thresholded_verdict(logits, tau).map_err(value_err)?;
    Ok(PyVerdict {
        raw: judgment_str(v.raw).to_string(),
        confidence: v.confidence,
        decision: judgment_str(v.decision).to_string(),
        threshold: v.threshold,
    })
}

#[pyfunction]
fn place_boundaries(draft_len: usize, delta: usize) -> PyResult<Vec<usize>> {
    Ok(core_place_boundaries(draft_len, delta)
        .map_err(value_err)?
        .boundaries)
}

#[pyfunction]
fn adopted_prefix_len(k_star: i64, delta: usize, eta: f64, draft_len: usize) -> usize {
    core_adopted_prefix_len(k_star, delta, eta, draft_len)
}

#[pyfunction]
fn short_draft_threshold(chunks: usize, tau_short_draft: f64, tau_full_relaxed: f64) -> f64 {
    core_short_draft_threshold(chunks, tau_short_draft, tau_full_relaxed)
}

/// Cost-model speedup for one request's token counts.
#[pyfunction]
#[pyo3(signature = (draft_decode_tokens, target_decode_tokens, judge_prefill_tokens,
                    speed_ratio, final_len, prefill_cost_factor = 0.01))]
fn estimate_speedup(
    draft_decode_tokens: usize,
    target_decode_tokens: usize,
    judge_prefill_tokens: usize,
    speed_ratio: f64,
    final_len: usize,
    prefill_cost_factor: f64,
) -> PyResult<f64> {
    if speed_ratio <= 0.0 || !speed_ratio.is_finite() {
        return Err(value_err("speed_ratio must be positive and finite"));
    }
    let ledger = CostLedger {
        draft_decode_tokens,
        target_decode_tokens,
        judge_prefill_tokens,
        ..CostLedger::default()
    };
    Ok(core_estimate_speedup(&ledger, speed_ratio, final_len, prefill_cost_factor).speedup)
}

fn config_dict<'py>(py: Python<'py>, cfg: &PolicyConfig) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("delta", cfg.delta)?;
    d.set_item("tau_full", cfg.tau_full)?;
    d.set_item("tau_full_relaxed", cfg.tau_full_relaxed)?;
    d.set_item("tau_chunk_relaxed", cfg.tau_chunk_relaxed)?;
    d.set_item("tau_partial", cfg.tau_partial)?;
    d.set_item("rho", cfg.rho)?;
    d.set_item("kappa", cfg.kappa)?;
    d.set_item("eta", cfg.eta)?;
    d.set_item("k_short_draft", cfg.k_short_draft)?;
    d.set_item("tau_short_draft", cfg.tau_short_draft)?;
    d.set_item("t_premature", cfg.t_premature)?;
    d.set_item("rho_premature", cfg.rho_premature)?;
    d.set_item("max_output", cfg.max_output)?;
    d.set_item("target_kv_budget", cfg.target_kv_budget)?;
    d.set_item("draft_kv_budget", cfg.draft_kv_budget)?;
    Ok(d)
}

/// Shipped profile ("qwen" or "glm") as a dict of hyperparameters.
#[pyfunction]
fn profile(py: Python<'_>, name: &str) -> PyResult<Py<PyDict>> {
    let cfg = builtin_profile(name).map_err(value_err)?;
    Ok(config_dict(py, &cfg)?.into())
}

/// Packed prefix-verification layout: draft tokens followed by one
/// chat-template suffix copy per chunk boundary, plus the block mask.
#[pyclass(name = "PackedLayout")]
struct PyPackedLayout {
    packed: parse_core::prefix_verify::PackedVerification,
}

#[pymethods]
impl PyPackedLayout {
    #[new]
    fn new(draft_len: usize, delta: usize, suffix_len: usize) -> PyResult<Self> {
        if suffix_len == 0 {
            return Err(value_err("suffix_len must be at least 1"));
        }
        let bounds = core_place_boundaries(draft_len, delta).map_err(value_err)?;
        let draft: Vec<u32> = (0..draft_len as u32).collect();
        let suffix: Vec<u32> = (draft_len as u32..(draft_len + suffix_len) as u32).collect();
        let packed = build_packed(&draft, &bounds, &suffix).map_err(value_err)?;
        Ok(Self { packed })
    }

    #[getter]
    fn length(&self) -> usize {
        self.packed.len()
    }

    #[getter]
    fn boundaries(&self) -> Vec<usize> {
        self.packed.boundary_set.boundaries.clone()
    }

    #[getter]
    fn judgment_positions(&self) -> Vec<usize> {
        self.packed.judgment_positions.clone()
    }

    #[getter]
    fn positions(&self) -> Vec<usize> {
        self.packed.positions.clone()
    }

    fn mask_visible(&self, q: usize, k: usize) -> PyResult<bool> {
        let n = self.packed.len();
        if q >= n || k >= n {
            return Err(value_err(format!("index out of range for length {n}")));
        }
        Ok(self.packed.mask_visible(q, k))
    }

    fn dense_mask(&self) -> Vec<Vec<bool>> {
        self.packed.dense_mask()
    }

    /// Block descriptors as (query_span, prefix_key_ranges) tuples of
    /// half-open (start, end) pairs.
    fn block_descriptors(&self) -> Vec<(Span, Vec<Span>)> {
        self.packed
            .block_descriptors()
            .into_iter()
            .map(|d| {
                (
                    (d.query_span.start, d.query_span.end),
                    d.prefix_keys.iter().map(|r| (r.start, r.end)).collect(),
                )
            })
            .collect()
    }

    fn debug_dump(&self) -> String {
        self.packed.debug_dump()
    }

    fn __repr__(&self) -> String {
        format!(
            "PackedLayout(draft_len={}, delta={}, suffix_len={}, length={})",
            self.packed.boundary_set.draft_len,
            self.packed.boundary_set.delta,
            self.packed.suffix_len(),
            self.packed.len()
        )
    }
}

/// The seeded toy causal transformer.
#[pyclass(name = "RefDecoder")]
struct PyRefDecoder {
    model: ToyModel,
}

#[pymethods]
impl PyRefDecoder {
    #[new]
    #[pyo3(signature = (vocab_size = 64, dim = 32, layers = 2, heads = 2, seed = 42,
                        correct_token_id = 11, incorrect_token_id = 12))]
    fn new(
        vocab_size: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        seed: u64,
        correct_token_id: u32,
        incorrect_token_id: u32,
    ) -> PyResult<Self> {
        let spec = ToyModelSpec {
            vocab_size,
            dim,
            layers,
            heads,
            seed,
            correct_token_id,
            incorrect_token_id,
        };
        Ok(Self {
            model: ToyModel::new(spec).map_err(value_err)?,
        })
    }

    fn greedy_decode(&self, prompt: Vec<u32>, max_new: usize) -> PyResult<Vec<u32>> {
        let vocab = self.model.spec().vocab_size as u32;
        if prompt.iter().any(|&t| t >= vocab) {
            return Err(value_err(format!("token id >= vocab_size {vocab}")));
        }
        Ok(self.model.greedy_decode(&prompt, max_new))
    }

    /// Logit rows for the whole sequence under the plain causal mask.
    fn forward_causal(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<f64>>> {
        let vocab = self.model.spec().vocab_size as u32;
        if tokens.is_empty() {
            return Err(value_err("tokens must be non-empty"));
        }
        if tokens.iter().any(|&t| t >= vocab) {
            return Err(value_err(format!("token id >= vocab_size {vocab}")));
        }
        Ok(self.model.forward_causal(&tokens))
    }
}

/// Randomized packed-vs-sequential oracle; returns (passed, detail).
#[pyfunction]
#[pyo3(signature = (cases = 25, seed = 0x5eed_cafe))]
fn oracle_sweep(cases: usize, seed: u64) -> (bool, String) {
    let results = packed_oracle_sweep(&SelftestOptions {
        cases,
        seed,
        inject_mask_bug: false,
    });
    let passed = results.iter().all(|r| r.passed);
    let detail = results
        .iter()
        .map(|r| format!("{}: {}", r.name, r.detail))
        .collect::<Vec<_>>()
        .join(" | ");
    (passed, detail)
}

/// Runs a scripted fixture file end to end and returns the per-request
/// records plus the aggregate report as a JSON string.
#[pyfunction]
#[pyo3(signature = (dataset_path, profile_name = "qwen", mode = "parse"))]
fn run_fixture(dataset_path: &str, profile_name: &str, mode: &str) -> PyResult<String> {
    let mode = match mode {
        "parse" => RunMode::Parse,
        "specreason" => RunMode::Specreason,
        "target-only" => RunMode::TargetOnly,
        "draft-only" => RunMode::DraftOnly,
        other => return Err(value_err(format!("unknown mode {other:?}"))),
    };
    let cfg = builtin_profile(profile_name).map_err(value_err)?;
    let records = load_dataset(std::path::Path::new(dataset_path)).map_err(value_err)?;
    if records.is_empty() {
        return Err(value_err("dataset has no records"));
    }
    let workers = ScriptedWorkers::new();
    for record in &records {
        let script = record
            .script
            .clone()
            .ok_or_else(|| value_err(format!("record {:?} has no script", record.id)))?;
        workers.add_script(&record.question, script);
    }
    let set = WorkerSet {
        draft: workers.backend(Role::Draft),
        target: workers.backend(Role::Target),
        judge: workers.backend(Role::Judge),
    };
    let results = run_batch(&records, &set, &cfg, &EngineConfig::default(), mode);
    let report = aggregate(&results).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    serde_json::to_string_pretty(&serde_json::json!({
        "requests": results,
        "aggregate": report,
    }))
    .map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn parse_engine(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(two_way_confidence, m)?)?;
    m.add_function(wrap_pyfunction!(thresholded_verdict, m)?)?;
    m.add_function(wrap_pyfunction!(place_boundaries, m)?)?;
    m.add_function(wrap_pyfunction!(adopted_prefix_len, m)?)?;
    m.add_function(wrap_pyfunction!(short_draft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(profile, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(run_fixture, m)?)?;
    m.add_class::<PyVerdict>()?;
    m.add_class::<PyPackedLayout>()?;
    m.add_class::<PyRefDecoder>()?;
    Ok(())
}
