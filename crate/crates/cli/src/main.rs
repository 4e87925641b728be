//! Command-line harness: run datasets through the engine, inspect packed
//! attention masks, run the built-in verification suites, and re-render
//! saved record files.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use parse_core::backends::http::{HttpBackend, HttpBackendConfig};
use parse_core::backends::refdecoder::RefDecoderBackend;
use parse_core::backends::scripted::ScriptedWorkers;
use parse_core::backends::Role;
use parse_core::dataset::{load_dataset, DatasetRecord};
use parse_core::engine::{
    aggregate, render_table, run_batch, EngineConfig, RequestRecord, RunMode, WorkerSet,
    DEFAULT_PREFILL_COST_FACTOR,
};
use parse_core::policy::PolicyConfig;
use parse_core::prefix_verify::{build_packed, place_boundaries, TokenId};
use parse_core::profiles::{builtin_profile, load_profile, to_toml};
use parse_core::refdecoder::ToyModelSpec;
use parse_core::selftest::{run_selftest, SelftestOptions, DEFAULT_SELFTEST_CASES};

/// Seed override honored by every subcommand (flags still win).
const SEED_ENV: &str = "PARSE_SEED";
const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "parse", version, about = "Semantic-level speculative generation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a dataset through the selected mode and emit records + a report.
    Run(Box<RunArgs>),
    /// Render the packed-verification attention mask for a given layout.
    InspectMask(InspectMaskArgs),
    /// Run the packed-verification oracle and the policy branch suite.
    Selftest(SelftestArgs),
    /// Re-render a saved record file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Parse,
    Specreason,
    TargetOnly,
    DraftOnly,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Parse => RunMode::Parse,
            ModeArg::Specreason => RunMode::Specreason,
            ModeArg::TargetOnly => RunMode::TargetOnly,
            ModeArg::DraftOnly => RunMode::DraftOnly,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Scripted,
    Refdecoder,
    Http,
}

/// Per-knob overrides mirroring the runtime hyperparameter table; flag wins
/// over the config-file value.
#[derive(Args, Clone)]
struct PolicyOverrides {
    /// Chunk size for partial verify, in tokens.
    #[arg(long = "parse-chunk-step-tokens")]
    chunk_step_tokens: Option<usize>,
    /// Strict full-verify confidence threshold.
    #[arg(long = "parse-full-confidence-threshold")]
    full_confidence_threshold: Option<f64>,
    /// Relaxed full-verify threshold.
    #[arg(long = "parse-relaxed-full-threshold")]
    relaxed_full_threshold: Option<f64>,
    /// Relaxed per-chunk threshold.
    #[arg(long = "parse-relaxed-chunk-threshold")]
    relaxed_chunk_threshold: Option<f64>,
    /// Strict per-chunk threshold.
    #[arg(long = "parse-partial-confidence-threshold")]
    partial_confidence_threshold: Option<f64>,
    /// Fraction of Incorrect chunks that rejects the draft.
    #[arg(long = "parse-partial-threshold-proportion")]
    partial_threshold_proportion: Option<f64>,
    /// Trailing Incorrect run length that rejects the draft.
    #[arg(long = "parse-partial-consecutive-threshold")]
    partial_consecutive_threshold: Option<usize>,
    /// Rollback margin in chunks when adopting a prefix.
    #[arg(long = "parse-keep-n-correct-chunks")]
    keep_n_correct_chunks: Option<f64>,
    /// Short-draft fast-accept ceiling, in chunks.
    #[arg(long = "parse-short-draft-max-chunks")]
    short_draft_max_chunks: Option<usize>,
    /// Short-draft base confidence threshold.
    #[arg(long = "parse-short-draft-confidence")]
    short_draft_confidence: Option<f64>,
    /// Premature partial-verify trigger, in drafted tokens (0 disables).
    #[arg(long = "parse-premature-partial-verify")]
    premature_partial_verify: Option<usize>,
    /// Incorrect-fraction threshold for the premature pass.
    #[arg(long = "parse-premature-threshold-proportion")]
    premature_threshold_proportion: Option<f64>,
    /// Informational target-worker KV budget.
    #[arg(long = "parse-target-max-total-tokens")]
    target_max_total_tokens: Option<usize>,
    /// Informational draft-worker KV budget.
    #[arg(long = "parse-draft-max-total-tokens")]
    draft_max_total_tokens: Option<usize>,
    /// Per-request generation budget, in tokens.
    #[arg(long = "max-output-tokens")]
    max_output_tokens: Option<usize>,
}

impl PolicyOverrides {
    fn apply(&self, cfg: &mut PolicyConfig) {
        macro_rules! set {
            ($field:ident, $opt:expr) => {
                if let Some(v) = $opt {
                    cfg.$field = v;
                }
            };
        }
        set!(delta, self.chunk_step_tokens);
        set!(tau_full, self.full_confidence_threshold);
        set!(tau_full_relaxed, self.relaxed_full_threshold);
        set!(tau_chunk_relaxed, self.relaxed_chunk_threshold);
        set!(tau_partial, self.partial_confidence_threshold);
        set!(rho, self.partial_threshold_proportion);
        set!(kappa, self.partial_consecutive_threshold);
        set!(eta, self.keep_n_correct_chunks);
        set!(k_short_draft, self.short_draft_max_chunks);
        set!(tau_short_draft, self.short_draft_confidence);
        set!(t_premature, self.premature_partial_verify);
        set!(rho_premature, self.premature_threshold_proportion);
        set!(target_kv_budget, self.target_max_total_tokens);
        set!(draft_kv_budget, self.draft_max_total_tokens);
        set!(max_output, self.max_output_tokens);
    }
}

#[derive(Args)]
struct RunArgs {
    /// Dataset file (JSONL, one record per line).
    #[arg(long)]
    dataset: PathBuf,
    /// Config file path; mutually exclusive with --profile.
    #[arg(long, conflicts_with = "profile")]
    config: Option<PathBuf>,
    /// Built-in profile name (qwen or glm).
    #[arg(long, default_value = "qwen")]
    profile: String,
    #[arg(long, value_enum, default_value = "parse")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendArg,
    /// Output directory for records.jsonl and report.txt.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
    /// Concurrent requests.
    #[arg(long, default_value_t = 1)]
    concurrency: usize,
    /// RNG seed (beats the PARSE_SEED env var).
    #[arg(long)]
    seed: Option<u64>,
    /// Cost-model factor applied per judge prefill token.
    #[arg(long, default_value_t = DEFAULT_PREFILL_COST_FACTOR)]
    prefill_cost_factor: f64,
    #[command(flatten)]
    overrides: PolicyOverrides,

    // HTTP backend wiring.
    /// Chat-completions endpoint for the target/judge workers.
    #[arg(long, default_value = "http://127.0.0.1:30000/v1/chat/completions")]
    endpoint: String,
    /// Chat-completions endpoint for the draft worker (defaults to --endpoint).
    #[arg(long)]
    draft_endpoint: Option<String>,
    /// Model name for the target/judge workers.
    #[arg(long, default_value = "default")]
    model: String,
    /// Model name for the draft worker (defaults to --model).
    #[arg(long)]
    draft_model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "PARSE_API_KEY")]
    api_key_env: String,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 2)]
    retries: u32,
}

#[derive(Args)]
struct InspectMaskArgs {
    /// Draft length T, in tokens.
    #[arg(long = "draft-len", short = 't')]
    draft_len: usize,
    /// Chunk step, in tokens.
    #[arg(long = "chunk-step", short = 'd')]
    chunk_step: usize,
    /// Chat-template suffix length S, in tokens.
    #[arg(long = "suffix-len", short = 's', default_value_t = 1)]
    suffix_len: usize,
}

#[derive(Args)]
struct SelftestArgs {
    /// Randomized oracle cases.
    #[arg(long, default_value_t = DEFAULT_SELFTEST_CASES)]
    cases: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Negative control: perturb the packed mask; the oracle must fail.
    #[arg(long, hide = true)]
    inject_mask_bug: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// A records.jsonl file produced by `run`.
    #[arg(long)]
    records: PathBuf,
}

fn env_seed() -> Option<u64> {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())
}

fn effective_seed(flag: Option<u64>) -> u64 {
    flag.or_else(env_seed).unwrap_or(DEFAULT_SEED)
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => cmd_run(*args),
        Command::InspectMask(args) => cmd_inspect_mask(args),
        Command::Selftest(args) => cmd_selftest(args),
        Command::Report(args) => cmd_report(args),
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn build_workers(args: &RunArgs, records: &[DatasetRecord], seed: u64) -> Result<WorkerSet> {
    match args.backend {
        BackendArg::Scripted => {
            let workers = ScriptedWorkers::new();
            let mut questions = std::collections::HashSet::new();
            for record in records {
                let script = record.script.clone().with_context(|| {
                    format!(
                        "record {:?} has no script; the scripted backend replays per-record scripts",
                        record.id
                    )
                })?;
                if !questions.insert(record.question.clone()) {
                    bail!(
                        "record {:?}: duplicate question text; scripted replays are keyed by question",
                        record.id
                    );
                }
                workers.add_script(&record.question, script);
            }
            Ok(WorkerSet {
                draft: workers.backend(Role::Draft),
                target: workers.backend(Role::Target),
                judge: workers.backend(Role::Judge),
            })
        }
        BackendArg::Refdecoder => {
            // Draft and target come from different seeds so they disagree;
            // the judge reuses the target weights, as in a real deployment.
            let draft_spec = ToyModelSpec {
                vocab_size: 64,
                dim: 32,
                layers: 2,
                heads: 2,
                seed: seed ^ 0xd4af7,
                correct_token_id: 11,
                incorrect_token_id: 12,
            };
            let target_spec = ToyModelSpec {
                seed: seed ^ 0x7a43e7,
                ..draft_spec
            };
            let suffix = vec![60u32, 61];
            Ok(WorkerSet {
                draft: Arc::new(RefDecoderBackend::new(
                    draft_spec,
                    Role::Draft,
                    suffix.clone(),
                )?),
                target: Arc::new(RefDecoderBackend::new(
                    target_spec,
                    Role::Target,
                    suffix.clone(),
                )?),
                judge: Arc::new(RefDecoderBackend::new(target_spec, Role::Judge, suffix)?),
            })
        }
        BackendArg::Http => {
            let base = HttpBackendConfig {
                endpoint: args.endpoint.clone(),
                model: args.model.clone(),
                api_key_env: Some(args.api_key_env.clone()),
                timeout_secs: args.timeout_secs,
                retries: args.retries,
                ..HttpBackendConfig::default()
            };
            let draft_cfg = HttpBackendConfig {
                endpoint: args
                    .draft_endpoint
                    .clone()
                    .unwrap_or_else(|| base.endpoint.clone()),
                model: args.draft_model.clone().unwrap_or_else(|| base.model.clone()),
                ..base.clone()
            };
            Ok(WorkerSet {
                draft: Arc::new(HttpBackend::new(draft_cfg, Role::Draft)?),
                target: Arc::new(HttpBackend::new(base.clone(), Role::Target)?),
                judge: Arc::new(HttpBackend::new(base, Role::Judge)?),
            })
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let seed = effective_seed(args.seed);
    let mut cfg = match &args.config {
        Some(path) => {
            load_profile(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => builtin_profile(&args.profile)?,
    };
    args.overrides.apply(&mut cfg);
    cfg.validate()?;

    let records = load_dataset(&args.dataset)?;
    if records.is_empty() {
        bail!("dataset {} has no records", args.dataset.display());
    }
    let workers = build_workers(&args, &records, seed)?;
    let engine_cfg = EngineConfig {
        prefill_cost_factor: args.prefill_cost_factor,
        concurrency: args.concurrency,
    };
    let mode: RunMode = args.mode.into();

    let started = std::time::Instant::now();
    let results = run_batch(&records, &workers, &cfg, &engine_cfg, mode);
    let wall_clock_ms = started.elapsed().as_millis() as u64;
    let report = aggregate(&results)?;
    let table = render_table(&results, &report);
    print!("{table}");

    if let Some(out_dir) = &args.out {
        std::fs::create_dir_all(out_dir)
            .with_context(|| format!("creating {}", out_dir.display()))?;
        write_records(out_dir, &results, &report, mode, seed, wall_clock_ms, &args, &cfg)?;
        std::fs::write(out_dir.join("report.txt"), &table)?;
        println!("wrote {}", out_dir.join("records.jsonl").display());
    }

    Ok(if report.failures == 0 { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn write_records(
    out_dir: &Path,
    results: &[RequestRecord],
    report: &parse_core::engine::AggregateReport,
    mode: RunMode,
    seed: u64,
    wall_clock_ms: u64,
    args: &RunArgs,
    cfg: &PolicyConfig,
) -> Result<()> {
    let path = out_dir.join("records.jsonl");
    let mut file = std::fs::File::create(&path)?;

    // The header carries the non-deterministic fields (timestamp, wall
    // clock, which acceptance never consumes); everything after it is
    // byte-stable for a fixed seed.
    let created_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(
        file,
        "{}",
        serde_json::json!({
            "record_type": "header",
            "schema_version": parse_core::engine::report::SCHEMA_VERSION,
            "created_unix": created_unix,
            "wall_clock_ms": wall_clock_ms,
        })
    )?;
    writeln!(
        file,
        "{}",
        serde_json::json!({
            "record_type": "config",
            "mode": mode,
            "backend": match args.backend {
                BackendArg::Scripted => "scripted",
                BackendArg::Refdecoder => "refdecoder",
                BackendArg::Http => "http",
            },
            "seed": seed,
            "concurrency": args.concurrency,
            "prefill_cost_factor": args.prefill_cost_factor,
            "policy_toml": to_toml(cfg),
        })
    )?;
    for r in results {
        let mut value = serde_json::to_value(r)?;
        value
            .as_object_mut()
            .expect("record serializes to an object")
            .insert("record_type".into(), "request".into());
        writeln!(file, "{}", serde_json::to_string(&value)?)?;
    }
    let mut agg = serde_json::to_value(report)?;
    agg.as_object_mut()
        .expect("report serializes to an object")
        .insert("record_type".into(), "aggregate".into());
    writeln!(file, "{}", serde_json::to_string(&agg)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// inspect-mask
// ---------------------------------------------------------------------------

fn cmd_inspect_mask(args: InspectMaskArgs) -> Result<i32> {
    if args.draft_len == 0 || args.chunk_step == 0 || args.suffix_len == 0 {
        bail!("draft-len, chunk-step, and suffix-len must all be at least 1");
    }
    let bounds = place_boundaries(args.draft_len, args.chunk_step)?;
    // Placeholder token ids: draft 0..T, suffix copies reuse T..T+S.
    let draft: Vec<TokenId> = (0..args.draft_len as u32).collect();
    let suffix: Vec<TokenId> =
        (args.draft_len as u32..(args.draft_len + args.suffix_len) as u32).collect();
    let packed = build_packed(&draft, &bounds, &suffix)?;

    println!(
        "draft_len {}  chunk_step {}  suffix_len {}  chunks {}  packed_len {}",
        args.draft_len,
        args.chunk_step,
        args.suffix_len,
        bounds.chunk_count(),
        packed.len()
    );
    println!("boundaries {:?}", bounds.boundaries);
    println!("judgment positions {:?}", packed.judgment_positions);
    println!();

    // Dense grid: rows are queries, columns keys; '#' visible, '.' masked.
    let n = packed.len();
    let header: String = (0..n)
        .map(|k| char::from_digit((k % 10) as u32, 10).unwrap())
        .collect();
    println!("        {header}");
    for q in 0..n {
        let row: String = (0..n)
            .map(|k| if packed.mask_visible(q, k) { '#' } else { '.' })
            .collect();
        let kind = if q < args.draft_len { 'd' } else { 's' };
        println!("{q:>5} {kind} {row}");
    }
    println!();
    println!("block descriptors (JSONL):");
    print!("{}", packed.debug_dump());
    Ok(0)
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn cmd_selftest(args: SelftestArgs) -> Result<i32> {
    let opts = SelftestOptions {
        cases: args.cases,
        seed: effective_seed(args.seed),
        inject_mask_bug: args.inject_mask_bug,
    };
    let results = run_selftest(&opts);
    let mut failed = 0usize;
    for r in &results {
        let mark = if r.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {} — {}", r.name, r.detail);
        if !r.passed {
            failed += 1;
        }
    }
    println!();
    println!("{} properties, {} failed", results.len(), failed);
    Ok(if failed == 0 { 0 } else { 1 })
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(args: ReportArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.records)
        .with_context(|| format!("reading {}", args.records.display()))?;
    let mut requests: Vec<RequestRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", args.records.display(), idx + 1))?;
        match value.get("record_type").and_then(|v| v.as_str()) {
            Some("request") => {
                let record: RequestRecord = serde_json::from_value(value)
                    .with_context(|| format!("{}:{}", args.records.display(), idx + 1))?;
                if record.schema_version != parse_core::engine::report::SCHEMA_VERSION {
                    bail!(
                        "{}:{}: schema_version {} unsupported (expected {})",
                        args.records.display(),
                        idx + 1,
                        record.schema_version,
                        parse_core::engine::report::SCHEMA_VERSION
                    );
                }
                requests.push(record);
            }
            Some(_) => {}
            None => bail!(
                "{}:{}: line has no record_type",
                args.records.display(),
                idx + 1
            ),
        }
    }
    if requests.is_empty() {
        bail!("{} contains no request records", args.records.display());
    }
    let report = aggregate(&requests)?;
    print!("{}", render_table(&requests, &report));
    Ok(0)
}
