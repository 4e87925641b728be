//! Per-request records, the aggregate report, and their renderings.
//!
//! Records serialize as line-delimited JSON with a `schema_version` field;
//! the human-readable table is rebuilt from the records, so a saved record
//! file can be re-rendered later.

use serde::{Deserialize, Serialize};

use crate::backends::templates::TaskCategory;
use crate::policy::FulfilmentLabel;

use super::{CostLedger, EngineError, RunMode};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub schema_version: u32,
    pub id: String,
    pub category: TaskCategory,
    pub mode: RunMode,
    pub label: Option<FulfilmentLabel>,
    /// Total tokens the draft worker decoded for this request.
    pub draft_len: usize,
    pub adopted_len: usize,
    pub answer_len: usize,
    pub answer_preview: String,
    pub full_confidence: Option<f64>,
    pub ledger: CostLedger,
    pub speedup: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: TaskCategory,
    pub requests: usize,
    pub failures: usize,
    pub from_draft: usize,
    pub from_target: usize,
    pub mixed: usize,
    pub mean_speedup: Option<f64>,
}

/// Source breakdown plus the cost-model means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub requests: usize,
    pub failures: usize,
    /// Answers shipped from the draft verbatim (Sm).
    pub from_draft: usize,
    /// Answers regenerated from scratch (Lg).
    pub from_target: usize,
    /// Answers continued from a partial draft (Sm+Lg).
    pub mixed: usize,
    /// Mean adopted fraction over mixed outcomes (adopted / drafted tokens).
    pub mean_adopted_fraction: Option<f64>,
    /// Mean estimated speedup over non-failed requests.
    pub mean_speedup: Option<f64>,
    pub categories: Vec<CategoryRow>,
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

pub fn aggregate(records: &[RequestRecord]) -> Result<AggregateReport, EngineError> {
    if records.is_empty() {
        return Err(EngineError::EmptyReport);
    }

    let mut from_draft = 0;
    let mut from_target = 0;
    let mut mixed = 0;
    let mut failures = 0;
    let mut adopted_fractions = Vec::new();
    let mut speedups = Vec::new();

    for r in records {
        if r.failed {
            failures += 1;
            continue;
        }
        match r.label {
            Some(FulfilmentLabel::Sm) => from_draft += 1,
            Some(FulfilmentLabel::Lg) => from_target += 1,
            Some(FulfilmentLabel::SmLg) => {
                mixed += 1;
                // Adopted fractions only make sense where an adopted prefix
                // exists; the sequential baseline has none.
                if r.mode == RunMode::Parse && r.draft_len > 0 {
                    adopted_fractions.push(r.adopted_len as f64 / r.draft_len as f64);
                }
            }
            None => failures += 1,
        }
        if let Some(s) = r.speedup {
            speedups.push(s);
        }
    }

    let mut categories: Vec<CategoryRow> = Vec::new();
    for cat in [
        TaskCategory::Math,
        TaskCategory::ScienceQa,
        TaskCategory::Coding,
        TaskCategory::OpenEnded,
    ] {
        let rows: Vec<&RequestRecord> = records.iter().filter(|r| r.category == cat).collect();
        if rows.is_empty() {
            continue;
        }
        let cat_speedups: Vec<f64> = rows.iter().filter_map(|r| r.speedup).collect();
        categories.push(CategoryRow {
            category: cat,
            requests: rows.len(),
            failures: rows.iter().filter(|r| r.failed).count(),
            from_draft: rows
                .iter()
                .filter(|r| r.label == Some(FulfilmentLabel::Sm))
                .count(),
            from_target: rows
                .iter()
                .filter(|r| r.label == Some(FulfilmentLabel::Lg))
                .count(),
            mixed: rows
                .iter()
                .filter(|r| r.label == Some(FulfilmentLabel::SmLg))
                .count(),
            mean_speedup: mean(&cat_speedups),
        });
    }

    Ok(AggregateReport {
        schema_version: SCHEMA_VERSION,
        requests: records.len(),
        failures,
        from_draft,
        from_target,
        mixed,
        mean_adopted_fraction: mean(&adopted_fractions),
        mean_speedup: mean(&speedups),
        categories,
    })
}

fn label_str(label: Option<FulfilmentLabel>) -> &'static str {
    match label {
        Some(FulfilmentLabel::Sm) => "Sm",
        Some(FulfilmentLabel::SmLg) => "Sm+Lg",
        Some(FulfilmentLabel::Lg) => "Lg",
        None => "-",
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.3}"),
        None => "-".into(),
    }
}

/// Fixed-width table of per-request rows plus the aggregate summary.
/// Deterministic: no timestamps, stable ordering.
pub fn render_table(records: &[RequestRecord], report: &AggregateReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<11} {:>6} {:>8} {:>8} {:>7} {:>7} {:>7} {:>8}  {}\n",
        "id", "category", "label", "draft", "adopted", "answer", "judgeP", "packed", "speedup", "status"
    ));
    for r in records {
        out.push_str(&format!(
            "{:<16} {:<11} {:>6} {:>8} {:>8} {:>7} {:>7} {:>7} {:>8}  {}\n",
            r.id,
            r.category.as_str(),
            label_str(r.label),
            r.draft_len,
            r.adopted_len,
            r.answer_len,
            r.ledger.judge_passes,
            r.ledger.packed_passes,
            fmt_opt(r.speedup),
            if r.failed {
                r.error.as_deref().unwrap_or("failed")
            } else {
                "ok"
            }
        ));
    }
    out.push('\n');
    out.push_str(&format!(
        "requests {}  failures {}  |  source breakdown: draft {}  mixed {}  target {}\n",
        report.requests, report.failures, report.from_draft, report.mixed, report.from_target
    ));
    out.push_str(&format!(
        "mean adopted fraction {}  mean est. speedup {}\n",
        fmt_opt(report.mean_adopted_fraction),
        fmt_opt(report.mean_speedup)
    ));
    for row in &report.categories {
        out.push_str(&format!(
            "  {:<11} n={:<4} draft {:<4} mixed {:<4} target {:<4} fail {:<4} speedup {}\n",
            row.category.as_str(),
            row.requests,
            row.from_draft,
            row.mixed,
            row.from_target,
            row.failures,
            fmt_opt(row.mean_speedup)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: Option<FulfilmentLabel>, failed: bool) -> RequestRecord {
        RequestRecord {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            category: TaskCategory::Math,
            mode: RunMode::Parse,
            label,
            draft_len: 100,
            adopted_len: 50,
            answer_len: 120,
            answer_preview: String::new(),
            full_confidence: Some(0.9),
            ledger: CostLedger::default(),
            speedup: Some(2.0),
            failed,
            error: None,
        }
    }

    #[test]
    fn histogram_counts_each_label_once() {
        let records = vec![
            record("a", Some(FulfilmentLabel::Sm), false),
            record("b", Some(FulfilmentLabel::Lg), false),
            record("c", Some(FulfilmentLabel::SmLg), false),
        ];
        let rep = aggregate(&records).unwrap();
        assert_eq!((rep.from_draft, rep.from_target, rep.mixed), (1, 1, 1));
        assert_eq!(rep.requests, 3);
        assert_eq!(rep.failures, 0);
        assert_eq!(rep.from_draft + rep.from_target + rep.mixed, rep.requests);
    }

    #[test]
    fn all_sm_gives_full_draft_fraction() {
        let records = vec![
            record("a", Some(FulfilmentLabel::Sm), false),
            record("b", Some(FulfilmentLabel::Sm), false),
        ];
        let rep = aggregate(&records).unwrap();
        assert_eq!(rep.from_draft, 2);
        assert_eq!(rep.mixed + rep.from_target, 0);
        assert!(rep.mean_adopted_fraction.is_none()); // no mixed outcomes
    }

    #[test]
    fn failures_counted_but_excluded_from_means() {
        let mut failed = record("x", None, true);
        failed.speedup = None;
        let records = vec![record("a", Some(FulfilmentLabel::Sm), false), failed];
        let rep = aggregate(&records).unwrap();
        assert_eq!(rep.requests, 2);
        assert_eq!(rep.failures, 1);
        assert_eq!(rep.mean_speedup, Some(2.0));
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(aggregate(&[]), Err(EngineError::EmptyReport)));
    }

    #[test]
    fn adopted_fraction_uses_mixed_rows() {
        let mut m = record("m", Some(FulfilmentLabel::SmLg), false);
        m.draft_len = 200;
        m.adopted_len = 80;
        let rep = aggregate(&[m]).unwrap();
        assert!((rep.mean_adopted_fraction.unwrap() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn render_is_deterministic() {
        let records = vec![record("a", Some(FulfilmentLabel::Sm), false)];
        let rep = aggregate(&records).unwrap();
        assert_eq!(render_table(&records, &rep), render_table(&records, &rep));
    }
}
