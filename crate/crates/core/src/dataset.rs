//! Line-delimited dataset files: one JSON record per line.
//!
//! JSONL over CSV so questions with embedded newlines survive. A record may
//! carry an inline script, which is what turns a dataset row into a scripted
//! fixture for the replay backend.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::scripted::ScriptSpec;
use crate::backends::templates::TaskCategory;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    pub category: TaskCategory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<ScriptSpec>,
}

/// Loads and validates a dataset file. Diagnostics carry 1-based line
/// numbers; ids must be unique and questions non-empty.
pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let display = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: display.clone(),
        source,
    })?;
    parse_dataset(&text, &display)
}

pub fn parse_dataset(text: &str, path: &str) -> Result<Vec<DatasetRecord>, DatasetError> {
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord =
            serde_json::from_str(line).map_err(|e| DatasetError::Parse {
                path: path.to_string(),
                line: line_no,
                message: e.to_string(),
            })?;
        if record.question.trim().is_empty() {
            return Err(DatasetError::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("record {:?} has an empty question", record.id),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::Parse {
                path: path.to_string(),
                line: line_no,
                message: format!("duplicate record id {:?}", record.id),
            });
        }
        records.push(record);
    }
    Ok(records)
}
