//! Judge prompt templates, shipped as plain-text assets.
//!
//! One full-verify and one partial-verify template cover all task categories:
//! each rubric carries its own deterministic mode picker, so the category
//! only labels the request (and lets the toy backend vary its prompt marker).

use serde::{Deserialize, Serialize};

/// Dataset-declared task category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskCategory {
    #[serde(rename = "math")]
    Math,
    #[serde(rename = "science-qa")]
    ScienceQa,
    #[serde(rename = "coding")]
    Coding,
    #[serde(rename = "open-ended")]
    OpenEnded,
}

impl TaskCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskCategory::Math => "math",
            TaskCategory::ScienceQa => "science-qa",
            TaskCategory::Coding => "coding",
            TaskCategory::OpenEnded => "open-ended",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    /// Judge a complete draft answer.
    FullVerify,
    /// Judge an in-progress prefix.
    PartialVerify,
    /// 1-10 segment score used by the sequential baseline.
    Score,
}

pub const FULL_SYSTEM: &str = include_str!("../../assets/prompts/full_system.txt");
pub const FULL_RUBRIC: &str = include_str!("../../assets/prompts/full_rubric.txt");
pub const PARTIAL_SYSTEM: &str = include_str!("../../assets/prompts/partial_system.txt");
pub const PARTIAL_RUBRIC: &str = include_str!("../../assets/prompts/partial_rubric.txt");
pub const SCORE_SYSTEM: &str = include_str!("../../assets/prompts/score_system.txt");

/// ChatML close-and-reopen marker: appended after the judged content so an
/// instruction-tuned model emits its classification token next.
pub const CHATML_SUFFIX: &str = "<|im_end|><|im_start|>assistant\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub category: TaskCategory,
    pub system: &'static str,
    pub rubric: &'static str,
}

impl PromptTemplate {
    pub fn full_verify(category: TaskCategory) -> Self {
        Self {
            kind: TemplateKind::FullVerify,
            category,
            system: FULL_SYSTEM,
            rubric: FULL_RUBRIC,
        }
    }

    pub fn partial_verify(category: TaskCategory) -> Self {
        Self {
            kind: TemplateKind::PartialVerify,
            category,
            system: PARTIAL_SYSTEM,
            rubric: PARTIAL_RUBRIC,
        }
    }

    pub fn score(category: TaskCategory) -> Self {
        Self {
            kind: TemplateKind::Score,
            category,
            system: SCORE_SYSTEM,
            rubric: "",
        }
    }

    /// System message: instruction block followed by the rubric.
    pub fn system_prompt(&self) -> String {
        if self.rubric.is_empty() {
            self.system.to_string()
        } else {
            format!("{}\n{}", self.system, self.rubric)
        }
    }

    /// User message for a full- or partial-verify query.
    pub fn user_prompt(&self, question: &str, answer_text: &str) -> String {
        let label = match self.kind {
            TemplateKind::FullVerify => "Proposed answer",
            TemplateKind::PartialVerify => "Answer so far",
            TemplateKind::Score => "Answer so far",
        };
        format!("Question:\n{question}\n\n{label}:\n{answer_text}")
    }

    /// User message for a segment-score query.
    pub fn user_prompt_score(&self, question: &str, so_far: &str, chunk: &str) -> String {
        format!("Question:\n{question}\n\nAnswer so far:\n{so_far}\n\nLatest segment:\n{chunk}")
    }

    /// Compact marker for backends with toy vocabularies, where prompt text
    /// carries no semantics but must still distinguish template kinds.
    pub fn marker(&self) -> String {
        let kind = match self.kind {
            TemplateKind::FullVerify => "full",
            TemplateKind::PartialVerify => "partial",
            TemplateKind::Score => "score",
        };
        format!("{kind}|{}|", self.category.as_str())
    }
}
