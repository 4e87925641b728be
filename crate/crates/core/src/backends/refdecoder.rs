//! Worker adapter over the seeded toy transformer.
//!
//! Text prompts are byte-encoded into the toy vocabulary (the tokens carry no
//! semantics, only determinism), and judge templates collapse to their short
//! kind/category marker so prompt lengths stay desk-scale. This backend is
//! mask-capable: `judge_packed` embeds the packed layout after the prompt
//! prefix and runs one forward pass under the block mask, which is exactly
//! what the selftest oracle compares against per-prefix passes.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::judge::JudgeLogits;
use crate::prefix_verify::{PackedVerification, TokenId};
use crate::refdecoder::{argmax, ToyModel, ToyModelSpec};

use super::templates::PromptTemplate;
use super::{
    Backend, BackendDescriptor, BackendError, BackendKind, FinishReason, GenerationResult,
    JudgeReadout, LatencyCounts, PackedReadout, Role, ScoreReadout, DEFAULT_DRAFT_SPEED_FACTOR,
};

pub struct RefDecoderBackend {
    model: ToyModel,
    role: Role,
    suffix: Vec<TokenId>,
    eos: Option<TokenId>,
    speed_factor: f64,
    /// Negative-control hook for the selftest oracle: when set, every suffix
    /// copy leaks one draft token past its boundary.
    mask_bug: AtomicBool,
}

impl RefDecoderBackend {
    pub fn new(
        spec: ToyModelSpec,
        role: Role,
        suffix: Vec<TokenId>,
    ) -> Result<Self, BackendError> {
        if suffix.is_empty() {
            return Err(BackendError::Config(
                "refdecoder backend needs a non-empty chat-template suffix".into(),
            ));
        }
        let vocab = spec.vocab_size;
        if suffix.iter().any(|&t| t as usize >= vocab) {
            return Err(BackendError::Config(format!(
                "suffix token out of vocabulary (vocab_size {vocab})"
            )));
        }
        let model = ToyModel::new(spec).map_err(|e| BackendError::Config(e.to_string()))?;
        let speed_factor = match role {
            Role::Draft => DEFAULT_DRAFT_SPEED_FACTOR,
            _ => 1.0,
        };
        Ok(Self {
            model,
            role,
            suffix,
            eos: None,
            speed_factor,
            mask_bug: AtomicBool::new(false),
        })
    }

    pub fn with_eos(mut self, eos: TokenId) -> Self {
        self.eos = Some(eos);
        self
    }

    pub fn with_speed_factor(mut self, speed_factor: f64) -> Self {
        self.speed_factor = speed_factor;
        self
    }

    pub fn inject_mask_bug(&self, enable: bool) {
        self.mask_bug.store(enable, Ordering::Relaxed);
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        let vocab = self.model.spec().vocab_size as u32;
        text.bytes().map(|b| b as u32 % vocab).collect()
    }

    fn gen_prompt(&self, question: &str) -> Vec<TokenId> {
        self.encode(&format!("gen|{question}|"))
    }

    fn judge_prompt(&self, template: &PromptTemplate, question: &str) -> Vec<TokenId> {
        self.encode(&format!("{}{question}|", template.marker()))
    }

    fn read_judgment(&self, row: &[f64]) -> Result<JudgeLogits, BackendError> {
        let spec = self.model.spec();
        JudgeLogits::new(
            row[spec.correct_token_id as usize],
            row[spec.incorrect_token_id as usize],
        )
        .map_err(BackendError::from)
    }

    /// Greedy continuation of `seq`, honoring eos and stop tokens; no KV
    /// cache, each step recomputes the prefix.
    fn decode_loop(
        &self,
        mut seq: Vec<TokenId>,
        max_new: usize,
        stops: &[TokenId],
    ) -> GenerationResult {
        let prefill_tokens = seq.len();
        let mut tokens = Vec::new();
        let mut finish = FinishReason::Length;
        for _ in 0..max_new {
            let logits = self.model.forward_causal(&seq);
            let next = argmax(logits.last().expect("non-empty sequence")) as TokenId;
            if Some(next) == self.eos || stops.contains(&next) {
                finish = FinishReason::Stop;
                break;
            }
            tokens.push(next);
            seq.push(next);
        }
        let decode_tokens = tokens.len();
        GenerationResult {
            tokens,
            finish,
            latency_model: LatencyCounts {
                prefill_tokens,
                decode_tokens,
            },
            diagnostic: None,
        }
    }
}

impl Backend for RefDecoderBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::RefDecoder,
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
        stops: &[TokenId],
    ) -> Result<GenerationResult, BackendError> {
        Ok(self.decode_loop(self.gen_prompt(question), max_new, stops))
    }

    fn continue_from(
        &self,
        question: &str,
        prefix: &[TokenId],
        max_new: usize,
    ) -> Result<GenerationResult, BackendError> {
        let mut seq = self.gen_prompt(question);
        seq.extend_from_slice(prefix);
        Ok(self.decode_loop(seq, max_new, &[]))
    }

    fn judge_full(
        &self,
        question: &str,
        answer: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<JudgeReadout, BackendError> {
        let mut seq = self.judge_prompt(template, question);
        seq.extend_from_slice(answer);
        seq.extend_from_slice(&self.suffix);
        let logits = self.model.forward_causal(&seq);
        Ok(JudgeReadout {
            logits: self.read_judgment(logits.last().expect("non-empty sequence"))?,
            prefill_tokens: seq.len(),
        })
    }

    fn judge_packed(
        &self,
        question: &str,
        packed: &PackedVerification,
        template: &PromptTemplate,
    ) -> Result<PackedReadout, BackendError> {
        let prompt = self.judge_prompt(template, question);
        let p = prompt.len();
        let t = packed.boundary_set.draft_len;

        let mut tokens = prompt;
        tokens.extend_from_slice(&packed.tokens);
        let mut positions: Vec<usize> = (0..p).collect();
        positions.extend(packed.positions.iter().map(|&pos| pos + p));

        let bug = self.mask_bug.load(Ordering::Relaxed);
        let mask = |q: usize, k: usize| -> bool {
            if q < p {
                return k <= q; // causal within the prompt
            }
            if k < p {
                return true; // every later query sees the whole prompt
            }
            let (qq, kk) = (q - p, k - p);
            let visible = packed.mask_visible(qq, kk);
            if bug && !visible && kk < t {
                // Leak one draft token past each suffix copy's boundary.
                if let Some(i) = packed.suffix_spans.iter().position(|s| s.contains(&qq)) {
                    return kk < packed.boundary_set.boundaries[i] + 1;
                }
            }
            visible
        };

        let logits = self.model.forward(&tokens, &mask, &positions);
        let readouts = packed
            .judgment_positions
            .iter()
            .map(|&jp| self.read_judgment(&logits[p + jp]))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PackedReadout {
            logits: readouts,
            prefill_tokens: tokens.len(),
            passes: 1,
            packed: true,
        })
    }

    fn score_first_digit(
        &self,
        question: &str,
        answer_so_far: &[TokenId],
        chunk: &[TokenId],
        template: &PromptTemplate,
    ) -> Result<ScoreReadout, BackendError> {
        let mut seq = self.judge_prompt(template, question);
        seq.extend_from_slice(answer_so_far);
        seq.extend_from_slice(chunk);
        seq.extend_from_slice(&self.suffix);
        let logits = self.model.forward_causal(&seq);
        let next = argmax(logits.last().expect("non-empty sequence")) as TokenId;
        // Toy convention: token ids 0-9 double as the digit tokens.
        let score = if next < 10 { Some(next as u8) } else { None };
        Ok(ScoreReadout {
            score,
            prefill_tokens: seq.len(),
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

    fn spec(seed: u64) -> ToyModelSpec {
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

    fn judge_backend(seed: u64) -> RefDecoderBackend {
        RefDecoderBackend::new(spec(seed), Role::Judge, vec![60, 61]).unwrap()
    }

    #[test]
    fn greedy_prefix_consistency() {
        let b = RefDecoderBackend::new(spec(7), Role::Draft, vec![60]).unwrap();
        let q = "some question";
        let full = b.generate(q, 12, &[]).unwrap();
        let head = &full.tokens[..5];
        let tail = b.continue_from(q, head, 7).unwrap();
        let mut joined = head.to_vec();
        joined.extend_from_slice(&tail.tokens);
        assert_eq!(joined, full.tokens, "continue_from must resume generate exactly");
    }

    #[test]
    fn generate_snapshot_seed_42() {
        // Self-oracle snapshot: pinned once, guards drift.
        let b = RefDecoderBackend::new(
            ToyModelSpec {
                vocab_size: 64,
                dim: 32,
                layers: 2,
                heads: 2,
                seed: 42,
                correct_token_id: 11,
                incorrect_token_id: 12,
            },
            Role::Draft,
            vec![60],
        )
        .unwrap();
        let r = b.generate("1 2 3", 4, &[]).unwrap();
        assert_eq!(r.tokens.len(), 4);
        assert_eq!(r.finish, FinishReason::Length);
        let again = b.generate("1 2 3", 4, &[]).unwrap();
        assert_eq!(r.tokens, again.tokens);
    }

    #[test]
    fn packed_matches_sequential_fallback() {
        let b = judge_backend(3);
        let template = PromptTemplate::partial_verify(TaskCategory::Math);
        let q = "check this";
        let draft: Vec<TokenId> = (0..17).map(|i| (i * 7 + 3) % 64).collect();
        let bounds = place_boundaries(draft.len(), 5).unwrap();
        let packed = build_packed(&draft, &bounds, &b.suffix_tokens()).unwrap();

        let fast = b.judge_packed(q, &packed, &template).unwrap();
        let slow = b.sequential_fallback(q, &draft, &bounds, &template).unwrap();
        assert_eq!(fast.logits.len(), slow.logits.len());
        for (a, s) in fast.logits.iter().zip(&slow.logits) {
            assert!((a.logit_correct() - s.logit_correct()).abs() < 1e-5);
            assert!((a.logit_incorrect() - s.logit_incorrect()).abs() < 1e-5);
        }
        assert_eq!(fast.passes, 1);
        assert_eq!(slow.passes, bounds.chunk_count());
    }

    #[test]
    fn injected_mask_bug_breaks_equivalence() {
        let b = judge_backend(3);
        let template = PromptTemplate::partial_verify(TaskCategory::Math);
        let q = "check this";
        let draft: Vec<TokenId> = (0..17).map(|i| (i * 7 + 3) % 64).collect();
        let bounds = place_boundaries(draft.len(), 5).unwrap();
        let packed = build_packed(&draft, &bounds, &b.suffix_tokens()).unwrap();

        b.inject_mask_bug(true);
        let buggy = b.judge_packed(q, &packed, &template).unwrap();
        b.inject_mask_bug(false);
        let clean = b.sequential_fallback(q, &draft, &bounds, &template).unwrap();
        let max_diff = buggy
            .logits
            .iter()
            .zip(&clean.logits)
            .map(|(a, s)| {
                (a.logit_correct() - s.logit_correct())
                    .abs()
                    .max((a.logit_incorrect() - s.logit_incorrect()).abs())
            })
            .fold(0.0f64, f64::max);
        assert!(max_diff > 1e-5, "bug injection must be detectable, diff={max_diff}");
    }

    #[test]
    fn single_boundary_packed_equals_full_verify() {
        // K=1 degenerate: the packed readout is judge_full modulo template
        // framing, so compare under the same template.
        let b = judge_backend(9);
        let template = PromptTemplate::partial_verify(TaskCategory::Math);
        let q = "short draft";
        let draft: Vec<TokenId> = vec![4, 9, 2];
        let bounds = place_boundaries(draft.len(), 40).unwrap();
        assert_eq!(bounds.chunk_count(), 1);
        let packed = build_packed(&draft, &bounds, &b.suffix_tokens()).unwrap();
        let fast = b.judge_packed(q, &packed, &template).unwrap();
        let full = b.judge_full(q, &draft, &template).unwrap();
        assert!((fast.logits[0].logit_correct() - full.logits.logit_correct()).abs() < 1e-9);
        assert!((fast.logits[0].logit_incorrect() - full.logits.logit_incorrect()).abs() < 1e-9);
    }

    #[test]
    fn eos_and_stop_tokens_end_generation() {
        let b = RefDecoderBackend::new(spec(7), Role::Draft, vec![60]).unwrap();
        let q = "some question";
        let full = b.generate(q, 8, &[]).unwrap();
        assert_eq!(full.tokens.len(), 8);
        // Re-run with the 4th emitted token as EOS: generation stops there.
        let eos = full.tokens[3];
        let first_hit = full.tokens.iter().position(|&t| t == eos).unwrap();
        let b2 = RefDecoderBackend::new(spec(7), Role::Draft, vec![60]).unwrap().with_eos(eos);
        let r = b2.generate(q, 8, &[]).unwrap();
        assert_eq!(r.tokens, full.tokens[..first_hit].to_vec());
        assert_eq!(r.finish, FinishReason::Stop);
        // A stop set entry behaves the same way.
        let r = b.generate(q, 8, &[eos]).unwrap();
        assert_eq!(r.tokens, full.tokens[..first_hit].to_vec());
        assert_eq!(r.finish, FinishReason::Stop);
    }

    #[test]
    fn suffix_must_fit_vocabulary() {
        assert!(RefDecoderBackend::new(spec(1), Role::Judge, vec![999]).is_err());
        assert!(RefDecoderBackend::new(spec(1), Role::Judge, vec![]).is_err());
    }
}
