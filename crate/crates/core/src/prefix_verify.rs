//! Packed parallel prefix verification.
//!
//! A draft of `T` tokens is partitioned into chunks of `delta` tokens; every
//! chunk boundary is a prefix the judge must classify. Instead of one prefill
//! per boundary, the draft is packed together with `K` copies of the
//! chat-template suffix and a block attention mask wires each copy to exactly
//! the draft prefix it judges: suffix copy `i` sees `draft[0..t_i)` plus its
//! own tokens, and nothing else. One forward pass then yields `K` independent
//! Correct/Incorrect readouts at a total sequence length of `T + K*S`.
//!
//! Three mask representations are exported: the [`PackedVerification::mask_visible`]
//! predicate (the contract tests consume), a dense bit matrix, and block
//! descriptors (what a real attention kernel consumes).

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::judge::{thresholded_verdict, JudgeError, JudgeLogits, Judgment, Verdict};

pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum PrefixVerifyError {
    #[error("draft is empty: nothing to verify")]
    EmptyDraft,
    #[error("chunk step must be at least 1")]
    ZeroDelta,
    #[error("chat-template suffix must be non-empty")]
    EmptySuffix,
    #[error("draft length {got} does not match boundary set draft_len {expected}")]
    DraftLenMismatch { got: usize, expected: usize },
    #[error("expected {expected} judgment logits, got {got}")]
    LogitCountMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// Chunk boundaries `t_k = min(k*delta, T)` for `k = 1..=K`, `K = ceil(T/delta)`.
///
/// A boundary counts visible draft tokens, so the prefix judged at `t_k` is
/// the half-open `draft[0..t_k)`. The last boundary always lands on `T`: the
/// full draft is the final judged prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundarySet {
    pub draft_len: usize,
    pub delta: usize,
    pub boundaries: Vec<usize>,
}

impl BoundarySet {
    pub fn chunk_count(&self) -> usize {
        self.boundaries.len()
    }
}

pub fn place_boundaries(draft_len: usize, delta: usize) -> Result<BoundarySet, PrefixVerifyError> {
    if draft_len == 0 {
        return Err(PrefixVerifyError::EmptyDraft);
    }
    if delta == 0 {
        return Err(PrefixVerifyError::ZeroDelta);
    }
    let chunks = draft_len.div_ceil(delta);
    let boundaries = (1..=chunks).map(|k| (k * delta).min(draft_len)).collect();
    Ok(BoundarySet {
        draft_len,
        delta,
        boundaries,
    })
}

/// One query span and the key ranges visible to it; the kernel-facing form of
/// the mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub query_span: Range<usize>,
    /// Visible key ranges, ascending and non-overlapping. Causality within
    /// the query span itself is implied (query q additionally sees keys in
    /// `query_span.start..=q`).
    pub prefix_keys: Vec<Range<usize>>,
}

/// The packed sequence: draft tokens followed by `K` suffix copies, plus the
/// visibility mask and the positions each token pretends to occupy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedVerification {
    pub tokens: Vec<TokenId>,
    pub suffix_spans: Vec<Range<usize>>,
    /// Last index of each suffix copy; the logits read there judge the prefix
    /// ending at the matching boundary.
    pub judgment_positions: Vec<usize>,
    /// Position ids, draft-relative. Suffix copy `i` is positioned as if it
    /// immediately followed its boundary: `t_i, t_i+1, ..., t_i+S-1`. This is
    /// what makes the packed readout bit-compatible with a standalone
    /// `(prefix, suffix)` pass.
    pub positions: Vec<usize>,
    pub boundary_set: BoundarySet,
    suffix_len: usize,
}

pub fn build_packed(
    draft_tokens: &[TokenId],
    bounds: &BoundarySet,
    suffix_tokens: &[TokenId],
) -> Result<PackedVerification, PrefixVerifyError> {
    if suffix_tokens.is_empty() {
        return Err(PrefixVerifyError::EmptySuffix);
    }
    if draft_tokens.len() != bounds.draft_len {
        return Err(PrefixVerifyError::DraftLenMismatch {
            got: draft_tokens.len(),
            expected: bounds.draft_len,
        });
    }
    let t = bounds.draft_len;
    let s = suffix_tokens.len();
    let k = bounds.chunk_count();

    let mut tokens = Vec::with_capacity(t + k * s);
    let mut positions = Vec::with_capacity(t + k * s);
    tokens.extend_from_slice(draft_tokens);
    positions.extend(0..t);

    let mut suffix_spans = Vec::with_capacity(k);
    let mut judgment_positions = Vec::with_capacity(k);
    for &t_i in &bounds.boundaries {
        let start = tokens.len();
        tokens.extend_from_slice(suffix_tokens);
        positions.extend(t_i..t_i + s);
        suffix_spans.push(start..start + s);
        judgment_positions.push(start + s - 1);
    }

    Ok(PackedVerification {
        tokens,
        suffix_spans,
        judgment_positions,
        positions,
        boundary_set: bounds.clone(),
        suffix_len: s,
    })
}

impl PackedVerification {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn suffix_len(&self) -> usize {
        self.suffix_len
    }

    /// Which suffix copy an index belongs to, if any.
    fn copy_of(&self, idx: usize) -> Option<usize> {
        let t = self.boundary_set.draft_len;
        if idx < t {
            None
        } else {
            Some((idx - t) / self.suffix_len)
        }
    }

    /// Visibility of key `k` to query `q`:
    /// draft queries are causal over the draft and never see suffix keys;
    /// suffix copy `i` sees `draft[0..t_i)` and is causal within itself;
    /// distinct suffix copies never see each other.
    ///
    /// Panics on out-of-range indices: callers own index validity.
    pub fn mask_visible(&self, q: usize, k: usize) -> bool {
        let n = self.tokens.len();
        assert!(q < n && k < n, "mask index out of range: ({q},{k}) with len {n}");
        match (self.copy_of(q), self.copy_of(k)) {
            (None, None) => k <= q,
            (Some(i), None) => k < self.boundary_set.boundaries[i],
            (Some(i), Some(j)) => i == j && k <= q,
            (None, Some(_)) => false,
        }
    }

    /// Dense bit-matrix form, row-major: `row q, column k` = visible.
    pub fn dense_mask(&self) -> Vec<Vec<bool>> {
        let n = self.tokens.len();
        (0..n)
            .map(|q| (0..n).map(|k| self.mask_visible(q, k)).collect())
            .collect()
    }

    /// Block-descriptor form: one descriptor for the draft span, one per
    /// suffix copy.
    #[allow(clippy::single_range_in_vec_init)] // one visible key range per copy
    pub fn block_descriptors(&self) -> Vec<BlockDescriptor> {
        let t = self.boundary_set.draft_len;
        let mut out = Vec::with_capacity(1 + self.suffix_spans.len());
        out.push(BlockDescriptor {
            query_span: 0..t,
            prefix_keys: Vec::new(),
        });
        for (i, span) in self.suffix_spans.iter().enumerate() {
            let t_i = self.boundary_set.boundaries[i];
            out.push(BlockDescriptor {
                query_span: span.clone(),
                prefix_keys: vec![0..t_i],
            });
        }
        out
    }

    /// Line-delimited debug dump: layout, spans, positions, then one
    /// descriptor per line. Consumed by the `inspect-mask` subcommand.
    pub fn debug_dump(&self) -> String {
        #[derive(Serialize)]
        struct Header<'a> {
            record_type: &'static str,
            draft_len: usize,
            delta: usize,
            suffix_len: usize,
            chunks: usize,
            packed_len: usize,
            boundaries: &'a [usize],
            judgment_positions: &'a [usize],
            positions: &'a [usize],
        }
        #[derive(Serialize)]
        struct DescriptorLine<'a> {
            record_type: &'static str,
            query_span: [usize; 2],
            prefix_keys: Vec<[usize; 2]>,
            tokens: &'a [TokenId],
        }

        let mut out = String::new();
        let header = Header {
            record_type: "packed_layout",
            draft_len: self.boundary_set.draft_len,
            delta: self.boundary_set.delta,
            suffix_len: self.suffix_len,
            chunks: self.boundary_set.chunk_count(),
            packed_len: self.tokens.len(),
            boundaries: &self.boundary_set.boundaries,
            judgment_positions: &self.judgment_positions,
            positions: &self.positions,
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&header).expect("serialize header"));
        for d in self.block_descriptors() {
            let line = DescriptorLine {
                record_type: "block",
                query_span: [d.query_span.start, d.query_span.end],
                prefix_keys: d.prefix_keys.iter().map(|r| [r.start, r.end]).collect(),
                tokens: &self.tokens[d.query_span.clone()],
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line).expect("serialize block"));
        }
        out
    }
}

/// Per-chunk verdicts in boundary order plus the reduction the policy needs:
/// `k_star` (last chunk of the leading Correct run, -1 when the first chunk
/// already fails) and the minimum confidence over all chunks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkVerdicts {
    pub verdicts: Vec<Verdict>,
    pub k_star: i64,
    pub min_confidence: f64,
}

impl ChunkVerdicts {
    pub fn chunk_count(&self) -> usize {
        self.verdicts.len()
    }

    pub fn incorrect_count(&self) -> usize {
        self.verdicts.iter().filter(|v| !v.is_accepted()).count()
    }
}

/// Applies the per-chunk threshold `tau_p` and reduces to `k_star` via the
/// leading-run rule: the largest `k` such that chunk `k` is Correct and no
/// Incorrect chunk precedes it.
pub fn extract_chunk_verdicts(
    logits_per_position: &[JudgeLogits],
    tau_p: f64,
    expected_chunks: usize,
) -> Result<ChunkVerdicts, PrefixVerifyError> {
    if logits_per_position.len() != expected_chunks {
        return Err(PrefixVerifyError::LogitCountMismatch {
            got: logits_per_position.len(),
            expected: expected_chunks,
        });
    }
    let verdicts = logits_per_position
        .iter()
        .map(|&l| thresholded_verdict(l, tau_p))
        .collect::<Result<Vec<_>, _>>()?;
    let leading = verdicts.iter().take_while(|v| v.is_accepted()).count();
    let k_star = leading as i64 - 1;
    let min_confidence = verdicts
        .iter()
        .map(|v| v.confidence)
        .fold(f64::INFINITY, f64::min);
    Ok(ChunkVerdicts {
        verdicts,
        k_star,
        min_confidence,
    })
}

/// Overall partial-verify verdict: reject when the Incorrect fraction exceeds
/// `rho` or the trailing Incorrect run reaches `kappa`.
pub fn reject_rules(cv: &ChunkVerdicts, rho: f64, kappa: usize) -> Judgment {
    let k = cv.chunk_count();
    if k == 0 {
        return Judgment::Incorrect;
    }
    let incorrect = cv.incorrect_count();
    let fraction = incorrect as f64 / k as f64;
    let trailing = cv
        .verdicts
        .iter()
        .rev()
        .take_while(|v| !v.is_accepted())
        .count();
    if fraction > rho || trailing >= kappa {
        Judgment::Incorrect
    } else {
        Judgment::Correct
    }
}
