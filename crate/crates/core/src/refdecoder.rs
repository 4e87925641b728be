//! A tiny deterministic causal transformer with an arbitrary visibility mask.
//!
//! This is the in-repo stand-in for a real target model: small enough to run
//! anywhere, deterministic enough to be an oracle. Its whole reason to exist
//! is that `forward` accepts any visibility predicate and any per-token
//! position ids, so a packed prefix-verification pass can be checked against
//! independent per-prefix passes.
//!
//! Weights are generated from the seed; nothing is shipped. The generator is
//! SplitMix64, bit-exact:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! output = z ^ (z >> 31)           (all ops mod 2^64)
//! unit   = (output >> 11) * 2^-53  (uniform in [0,1))
//! ```
//!
//! Draw order: token embedding, then per layer (ln1 gain, ln1 bias, wq, wk,
//! wv, wo, ln2 gain, ln2 bias, w_in, b_in, w_out, b_out), then final ln gain
//! and bias, then the unembedding matrix. Matrices are row-major, entries
//! uniform in (-1/sqrt(dim), 1/sqrt(dim)); layer-norm gains are 1 + u and
//! biases u with u uniform in (-0.1, 0.1).
//!
//! The architecture is pinned so independent implementations can reproduce
//! the logits (python/numpy_cross_check.py does exactly that):
//!
//! - input: `embedding[token] + pe(position)` with sinusoidal
//!   `pe[2j] = sin(pos / 10000^(2j/dim))`, `pe[2j+1] = cos(same angle)`;
//! - per layer, pre-norm: `x += Wo * attention(LN1(x))` then
//!   `x += W_out * gelu(W_in * LN2(x) + b_in) + b_out`;
//! - layer norm uses population variance and epsilon 1e-5;
//! - attention: `heads` heads of width `dim/heads`, scores scaled by
//!   `1/sqrt(head_width)`, softmax with max-subtraction over visible keys;
//! - MLP hidden width is `4*dim`; gelu is the tanh approximation
//!   `0.5x(1 + tanh(0.7978845608028654 (x + 0.044715 x^3)))`;
//! - readout: `unembed * LN_final(x)`, no bias.
//!
//! All arithmetic is f64. Reductions run in ascending index order (keys in
//! token order, features in coordinate order), so identical visible sets
//! produce bitwise identical outputs regardless of what else sits in the
//! sequence.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prefix_verify::TokenId;

#[derive(Debug, Error)]
pub enum ToyModelError {
    #[error("toy model limits: vocab_size <= 256, dim <= 64, layers <= 4, heads <= 4 (got vocab={vocab}, dim={dim}, layers={layers}, heads={heads})")]
    LimitsExceeded {
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
    },
    #[error("dim {dim} must be divisible by heads {heads}")]
    DimNotDivisible { dim: usize, heads: usize },
    #[error("judge token ids must be distinct and < vocab_size")]
    BadJudgeTokens,
}

/// Shape, seed, and the two designated judge token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
    pub correct_token_id: TokenId,
    pub incorrect_token_id: TokenId,
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<(), ToyModelError> {
        if self.vocab_size == 0
            || self.vocab_size > 256
            || self.dim == 0
            || self.dim > 64
            || self.layers == 0
            || self.layers > 4
            || self.heads == 0
            || self.heads > 4
        {
            return Err(ToyModelError::LimitsExceeded {
                vocab: self.vocab_size,
                dim: self.dim,
                layers: self.layers,
                heads: self.heads,
            });
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(ToyModelError::DimNotDivisible {
                dim: self.dim,
                heads: self.heads,
            });
        }
        if self.correct_token_id == self.incorrect_token_id
            || self.correct_token_id as usize >= self.vocab_size
            || self.incorrect_token_id as usize >= self.vocab_size
        {
            return Err(ToyModelError::BadJudgeTokens);
        }
        Ok(())
    }
}

struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    fn next_in(&mut self, half_width: f64) -> f64 {
        (2.0 * self.next_unit() - 1.0) * half_width
    }
}

struct LayerWeights {
    ln1_gain: Vec<f64>,
    ln1_bias: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_gain: Vec<f64>,
    ln2_bias: Vec<f64>,
    w_in: Vec<f64>,
    b_in: Vec<f64>,
    w_out: Vec<f64>,
    b_out: Vec<f64>,
}

/// Materialized weights for a [`ToyModelSpec`].
pub struct ToyModel {
    spec: ToyModelSpec,
    embedding: Vec<f64>,
    layers: Vec<LayerWeights>,
    lnf_gain: Vec<f64>,
    lnf_bias: Vec<f64>,
    unembed: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

fn matrix(rng: &mut SplitMix64, rows: usize, cols: usize, half_width: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.next_in(half_width)).collect()
}

fn ln_gain(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| 1.0 + rng.next_in(0.1)).collect()
}

fn ln_bias(rng: &mut SplitMix64, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.next_in(0.1)).collect()
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * inv * gain[i] + bias[i];
    }
}

/// y = W x with W row-major (rows x cols).
fn matvec(w: &[f64], x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

fn gelu(x: f64) -> f64 {
    // tanh approximation
    const SQRT_2_OVER_PI: f64 = 0.7978845608028654;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self, ToyModelError> {
        spec.validate()?;
        let d = spec.dim;
        let hidden = 4 * d;
        let s = 1.0 / (d as f64).sqrt();
        let mut rng = SplitMix64::new(spec.seed);

        let embedding = matrix(&mut rng, spec.vocab_size, d, s);
        let mut layers = Vec::with_capacity(spec.layers);
        for _ in 0..spec.layers {
            layers.push(LayerWeights {
                ln1_gain: ln_gain(&mut rng, d),
                ln1_bias: ln_bias(&mut rng, d),
                wq: matrix(&mut rng, d, d, s),
                wk: matrix(&mut rng, d, d, s),
                wv: matrix(&mut rng, d, d, s),
                wo: matrix(&mut rng, d, d, s),
                ln2_gain: ln_gain(&mut rng, d),
                ln2_bias: ln_bias(&mut rng, d),
                w_in: matrix(&mut rng, hidden, d, s),
                b_in: matrix(&mut rng, hidden, 1, s),
                w_out: matrix(&mut rng, d, hidden, s),
                b_out: matrix(&mut rng, d, 1, s),
            });
        }
        let lnf_gain = ln_gain(&mut rng, d);
        let lnf_bias = ln_bias(&mut rng, d);
        let unembed = matrix(&mut rng, spec.vocab_size, d, s);

        Ok(Self {
            spec,
            embedding,
            layers,
            lnf_gain,
            lnf_bias,
            unembed,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    fn positional(&self, pos: usize, out: &mut [f64]) {
        let d = self.spec.dim;
        let mut i = 0;
        while i < d {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            out[i] = angle.sin();
            if i + 1 < d {
                out[i + 1] = angle.cos();
            }
            i += 2;
        }
    }

    /// Full forward pass under an arbitrary visibility predicate and explicit
    /// position ids. Returns one logit row per input token.
    ///
    /// Masked-out keys are skipped entirely: they contribute exactly zero
    /// attention weight, and a query with no visible key gets a zero
    /// attention output. The mask predicate is authoritative; position ids
    /// are only fed to the sinusoidal encoding.
    #[allow(clippy::needless_range_loop)] // index loops pin the reduction order
    pub fn forward(
        &self,
        tokens: &[TokenId],
        mask: &dyn Fn(usize, usize) -> bool,
        positions: &[usize],
    ) -> Vec<Vec<f64>> {
        let n = tokens.len();
        assert_eq!(n, positions.len(), "one position id per token");
        let d = self.spec.dim;
        let heads = self.spec.heads;
        let hd = d / heads;
        let hidden = 4 * d;
        let scale = 1.0 / (hd as f64).sqrt();

        // Embedding + sinusoidal positions.
        let mut x = vec![vec![0.0; d]; n];
        let mut pe = vec![0.0; d];
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            assert!(tok < self.spec.vocab_size, "token id {tok} >= vocab_size");
            self.positional(positions[t], &mut pe);
            let emb = &self.embedding[tok * d..(tok + 1) * d];
            for i in 0..d {
                x[t][i] = emb[i] + pe[i];
            }
        }

        let mut normed = vec![vec![0.0; d]; n];
        let mut q = vec![vec![0.0; d]; n];
        let mut k = vec![vec![0.0; d]; n];
        let mut v = vec![vec![0.0; d]; n];
        let mut h_buf = vec![0.0; hidden];
        let mut mlp_buf = vec![0.0; d];

        for layer in &self.layers {
            for t in 0..n {
                layer_norm(&x[t], &layer.ln1_gain, &layer.ln1_bias, &mut normed[t]);
            }
            for t in 0..n {
                matvec(&layer.wq, &normed[t], d, d, &mut q[t]);
                matvec(&layer.wk, &normed[t], d, d, &mut k[t]);
                matvec(&layer.wv, &normed[t], d, d, &mut v[t]);
            }
            for t in 0..n {
                let mut attn = vec![0.0; d];
                for h in 0..heads {
                    let off = h * hd;
                    // Scores over visible keys, ascending key order.
                    let mut scores: Vec<(usize, f64)> = Vec::new();
                    let mut max_score = f64::NEG_INFINITY;
                    for key in 0..n {
                        if !mask(t, key) {
                            continue;
                        }
                        let mut dot = 0.0;
                        for i in 0..hd {
                            dot += q[t][off + i] * k[key][off + i];
                        }
                        let s = dot * scale;
                        if s > max_score {
                            max_score = s;
                        }
                        scores.push((key, s));
                    }
                    if scores.is_empty() {
                        continue;
                    }
                    let mut z = 0.0;
                    for (_, s) in scores.iter_mut() {
                        *s = (*s - max_score).exp();
                        z += *s;
                    }
                    for (key, s) in &scores {
                        let w = s / z;
                        for i in 0..hd {
                            attn[off + i] += w * v[*key][off + i];
                        }
                    }
                }
                matvec(&layer.wo, &attn, d, d, &mut mlp_buf);
                for i in 0..d {
                    x[t][i] += mlp_buf[i];
                }
            }
            for t in 0..n {
                layer_norm(&x[t], &layer.ln2_gain, &layer.ln2_bias, &mut normed[t]);
                matvec(&layer.w_in, &normed[t], hidden, d, &mut h_buf);
                for i in 0..hidden {
                    h_buf[i] = gelu(h_buf[i] + layer.b_in[i]);
                }
                matvec(&layer.w_out, &h_buf, d, hidden, &mut mlp_buf);
                for i in 0..d {
                    x[t][i] += mlp_buf[i] + layer.b_out[i];
                }
            }
        }

        let vocab = self.spec.vocab_size;
        let mut logits = vec![vec![0.0; vocab]; n];
        let mut final_normed = vec![0.0; d];
        for t in 0..n {
            layer_norm(&x[t], &self.lnf_gain, &self.lnf_bias, &mut final_normed);
            matvec(&self.unembed, &final_normed, vocab, d, &mut logits[t]);
        }
        logits
    }

    /// Forward under the plain causal mask with positions `0..n`.
    pub fn forward_causal(&self, tokens: &[TokenId]) -> Vec<Vec<f64>> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        self.forward(tokens, &|q, k| k <= q, &positions)
    }

    /// Repeated argmax under the plain causal mask. Ties resolve to the
    /// lowest token id. No KV cache: each step recomputes the whole prefix,
    /// which is fine at this scale.
    pub fn greedy_decode(&self, prompt: &[TokenId], max_new: usize) -> Vec<TokenId> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            if seq.is_empty() {
                break;
            }
            let logits = self.forward_causal(&seq);
            let last = logits.last().expect("non-empty sequence");
            let next = argmax(last) as TokenId;
            out.push(next);
            seq.push(next);
        }
        out
    }
}

/// Index of the largest value; first occurrence wins on exact ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_val {
            best_val = v;
            best = i;
        }
    }
    best
}

pub fn causal(q: usize, k: usize) -> bool {
    k <= q
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ToyModelSpec {
        ToyModelSpec {
            vocab_size: 64,
            dim: 32,
            layers: 2,
            heads: 2,
            seed: 42,
            correct_token_id: 1,
            incorrect_token_id: 2,
        }
    }

    #[test]
    fn splitmix_reference_values() {
        // First three outputs for seed 1234567, cross-checked against the
        // published SplitMix64 reference sequence.
        let mut r = SplitMix64::new(1234567);
        assert_eq!(r.next_u64(), 6457827717110365317);
        assert_eq!(r.next_u64(), 3203168211198807973);
        assert_eq!(r.next_u64(), 9817491932198370423);
    }

    #[test]
    fn spec_validation() {
        assert!(small_spec().validate().is_ok());
        let mut s = small_spec();
        s.dim = 30;
        s.heads = 4;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.vocab_size = 300;
        assert!(s.validate().is_err());
        let mut s = small_spec();
        s.incorrect_token_id = s.correct_token_id;
        assert!(s.validate().is_err());
    }

    #[test]
    fn deterministic_across_builds() {
        let m1 = ToyModel::new(small_spec()).unwrap();
        let m2 = ToyModel::new(small_spec()).unwrap();
        let a = m1.forward_causal(&[1, 2, 3, 4]);
        let b = m2.forward_causal(&[1, 2, 3, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn predicate_causal_equals_builtin_causal() {
        let m = ToyModel::new(small_spec()).unwrap();
        let tokens = [5, 9, 13, 2, 7];
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let a = m.forward_causal(&tokens);
        let b = m.forward(&tokens, &causal, &positions);
        for (ra, rb) in a.iter().zip(&b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn singleton_softmax_is_identity_weight() {
        // A query whose only visible key is itself: attention output equals
        // that key's value projection, so logits match a length-1 pass.
        let m = ToyModel::new(small_spec()).unwrap();
        let solo = m.forward_causal(&[17]);
        let pair = m.forward(&[3, 17], &|q, k| q == k, &[0, 0]);
        for (x, y) in solo[0].iter().zip(&pair[1]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_out_key_is_exactly_invisible() {
        let m = ToyModel::new(small_spec()).unwrap();
        let positions = [0usize, 1, 2, 3];
        // Query 3 sees keys 0 and 3 only; token at index 2 is invisible to it.
        let mask = |q: usize, k: usize| if q == 3 { k == 0 || k == 3 } else { k <= q };
        let a = m.forward(&[5, 6, 7, 8], &mask, &positions);
        let b = m.forward(&[5, 6, 50, 8], &mask, &positions);
        for (x, y) in a[3].iter().zip(&b[3]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn position_ids_matter() {
        let m = ToyModel::new(small_spec()).unwrap();
        let a = m.forward(&[5, 6], &causal, &[0, 1]);
        let b = m.forward(&[5, 6], &causal, &[0, 7]);
        let diff: f64 = a[1].iter().zip(&b[1]).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6, "position encoding ignored");
    }

    #[test]
    fn greedy_extends_prefix() {
        let m = ToyModel::new(small_spec()).unwrap();
        let d3 = m.greedy_decode(&[1, 2, 3], 3);
        let d5 = m.greedy_decode(&[1, 2, 3], 5);
        assert_eq!(d3[..], d5[..3]);
        assert_eq!(d3.len(), 3);
    }

    #[test]
    fn greedy_single_step_is_argmax() {
        let m = ToyModel::new(small_spec()).unwrap();
        let logits = m.forward_causal(&[1, 2, 3]);
        let expected = argmax(logits.last().unwrap()) as TokenId;
        assert_eq!(m.greedy_decode(&[1, 2, 3], 1), vec![expected]);
    }

    #[test]
    fn greedy_snapshot_seed_42() {
        // Pinned once from this implementation; guards cross-platform drift.
        let m = ToyModel::new(small_spec()).unwrap();
        let got = m.greedy_decode(&[1, 2, 3], 8);
        assert_eq!(
            got,
            vec![11, 36, 36, 36, 35, 44, 38, 35],
            "seeded greedy decode drifted"
        );
    }
}
