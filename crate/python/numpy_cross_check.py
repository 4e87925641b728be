#!/usr/bin/env python3
"""Independent NumPy reimplementation of the reference decoder.

Rebuilds the toy transformer purely from the documented contract (SplitMix64
weight stream, draw order, architecture) and compares its causal-mask logits
against the parse_engine extension. Agreement proves the documentation is
complete enough for a from-scratch port; disagreement means the docs and the
code drifted.

Usage: python3 python/numpy_cross_check.py
"""

import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

REPO = Path(__file__).resolve().parent.parent
MASK64 = (1 << 64) - 1


def load_extension():
    lib = REPO / "target" / "debug" / "libparse_engine.so"
    if not lib.exists():
        subprocess.run(["cargo", "build", "-p", "parse-python"], cwd=REPO, check=True)
    stage = Path(tempfile.mkdtemp(prefix="parse_engine_"))
    shutil.copy2(lib, stage / "parse_engine.so")
    sys.path.insert(0, str(stage))
    import parse_engine

    return parse_engine


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def next_unit(self):
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def next_in(self, half_width):
        return (2.0 * self.next_unit() - 1.0) * half_width


LN_EPS = 1e-5
SQRT_2_OVER_PI = 0.7978845608028654


class ToyModel:
    def __init__(self, vocab, dim, layers, heads, seed):
        rng = SplitMix64(seed)
        s = 1.0 / np.sqrt(dim)
        hidden = 4 * dim

        def matrix(rows, cols, hw):
            return np.array(
                [rng.next_in(hw) for _ in range(rows * cols)], dtype=np.float64
            ).reshape(rows, cols)

        def ln_gain():
            return np.array([1.0 + rng.next_in(0.1) for _ in range(dim)])

        def ln_bias():
            return np.array([rng.next_in(0.1) for _ in range(dim)])

        self.vocab, self.dim, self.heads = vocab, dim, heads
        self.embedding = matrix(vocab, dim, s)
        self.layers = []
        for _ in range(layers):
            self.layers.append(
                dict(
                    ln1_g=ln_gain(),
                    ln1_b=ln_bias(),
                    wq=matrix(dim, dim, s),
                    wk=matrix(dim, dim, s),
                    wv=matrix(dim, dim, s),
                    wo=matrix(dim, dim, s),
                    ln2_g=ln_gain(),
                    ln2_b=ln_bias(),
                    w_in=matrix(hidden, dim, s),
                    b_in=matrix(hidden, 1, s).ravel(),
                    w_out=matrix(dim, hidden, s),
                    b_out=matrix(dim, 1, s).ravel(),
                )
            )
        self.lnf_g = ln_gain()
        self.lnf_b = ln_bias()
        self.unembed = matrix(vocab, dim, s)

    def positional(self, pos):
        d = self.dim
        pe = np.zeros(d)
        for i in range(0, d, 2):
            angle = pos / (10000.0 ** (i / d))
            pe[i] = np.sin(angle)
            if i + 1 < d:
                pe[i + 1] = np.cos(angle)
        return pe

    @staticmethod
    def layer_norm(x, gain, bias):
        mean = x.mean()
        var = ((x - mean) ** 2).mean()
        return (x - mean) / np.sqrt(var + LN_EPS) * gain + bias

    @staticmethod
    def gelu(x):
        return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + 0.044715 * x**3)))

    def forward_causal(self, tokens):
        n = len(tokens)
        d, heads = self.dim, self.heads
        hd = d // heads
        scale = 1.0 / np.sqrt(hd)
        x = np.stack(
            [self.embedding[t] + self.positional(p) for p, t in enumerate(tokens)]
        )
        for layer in self.layers:
            normed = np.stack([self.layer_norm(r, layer["ln1_g"], layer["ln1_b"]) for r in x])
            q = normed @ layer["wq"].T
            k = normed @ layer["wk"].T
            v = normed @ layer["wv"].T
            attn = np.zeros_like(x)
            for t in range(n):
                for h in range(heads):
                    sl = slice(h * hd, (h + 1) * hd)
                    scores = (k[: t + 1, sl] @ q[t, sl]) * scale
                    scores = np.exp(scores - scores.max())
                    weights = scores / scores.sum()
                    attn[t, sl] = weights @ v[: t + 1, sl]
            x = x + attn @ layer["wo"].T
            normed = np.stack([self.layer_norm(r, layer["ln2_g"], layer["ln2_b"]) for r in x])
            h_act = self.gelu(normed @ layer["w_in"].T + layer["b_in"])
            x = x + h_act @ layer["w_out"].T + layer["b_out"]
        final = np.stack([self.layer_norm(r, self.lnf_g, self.lnf_b) for r in x])
        return final @ self.unembed.T


def main():
    pe = load_extension()
    cases = [
        dict(vocab=64, dim=32, layers=2, heads=2, seed=42, tokens=[1, 2, 3, 40, 7]),
        dict(vocab=50, dim=16, layers=1, heads=1, seed=7, tokens=[0, 49, 25]),
        dict(vocab=64, dim=24, layers=3, heads=4, seed=123456789, tokens=[5] * 12),
    ]
    worst = 0.0
    for case in cases:
        reference = ToyModel(
            case["vocab"], case["dim"], case["layers"], case["heads"], case["seed"]
        ).forward_causal(case["tokens"])
        dec = pe.RefDecoder(
            vocab_size=case["vocab"],
            dim=case["dim"],
            layers=case["layers"],
            heads=case["heads"],
            seed=case["seed"],
        )
        ours = np.array(dec.forward_causal(case["tokens"]))
        diff = np.abs(reference - ours).max()
        worst = max(worst, diff)
        assert diff < 1e-9, f"case {case}: max |diff| = {diff:.3e}"
        # Greedy argmax agrees too.
        got = dec.greedy_decode(case["tokens"], 4)
        seq = list(case["tokens"])
        for _ in range(4):
            nxt = int(
                np.argmax(
                    ToyModel(
                        case["vocab"], case["dim"], case["layers"], case["heads"], case["seed"]
                    ).forward_causal(seq)[-1]
                )
            )
            seq.append(nxt)
        assert got == seq[len(case["tokens"]) :], (got, seq)
        print(f"  ok: {case['layers']}L/{case['dim']}d/{case['heads']}h seed {case['seed']}: "
              f"max |diff| {diff:.3e}")
    print(f"\ncross-check passed (worst |diff| {worst:.3e})")


if __name__ == "__main__":
    main()
