#!/usr/bin/env python3
"""Smoke test for the parse_engine extension module.

Builds the cdylib if needed, loads it, and exercises the main types and
operations: confidence calibration, packed-mask layout, the adopted-prefix
rule, the cost model, shipped profiles, the seeded reference decoder, the
packed-vs-sequential oracle, and a scripted fixture run.

Usage: python3 python/smoke_test.py [--release]
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_and_load(release: bool):
    profile = "release" if release else "debug"
    lib = REPO / "target" / profile / "libparse_engine.so"
    if not lib.exists():
        cmd = ["cargo", "build", "-p", "parse-python"]
        if release:
            cmd.append("--release")
        subprocess.run(cmd, cwd=REPO, check=True)
    if not lib.exists():
        sys.exit(f"missing {lib}; build failed?")

    # CPython imports extension modules by file name: stage a copy named
    # parse_engine.so on sys.path.
    stage = Path(tempfile.mkdtemp(prefix="parse_engine_"))
    shutil.copy2(lib, stage / "parse_engine.so")
    sys.path.insert(0, str(stage))
    import parse_engine

    return parse_engine


def approx(a, b, tol=1e-9):
    assert abs(a - b) < tol, f"{a} != {b} (tol {tol})"


def main():
    release = "--release" in sys.argv[1:]
    pe = build_and_load(release)
    checks = 0

    def ok(label):
        nonlocal checks
        checks += 1
        print(f"  ok: {label}")

    # Two-way confidence, frozen oracle values.
    approx(pe.two_way_confidence(1.7, 1.7), 0.5, 1e-15)
    approx(pe.two_way_confidence(2.0, 0.0), 0.8807970779778824, 1e-15)
    approx(pe.two_way_confidence(0.0, 2.0), 0.11920292202211756, 1e-15)
    ok("two_way_confidence matches the frozen values")

    # Thresholded verdicts: strict bar downgrades, ties reject.
    v = pe.thresholded_verdict(5.0, 0.0, 0.998)
    assert v.raw == "Correct" and getattr(v, "final") == "Incorrect"
    v = pe.thresholded_verdict(5.0, 0.0, 0.5)
    assert getattr(v, "final") == "Correct"
    v = pe.thresholded_verdict(1.7, 1.7, 0.0)
    assert getattr(v, "final") == "Incorrect"
    try:
        pe.two_way_confidence(float("nan"), 0.0)
        raise AssertionError("NaN logits must be rejected")
    except ValueError:
        pass
    ok("thresholded_verdict downgrade / tie / NaN rejection")

    # Boundary placement and the adopted-prefix rule.
    assert pe.place_boundaries(100, 40) == [40, 80, 100]
    assert pe.place_boundaries(5, 40) == [5]
    assert pe.adopted_prefix_len(-1, 40, 0.0, 200) == 0
    assert pe.adopted_prefix_len(1, 40, 0.0, 200) == 80
    assert pe.adopted_prefix_len(4, 40, 0.0, 150) == 150
    approx(pe.short_draft_threshold(3, 0.90, 0.95), 0.94, 1e-12)
    ok("boundaries, adopted_prefix_len, short_draft_threshold")

    # Packed layout and the block mask.
    layout = pe.PackedLayout(4, 2, 1)
    assert layout.length == 6
    assert layout.judgment_positions == [4, 5]
    assert layout.mask_visible(4, 0) and not layout.mask_visible(4, 2)
    assert not layout.mask_visible(5, 4)  # suffix copies never see each other
    dense = layout.dense_mask()
    assert len(dense) == 6 and dense[4][4] and not dense[1][4]
    descriptors = layout.block_descriptors()
    assert descriptors[0][0] == (0, 4)
    assert descriptors[1] == ((4, 5), [(0, 2)])
    assert descriptors[2] == ((5, 6), [(0, 4)])
    assert all(json.loads(line) for line in layout.debug_dump().splitlines())
    ok("PackedLayout length, mask, descriptors, dump")

    # Cost model: 25% acceptance at a 4x draft is the breakeven point.
    approx(pe.estimate_speedup(400, 300, 0, 4.0, 400, 0.0), 1.0)
    approx(pe.estimate_speedup(400, 0, 0, 4.0, 400, 0.0), 4.0)
    ok("cost-model breakeven and full-acceptance endpoints")

    # Shipped profiles.
    qwen = pe.profile("qwen")
    assert qwen["delta"] == 40 and qwen["tau_full"] == 0.998
    glm = pe.profile("glm")
    assert glm["tau_full"] == 0.95 and glm["rho_premature"] == 0.30
    ok("profiles qwen/glm expose the published values")

    # Seeded reference decoder: deterministic, prefix-consistent.
    dec = pe.RefDecoder(seed=42)
    out8 = dec.greedy_decode([1, 2, 3], 8)
    assert out8 == [11, 36, 36, 36, 35, 44, 38, 35], out8
    assert dec.greedy_decode([1, 2, 3], 3) == out8[:3]
    logits = dec.forward_causal([1, 2, 3])
    assert len(logits) == 3 and len(logits[0]) == 64
    ok("RefDecoder pinned decode and forward shapes")

    # Packed-vs-sequential oracle through the bindings.
    passed, detail = pe.oracle_sweep(cases=15, seed=9)
    assert passed, detail
    ok(f"oracle_sweep: {detail}")

    # Scripted fixture end to end.
    fixture = REPO / "crates" / "cli" / "fixtures" / "scripted_small.jsonl"
    result = json.loads(pe.run_fixture(str(fixture), "qwen", "parse"))
    labels = [r["label"] for r in result["requests"]]
    assert labels == ["Sm", "Sm+Lg", "Lg"], labels
    agg = result["aggregate"]
    assert (agg["from_draft"], agg["mixed"], agg["from_target"]) == (1, 1, 1)
    assert agg["failures"] == 0
    ok("run_fixture: labels Sm / Sm+Lg / Lg with zero failures")

    print(f"\nsmoke test passed ({checks} checks)")


if __name__ == "__main__":
    main()
