"""Acceptance gate.  One test per criterion; each prints a single PASS/FAIL
line with the measured quantities, then asserts at the stated tolerance."""
import json
import math
import time

import numpy as np
import pytest

from opcflow import pipeline as pipeline_mod
from opcflow import shift as shift_mod
from opcflow.embedding import SupConConfig, embed, supcon_loss
from opcflow.ilt import IltConfig, ilt_gradient, optimize
from opcflow.library import DEFAULT_SIGMA, HnswParams, PatternLibrary, bench_matching, random_unit_vectors
from opcflow.litho import default_model, litho, roll2d
from opcflow.pipeline import PipelineConfig, run_pipeline, strip_timings
from opcflow.selector import binary_loss, binary_loss_grad, softmax_loss, softmax_loss_grad
from opcflow.shift import calibrate_and_verify, cross_correlate, estimate_shift
from opcflow.synth import random_shift, rect_pattern, via_pattern

from conftest import repeated_layout
from test_embedding import supcon_reference, unit
from test_ilt import fd_gradient, rel_error
from test_shift import direct_correlation

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(num, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {detail}")
        return ok
    return emit


def corpus_pattern(rng, i, size=256):
    return via_pattern(rng, size) if i % 2 else rect_pattern(rng, size)


def test_criterion_1_shift_equivariance(verdict, model):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0
    for i in range(100):
        if i % 2:
            mask = (rng.random((256, 256)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
        else:
            mask = rect_pattern(rng, 256, count=int(rng.integers(1, 9)))
        dx, dy = (int(v) for v in rng.integers(-255, 256, 2))
        diff = np.count_nonzero(litho(roll2d(mask, dx, dy), model) != roll2d(litho(mask, model), dx, dy))
        worst = max(worst, diff)
    elapsed = time.perf_counter() - t0
    ok = verdict(1, worst == 0 and elapsed < 30, f"max differing pixels {worst} over 100 masks, {elapsed:.1f} s")
    assert ok


def test_criterion_2_shift_recovery(verdict):
    rng = np.random.default_rng(202)
    exact = 0
    for i in range(100):
        p = corpus_pattern(rng, i)
        dx, dy = random_shift(rng, 64)
        s = estimate_shift(p, roll2d(p, dx, dy))
        exact += (s.dx, s.dy) == (dx, dy)
    worst = 0.0
    for _ in range(5):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        ref = direct_correlation(a, b)
        worst = max(worst, float(np.max(np.abs(cross_correlate(a, b) - ref)) / np.max(np.abs(ref))))
    ok = verdict(2, exact == 100 and worst <= 1e-6,
                 f"{exact}/100 exact shifts, FFT vs direct relative error {worst:.2e}")
    assert ok


def test_criterion_3_reuse_fidelity(verdict, model):
    rng = np.random.default_rng(303)
    cases = []
    for i in range(3):
        lib_pat = via_pattern(rng, 256, count=5)
        res = optimize(lib_pat, model, IltConfig(), with_pvband=False)
        for _ in range(2):
            dx, dy = random_shift(rng, 64)
            cal = calibrate_and_verify(roll2d(lib_pat, dx, dy), lib_pat, res.mask, model,
                                       reference_epe=res.epe_count)
            cases.append((res.epe_count, cal.epe_after.violations, cal.refinement_iters, cal.verified))
    ok = all(a == b and r == 0 and v for a, b, r, v in cases)
    verdict(3, ok, "(reference EPE, reused EPE, refinement iters) = "
            + ", ".join(f"({a},{b},{r})" for a, b, r, _ in cases))
    assert ok


def _record_loss_histories(monkeypatch):
    seen = []

    def recording(*args, **kwargs):
        res = optimize(*args, **kwargs)
        seen.append(res.loss_history)
        return res

    monkeypatch.setattr(pipeline_mod, "optimize", recording)
    monkeypatch.setattr(shift_mod, "optimize", recording)
    return seen


def non_increasing(history):
    return all(b <= a for a, b in zip(history, history[1:]))


def test_criterion_4_warm_start_speedup(verdict, tmp_path, monkeypatch):
    histories = _record_loss_histories(monkeypatch)
    repeated_layout(tmp_path / "suite.json", copies=10, seed=5)
    t0 = time.perf_counter()
    on = run_pipeline(PipelineConfig.from_dict({"layout": "suite.json"}, tmp_path))
    off = run_pipeline(PipelineConfig.from_dict({"layout": "suite.json", "library": {"enabled": False}}, tmp_path))
    elapsed = time.perf_counter() - t0
    it_on, it_off = on.aggregate["total_ilt_iters"], off.aggregate["total_ilt_iters"]
    ratio = it_on / it_off
    monotone = all(non_increasing(h) for h in histories)
    outcomes = [r["library_outcome"] for r in on.records]
    ok = ratio <= 0.20 and elapsed < 600 and monotone
    verdict(4, ok, f"ILT iterations {it_on} with library vs {it_off} without (ratio {ratio:.3f}), "
            f"{outcomes.count('matched')}/9 repeats matched, {elapsed:.1f} s, "
            f"loss non-increasing on {len(histories)} solver runs: {monotone}")
    assert ok


def test_criterion_5_ilt_gradient(verdict, model):
    tiny = default_model(K=2, base_sigma_px=2.0, size=7)
    cfg = IltConfig()  # default beta
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        theta = rng.normal(scale=0.5, size=(12, 12))
        target = (rng.random((12, 12)) < 0.5).astype(float)
        # h balances O(h^2) truncation against roundoff in the loss difference
        fd = fd_gradient(theta, target, tiny, cfg, h=1e-4)
        worst = max(worst, rel_error(ilt_gradient(theta, target, tiny, cfg), fd))
    rng = np.random.default_rng(55)
    runs = [optimize(via_pattern(rng, 256, count=4), model, with_pvband=False) for _ in range(3)]
    monotone = all(non_increasing(r.loss_history) for r in runs)
    ok = worst <= 1e-4 and monotone
    verdict(5, ok, f"max relative gradient error {worst:.2e} on 20 instances, "
            f"loss non-increasing on {len(runs)} optimizer runs: {monotone}")
    assert ok


@pytest.mark.slow
def test_criterion_6_library_quality(verdict):
    bench = bench_matching(n=2000, dim=256, queries=200, seed=0)
    rng = np.random.default_rng(6)
    lib = PatternLibrary(32, HnswParams(seed=6))
    for v in random_unit_vectors(1000, 32, rng):
        lib.insert(v)
    audit = lib.audit()
    big = bench_matching(n=10000, dim=256, queries=50, seed=1)
    budget = 0.05 * 10000
    ok_recall = bench["recall_at_1"] >= 0.95
    ok_count = big["mean_distance_computations"] <= budget
    ok = ok_recall and audit["ok"] and ok_count
    verdict(6, ok, f"recall@1 {bench['recall_at_1']:.3f} at N=2000; audit ok {audit['ok']} after 1000 inserts; "
            f"mean distance computations {big['mean_distance_computations']:.0f} at N=10000 "
            f"(budget {budget:.0f}, recall there {big['recall_at_1']:.2f})")
    assert ok


def test_criterion_7_embedding(verdict):
    rng = np.random.default_rng(707)
    worst = 0.0
    for i in range(100):
        p = corpus_pattern(rng, i)
        dx, dy = (int(v) for v in rng.integers(-255, 256, 2))
        worst = max(worst, float(np.max(np.abs(embed(roll2d(p, dx, dy)) - embed(p)))))
    vecs, labels = [], []
    for i in range(50):
        p = corpus_pattern(rng, i)
        vecs.append(embed(p))
        labels.append(i)
        for _ in range(10):
            vecs.append(embed(roll2d(p, *random_shift(rng, 128))))
            labels.append(i)
    V, L = np.array(vecs), np.array(labels)
    D = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * V @ V.T))
    iu = np.triu_indices(len(V), 1)
    same = L[iu[0]] == L[iu[1]]
    d = D[iu]
    gap_lo, gap_hi = float(d[same].max()), float(d[~same].min())
    pred = d < DEFAULT_SIGMA
    tp = np.count_nonzero(pred & same)
    precision = tp / max(1, np.count_nonzero(pred))
    recall = tp / np.count_nonzero(same)
    ok = worst <= 1e-6 and precision == 1.0 and recall == 1.0 and gap_lo < DEFAULT_SIGMA < gap_hi
    verdict(7, ok, f"max component change {worst:.1e}; same-pattern max {gap_lo:.1e} < sigma {DEFAULT_SIGMA} "
            f"< distinct min {gap_hi:.3f}; precision {precision:.3f} recall {recall:.3f}")
    assert ok


def test_criterion_8_formula_oracles(verdict):
    rng = np.random.default_rng(808)
    z = rng.normal(size=(16, 8))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    lab = np.repeat(np.arange(4), 4)
    sup_err = max(abs(supcon_loss(z, lab, SupConConfig(t)) - supcon_reference(z, lab, t)) for t in (0.07, 0.5, 1.0))
    e, x, y = unit([1, 0]), unit([1, 0]), unit([0, 1])
    c1 = abs(supcon_loss([e, e, e, e], [0, 0, 1, 1], SupConConfig(1.0)) - 4 * math.log(3))
    c2 = abs(supcon_loss([x, x, y, y], [0, 0, 1, 1], SupConConfig(1.0)) - 4 * math.log(1 + 2 / math.e))
    X = rng.normal(size=(12, 5))
    yb = rng.integers(0, 2, 12)
    yc = rng.integers(0, 4, 12)
    ce2 = abs(binary_loss(np.zeros(5), 0.0, X, yb) - math.log(2))
    ceC = abs(softmax_loss(np.zeros((4, 5)), np.zeros(4), X, yc) - math.log(4))

    def fd(f, x0, h=1e-6):
        g = np.zeros_like(x0)
        for idx in np.ndindex(x0.shape):
            a, b = x0.copy(), x0.copy()
            a[idx] += h
            b[idx] -= h
            g[idx] = (f(a) - f(b)) / (2 * h)
        return g

    w, b = rng.normal(size=5), 0.3
    _, gw, gb = binary_loss_grad(w, b, X, yb)
    W, bc = rng.normal(size=(4, 5)), rng.normal(size=4)
    _, gW, gbc = softmax_loss_grad(W, bc, X, yc)
    grad_err = max(
        np.max(np.abs(gw - fd(lambda v: binary_loss(v, b, X, yb), w))),
        abs(gb - fd(lambda v: binary_loss(w, v[0], X, yb), np.array([b]))[0]),
        np.max(np.abs(gW - fd(lambda v: softmax_loss(v, bc, X, yc), W))),
        np.max(np.abs(gbc - fd(lambda v: softmax_loss(W, v, X, yc), bc))),
    )
    ok = sup_err <= 1e-10 and max(c1, c2, ce2, ceC) <= 1e-12 and grad_err <= 1e-6
    verdict(8, ok, f"supcon vs loops {sup_err:.1e}; closed forms {max(c1, c2):.1e}; "
            f"CE ln2/lnC {max(ce2, ceC):.1e}; CE gradient vs FD {grad_err:.1e}")
    assert ok


def test_criterion_9_determinism(verdict, tmp_path):
    repeated_layout(tmp_path / "suite.json", copies=4, seed=9, vias=4)
    dumps = []
    for run in range(2):
        cfg = PipelineConfig.from_dict({"layout": "suite.json", "seed": 3,
                                        "library": {"path": f"lib{run}"}}, tmp_path)
        rep = run_pipeline(cfg)
        dumps.append(json.dumps(strip_timings({"records": rep.records, "aggregate": rep.aggregate}),
                                sort_keys=True))
    same = dumps[0] == dumps[1]
    verdict(9, same, f"two seeded runs give {'bit-identical' if same else 'DIFFERENT'} non-timing reports "
            f"({len(dumps[0])} bytes)")
    assert same
