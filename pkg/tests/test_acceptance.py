"""Acceptance suite: nine end-to-end criteria at their stated tolerances.

Each test records a one-line verdict in ``RESULTS``; ``conftest.py`` prints
them after the run, and ``python tests/test_acceptance.py`` prints them
directly.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from ela.attention import PARAM_NAMES, AttentionMode, LayerStack, backward, ela_forward, forward, mrla_b_forward
from ela.cli import cmd_analyze, cmd_train
from ela.config import RunConfig
from ela.divergence import padded_adjacent_kl
from ela.mapping import MapperConfig, MapperKind, ebqm
from ela.pruning import AttentionTrace, PruneMask, StageSchedule, flop_estimate, run_schedule
from ela.report import read_rows
from ela.special import BetaParams, ExpParams, GammaParams, beta_cdf, exp_cdf, gamma_cdf
from ela.synthetic import simulate_trace
from ela.traceio import TraceRecord, read_trace, write_trace
from ela.training import make_dataset, predict_labels, train_toy
from oracles import (
    binomial_beta_cdf,
    ebqm_by_hand,
    erlang_cdf,
    kl_loop,
    masked_attention_loop,
    padded_kl_loop,
    quad_beta_cdf,
)

RESULTS: dict[int, str] = {}


def verdict(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------


def test_criterion_1_special_function_oracles():
    t0 = time.perf_counter()
    grid = [((i + 0.5) / 200, 1 + i % 8, 1 + (i // 8) % 8) for i in range(200)]
    err_bin = max(abs(beta_cdf(x, a, b) - binomial_beta_cdf(x, a, b)) for x, a, b in grid)
    rng = np.random.default_rng(1)
    frac = [(rng.uniform(0.02, 0.98), rng.uniform(0.2, 8), rng.uniform(0.2, 8)) for _ in range(25)]
    err_quad = max(abs(beta_cdf(x, a, b) - quad_beta_cdf(x, a, b)) for x, a, b in frac)
    err_erl = max(
        abs(gamma_cdf(x, k, s) - erlang_cdf(x, k, s))
        for k in range(1, 11) for s in (0.5, 1.0, 2.0) for x in np.linspace(0, 25, 21)
    )
    elapsed = time.perf_counter() - t0
    ok = err_bin <= 1e-12 and err_quad <= 1e-10 and err_erl <= 1e-12 and elapsed < 5
    verdict(1, ok, f"binomial {err_bin:.1e} (<=1e-12), quadrature {err_quad:.1e} (<=1e-10), "
                   f"Erlang {err_erl:.1e} (<=1e-12), {elapsed:.2f}s (<5s)")


# -- 2 -------------------------------------------------------------------------


def test_criterion_2_kl_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    eps = 1e-10
    worst, min_val, worst_eps = 0.0, math.inf, 0.0
    for _ in range(1000):
        l = int(rng.integers(1, 33))
        conc = rng.choice([0.2, 1.0, 5.0])
        p = rng.dirichlet(np.full(l, conc))
        q = rng.dirichlet(np.full(l + 1, conc))
        p, q = np.maximum(p, 1e-12), np.maximum(q, 1e-12)
        p, q = p / p.sum(), q / q.sum()
        v = padded_adjacent_kl(p, q, eps)
        worst = max(worst, abs(v - padded_kl_loop(p, q, eps)))
        min_val = min(min_val, v)
        worst_eps = max(worst_eps, abs(v - kl_loop(p, q[:-1])))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and min_val >= 0 and worst_eps < 1e-8 and elapsed < 5
    verdict(2, ok, f"max |kl - oracle| {worst:.1e} (<=1e-12), min value {min_val:.2e} (>=0), "
                   f"max epsilon term {worst_eps:.1e} (<1e-8), {elapsed:.2f}s (<5s)")


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_ebqm_conformance():
    def cfg(a, b):
        return MapperConfig(MapperKind.EBQM, 0.5, BetaParams(a, b))

    examples = [
        (list(ebqm([0.1, 0.2, 0.3, 0.4], cfg(1, 1)).values), [0.0, 1.0, 1.0, 1.0]),
        # degenerate: every selected value is F(0.5); beta_cdf accuracy itself is criterion 1
        (list(ebqm([0.3, 0.3, 0.3], cfg(2, 5)).values), [beta_cdf(0.5, 2, 5)] * 3),
        (list(ebqm([0.05, 0.5], cfg(5, 1)).values), [0.03125, 1.0]),
    ]
    exact = all(got == want for got, want in examples) and abs(beta_cdf(0.5, 2, 5) - 57 / 64) <= 1e-15

    rng = np.random.default_rng(3)
    rank_ok = spread_ok = hand_ok = True
    for _ in range(500):
        n = int(rng.integers(6, 17))
        v = rng.gamma(rng.uniform(0.5, 3), size=n)
        s = ebqm(v, cfg(5, 1))
        sel = np.array(s.selected)
        order = sel[np.argsort(v[sel], kind="stable")]
        rank_ok &= bool(np.all(np.diff(s.values[order]) >= 0))
        hand_ok &= bool(np.allclose(s.values, ebqm_by_hand(v, 0.5, lambda x: x**5), atol=1e-13, rtol=0))

        # one low outlier plus a tight cluster forming the rest of the selected set
        k = math.ceil(n / 2)
        wide = rng.uniform(3.0, 10.0)
        centre = rng.uniform(1.0, 2.0)
        cluster = centre + rng.uniform(0, 0.02 * wide, size=k - 1)
        upper = rng.uniform(centre + 0.02 * wide + 0.1, wide, size=n - k - 1)
        series = rng.permutation(np.concatenate([[0.0], cluster, upper, [wide]]))
        out = ebqm(series, cfg(5, 1))
        idx = np.flatnonzero(np.isin(series, cluster))
        input_range = np.ptp(series[idx]) / np.ptp(series)
        spread_ok &= bool(input_range <= 0.02 and np.ptp(out.values[idx]) > input_range)
    ok = exact and rank_ok and spread_ok and hand_ok
    verdict(3, ok, f"examples exact={exact}, rank preserved={rank_ok}, spread={spread_ok}, "
                   f"hand traces={hand_ok} over 500 series")


# -- 4 -------------------------------------------------------------------------


def _random_stack(rng, max_L=6, max_d=16, **kw):
    L = int(rng.integers(1, max_L + 1))
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, max_d // heads + 1))
    s = LayerStack.init(L, d, heads, seed=int(rng.integers(1 << 30)), **kw)
    s.backbone_b[:] = rng.normal(scale=0.2, size=s.backbone_b.shape)
    return s


def _random_mask(rng, L):
    return PruneMask((1,) + tuple(int(b) for b in rng.integers(0, 2, size=L - 1)))


def test_criterion_4_pipeline_equivalence():
    rng = np.random.default_rng(4)
    worst_eq, worst_mask = 0.0, 0.0
    for _ in range(100):
        s = _random_stack(rng)
        x = rng.normal(size=(4, s.feature_dim))
        worst_eq = max(worst_eq, float(np.max(np.abs(ela_forward(s, x).final - mrla_b_forward(s, x).final))))
        s.mask = _random_mask(rng, s.layer_count)
        t = ela_forward(s, x)
        for row in range(2):
            oracle = masked_attention_loop(s, x[row], s.mask.bits)
            got = np.array([o[row] for o in t.outputs])
            worst_mask = max(worst_mask, float(np.max(np.abs(got - oracle))))
    ok = worst_eq <= 1e-12 and worst_mask <= 1e-10
    verdict(4, ok, f"ELA(all ones) vs MRLA-B {worst_eq:.1e} (<=1e-12), masked vs loop oracle "
                   f"{worst_mask:.1e} (<=1e-10) on 100 stacks")


# -- 5 -------------------------------------------------------------------------


def test_criterion_5_gradient_checks():
    rng = np.random.default_rng(5)
    worst = 0.0
    pruned_zero = True
    step = 1e-5
    for i in range(20):
        kind = ("ela_masked", "ela_tied", "mrla_b", "mrla_l")[i % 4]
        L = int(rng.integers(2, 5))
        heads = int(rng.choice([1, 2]))
        d = heads * int(rng.integers(2, 4))
        ties = {3: 2} if kind == "ela_tied" and L >= 3 else {}
        mode = AttentionMode.MRLA_L if kind == "mrla_l" else (
            AttentionMode.MRLA_B if kind == "mrla_b" else AttentionMode.ELA)
        s = LayerStack.init(L, d, heads, mode, seed=100 + i, tied_queries=ties)
        s.backbone_b[:] = rng.normal(scale=0.2, size=s.backbone_b.shape)
        s.lam[:] = rng.uniform(0.5, 1.5, size=s.lam.shape)
        if kind == "ela_masked":
            s.mask = PruneMask((1, 0) + tuple(int(b) for b in rng.integers(0, 2, size=L - 2)))
        x = rng.normal(size=(3, d))
        g = rng.normal(size=(3, d))
        grads = backward(s, forward(s, x), g)
        for name in PARAM_NAMES:
            arr = getattr(s, name)
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + step
                up = float(np.sum(forward(s, x).final * g))
                arr[idx] = old - step
                down = float(np.sum(forward(s, x).final * g))
                arr[idx] = old
                fd[idx] = (up - down) / (2 * step)
            denom = np.linalg.norm(fd) + np.linalg.norm(grads[name])
            rel = 0.0 if denom == 0 else float(np.linalg.norm(fd - grads[name]) / denom)
            worst = max(worst, rel)
        for l, b in enumerate(s.mask.bits):
            if not b:
                pruned_zero &= all(not grads[n][l].any() for n in ("wq", "wk", "wv"))
        for dst in ties:
            pruned_zero &= not grads["wq"][dst - 1].any()
    ok = worst <= 1e-4 and pruned_zero
    verdict(5, ok, f"worst relative error {worst:.1e} (<=1e-4) over all parameter classes on 20 stacks; "
                   f"pruned-path gradients exactly zero={pruned_zero}")


# -- 6 -------------------------------------------------------------------------


def _best_time(fn, repeats=15, inner=5):
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def test_criterion_6_cost_reduction():
    t0 = time.perf_counter()
    L, d = 16, 32
    trace = AttentionTrace(simulate_trace(L, 30, heads=2, redundant=(3, 5, 8, 11, 14), seed=6))
    mapper = MapperConfig(MapperKind.EBQM, 0.5, BetaParams(5, 1))
    schedule = StageSchedule.from_windows([(1, 3), (15, 17)], mapper, 0.3)
    mask = run_schedule(L, schedule, trace)[-1].mask
    pruned_frac = mask.pruned_count / L
    full, pruned = flop_estimate((L, d)), flop_estimate((L, d), mask)
    flop_cut = 1 - pruned[0] / full[0]

    stack = LayerStack.init(L, d, 2, seed=0)
    X = np.random.default_rng(0).normal(size=(256, d))
    base = _best_time(lambda: mrla_b_forward(stack, X))
    stack.mask = mask
    fast = _best_time(lambda: ela_forward(stack, X))
    time_cut = 1 - fast / base
    elapsed = time.perf_counter() - t0
    ok = pruned_frac >= 0.3 and flop_cut >= 0.3 and time_cut >= 0.2 and elapsed < 60
    verdict(6, ok, f"pruned {mask.pruned_count}/{L} retrievals ({pruned_frac:.0%}, >=30%), attention flops "
                   f"-{flop_cut:.1%} (>=30%), forward wall-clock -{time_cut:.1%} (>=20%), {elapsed:.1f}s (<60s)")


# -- 7 -------------------------------------------------------------------------


def _tied_run(seed, prune):
    X, y = make_dataset(3, 600, 8, noise=0.4, seed=seed)
    stack = LayerStack.init(6, 8, 2, AttentionMode.ELA, seed=seed, tied_queries={3: 2})
    mapper = MapperConfig(MapperKind.EBQM, 0.5, BetaParams(5, 1))
    sched = StageSchedule.from_windows([(1, 3), (10, 12), (20, 22)], mapper, 0.3) if prune else None
    report, readout = train_toy(stack, X[200:], y[200:], sched, epochs=30, lr=0.3, seed=seed)
    return report, float(np.mean(predict_labels(stack, readout, X[:200]) == y[:200]))


def test_criterion_7_tied_construction():
    pruned_ok = monotone = True
    gaps, accs = [], []
    for seed in range(5):
        report, acc = _tied_run(seed, True)
        _, base = _tied_run(seed, False)
        masks = report.stage_masks()
        pruned_ok &= masks[0][2] == 0
        monotone &= all(all(a >= b for a, b in zip(m1, m2)) for m1, m2 in zip(masks, masks[1:]))
        gaps.append(acc - base)
        accs.append((acc, base))
    acc_ok = min(gaps) >= -0.02
    ok = pruned_ok and monotone and acc_ok
    pairs = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in accs)
    verdict(7, ok, f"layer 3 pruned in stage 1 on all seeds={pruned_ok}, masks monotone={monotone}, "
                   f"pruned/unpruned accuracy {pairs}; worst gap {min(gaps) * 100:+.1f}pp (>=-2pp)")


# -- 8 -------------------------------------------------------------------------


def _hand_scores(a, kind, tau, k):
    n = len(a)
    lo, hi = min(a), max(a)
    if kind == "raw":
        norm = [(x - lo) / (hi - lo) for x in a]
        return norm, {i for i in range(n) if norm[i] < tau}
    if kind == "fixed":
        order = sorted(range(n), key=lambda i: (a[i], i))[:k]
        return [0.0 if i in order else 1.0 for i in range(n)], set(order)
    cdf = {
        "ebqm": lambda x: x**5,                       # I_x(5, 1)
        "gqm": lambda x: 1 - math.exp(-x / 0.5) * (1 + x / 0.5),   # Erlang k=2, scale 0.5
        "eqm": lambda x: 1 - math.exp(-2 * x),
    }[kind]
    scores = ebqm_by_hand(a, 0.5, cdf)
    q = sorted(a)[math.ceil(0.5 * n) - 1]
    return scores, {i for i in range(n) if a[i] <= q}


def test_criterion_8_ablation_parity(tmp_path):
    L, tau, k = 10, 0.3, 3
    path = tmp_path / "trace.jsonl"
    write_trace(simulate_trace(L, 3, redundant=(4, 7), seed=8), path)
    records = read_trace(path)
    # hand divergences: per-epoch padded KL over consecutive layers, then the epoch mean
    per_epoch = []
    for e in (1, 2, 3):
        w = {r.layer_index: r.weights for r in records if r.epoch == e}
        per_epoch.append([padded_kl_loop(w[l], w[l + 1], 1e-10) for l in range(1, L)])
    a = [sum(col) / 3 for col in zip(*per_epoch)]

    mappers = {
        "ebqm": {"kind": "ebqm", "alpha": 5, "beta": 1},
        "gqm": {"kind": "gqm", "alpha": 2, "beta": 0.5},
        "eqm": {"kind": "eqm", "rate": 2},
        "raw": {"kind": "raw"},
        "fixed": {"kind": "fixed", "fixed_k": k},
    }
    problems = []
    for name, m in mappers.items():
        cfg = RunConfig.from_dict({"mode": "analyze", "trace": str(path), "out": str(tmp_path / name),
                                   "windows": [[1, 3]], "tau": tau, "mapper": m})
        cmd_analyze(cfg)
        rows = read_rows(tmp_path / name / "report.csv")
        got_sel = {i for i, r in enumerate(rows) if r["selected"] == "1"}
        got_scores = [float(r["score"]) for r in rows]
        got_div = [float(r["divergence"]) for r in rows]
        want_scores, want_sel = _hand_scores(a, name, tau, k)
        if max(abs(x - y) for x, y in zip(got_div, a)) > 1e-12:
            problems.append(f"{name}: divergences")
        if got_sel != want_sel:
            problems.append(f"{name}: selected {sorted(got_sel)} != {sorted(want_sel)}")
        if max(abs(x - y) for x, y in zip(got_scores, want_scores)) > 1e-12:
            problems.append(f"{name}: scores")
        if name == "fixed" and len(got_sel) != k:
            problems.append("fixed: wrong count")
        mask_bits = [int(r["mask_bit"]) for r in rows]
        if mask_bits != [int(s >= tau) for s in got_scores]:
            problems.append(f"{name}: mask bits")
    verdict(8, not problems, "five mapper reports match hand computation on a 10-layer trace"
            if not problems else "; ".join(problems))


# -- 9 -------------------------------------------------------------------------


def _fuzz_records(rng, count):
    """``count`` valid records over unique (epoch, layer, head) keys."""
    recs = []
    for i in range(count):
        epoch, rest = divmod(i, 96)
        l, head = rest // 4 + 1, rest % 4
        style = int(rng.integers(4))
        if style == 0:
            w = rng.dirichlet(np.full(l, 0.05))       # very peaked, tiny entries
        elif style == 1:
            w = np.zeros(l)
            w[int(rng.integers(l))] = 1.0              # exact zeros
        elif style == 2:
            w = np.full(l, 1.0 / l)
        else:
            w = rng.dirichlet(np.ones(l))
        recs.append(TraceRecord(epoch + 1, l, head, tuple(float(x) for x in w)))
    return recs


def test_criterion_9_determinism_and_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    corpus = _fuzz_records(rng, 10_000)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trace(corpus, p1)
    back = read_trace(p1)
    write_trace(back, p2)
    roundtrip = back == corpus and p1.read_bytes() == p2.read_bytes()

    trace = tmp_path / "sim.jsonl"
    write_trace(simulate_trace(8, 12, heads=2, redundant=(3,), seed=1), trace)
    identical = True
    for mode in ("analyze", "train"):
        outs = []
        for run in ("r1", "r2"):
            cfg = RunConfig(mode=mode, trace=str(trace), out=str(tmp_path / mode / run), windows=((1, 3), (8, 10)),
                            epochs=12, layers=5, heads=2, tied_queries=((3, 2),), n_samples=300, seed=3,
                            plots=True)
            paths = (cmd_analyze if mode == "analyze" else cmd_train)(cfg)
            outs.append({p.name: p.read_bytes() for p in paths})
        identical &= outs[0] == outs[1]
    ok = roundtrip and identical and len(corpus) == 10_000
    verdict(9, ok, f"{len(corpus)}-record fuzz corpus round-trips exactly={roundtrip}; "
                   f"repeated analyze/train runs byte-identical={identical}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
