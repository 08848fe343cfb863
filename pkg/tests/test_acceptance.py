"""Acceptance criteria 1 to 10. Each test appends one PASS/FAIL line that is
printed in the terminal summary; the assertion then fails the test if needed.

Run just this file with ``pytest tests/test_acceptance.py -v``.
"""

import math
import random
import time

import numpy as np

import conftest
from oracles import brute_force_patterns, fuzz_trace
from reference import PATTERNS, READ_FROM
from twoam.analytics import (
    ModelParams,
    QuadratureSpec,
    mc_balls_into_bins,
    p_r_neq_w,
    p_rprime_neq_w_given,
    table_row,
)
from twoam.checker import (
    detect_cp,
    detect_rwp,
    pattern_stats,
    staleness_histogram,
    verify_2atomicity,
    verify_atomicity,
)
from twoam.cli import main
from twoam.simnet import Deterministic, Exponential, UniformAsync
from twoam.workload import WorkloadConfig, run_abstract, run_experiment

QUAD = QuadratureSpec(abs_tol=1e-9)
SAFETY_SEEDS = range(10)
# N = n = 5: four readers at 25,000 reads each gives 10^5 reads per run
SAFETY_WORKLOAD = WorkloadConfig(clients=5, rate=50, ops_per_client=25_000)


def record(k: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}")


def rel(a: float, b: float) -> float:
    return abs(a - b) / abs(b) if b else abs(a)


def test_criterion_1_table2():
    t0 = time.perf_counter()
    worst = 0.0
    for n in range(2, 16):
        p = ModelParams(n, n)
        worst = max(worst, rel(p_r_neq_w(p), READ_FROM[n][0]))
        if n > 2:  # the n = 2 cell disagrees with the model, see test_analytics
            worst = max(worst, rel(1 - p_rprime_neq_w_given(p, QUAD), READ_FROM[n][1]))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and dt < 10
    record(1, ok, f"max rel err {worst:.2e} (n=2 second column excluded), {dt:.2f}s")
    assert ok


def test_criterion_2_table3():
    t0 = time.perf_counter()
    worst = 0.0
    for n in range(2, 16):
        row = table_row(ModelParams(n, n), QUAD)
        for col, ref in zip(("p_cp", "p_rwp_given_cp", "p_oni"), PATTERNS[n]):
            if ref == 0:
                assert row[col] == 0
            else:
                worst = max(worst, rel(row[col], ref))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and dt < 30
    record(2, ok, f"max rel err {worst:.2e}, {dt:.2f}s")
    assert ok


def test_criterion_3_monte_carlo():
    t0 = time.perf_counter()
    parts = []
    ok = True
    for n in (3, 5, 7):
        p = ModelParams(n, n)
        for role, exact in (("r_vs_w", p_r_neq_w(p)), ("rprime_vs_w", p_rprime_neq_w_given(p))):
            est = mc_balls_into_bins(p, role, 10**6, seed=1000 + n)
            z = abs(est.p - exact) / est.stderr if est.stderr else float("inf")
            ok &= est.agrees(exact, k=3)
            parts.append(f"n={n} {role} z={z:.2f}")
    dt = time.perf_counter() - t0
    ok = ok and dt < 60
    record(3, ok, f"{'; '.join(parts)}; {dt:.1f}s")
    assert ok


def _safety_runs(protocol):
    for seed in SAFETY_SEEDS:
        yield seed, run_experiment(SAFETY_WORKLOAD, UniformAsync(50), protocol, 5, seed=seed)


def test_criterion_4_two_atomicity():
    bad = []
    reads = 0
    support = set()
    for seed, tr in _safety_runs("2AM"):
        reads += tr.n_reads
        res = verify_2atomicity(tr)
        hist = staleness_histogram(tr)
        support |= set(hist)
        if not res.ok or not set(hist) <= {0, 1}:
            bad.append(seed)
    ok = not bad and reads >= 10 * 10**5
    record(4, ok, f"{len(SAFETY_SEEDS)} seeds, {reads} reads, staleness support "
                  f"{sorted(support)}, failing seeds {bad}")
    assert ok


def test_criterion_5_abd_no_inversions():
    total = 0
    reads = 0
    not_atomic = []
    for seed, tr in _safety_runs("ABD"):
        reads += tr.n_reads
        rep = pattern_stats(tr)
        total += rep.rwps
        if not verify_atomicity(tr).ok:
            not_atomic.append(seed)
    ok = total == 0 and not not_atomic
    record(5, ok, f"{reads} reads, {total} old-new inversions, non-atomic seeds {not_atomic}")
    assert ok


# (replicas, async ms); N = n clients, lam = 50/s, 2*10^5 ops per client
RARITY_RUNS = [(3, 10), (5, 50), (5, 200)]


def test_criterion_6_rarity():
    parts = []
    ok = True
    for n, ms in RARITY_RUNS:
        wl = WorkloadConfig(clients=n, rate=50, ops_per_client=200_000)
        tr = run_experiment(wl, UniformAsync(ms), "2AM", n, seed=60 + n + ms)
        rep = pattern_stats(tr)
        ok &= rep.p_oni < 1e-3
        parts.append(f"n={n} async={ms}ms P(ONI)={rep.p_oni:.2e} ({rep.rwps}/{rep.reads})")
    record(6, ok, "; ".join(parts))
    assert ok


def _median_read_latency(tr):
    lat = (tr.response - tr.invoke)[~tr.is_write]
    return float(np.median(lat))


def test_criterion_7_latency():
    d = 0.01
    wl = WorkloadConfig(clients=4, rate=20, ops_per_client=500)
    m2 = _median_read_latency(run_experiment(wl, Deterministic(d), "2AM", 5, seed=1,
                                             processing=0.0))
    ma = _median_read_latency(run_experiment(wl, Deterministic(d), "ABD", 5, seed=1,
                                             processing=0.0))
    # response - invoke is a difference of absolute clock values, so "exact"
    # means equal up to rounding of those clocks
    exact = math.isclose(m2, 2 * d, abs_tol=1e-12) and math.isclose(ma, 4 * d, abs_tol=1e-12)
    wins = []
    for seed in range(5):
        for delays in (Exponential(20, 20), UniformAsync(50)):
            a = _median_read_latency(run_experiment(wl, delays, "2AM", 5, seed=seed))
            b = _median_read_latency(run_experiment(wl, delays, "ABD", 5, seed=seed))
            wins.append(a < b)
    ok = exact and all(wins)
    record(7, ok, f"deterministic medians 2AM={m2 * 1e3:g}ms ABD={ma * 1e3:g}ms (d=10ms); "
                  f"random runs where 2AM median < ABD median: {sum(wins)}/{len(wins)}")
    assert ok


def test_criterion_8_queueing_consistency():
    # 10 independent replays of 10^5 virtual seconds each, pooled
    target = 0.781222
    wl = WorkloadConfig(clients=5, rate=10, service_rate=10, horizon=1e5)
    rep = None
    for seed in range(10):
        r = pattern_stats(run_abstract(wl, seed=800 + seed))
        rep = r if rep is None else rep + r
    emp = rep.p_cp_given_concurrent
    ok = abs(emp - target) <= 0.05
    record(8, ok, f"P(CP | read concurrent with a write) = {emp:.4f} vs {target} "
                  f"(delta {emp - target:+.4f}, tolerance 0.05) over 1e6 virtual s, "
                  f"{rep.concurrent_reads} concurrent reads; unconditional P(CP) = {rep.p_cp:.4f}")
    assert ok


def test_criterion_9_checker_oracle():
    mismatches = []
    for seed in range(1000):
        tr = fuzz_trace(random.Random(90_000 + seed), 200)
        cps = detect_cp(tr)
        got = (tr.n_reads, len(cps), len(detect_rwp(tr, cps)))
        if got != brute_force_patterns(tr.ops):
            mismatches.append(seed)
    ok = not mismatches
    record(9, ok, f"1000 fuzzed traces, mismatching seeds {mismatches[:10]}")
    assert ok


def test_criterion_10_determinism(tmp_path):
    runs = {
        "2am": ["--protocol", "2AM", "--async-ms", "50", "--ops", "2000", "--crash", "s2@3"],
        "abd": ["--protocol", "ABD", "--delay-rate-read", "20", "--delay-rate-write", "20",
                "--ops", "2000", "--keys", "3"],
        "abstract": ["--mode", "abstract", "--rate", "10", "--service-rate", "10",
                     "--horizon", "500"],
    }
    same = []
    for name, args in runs.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{name}-{rep}"
            main(["simulate", "--seed", "42", *args, "--out", str(out)])
            outs.append(out)
        for f in ("trace.csv", "report.csv"):
            same.append((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes())
    for rep in ("a", "b"):
        main(["theory", "--out", str(tmp_path / f"theory-{rep}.csv")])
    same.append((tmp_path / "theory-a.csv").read_bytes() == (tmp_path / "theory-b.csv").read_bytes())
    ok = all(same)
    record(10, ok, f"{sum(same)}/{len(same)} file pairs byte-identical")
    assert ok
