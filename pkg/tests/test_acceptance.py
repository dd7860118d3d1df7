"""Acceptance criteria: one PASS/FAIL line per criterion, with its time limit.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` (or execute
this file).  The lines are printed as each criterion finishes and repeated in
the terminal summary.
"""

import asyncio
import sys
import time
from fractions import Fraction as F
from functools import lru_cache

import pytest

from chorsaga import experiments as X
from chorsaga import latency as L
from chorsaga.generator import corpus
from chorsaga.runtime.cluster import at_most_once_check, crash_sweep
from chorsaga.sim import FaultPolicy, run_random

RESULTS = []


def report(capsys, n, title, ok, seconds, limit, detail=""):
    within = seconds < limit
    line = (f"[criterion {n}] {'PASS' if ok and within else 'FAIL'}  {title}: "
            f"{detail} ({seconds:.1f}s, limit {limit:.0f}s)")
    RESULTS.append(line)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line
    assert within, line


@lru_cache(maxsize=None)
def base_corpus():
    return tuple(X.standard_corpus())


@lru_cache(maxsize=None)
def forced_corpus():
    # same seeds, but every transaction is drawn from the failing kinds
    return tuple(X.standard_corpus(fail_rate=1.0))


def test_criterion_1_deadlock_freedom(capsys):
    t0 = time.monotonic()
    rep = X.deadlock_freedom(base_corpus())
    report(capsys, 1, "deadlock freedom, 500 sagas, k=0", rep["ok"] and rep["checked"] == 500,
           time.monotonic() - t0, 60, f"{rep['checked']} explored, {rep['n_failures']} with deadlock")


@lru_cache(maxsize=None)
def k2_reports():
    t0 = time.monotonic()
    reps = X.explore_budget(base_corpus() + forced_corpus(), k=2)
    return reps, time.monotonic() - t0


def test_criterion_2_atomicity(capsys):
    reps, seconds = k2_reports()
    rep = X.atomicity(reps)
    report(capsys, 2, "atomicity dichotomy, k<=2, base and forced-failure corpora",
           rep["ok"] and rep["sagas_with_abort"] > 0, seconds + rep["seconds"], 300,
           f"{rep['checked']} explored, {rep['sagas_with_abort']} reach an abort, "
           f"{rep['n_failures']} violations")


def test_criterion_3_bisimulation(capsys):
    sagas = corpus(200, seed=3, **X.SCOPE)
    t0 = time.monotonic()
    rep = X.bisimulation(sagas, depth=50)
    report(capsys, 3, "projection bisimulation, depth 50, 200 sagas", rep["ok"] and rep["checked"] == 200,
           time.monotonic() - t0, 120,
           f"{rep['n_failures']} counterexamples, {rep['with_strict_pairs']} needed branch pruning")


def test_criterion_4_recovery(capsys):
    sagas = corpus(200, seed=4, **X.SCOPE)
    t0 = time.monotonic()
    rep = X.recovery(sagas, budgets=(1, 2, 3), seed=0)
    report(capsys, 4, "restart pruning, 200 traces, k in {1,2,3}", rep["ok"] and rep["checked"] == 200,
           time.monotonic() - t0, 120,
           f"pruned per k {rep['pruned_per_k']}, {rep['n_failures']} failures")


def test_criterion_5_bounded_termination(capsys):
    reps, seconds = k2_reports()
    rep = X.bounded_termination(reps, k=2)
    report(capsys, 5, "bounded termination, k<=2", rep["ok"], seconds + rep["seconds"], 300,
           f"longest path per k {rep['longest_path']}, max states {rep['max_states']}, "
           f"{rep['n_failures']} inconclusive")


def test_criterion_6_latency(capsys):
    t0 = time.monotonic()
    bad = []
    t1, t2, t3 = F(1, 10), F(10), F(25)
    chain = L.chain_topology(t1, t2)
    want = {L.ORCHESTRATION: 6 * t2, L.DECENTRALIZED: 6 * t1 + 3 * t2}
    for pattern, expected in want.items():
        trace = run_random(L.pattern_saga(pattern, 2), FaultPolicy(), 0)
        if L.simulate_latency(trace, chain) != expected:
            bad.append(("chain", pattern))
    for n in range(1, 10):
        topo = L.microbenchmark_topology(n, t1, t2, t3)
        want = {L.ORCHESTRATION: 2 * t2 + 2 * n * t3,
                L.DECENTRALIZED: 2 * (n + 1) * t1 + (n - 1) * t2 + 2 * t2}
        for pattern, expected in want.items():
            for seed in (0, 1):
                trace = run_random(L.pattern_saga(pattern, n), FaultPolicy(), seed)
                if L.simulate_latency(trace, topo) != expected:
                    bad.append((n, pattern, seed))
    star = L.crossover_t2(t1)
    if star is None:
        bad.append("no crossover")
    else:
        # chain with t3 = t2: 6 t2 against 6 t1 + 3 t2
        for t in (star + F(1, 1000), star * 3 + 1):
            if not 6 * t1 + 3 * t < 6 * t:
                bad.append(("crossover", t))
        if not 6 * t1 + 3 * (star / 2) > 6 * (star / 2):
            bad.append(("crossover below", star))
    report(capsys, 6, "latency model, exact on chain and n=1..9", not bad, time.monotonic() - t0, 60,
           f"crossover t2* = {star} ms at t1 = 0.1 ms, {len(bad)} mismatches")


def test_criterion_7_crash_sweep(capsys, tmp_path):
    t0 = time.monotonic()
    runs = asyncio.run(crash_sweep(str(tmp_path)))
    kills = [r for r in runs if r.kill_after >= 0]
    bad = [r for r in runs if r.violations]
    ok = not bad and len(kills) >= 30 and sum(r.killed for r in kills) >= 30
    detail = f"{len(kills)} kill points ({sum(r.killed for r in kills)} fired), {len(bad)} violating runs"
    if bad:
        detail += f"; first: {bad[0].victim}@{bad[0].kill_after} order {bad[0].order}: {bad[0].violations[:2]}"
    report(capsys, 7, "runtime all-or-nothing under crash injection", ok, time.monotonic() - t0, 180, detail)


def test_criterion_8_at_most_once(capsys, tmp_path):
    t0 = time.monotonic()
    rep = asyncio.run(at_most_once_check(str(tmp_path), n_sessions=100))
    detail = (f"{rep.get('completed')}/100 completed beside a stalled session, stalled then "
              f"{rep.get('stalled_status_after')}, lossy run {rep.get('lossy_completed')} completed "
              f"{rep.get('lossy_expired')} expired, violations {rep['violations'][:2]}")
    report(capsys, 8, "at-most-once mode behind a lossy proxy", rep["ok"], time.monotonic() - t0, 60, detail)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
