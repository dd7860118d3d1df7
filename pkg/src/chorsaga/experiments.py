"""Corpus-level checks shared by the acceptance tests and the scripts in ``scripts/``.

Each function returns a plain dict report with an ``ok`` flag, a count of
what was checked and the first few failures.
"""

from __future__ import annotations

import time
from fractions import Fraction

from . import latency as L
from .generator import corpus
from .sim import EXHAUSTIVE, FaultPolicy, check_bisimulation, explore_exhaustive, run_random
from .trace import cfg_congruent, prune_all, verify_prec_chain

CORPUS_SIZE = 500
CORPUS_SEED = 0
SCOPE = dict(n_procs=3, max_depth=8)


def standard_corpus(n: int = CORPUS_SIZE, seed: int = CORPUS_SEED, fail_rate: float = 0.3):
    return corpus(n, seed=seed, fail_rate=fail_rate, **SCOPE)


def _report(checked, failures, t0, **extra):
    return {"ok": not failures, "checked": checked, "failures": failures[:5],
            "n_failures": len(failures), "seconds": round(time.monotonic() - t0, 3), **extra}


def deadlock_freedom(sagas) -> dict:
    t0 = time.monotonic()
    bad = []
    for n, saga in enumerate(sagas):
        rep = explore_exhaustive(saga, FaultPolicy(max_restarts=0, mode=EXHAUSTIVE))
        if rep.deadlocked or rep.inconclusive or rep.errors:
            bad.append({"index": n, **rep.summary()})
    return _report(len(sagas), bad, t0)


def explore_budget(sagas, k: int = 2, state_bound: int = 500_000) -> list:
    """Exhaustive reports for every saga with restart budget ``k``."""
    return [explore_exhaustive(s, FaultPolicy(max_restarts=k, mode=EXHAUSTIVE), state_bound) for s in sagas]


def atomicity(reports) -> dict:
    """Every terminal state is all-done-uncompensated or all-compensated."""
    t0 = time.monotonic()
    bad = [{"index": n, **r.summary()} for n, r in enumerate(reports)
           if r.dichotomy_violations or r.deadlocked or r.errors or r.inconclusive]
    aborted = sum(any(not c.A for c in r.terminals) for r in reports)
    return _report(len(reports), bad, t0, sagas_with_abort=aborted)


def bounded_termination(reports, k: int = 2) -> dict:
    t0 = time.monotonic()
    bad = [{"index": n, **r.summary()} for n, r in enumerate(reports)
           if r.inconclusive or set(r.max_path_length) != set(range(k + 1))]
    longest = {b: max((r.max_path_length.get(b, 0) for r in reports), default=0) for b in range(k + 1)}
    states = max((r.states for r in reports), default=0)
    return _report(len(reports), bad, t0, longest_path=longest, max_states=states)


def bisimulation(sagas, depth: int = 50) -> dict:
    t0 = time.monotonic()
    bad = []
    strict = 0
    for n, saga in enumerate(sagas):
        rep = check_bisimulation(saga, depth)
        strict += rep.strict_pairs > 0
        if not rep.ok:
            bad.append({"index": n, "counterexample": rep.counterexample})
    return _report(len(sagas), bad, t0, with_strict_pairs=strict)


def recovery(sagas, budgets=(1, 2, 3), seed: int = 0) -> dict:
    """Random traces with exactly k restarts prune to restart-free ones."""
    t0 = time.monotonic()
    bad = []
    hist = {k: 0 for k in budgets}
    for n, saga in enumerate(sagas):
        k = budgets[n % len(budgets)]
        trace = run_random(saga, FaultPolicy(max_restarts=k, restart_rate=0.2, exact=True), seed + n)
        try:
            chain = prune_all(trace)
            ok = (trace.restart_count == k and chain[-1].restart_count == 0
                  and verify_prec_chain(chain) and cfg_congruent(chain[-1].final, trace.final)
                  and chain[-1].final.T == trace.final.T)
        except Exception as exc:  # report, keep going
            ok = False
            bad.append({"index": n, "k": k, "error": f"{type(exc).__name__}: {exc}"})
            continue
        if ok:
            hist[k] += 1
        else:
            bad.append({"index": n, "k": k, "labels": [str(mu) for mu in trace.labels]})
    return _report(len(sagas), bad, t0, pruned_per_k=hist)


def latency_table(t1=Fraction(1, 10), t2=Fraction(10), t3=Fraction(10), workers=range(1, 10), seed: int = 0) -> dict:
    """Simulated against predicted latency: the chain, then the n-worker pattern."""
    t0 = time.monotonic()
    rows, bad = [], []
    cases = [("chain", L.chain_topology(t1, t2), 2)]
    cases += [(f"n={n}", L.microbenchmark_topology(n, t1, t2, t3), n) for n in workers]
    for name, topo, n in cases:
        for pattern in L.PATTERNS:
            trace = run_random(L.pattern_saga(pattern, n), FaultPolicy(), seed)
            sim = L.simulate_latency(trace, topo)
            pred = L.predict_latency(pattern, topo, n)
            rows.append({"case": name, "pattern": pattern, "simulated": str(sim), "predicted": str(pred)})
            if sim != pred:
                bad.append(rows[-1])
    star = L.crossover_t2(t1)
    if star is None:
        bad.append({"crossover": None})
    return _report(len(rows), bad, t0, rows=rows, crossover_t2=None if star is None else str(star))
