"""Exhaustive checks over a generated saga corpus.

    python3 scripts/corpus_checks.py --n 500 --seed 0 --restarts 2

Prints one JSON report per check: deadlock freedom (k=0), the atomicity
dichotomy and bounded termination (k up to --restarts), projection
bisimulation and restart pruning.
"""

import argparse
import json

from chorsaga import experiments as X
from chorsaga.generator import corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=X.CORPUS_SIZE)
    ap.add_argument("--seed", type=int, default=X.CORPUS_SEED)
    ap.add_argument("--restarts", type=int, default=2)
    ap.add_argument("--fail-rate", type=float, default=0.3)
    ap.add_argument("--depth", type=int, default=50, help="bisimulation depth bound")
    args = ap.parse_args()

    sagas = corpus(args.n, seed=args.seed, fail_rate=args.fail_rate, **X.SCOPE)
    out = {"deadlock": X.deadlock_freedom(sagas)}
    reps = X.explore_budget(sagas, k=args.restarts)
    out["atomicity"] = X.atomicity(reps)
    out["termination"] = X.bounded_termination(reps, k=args.restarts)
    out["bisimulation"] = X.bisimulation(sagas, depth=args.depth)
    out["recovery"] = X.recovery(sagas)
    for name, rep in out.items():
        print(json.dumps({"check": name, **rep}, default=str))
    raise SystemExit(0 if all(r["ok"] for r in out.values()) else 1)


if __name__ == "__main__":
    main()
