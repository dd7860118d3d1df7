"""Simulated against predicted end-to-end latency for both communication patterns.

    python3 scripts/latency_table.py --t1 0.1 --t2 10 --t3 10 --max-workers 9

Durations are exact fractions of whatever unit the inputs use (ms below).
"""

import argparse
from fractions import Fraction

from chorsaga import experiments as X


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--t1", type=Fraction, default=Fraction("0.1"))
    ap.add_argument("--t2", type=Fraction, default=Fraction(10))
    ap.add_argument("--t3", type=Fraction, default=Fraction(10))
    ap.add_argument("--max-workers", type=int, default=9)
    args = ap.parse_args()

    rep = X.latency_table(args.t1, args.t2, args.t3, range(1, args.max_workers + 1))
    print(f"{'case':8} {'pattern':14} {'simulated':>12} {'predicted':>12}")
    for r in rep["rows"]:
        sim, pred = Fraction(r["simulated"]), Fraction(r["predicted"])
        mark = "" if sim == pred else "  MISMATCH"
        print(f"{r['case']:8} {r['pattern']:14} {float(sim):12.3f} {float(pred):12.3f}{mark}")
    print(f"crossover: decentralized wins for t2 > {rep['crossover_t2']} (t1 = {args.t1}, t3 = t2)")
    raise SystemExit(0 if rep["ok"] else 1)


if __name__ == "__main__":
    main()
