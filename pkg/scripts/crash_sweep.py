"""Kill each warehouse-saga node at every protocol step, reboot it, check the outcome.

    python3 scripts/crash_sweep.py --workdir /tmp/sweep [--no-fsync]

One line per run, then a summary.  Exit status 1 if any run violates
all-or-nothing or exactly-once effects.
"""

import argparse
import asyncio
import json
import tempfile
import time

from chorsaga.runtime.cluster import crash_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", help="where node logs go (default: a temporary directory)")
    ap.add_argument("--no-fsync", action="store_true")
    ap.add_argument("--orders", type=int, nargs="*", help="order amounts (default: one per outcome)")
    args = ap.parse_args()

    def show(run):
        status = "ok " if not run.violations else "BAD"
        print(f"{status} {run.victim:9} kill@{run.kill_after:<3} order {run.order:<4} "
              f"{'killed' if run.killed else 'ran out'} {run.seconds:.2f}s {run.violations[:1]}", flush=True)

    kw = {"fsync": not args.no_fsync, "on_run": show}
    if args.orders:
        kw["orders"] = tuple(args.orders)
    t0 = time.monotonic()
    with tempfile.TemporaryDirectory() as tmp:
        runs = asyncio.run(crash_sweep(args.workdir or tmp, **kw))
    bad = [r for r in runs if r.violations]
    print(json.dumps({"runs": len(runs), "kill_points": sum(r.kill_after >= 0 for r in runs),
                      "violations": len(bad), "seconds": round(time.monotonic() - t0, 2)}))
    raise SystemExit(1 if bad else 0)


if __name__ == "__main__":
    main()
