"""At-most-once mode behind drop/duplicate/reorder proxies.

    python3 scripts/at_most_once.py --sessions 100 --seed 0 --deadline 1.0
"""

import argparse
import asyncio
import json
import tempfile

from chorsaga.runtime.cluster import at_most_once_check


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sessions", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--deadline", type=float, default=1.0, help="session deadline in seconds")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        rep = asyncio.run(at_most_once_check(tmp, args.sessions, args.seed, args.deadline))
    print(json.dumps(rep, indent=2, default=str))
    raise SystemExit(0 if rep["ok"] else 1)


if __name__ == "__main__":
    main()
