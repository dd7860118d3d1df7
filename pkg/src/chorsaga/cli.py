"""Command-line entry point.

Machine-readable output goes to stdout as one JSON object per line;
diagnostics go to stderr.  Exit status: 0 success, 1 a check failed,
2 usage or input error.
"""

from __future__ import annotations

import argparse
import asyncio
import contextlib
import json
import logging
import os
import signal
import sys
from fractions import Fraction

from . import chor as C_
from . import dsl, latency, projection, sim, trace

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CHECKS = ("wellformed", "deadlock", "atomicity", "termination", "bisim", "recovery")
# older name of the atomicity check
ALIASES = {"dichotomy": "atomicity"}


class InputError(Exception):
    pass


def emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True, default=str), flush=True)


def diag(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None


def load_saga(path: str) -> C_.Saga:
    try:
        return dsl.parse_chor(_read(path), path)
    except dsl.DSLSyntaxError as exc:
        raise InputError(str(exc)) from None


def load_target(args):
    if getattr(args, "net", None):
        try:
            return dsl.parse_network(_read(args.net), args.net).initial()
        except dsl.DSLSyntaxError as exc:
            raise InputError(str(exc)) from None
    return load_saga(args.chor)


def _nonneg_fraction(s: str) -> Fraction:
    try:
        v = Fraction(s)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("latencies must be nonnegative")
    return v


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return v


# -- commands --------------------------------------------------------------------------------


def cmd_project(args) -> int:
    saga = load_saga(args.file)
    res = projection.project_all(saga.chor, saga.env.processes)
    if not res.ok:
        for d in res.diagnostics:
            diag(f"{args.file}: {d}")
        return EXIT_FAIL
    if args.text:
        sys.stdout.write(dsl.format_network(res.programs, saga.env))
        return EXIT_OK
    for p in sorted(res.programs):
        emit({"process": p, "program": dsl.format_network({p: res.programs[p]}).strip()})
    return EXIT_OK


def cmd_simulate(args) -> int:
    target = load_target(args)
    policy = sim.FaultPolicy(max_restarts=args.restarts, restart_rate=args.restart_rate,
                             exact=args.exact)
    try:
        tr = sim.run_random(target, policy, seed=args.seed, max_steps=args.max_steps)
    except ValueError as exc:
        diag(str(exc))
        return EXIT_FAIL
    except sim.KERNEL_ERRORS as exc:
        diag(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    for n, mu in enumerate(tr.labels):
        emit({"type": "step", "seq": n, "label": str(mu)})
    final = tr.final
    ok = sim.dichotomy_holds(final)
    emit({"type": "summary", "steps": len(tr), "restarts": tr.restart_count,
          "deadlocked": sim.N_.is_net_deadlocked(final), "dichotomy": ok,
          "active": sorted(final.A)})
    if args.trace_out:
        with open(args.trace_out, "w") as fh:
            trace.write_trace(tr, fh)
    return EXIT_OK if ok else EXIT_FAIL


def _recovery(saga, budget: int, scope: int) -> dict:
    """Prune seeded executions with exactly 1..budget restarts down to restart-free ones."""
    bad = []
    checked = 0
    for k in range(1, budget + 1):
        for seed in range(scope):
            t = sim.run_random(saga, sim.FaultPolicy(max_restarts=k, restart_rate=0.2, exact=True), seed)
            chain = trace.prune_all(t)
            checked += 1
            if not (chain[-1].restart_count == 0 and trace.verify_prec_chain(chain)
                    and trace.cfg_congruent(chain[-1].final, t.final) and chain[-1].final.T == t.final.T):
                bad.append({"k": k, "seed": seed})
    return {"ok": not bad, "traces": checked, "failures": bad[:5]}


def cmd_verify(args) -> int:
    saga = load_saga(args.chor)
    checks = CHECKS if "all" in args.check else tuple(dict.fromkeys(ALIASES.get(c, c) for c in args.check))
    proj = projection.check_projectability(saga.chor, saga.env.processes)
    if not proj.ok:
        for d in proj.diagnostics:
            diag(f"{args.chor}: {d}")
        emit({"check": "projectable", "ok": False, "diagnostics": proj.diagnostics})
        return EXIT_FAIL
    failed = False
    reports = {}

    def explore(k):
        if k not in reports:
            reports[k] = sim.explore_exhaustive(saga, sim.FaultPolicy(max_restarts=k, mode=sim.EXHAUSTIVE),
                                                state_bound=args.state_bound)
        return reports[k]

    for check in checks:
        if check == "wellformed":
            r = C_.check_chor_wellformed(saga.initial())
            rec = {"check": check, "ok": r.ok, "diagnostics": r.diagnostics}
        elif check == "deadlock":
            rep = explore(0)
            rec = {"check": check, "ok": rep.ok and not rep.deadlocked, **rep.summary()}
        elif check == "atomicity":
            rep = explore(args.restarts)
            rec = {"check": check, "ok": rep.ok, "restarts": args.restarts, **rep.summary()}
        elif check == "termination":
            rep = explore(args.restarts)
            rec = {"check": check, "ok": not rep.inconclusive and not rep.errors,
                   "restarts": args.restarts, **rep.summary()}
        elif check == "bisim":
            b = sim.check_bisimulation(saga, depth_bound=args.depth)
            rec = {"check": check, "ok": b.ok, "pairs": b.pairs, "depth": b.depth_reached,
                   "counterexample": b.counterexample}
        else:
            rec = {"check": check, "restarts": args.restarts, **_recovery(saga, args.restarts, args.scope)}
        failed |= not rec["ok"]
        if not rec["ok"]:
            diag(f"{args.chor}: check {check} failed")
        emit(rec)
    return EXIT_FAIL if failed else EXIT_OK


def cmd_latency(args) -> int:
    if args.crossover:
        t = latency.crossover_t2(args.t1, args.workers)
        emit({"t1": args.t1, "n": args.workers, "crossover_t2": t})
        return EXIT_OK if t is not None else EXIT_FAIL
    if args.chain:
        runs = [(p, 2, latency.chain_topology(args.t1, args.t2)) for p in latency.PATTERNS]
    else:
        lo, hi = args.n
        pats = latency.PATTERNS if args.pattern == "all" else (args.pattern,)
        runs = [(p, n, latency.microbenchmark_topology(n, args.t1, args.t2, args.t3))
                for n in range(lo, hi + 1) for p in pats]
    bad = False
    for pat, n, topo in runs:
        tr = sim.run_random(latency.pattern_saga(pat, n), seed=args.seed)
        got = latency.simulate_latency(tr, topo)
        want = latency.predict_latency(pat, topo, n)
        bad |= got != want
        emit({"pattern": pat, "n": n, "t1": topo.t1, "t2": topo.t2, "t3": topo.t3,
              "simulated": got, "predicted": want, "match": got == want})
    return EXIT_FAIL if bad else EXIT_OK


def cmd_trace_check(args) -> int:
    try:
        with open(args.file) as fh:
            tr = trace.read_trace(fh)
    except OSError as exc:
        raise InputError(f"{args.file}: {exc.strerror}") from None
    except (trace.TraceError, ValueError, KeyError) as exc:
        diag(f"{args.file}: {exc}")
        emit({"file": args.file, "valid": False})
        return EXIT_FAIL
    rec = {"file": args.file, "valid": True, "steps": len(tr), "restarts": tr.restart_count}
    if args.prune and tr.restart_count:
        try:
            chain = trace.prune_all(tr)
        except (trace.PruneError, ValueError) as exc:
            diag(str(exc))
            emit({**rec, "pruned": False})
            return EXIT_FAIL
        rec.update(pruned=True, chain=len(chain), final_steps=len(chain[-1]),
                   congruent_final=trace.cfg_congruent(chain[-1].final, tr.final))
        if not rec["congruent_final"]:
            emit(rec)
            return EXIT_FAIL
    emit(rec)
    return EXIT_OK


# -- nodes ---------------------------------------------------------------------------------


def _endpoint_program(path: str, me: str):
    text = _read(path)
    try:
        if path.endswith(".chor"):
            saga = dsl.parse_chor(text, path)
            return projection.project(saga.chor, me)
        programs = dsl.parse_network(text, path).programs
    except (dsl.DSLSyntaxError, projection.ProjectionError) as exc:
        raise InputError(str(exc)) from None
    if me not in programs:
        raise InputError(f"{path}: no program for process {me!r}")
    return programs[me]


async def _serve(node, until=None) -> int:
    from .runtime.sidecar import NodeKilled

    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        with contextlib.suppress(NotImplementedError):
            loop.add_signal_handler(sig, stop.set)
    try:
        await node.start()
    except NodeKilled:
        diag(f"{node.name}: killed during recovery (injected)")
        return EXIT_FAIL
    emit({"event": "listening", "node": node.name, "port": node.port, "mode": node.cfg.mode})
    if until is not None:
        node._spawn(until(node, stop))
    while not stop.is_set():
        if node.killed:
            diag(f"{node.name}: killed after {node.steps} protocol steps (injected)")
            return EXIT_FAIL
        with contextlib.suppress(asyncio.TimeoutError):
            await asyncio.wait_for(stop.wait(), 0.05)
    await node.stop()
    return EXIT_OK


def _driver(start, once):
    """Start sessions once the node listens; report sessions as they settle."""

    async def drive(node, stop):
        for chor_id, value in start:
            sid = node.start_session(chor_id, value)
            emit({"event": "started", "session": str(sid), "choreography": chor_id, "input": value})
        reported = set()
        while True:
            await asyncio.sleep(0.05)
            rows = node.store.tables.sessions
            for s, row in sorted(rows.items()):
                if s not in reported and row["status"] != "STARTED" and s not in node.sessions:
                    reported.add(s)
                    emit({"event": "terminal", "session": s, "status": row["status"],
                          "reason": row["reason"], "kv": node.store.tables.kv})
            if once and rows and node.quiescent():
                stop.set()
                return

    return drive


def _build_node(cfg):
    from .runtime.config import ConfigError, resolve_transactions
    from .runtime.sidecar import Node

    try:
        node = Node(cfg, resolve_transactions(cfg.transactions))
        for cid, c in cfg.choreographies.items():
            node.register(cid, _endpoint_program(c["program"], cfg.name), input_var=c.get("input_var"))
    except (ConfigError, ValueError, KeyError) as exc:
        raise InputError(str(exc)) from None
    return node


def cmd_run_node(args) -> int:
    from .runtime.config import ConfigError, load_config

    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        raise InputError(str(exc)) from None
    if args.kill_after is not None:
        cfg.kill_after = args.kill_after
    node = _build_node(cfg)
    start = [(args.start, args.input)] if args.start else []
    if args.start and args.start not in node.bindings:
        raise InputError(f"--start: choreography {args.start!r} is not registered in {args.config}")
    return asyncio.run(_serve(node, _driver(start, args.once)))


def cmd_demo_saga(args) -> int:
    from .runtime import cluster, saga
    from .runtime.config import NodeConfig

    os.makedirs(args.workdir, exist_ok=True)
    if args.role == "all":
        async def run_all():
            cl = cluster.Cluster(args.workdir, mode=args.mode)
            await cl.start()
            try:
                sid = cl.nodes[saga.INITIATOR].start_session(cluster.CHOR_ID, args.order)
                done = await cl.wait_quiescent(timeout=30)
                out = cl.outcome(sid)
            finally:
                await cl.stop()
            for role, o in out.items():
                emit({"session": str(sid), "role": role, **o})
            errs = cluster.check_all_or_nothing(out, args.order) if done else ["did not quiesce"]
            for e in errs:
                diag(e)
            return EXIT_FAIL if errs else EXIT_OK

        return asyncio.run(run_all())

    ports = {r: args.base_port + i for i, r in enumerate(saga.ROLES)}
    cfg = NodeConfig(name=args.role, port=ports[args.role], mode=args.mode,
                     peers={r: ("127.0.0.1", p) for r, p in ports.items() if r != args.role},
                     store_path=os.path.join(args.workdir, f"{args.role}.wal"),
                     kill_after=args.kill_after)
    from .runtime.sidecar import Node

    node = Node(cfg, saga.WAREHOUSE_TRANSACTIONS)
    node.register(cluster.CHOR_ID, cluster.endpoint_programs()[args.role],
                  input_var=saga.INPUT_VAR if args.role == saga.INITIATOR else None)

    start = [(cluster.CHOR_ID, args.order)] if args.role == saga.INITIATOR and args.order is not None else []
    return asyncio.run(_serve(node, _driver(start, args.once)))


# -- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="chorsaga", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log to stderr")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("project", help="project a choreography onto endpoint programs")
    p.add_argument("file")
    p.add_argument("--text", action="store_true", help="print a network file instead of JSON lines")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("simulate", help="run one seeded execution")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--chor")
    g.add_argument("--net")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=_nonneg_int, default=0)
    p.add_argument("--restart-rate", type=float, default=0.1)
    p.add_argument("--exact", action="store_true", help="spend the whole restart budget")
    p.add_argument("--max-steps", type=_nonneg_int, default=100_000)
    p.add_argument("--trace-out")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("verify", help="run exhaustive checks on a choreography")
    p.add_argument("--chor", required=True)
    p.add_argument("--check", action="append", choices=CHECKS + tuple(ALIASES) + ("all",), required=True)
    p.add_argument("--restarts", "--budget", dest="restarts", type=_nonneg_int, default=1)
    p.add_argument("--scope", type=_nonneg_int, default=20, help="seeded executions per restart count (recovery)")
    p.add_argument("--depth", type=_nonneg_int, default=50)
    p.add_argument("--state-bound", type=_nonneg_int, default=500_000)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("latency", help="compare simulated and predicted critical paths")
    p.add_argument("--pattern", choices=latency.PATTERNS + ("all",), default="all")
    p.add_argument("--n", type=_nonneg_int, nargs=2, default=(1, 9), metavar=("LO", "HI"))
    p.add_argument("--chain", action="store_true", help="three-service chain instead of n workers")
    p.add_argument("--t1", type=_nonneg_fraction, default=Fraction(1, 10))
    p.add_argument("--t2", type=_nonneg_fraction, default=Fraction(10))
    p.add_argument("--t3", type=_nonneg_fraction, default=Fraction(10))
    p.add_argument("--crossover", action="store_true")
    p.add_argument("--workers", type=_nonneg_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_latency)

    p = sub.add_parser("trace-check", help="validate (and optionally prune) a recorded trace")
    p.add_argument("file")
    p.add_argument("--prune", action="store_true")
    p.set_defaults(fn=cmd_trace_check)

    for name, hlp in (("run-node", "run a sidecar node"),
                      ("inject", "run a sidecar node that dies after N protocol steps")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--config", required=True)
        p.add_argument("--kill-after", type=_nonneg_int, required=name == "inject")
        p.add_argument("--start", metavar="CHOR", help="start one session of this choreography")
        p.add_argument("--input", type=int, default=None, help="initial input of the started session")
        p.add_argument("--once", action="store_true", help="exit once every known session is terminal")
        p.set_defaults(fn=cmd_run_node)

    p = sub.add_parser("demo-saga", help="warehouse / payment / loyalty saga on loopback")
    p.add_argument("--role", choices=("warehouse", "payment", "loyalty", "all"), required=True)
    p.add_argument("--order", type=_nonneg_int, default=None)
    p.add_argument("--mode", choices=("AT_LEAST_ONCE", "AT_MOST_ONCE"), default="AT_LEAST_ONCE")
    p.add_argument("--workdir", default="demo-saga")
    p.add_argument("--base-port", type=_nonneg_int, default=7101)
    p.add_argument("--kill-after", type=_nonneg_int, default=None)
    p.add_argument("--once", action="store_true", help="exit once every known session is terminal")
    p.set_defaults(fn=cmd_demo_saga)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.cmd == "demo-saga" and args.role == "all" and args.order is None:
        args.order = 20
    if args.cmd == "latency" and args.n[0] > args.n[1]:
        diag("--n: LO must not exceed HI")
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.fn(args)
    except InputError as exc:
        diag(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
