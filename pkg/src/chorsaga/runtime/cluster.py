"""In-process three-node warehouse deployment on loopback, for tests and sweeps."""

from __future__ import annotations

import asyncio
import contextlib
import os
import time
import uuid
from dataclasses import dataclass, field, replace

from ..projection import project
from ..values import value_bytes
from . import saga as S
from .config import NodeConfig
from .proxy import FaultProxy
from .sidecar import DuplicateSession, Node, NodeKilled
from .store import AT_LEAST_ONCE, AT_MOST_ONCE, COMPLETED, FAILED
from .wire import Frame, Kind, encode_frame

CHOR_ID = "warehouse"


@dataclass(frozen=True)
class Timing:
    ack_timeout: float = 0.15
    backoff_initial: float = 0.02
    backoff_cap: float = 0.2
    max_attempts: int = 200
    session_deadline: float = 30.0


FAST = Timing()


def endpoint_programs() -> dict:
    saga = S.warehouse_saga()
    return {r: project(saga.chor, r) for r in S.ROLES}


class Cluster:
    """Warehouse, payment and loyalty sidecars, optionally behind fault proxies."""

    def __init__(self, workdir: str, mode: str = AT_LEAST_ONCE, timing: Timing = FAST,
                 fsync: bool = True, proxy_args: dict | None = None):
        self.workdir = workdir
        self.mode = mode
        self.timing = timing
        self.fsync = fsync
        self.proxy_args = proxy_args
        self.programs = endpoint_programs()
        self.nodes: dict[str, Node] = {}
        self.proxies: dict[str, FaultProxy] = {}
        self.addresses: dict[str, tuple] = {}

    def _config(self, role, port=0, kill_after=None) -> NodeConfig:
        t = self.timing
        return NodeConfig(name=role, port=port, mode=self.mode,
                          store_path=os.path.join(self.workdir, f"{role}.wal"),
                          ack_timeout=t.ack_timeout, backoff_initial=t.backoff_initial,
                          backoff_cap=t.backoff_cap, max_attempts=t.max_attempts,
                          session_deadline=t.session_deadline, fsync=self.fsync,
                          kill_after=kill_after)

    def _node(self, cfg) -> Node:
        node = Node(cfg, S.WAREHOUSE_TRANSACTIONS)
        node.register(CHOR_ID, self.programs[cfg.name],
                      input_var=S.INPUT_VAR if cfg.name == S.INITIATOR else None)
        return node

    async def start(self, kill_after: dict | None = None) -> "Cluster":
        kill_after = kill_after or {}
        for role in S.ROLES:
            node = self._node(self._config(role, kill_after=kill_after.get(role)))
            await node.start()
            self.nodes[role] = node
            self.addresses[role] = (node.cfg.host, node.port)
            if self.proxy_args is not None:
                args = dict(self.proxy_args)
                args["seed"] = args.get("seed", 0) + S.ROLES.index(role)
                self.proxies[role] = await FaultProxy(self.addresses[role], **args).start()
        self._wire_peers()
        return self

    def _wire_peers(self):
        for role, node in self.nodes.items():
            for other in S.ROLES:
                if other != role:
                    px = self.proxies.get(other)
                    node.cfg.peers[other] = px.address if px else self.addresses[other]

    async def reboot(self, role: str) -> Node:
        """Kill ``role`` if still alive, then bring up a fresh instance on the same log and port."""
        old = self.nodes[role]
        old.crash()
        cfg = replace(old.cfg, kill_after=None, peers=dict(old.cfg.peers))
        for _ in range(50):
            node = self._node(cfg)
            try:
                await node.start()
                break
            except OSError:  # port still draining
                await asyncio.sleep(0.02)
        else:
            raise RuntimeError(f"cannot rebind {role} on port {cfg.port}")
        self.nodes[role] = node
        return node

    async def stop(self):
        for node in self.nodes.values():
            if not node.killed:
                await node.stop()
        for px in self.proxies.values():
            await px.stop()

    def quiescent(self) -> bool:
        return all(not n.killed and n.quiescent() for n in self.nodes.values())

    async def wait_quiescent(self, timeout: float = 20.0, settle: float = 0.0) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.quiescent():
                if not settle:
                    return True
                await asyncio.sleep(settle)
                if self.quiescent():
                    return True
            await asyncio.sleep(0.005)
        return False

    def outcome(self, sid) -> dict:
        sid = str(sid)
        out = {}
        for role, node in self.nodes.items():
            t = node.store.tables
            row = t.sessions.get(sid)
            commits = {k[1]: n for k, n in t.effects.items() if k[0] == sid and k[2] == "commit"}
            comps = {k[1]: n for k, n in t.effects.items() if k[0] == sid and k[2] == "compensate"}
            out[role] = {"status": row and row["status"], "commits": commits,
                         "compensations": comps, "kv": dict(t.kv)}
        return out


def check_all_or_nothing(outcome: dict, order: int) -> list[str]:
    """Violations of agreement, exactly-once effects and service state for one session."""
    errs = []
    statuses = {r: o["status"] for r, o in outcome.items()}
    ok = S.saga_succeeds(order)
    want = COMPLETED if ok else FAILED
    for role, o in outcome.items():
        if o["status"] != want:
            errs.append(f"{role}: status {o['status']}, expected {want} ({statuses})")
        for t, n in o["commits"].items():
            if n != 1:
                errs.append(f"{role}: {t} committed {n} times")
        if ok and o["compensations"]:
            errs.append(f"{role}: compensated {sorted(o['compensations'])} in a completed saga")
        if not ok:
            for t in o["commits"]:
                if o["compensations"].get(t) != 1:
                    errs.append(f"{role}: {t} compensated {o['compensations'].get(t, 0)} times")
        for k, v in S.expected_kv(order, role).items():
            default = {"stock": S.INITIAL_STOCK, "balance": S.INITIAL_BALANCE, "points": 0}[k]
            if o["kv"].get(k, default) != v:
                errs.append(f"{role}: {k} = {o['kv'].get(k, default)}, expected {v}")
    if ok:
        expected = {"warehouse": {"reserve"}, "payment": {"charge"}, "loyalty": {"award"}}
        for role, ts in expected.items():
            if set(outcome[role]["commits"]) != ts:
                errs.append(f"{role}: committed {sorted(outcome[role]['commits'])}, expected {sorted(ts)}")
    return errs


# -- crash sweep ------------------------------------------------------------------------------


@dataclass
class KillRun:
    victim: str
    kill_after: int
    order: int
    killed: bool
    violations: list = field(default_factory=list)
    seconds: float = 0.0


async def _start_or_adopt(node: Node, sid, order):
    if node.store.session(str(sid)) is None:
        with contextlib.suppress(DuplicateSession):
            node.start_session(CHOR_ID, order, session_id=sid)


async def run_with_kill(workdir: str, order: int, victim: str | None, kill_after: int | None,
                        timing: Timing = FAST, fsync: bool = True) -> tuple[KillRun, Cluster]:
    """One saga session; ``victim`` dies before its ``kill_after``-th protocol step and reboots."""
    t0 = time.monotonic()
    os.makedirs(workdir, exist_ok=True)
    cl = Cluster(workdir, timing=timing, fsync=fsync)
    await cl.start({victim: kill_after} if victim else None)
    sid = uuid.UUID(int=order)
    killed = False
    try:
        try:
            cl.nodes[S.INITIATOR].start_session(CHOR_ID, order, session_id=sid)
        except NodeKilled:
            pass
        if victim is not None:
            deadline = time.monotonic() + 10
            while not cl.nodes[victim].killed and not cl.quiescent() and time.monotonic() < deadline:
                await asyncio.sleep(0.002)
            killed = cl.nodes[victim].killed
            if killed:
                await cl.reboot(victim)
        # the client retries a start that never became durable
        await _start_or_adopt(cl.nodes[S.INITIATOR], sid, order)
        done = await cl.wait_quiescent(timeout=20.0)
        run = KillRun(victim or "-", -1 if kill_after is None else kill_after, order, killed)
        if not done:
            run.violations.append("did not quiesce")
        run.violations += check_all_or_nothing(cl.outcome(sid), order)
        run.seconds = time.monotonic() - t0
        return run, cl
    finally:
        await cl.stop()


async def crash_sweep(workdir: str, orders=(S.ORDER_OK, S.ORDER_CHARGE_FAILS, S.ORDER_AWARD_FAILS),
                      timing: Timing = FAST, fsync: bool = True, on_run=None) -> list[KillRun]:
    """Kill every node at every step index of the fault-free run, for each order amount."""
    runs = []
    for order in orders:
        base, cl = await run_with_kill(os.path.join(workdir, f"o{order}-base"), order, None, None, timing, fsync)
        runs.append(base)
        steps = {r: n.steps for r, n in cl.nodes.items()}
        for victim in S.ROLES:
            for k in range(steps[victim]):
                run, _ = await run_with_kill(os.path.join(workdir, f"o{order}-{victim}-{k}"),
                                             order, victim, k, timing, fsync)
                runs.append(run)
                if on_run is not None:
                    on_run(run)
    return runs


# -- at-most-once mode -------------------------------------------------------------------------


def _sessions_terminal(cl: Cluster, sids) -> bool:
    for node in cl.nodes.values():
        for sid in sids:
            st = node.status(sid)
            if st is not None and st not in (COMPLETED, FAILED):
                return False
    return True


def _double_effects(cl: Cluster) -> list[str]:
    errs = []
    for role, node in cl.nodes.items():
        for (sid, t, kind), n in node.store.tables.effects.items():
            if n > 1:
                errs.append(f"{role}: {t} {kind} applied {n} times in {sid}")
        for key, n in node.delivered.items():
            if n > 1:
                errs.append(f"{role}: message {key} delivered {n} times")
    return errs


async def at_most_once_check(workdir: str, n_sessions: int = 100, seed: int = 0,
                             deadline: float = 1.0) -> dict:
    """Multiplexing, expiry and duplicate suppression behind fault proxies.

    Phase one reorders and duplicates every link and black-holes one session;
    the others must all complete while it is still pending, after which it
    expires and a late message for it must be ignored.  Phase two adds random
    drops and checks that no effect or delivery happens twice.
    """

    timing = replace(FAST, session_deadline=deadline)
    report = {"violations": []}
    bad = report["violations"]
    stalled = uuid.UUID(int=(1 << 64) + seed)

    # phase one: interleaved sessions next to a stalled one
    os.makedirs(os.path.join(workdir, "a"), exist_ok=True)
    px = {"seed": seed, "dup": 0.2, "reorder": 0.2, "drop_if": lambda f: f.session_id == stalled}
    cl = Cluster(os.path.join(workdir, "a"), mode=AT_MOST_ONCE, timing=timing, fsync=False, proxy_args=px)
    await cl.start()
    try:
        wh = cl.nodes[S.INITIATOR]
        wh.start_session(CHOR_ID, S.ORDER_OK, session_id=stalled)
        sids = [wh.start_session(CHOR_ID, S.ORDER_OK) for _ in range(n_sessions)]
        t0 = time.monotonic()
        end = t0 + 10
        while time.monotonic() < end and not all(
                cl.nodes[r].status(s) == COMPLETED for s in sids for r in S.ROLES):
            await asyncio.sleep(0.005)
        report["completed"] = sum(all(cl.nodes[r].status(s) == COMPLETED for r in S.ROLES) for s in sids)
        report["completion_seconds"] = time.monotonic() - t0
        report["stalled_status_then"] = wh.status(stalled)
        if report["completed"] != n_sessions:
            bad.append(f"only {report['completed']}/{n_sessions} sessions completed")
        if report["stalled_status_then"] != "STARTED":
            bad.append("stalled session was not pending while the others completed")
        end = time.monotonic() + deadline * 4
        while wh.status(stalled) == "STARTED" and time.monotonic() < end:
            await asyncio.sleep(0.01)
        row = wh.store.session(str(stalled))
        report["stalled_status_after"] = (row["status"], row["reason"])
        if row["status"] != FAILED or row["reason"] != "expired":
            bad.append(f"stalled session not expired: {row}")
        # a late message straight to the warehouse, bypassing the proxy
        before = (dict(wh.delivered), wh.store.tables.digest())
        _, w = await asyncio.open_connection(*cl.addresses[S.INITIATOR])
        w.write(encode_frame(Frame(Kind.VALUE, stalled, CHOR_ID, "loyalty", 0, value_bytes(2))))
        await w.drain()
        await asyncio.sleep(0.1)
        w.close()
        if (dict(wh.delivered), wh.store.tables.digest()) != before:
            bad.append("late message for an expired session changed state")
        report["late_message_dropped"] = True
        bad += _double_effects(cl)
        stock = wh.store.tables.kv.get("stock", S.INITIAL_STOCK)
        if stock != S.INITIAL_STOCK - n_sessions:
            bad.append(f"stock {stock}, expected {S.INITIAL_STOCK - n_sessions}")
        report["proxy_a"] = {r: dict(p.stats) for r, p in cl.proxies.items()}
    finally:
        await cl.stop()

    # phase two: random loss on top
    os.makedirs(os.path.join(workdir, "b"), exist_ok=True)
    px = {"seed": seed + 100, "drop": 0.05, "dup": 0.2, "reorder": 0.2}
    cl = Cluster(os.path.join(workdir, "b"), mode=AT_MOST_ONCE, timing=timing, fsync=False, proxy_args=px)
    await cl.start()
    try:
        wh = cl.nodes[S.INITIATOR]
        sids = [wh.start_session(CHOR_ID, S.ORDER_OK) for _ in range(n_sessions)]
        end = time.monotonic() + deadline * 5 + 5
        while time.monotonic() < end and not _sessions_terminal(cl, sids):
            await asyncio.sleep(0.01)
        if not _sessions_terminal(cl, sids):
            bad.append("lossy phase did not settle")
        report["lossy_completed"] = sum(all(cl.nodes[r].status(s) == COMPLETED for r in S.ROLES) for s in sids)
        report["lossy_expired"] = sum(wh.status(s) == FAILED for s in sids)
        bad += _double_effects(cl)
        report["proxy_b"] = {r: dict(p.stats) for r, p in cl.proxies.items()}
    finally:
        await cl.stop()
    report["ok"] = not bad
    return report
