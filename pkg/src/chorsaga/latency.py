"""Critical-path latency of orchestrated vs. decentralised request chains.

All arithmetic uses :class:`fractions.Fraction`, so simulated and predicted
durations can be compared for exact equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from . import chor as C_
from .state import RECV_EV, SELRECV_EV, SELSEND_EV, SEND_EV, Env, make_store
from .values import Call, Lit, Var

ORCHESTRATION = "orchestration"
DECENTRALIZED = "decentralized"
PATTERNS = (ORCHESTRATION, DECENTRALIZED)


def _q(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


@dataclass(frozen=True)
class Topology:
    """Processes placed on nodes.

    Messages between processes on the same node take ``t1``; between nodes
    they take ``t2`` unless ``links`` names the node pair (either order).
    """

    node_of: dict
    t1: Fraction
    t2: Fraction
    t3: Fraction
    links: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("t1", "t2", "t3"):
            v = _q(getattr(self, name))
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")
            object.__setattr__(self, name, v)
        links = {}
        for (a, b), v in self.links.items():
            v = _q(v)
            if v < 0:
                raise ValueError("latencies must be nonnegative")
            links[frozenset((a, b))] = v
        object.__setattr__(self, "links", links)

    def latency(self, p: str, q: str) -> Fraction:
        try:
            a, b = self.node_of[p], self.node_of[q]
        except KeyError as exc:
            raise KeyError(f"process {exc.args[0]!r} is not mapped to a node") from None
        if a == b:
            return self.t1
        return self.links.get(frozenset((a, b)), self.t2)


def microbenchmark_topology(n: int, t1, t2, t3) -> Topology:
    """Frontend, orchestrator and ``n`` workers each on their own node.

    Every worker has a co-located sidecar and the frontend has one too.
    Orchestrator-worker links cost ``t3``; the chain benchmark is ``n = 2``
    with ``t3 = t2``.
    """
    node_of = {"fe": "front", "fs": "front", "orch": "orch"}
    links = {}
    for i in range(1, n + 1):
        node_of[f"w{i}"] = node_of[f"s{i}"] = f"node{i}"
        links[("orch", f"node{i}")] = t3
    return Topology(node_of, t1, t2, t3, links)


def chain_topology(t1, t2) -> Topology:
    return microbenchmark_topology(2, t1, t2, t2)


def _work(x):
    return Call("add", (Var(x), Lit(1)))


def orchestration(n: int) -> C_.Saga:
    """Frontend -> orchestrator, which calls each worker in turn, -> frontend."""
    if n < 1:
        raise ValueError("need at least one worker")
    chor = [C_.Send("fe", Var("req"), "orch", "req")]
    for i in range(1, n + 1):
        chor.append(C_.Send("orch", Var("req"), f"w{i}", "req"))
        chor.append(C_.Send(f"w{i}", _work("req"), "orch", "req"))
    chor.append(C_.Send("orch", Var("req"), "fe", "res"))
    procs = ["fe", "orch"] + [f"w{i}" for i in range(1, n + 1)]
    return C_.Saga(tuple(chor), Env(tuple(procs), sigma_start=make_store({"fe": {"req": 0}})))


def decentralized(n: int) -> C_.Saga:
    """Sidecars forward the request point to point; each worker talks only to its sidecar."""
    if n < 1:
        raise ValueError("need at least one worker")
    chor = [C_.Send("fe", Var("req"), "fs", "req")]
    prev = "fs"
    for i in range(1, n + 1):
        s, w = f"s{i}", f"w{i}"
        chor.append(C_.Send(prev, Var("req"), s, "req"))
        chor.append(C_.Send(s, Var("req"), w, "req"))
        chor.append(C_.Send(w, _work("req"), s, "req"))
        prev = s
    chor.append(C_.Send(prev, Var("req"), "fs", "req"))
    chor.append(C_.Send("fs", Var("req"), "fe", "res"))
    procs = ["fe", "fs"] + [f"{k}{i}" for i in range(1, n + 1) for k in ("s", "w")]
    return C_.Saga(tuple(chor), Env(tuple(procs), sigma_start=make_store({"fe": {"req": 0}})))


def pattern_saga(pattern: str, n: int) -> C_.Saga:
    if pattern == ORCHESTRATION:
        return orchestration(n)
    if pattern == DECENTRALIZED:
        return decentralized(n)
    raise ValueError(f"unknown pattern {pattern!r}")


def predict_latency(pattern: str, topology: Topology, n_workers: int) -> Fraction:
    t1, t2, t3, n = topology.t1, topology.t2, topology.t3, n_workers
    if pattern == ORCHESTRATION:
        return 2 * t2 + 2 * n * t3
    if pattern == DECENTRALIZED:
        return 2 * (n + 1) * t1 + (n - 1) * t2 + 2 * t2
    raise ValueError(f"unknown pattern {pattern!r}")


def simulate_latency(trace, topology: Topology) -> Fraction:
    """Critical-path duration of ``trace`` with zero compute time.

    Each process has a clock.  A send is stamped with the sender's clock; the
    matching receive (FIFO per ordered pair) advances the receiver to at least
    stamp + link latency.
    """
    clock: dict[str, Fraction] = {}
    inflight: dict[tuple, list] = {}
    for mu in trace.labels:
        if mu.kind in (SEND_EV, SELSEND_EV):
            lat = topology.latency(mu.p, mu.q)
            inflight.setdefault((mu.p, mu.q), []).append(clock.get(mu.p, Fraction(0)) + lat)
        elif mu.kind in (RECV_EV, SELRECV_EV):
            queue = inflight.get((mu.p, mu.q))
            if not queue:
                raise ValueError(f"receive {mu} without a matching send")
            arrival = queue.pop(0)
            clock[mu.q] = max(clock.get(mu.q, Fraction(0)), arrival)
    return max(clock.values(), default=Fraction(0))


def crossover_t2(t1, n_workers: int = 2) -> Fraction | None:
    """The t2 beyond which the decentralised prediction is strictly lower, with t3 = t2.

    Both predictions are affine in t2, so the difference is sampled at two
    points; ``None`` when the decentralised pattern never wins.
    """

    def gap(t2):
        topo = microbenchmark_topology(n_workers, t1, t2, t2)
        return (predict_latency(ORCHESTRATION, topo, n_workers)
                - predict_latency(DECENTRALIZED, topo, n_workers))

    g0 = gap(Fraction(0))
    slope = gap(Fraction(1)) - g0
    if slope <= 0:
        return None
    return max(Fraction(0), -g0 / slope)
