"""Seeded scheduling, fault injection and exhaustive small-scope exploration."""

from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field

from . import chor as C_
from . import net as N_
from . import projection as P_
from .chor import ChorConfig, ProtocolError, Saga
from .net import NetConfig
from .state import (
    RESTART_EV,
    DeterminismViolation,
    InvariantViolation,
    compensation_free,
    is_saga_shaped,
)
from .trace import ExecutionTrace
from .values import EvalError

KERNEL_ERRORS = (ProtocolError, DeterminismViolation, InvariantViolation, EvalError)

EXHAUSTIVE = "exhaustive"
RANDOM = "random"


@dataclass(frozen=True)
class FaultPolicy:
    """Restart injection: at most ``max_restarts`` per execution.

    In random mode each scheduling decision picks a restart with probability
    ``restart_rate`` while budget remains; with ``exact`` any unused budget is
    spent once the network terminates, so every trace carries exactly
    ``max_restarts`` restarts.
    """

    max_restarts: int = 0
    eligible: frozenset | None = None
    mode: str = RANDOM
    restart_rate: float = 0.1
    exact: bool = False

    def __post_init__(self):
        if self.max_restarts < 0:
            raise ValueError("max_restarts must be nonnegative")
        if self.mode not in (RANDOM, EXHAUSTIVE):
            raise ValueError(f"unknown injection mode {self.mode!r}")
        if self.eligible is not None:
            object.__setattr__(self, "eligible", frozenset(self.eligible))


def as_network(target) -> NetConfig:
    """Accept a network configuration, a choreographic configuration or a saga."""
    if isinstance(target, NetConfig):
        return target
    if isinstance(target, Saga):
        target = target.initial()
    if isinstance(target, ChorConfig):
        res = P_.check_projectability(target.chor, target.env.processes)
        if not res.ok:
            raise ValueError("choreography is not projectable: " + "; ".join(res.diagnostics))
        return P_.projected_config(target)
    raise TypeError(f"cannot run {type(target).__name__}")


def run_random(target, policy: FaultPolicy = FaultPolicy(), seed: int = 0,
               max_steps: int = 100_000) -> ExecutionTrace:
    """A maximal execution under a seeded scheduler; reproducible per seed."""
    rng = random.Random(seed)
    cfg = as_network(target)
    start = cfg
    steps = []
    used = 0
    while len(steps) < max_steps:
        budget = used < policy.max_restarts
        succ = N_.enumerate_net_steps(cfg, allow_restart=budget, restartable=policy.eligible)
        normal = [s for s in succ if s[0].kind != RESTART_EV]
        restarts = [s for s in succ if s[0].kind == RESTART_EV]
        if normal:
            if restarts and rng.random() < policy.restart_rate:
                mu, nxt = rng.choice(restarts)
            else:
                mu, nxt = rng.choice(normal)
        elif restarts and policy.exact:
            mu, nxt = rng.choice(restarts)
        else:
            break
        if mu.kind == RESTART_EV:
            used += 1
        steps.append((mu, nxt))
        cfg = nxt
    else:
        raise RuntimeError(f"no termination within {max_steps} steps")
    return ExecutionTrace(start, steps, validate=False)


# -- exhaustive exploration ---------------------------------------------------------


def dichotomy_holds(cfg: NetConfig) -> bool:
    """Terminal-state shape: everyone done and nothing compensated, or everyone compensated."""
    env = cfg.env
    if cfg.A == env.a_start and all(not cfg.N.get(p, ()) for p in env.processes):
        return compensation_free(cfg.T)
    if not cfg.A:
        return all(is_saga_shaped(cfg.T.get(p, ())) for p in env.processes)
    return False


@dataclass
class ExplorationReport:
    states: int = 0
    edges: int = 0
    terminals: set = field(default_factory=set)
    deadlocked: list = field(default_factory=list)
    dichotomy_violations: list = field(default_factory=list)
    max_path_length: dict = field(default_factory=dict)  # budget -> longest path
    inconclusive: bool = False
    errors: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return (not self.inconclusive and not self.deadlocked
                and not self.dichotomy_violations and not self.errors)

    def summary(self) -> dict:
        return {
            "states": self.states,
            "edges": self.edges,
            "terminals": len(self.terminals),
            "deadlocked": len(self.deadlocked),
            "dichotomy_violations": len(self.dichotomy_violations),
            "max_path_length": {str(k): v for k, v in sorted(self.max_path_length.items())},
            "inconclusive": self.inconclusive,
            "errors": self.errors[:3],
        }


def explore_exhaustive(target, policy: FaultPolicy = FaultPolicy(mode=EXHAUSTIVE),
                       state_bound: int = 500_000) -> ExplorationReport:
    """Enumerate every (configuration, restarts used) pair reachable under ``policy``.

    Terminal states are those with no non-restart step.  Restarts stay
    schedulable from terminal states while budget remains, so executions that
    crash after finishing are covered as well.  ``max_path_length[k]`` is the
    longest execution using at most ``k`` restarts, for every ``k`` up to the
    budget.
    """
    root = as_network(target)
    k = policy.max_restarts
    rep = ExplorationReport()
    ids = {(root, 0): 0}
    nodes = [(root, 0)]
    succ: list[list[int]] = []
    i = 0
    while i < len(nodes):
        cfg, r = nodes[i]
        i += 1
        try:
            steps = N_.enumerate_net_steps(cfg, allow_restart=r < k, restartable=policy.eligible)
        except KERNEL_ERRORS as exc:  # findings, not crashes
            rep.errors.append(f"{type(exc).__name__}: {exc}")
            steps = []
        out = []
        terminal = True
        for mu, nxt in steps:
            r2 = r + (mu.kind == RESTART_EV)
            terminal &= mu.kind == RESTART_EV
            key = (nxt, r2)
            j = ids.get(key)
            if j is None:
                if len(nodes) >= state_bound:
                    rep.inconclusive = True
                    continue
                j = ids[key] = len(nodes)
                nodes.append(key)
            out.append(j)
        succ.append(out)
        rep.edges += len(out)
        if terminal and cfg not in rep.terminals:
            rep.terminals.add(cfg)
            if N_.is_net_deadlocked(cfg):
                rep.deadlocked.append(cfg)
            if not dichotomy_holds(cfg):
                rep.dichotomy_violations.append(cfg)
    rep.states = len(nodes)
    if not rep.inconclusive:
        for budget in range(k + 1):
            rep.max_path_length[budget] = _longest_path(nodes, succ, budget)
    return rep


def _longest_path(nodes, succ, budget) -> int:
    """Longest path from node 0 through nodes using at most ``budget`` restarts."""
    n = len(nodes)
    allowed = [nodes[v][1] <= budget for v in range(n)]
    color = bytearray(n)  # 0 unseen, 1 on stack, 2 finished
    longest = [0] * n
    stack = [(0, iter(succ[0]))]
    color[0] = 1
    while stack:
        v, it = stack[-1]
        for w in it:
            if not allowed[w]:
                continue
            if color[w] == 1:
                raise RuntimeError("cycle in the state graph: termination argument violated")
            if color[w] == 0:
                color[w] = 1
                stack.append((w, iter(succ[w])))
                break
        else:
            stack.pop()
            color[v] = 2
            longest[v] = max((longest[w] + 1 for w in succ[v] if allowed[w]), default=0)
    return longest[0]


# -- projection bisimulation ---------------------------------------------------------------


@dataclass
class BisimReport:
    ok: bool = True
    pairs: int = 0
    strict_pairs: int = 0
    depth_reached: int = 0
    counterexample: dict | None = None

    def fail(self, direction, c, n, mu, detail):
        if self.ok:
            self.ok = False
            self.counterexample = {
                "direction": direction,
                "label": str(mu),
                "choreography": C_.format_chor(c.chor),
                "network": {p: N_.format_program(P) for p, P in sorted(n.N.items())},
                "detail": detail,
            }


def check_bisimulation(target, depth_bound: int = 50, projector=None) -> BisimReport:
    """Co-explore a choreography and its projection.

    Completeness: each choreography step is matched by a step of the exact
    projection with the same label and stores, landing ⊒ the successor's
    projection (receivers keep the untaken branch until they learn the choice).
    Soundness: each non-restart step of a network ⊒ the projection is matched
    by a choreography step with the same label whose projection the network
    successor stays ⊒ of.  ``projector(C, r)`` replaces the projection (used
    for negative controls).
    """
    c0 = target.initial() if isinstance(target, Saga) else target
    proj = projector or P_.project
    env = c0.env
    procs = env.processes

    def project_net(c):
        return N_.FrozenMap({p: proj(c.chor, p) for p in procs})

    n_start = project_net(c0)
    nenv = dataclasses.replace(env, n_start=n_start)

    def netcfg(c, N):
        return NetConfig(N, c.sigma, c.K, c.S, c.T, c.A, nenv)

    rep = BisimReport()
    seen = {(c0, n_start)}
    frontier = [(c0, n_start)]
    depth = 0
    while frontier and depth < depth_bound and rep.ok:
        nxt_frontier = []
        for c, N in frontier:
            rep.pairs += 1
            try:
                pc = project_net(c)
            except P_.ProjectionError as exc:
                rep.fail("projection", c, netcfg(c, N), None, str(exc))
                break
            if N != pc:
                rep.strict_pairs += 1
            try:
                csteps = C_.enumerate_chor_steps(c)
                exact = N_.enumerate_net_steps(netcfg(c, pc))
                nsteps = N_.enumerate_net_steps(netcfg(c, N)) if N != pc else exact
            except KERNEL_ERRORS as exc:
                rep.fail("error", c, netcfg(c, N), None, f"{type(exc).__name__}: {exc}")
                break
            # completeness
            for mu, c2 in csteps:
                want = project_net(c2)
                stores = (c2.sigma, c2.K, c2.S, c2.T, c2.A)
                if not any(m == mu and (n2.sigma, n2.K, n2.S, n2.T, n2.A) == stores
                           and P_.net_geq(n2.N, want, procs) for m, n2 in exact):
                    rep.fail("completeness", c, netcfg(c, pc), mu,
                             "projection has no matching step into the successor's projection")
                    break
            if not rep.ok:
                break
            # soundness
            for mu, n2 in nsteps:
                match = None
                for m, c2 in csteps:
                    if m != mu or (c2.sigma, c2.K, c2.S, c2.T, c2.A) != (n2.sigma, n2.K, n2.S, n2.T, n2.A):
                        continue
                    if P_.net_geq(n2.N, project_net(c2), procs):
                        match = c2
                        break
                if match is None:
                    rep.fail("soundness", c, netcfg(c, N), mu,
                             "no choreography step keeps the network above the projection")
                    break
                key = (match, n2.N)
                if key not in seen:
                    seen.add(key)
                    nxt_frontier.append(key)
            if not rep.ok:
                break
        frontier = nxt_frontier
        depth += 1
    rep.depth_reached = depth
    return rep
