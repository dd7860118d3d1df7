"""Executions, congruence, the efficiency ordering and restart pruning."""

from __future__ import annotations

import json
from collections import deque
from functools import lru_cache
from typing import Iterable

from . import chor as C_
from . import codec
from . import net as N_
from . import state as st
from .state import COMPENSATE_EV, RESTART_EV, TransitionLabel


class TraceError(Exception):
    """A trace is not a valid execution of its semantics."""


class PruneError(Exception):
    """No valid splice was found; carries the offending trace."""

    def __init__(self, msg, trace=None):
        self.trace = trace
        if trace is not None:
            msg = f"{msg}\n{trace.render()}"
        super().__init__(msg)


def _successors(cfg):
    if type(cfg) is N_.NetConfig:
        return N_.enumerate_net_steps(cfg, allow_restart=True)
    return C_.enumerate_chor_steps(cfg)


class ExecutionTrace:
    """A start configuration and the (label, successor) pairs taken from it."""

    __slots__ = ("start", "steps")

    def __init__(self, start, steps: Iterable = (), validate: bool = True):
        self.start = start
        self.steps = tuple(steps)
        if validate:
            cur = start
            for n, (mu, nxt) in enumerate(self.steps):
                if (mu, nxt) not in _successors(cur):
                    raise TraceError(f"step {n} ({mu}) is not a valid transition")
                cur = nxt

    @property
    def configs(self) -> list:
        return [self.start] + [c for _, c in self.steps]

    @property
    def labels(self) -> list[TransitionLabel]:
        return [mu for mu, _ in self.steps]

    @property
    def final(self):
        return self.steps[-1][1] if self.steps else self.start

    @property
    def restart_count(self) -> int:
        return sum(1 for mu, _ in self.steps if mu.kind == RESTART_EV)

    def __len__(self):
        return len(self.steps)

    def __eq__(self, other):
        return isinstance(other, ExecutionTrace) and self.start == other.start and self.steps == other.steps

    def __hash__(self):
        return hash((self.start, self.steps))

    def prefix(self, n: int) -> "ExecutionTrace":
        return ExecutionTrace(self.start, self.steps[:n], validate=False)

    def suffix(self, n: int) -> "ExecutionTrace":
        return ExecutionTrace(self.configs[n], self.steps[n:], validate=False)

    def concat(self, other: "ExecutionTrace") -> "ExecutionTrace":
        if self.final != other.start:
            raise TraceError("cannot concatenate: end configuration differs from next start")
        return ExecutionTrace(self.start, self.steps + other.steps, validate=False)

    def render(self) -> str:
        return "\n".join(f"  {n:3d}: {mu}" for n, mu in enumerate(self.labels))

    def __repr__(self):
        return f"ExecutionTrace({len(self)} steps, {self.restart_count} restarts)"


# -- congruence -----------------------------------------------------------------------------


def _view(cfg, p):
    prog = cfg.N.get(p, ()) if type(cfg) is N_.NetConfig else None
    return (
        prog,
        frozenset((x, st.value_key(v)) for (q, x), v in cfg.sigma.items() if q == p),
        frozenset((k, n) for k, n in cfg.S.items() if k[0] == p and n),
    )


def cfg_congruent(s, s2, ignore: str | None = None) -> bool:
    """K, T and A equal; programs, stores and sequence rows equal on A.

    ``ignore`` additionally excludes one process from the restricted part.
    """
    if s.A != s2.A or s.K != s2.K or s.T != s2.T:
        return False
    if type(s) is C_.ChorConfig and s.chor != s2.chor:
        return False
    return all(_view(s, p) == _view(s2, p) for p in s.A if p != ignore)


def exec_congruent(a: ExecutionTrace, b: ExecutionTrace) -> bool:
    if len(a) != len(b) or a.labels != b.labels:
        return False
    return all(cfg_congruent(x, y) for x, y in zip(a.configs, b.configs))


# -- efficiency ordering ----------------------------------------------------------------------


def _prec_p_reach(left: ExecutionTrace, right: ExecutionTrace, p: str, i0: int, j0: int):
    """Pairs (i, j) such that left[i0:i] ⪯_p right[j0:j]."""
    lc, rc = left.configs, right.configs
    ll, rl = left.labels, right.labels
    if not cfg_congruent(lc[i0], rc[j0], ignore=p):
        return set()
    seen = {(i0, j0)}
    todo = deque(seen)
    while todo:
        i, j = todo.popleft()
        nxt = []
        if j < len(rl) and rl[j].pn == p:
            nxt.append((i, j + 1, False))
        if i < len(ll) and j < len(rl) and ll[i] == rl[j]:
            # a matched step by p only re-synchronises states (restart, compensate)
            nxt.append((i + 1, j + 1, rl[j].pn == p))
        for a, b, strict in nxt:
            if (a, b) in seen:
                continue
            if a == i:
                # a step taken only by p carries no side condition
                ok = True
            elif strict:
                ok = cfg_congruent(lc[a], rc[b])
            else:
                ok = cfg_congruent(lc[a], rc[b], ignore=p)
            if ok:
                seen.add((a, b))
                todo.append((a, b))
    return seen


def prec_p(left: ExecutionTrace, right: ExecutionTrace, p: str) -> bool:
    """``left ⪯_p right`` over the whole of both traces."""
    return (len(left), len(right)) in _prec_p_reach(left, right, p, 0, 0)


def _common_prefix(a: ExecutionTrace, b: ExecutionTrace) -> int:
    if a.start != b.start:
        return -1
    n = 0
    for (mu1, c1), (mu2, c2) in zip(a.steps, b.steps):
        if mu1 != mu2 or c1 != c2:
            break
        n += 1
    return n


def prec(left: ExecutionTrace, right: ExecutionTrace) -> bool:
    """One application of the factorisation rule: exact prefix, a ⪯_p middle, ≅ suffix."""
    L = _common_prefix(left, right)
    if L < 0:
        return False
    lc, rc = left.configs, right.configs
    nl, nr = len(left), len(right)

    @lru_cache(maxsize=None)
    def cong_suffix(i, j):
        if i == nl:
            return cfg_congruent(lc[i], rc[j])
        return (left.steps[i][0] == right.steps[j][0] and cfg_congruent(lc[i], rc[j])
                and cong_suffix(i + 1, j + 1))

    procs = sorted(set(left.start.env.processes))
    for a in range(L, -1, -1):
        for p in procs:
            for i, j in _prec_p_reach(left, right, p, a, a):
                if nl - i == nr - j and cong_suffix(i, j):
                    return True
    return False


def verify_prec_chain(chain: list[ExecutionTrace]) -> bool:
    """``chain[k+1] ⪯ chain[k]`` for every k, hence ``chain[-1] ⪯ chain[0]``."""
    return all(prec(b, a) for a, b in zip(chain, chain[1:]))


# -- restart pruning ------------------------------------------------------------------------


def _snapshot(cfg, p):
    return _view(cfg, p)


def _rebuild(trace: ExecutionTrace, keep: list[int]) -> ExecutionTrace:
    """Re-execute the labels of steps ``keep`` from the start of ``trace``."""
    cur = trace.start
    out = []
    orig = trace.configs
    for idx in keep:
        mu = trace.steps[idx][0]
        cands = [c for m, c in _successors(cur) if m == mu]
        if not cands:
            raise PruneError(f"label {mu} (step {idx}) not enabled after splice", trace)
        target = orig[idx + 1]
        pick = next((c for c in cands if c == target), None)
        if pick is None:
            pick = next((c for c in cands if cfg_congruent(c, target)), cands[0])
        out.append((mu, pick))
        cur = pick
    return ExecutionTrace(trace.start, out, validate=False)


def prune_restart_at(trace: ExecutionTrace, r: int) -> tuple[ExecutionTrace, str]:
    """Remove the restart at step ``r``; returns the new trace and the case letter."""
    mu = trace.steps[r][0]
    if mu.kind != RESTART_EV:
        raise ValueError(f"step {r} is {mu}, not a restart")
    p = mu.p
    configs = trace.configs
    before = _snapshot(configs[r], p)
    n = len(trace)
    drop = {r}
    case = "d"
    for j in range(r + 1, n + 1):
        if _snapshot(configs[j], p) == before:
            case = "a"
            break
        if j == n:
            break
        lab = trace.steps[j][0]
        if lab.pn == p:
            if lab.kind == COMPENSATE_EV:
                case = "b"
                break
            if lab.kind == RESTART_EV:
                case = "c"
                break
            drop.add(j)
    if case == "d" and p in trace.final.A:
        raise PruneError(f"restart of {p} at step {r} neither re-converges nor deactivates {p}", trace)
    keep = [i for i in range(n) if i not in drop]
    return _rebuild(trace, keep), case


def prune_one_restart(trace: ExecutionTrace, check: bool = True) -> ExecutionTrace:
    """One fewer restart, with ``prec(result, trace)`` verified when ``check``."""
    idx = [i for i, mu in enumerate(trace.labels) if mu.kind == RESTART_EV]
    if not idx:
        raise ValueError("trace has no restart to prune")
    if type(trace.start) is N_.NetConfig and not N_.is_net_terminated(trace.final):
        raise ValueError("pruning needs a terminated execution")
    pruned, case = prune_restart_at(trace, idx[-1])
    if pruned.restart_count != trace.restart_count - 1:
        raise PruneError(f"case ({case}) splice removed the wrong number of restarts", trace)
    if check and not prec(pruned, trace):
        raise PruneError(f"case ({case}) splice does not satisfy the ordering", trace)
    return pruned


def prune_all(trace: ExecutionTrace, check: bool = True) -> list[ExecutionTrace]:
    """The chain ``trace, prune(trace), ...`` down to a restart-free execution."""
    chain = [trace]
    while chain[-1].restart_count:
        chain.append(prune_one_restart(chain[-1], check=check))
    return chain


# -- trace files -------------------------------------------------------------------------------

TRACE_FORMAT_VERSION = 1


def write_trace(trace: ExecutionTrace, fh) -> None:
    """Line-delimited JSON: a header with the full start state, then one record per step."""
    start = trace.start
    header = {
        "type": "header",
        "version": TRACE_FORMAT_VERSION,
        "env": codec.encode_env(start.env),
        "initial": codec.encode_net_config(start),
        "state_digest": codec.config_digest(start),
    }
    fh.write(json.dumps(header, sort_keys=True) + "\n")
    for n, (mu, cfg) in enumerate(trace.steps):
        rec = {"type": "step", "seq": n, "label": codec.encode_label(mu),
               "state_digest": codec.config_digest(cfg)}
        fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(fh, functions=None) -> ExecutionTrace:
    """Parse and re-execute a trace file, checking every digest."""
    lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise TraceError("empty trace file")
    header = json.loads(lines[0])
    if header.get("type") != "header" or header.get("version") != TRACE_FORMAT_VERSION:
        raise TraceError("missing or unsupported trace header")
    env = codec.decode_env(header["env"], functions)
    start = cur = codec.decode_net_config(header["initial"], env)
    if codec.config_digest(cur) != header["state_digest"]:
        raise TraceError("initial state digest mismatch")
    steps = []
    for n, line in enumerate(lines[1:]):
        rec = json.loads(line)
        if rec.get("seq") != n:
            raise TraceError(f"record {n}: expected seq {n}, found {rec.get('seq')}")
        mu = codec.decode_label(rec["label"])
        want = rec["state_digest"]
        match = [c for m, c in N_.enumerate_net_steps(cur, allow_restart=True)
                 if m == mu and codec.config_digest(c) == want]
        if not match:
            raise TraceError(f"record {n}: {mu} does not lead to state {want[:12]}")
        cur = match[0]
        steps.append((mu, cur))
    return ExecutionTrace(start, steps, validate=False)
