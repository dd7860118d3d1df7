"""Networks of endpoint programs and their semantics, including crash-restart.

A process program is a tuple of instructions.  A network maps every declared
process to its program; finished processes map to ``()``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from . import state as st
from .chor import ProtocolError
from .state import (
    FAIL,
    CompensateEv,
    Commit,
    Env,
    FrozenMap,
    RecvEv,
    RestartEv,
    SelRecvEv,
    SelSendEv,
    SendEv,
    Tau,
    TransitionLabel,
)
from .values import Expr, SelLabel, eval_expr, format_expr

__all__ = [
    "SendTo", "RecvFrom", "Select", "Branch", "Assign", "Cond", "Trans",
    "NetConfig", "make_network", "enumerate_net_steps", "restart_process",
    "commit_transaction_net", "is_net_terminated", "is_net_deadlocked",
    "format_program", "ProtocolError",
]


@dataclass(frozen=True, slots=True)
class SendTo:
    q: str
    e: Expr


@dataclass(frozen=True, slots=True)
class RecvFrom:
    p: str
    x: str


@dataclass(frozen=True, slots=True)
class Select:
    q: str
    label: str


@dataclass(frozen=True, slots=True)
class Branch:
    """``p & {L: P, ...}``; ``branches`` is a tuple of (label, program) sorted by label."""

    p: str
    branches: tuple

    def __post_init__(self):
        labels = [lab for lab, _ in self.branches]
        if not labels:
            raise ValueError("branch needs at least one label")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate branch labels {labels}")
        object.__setattr__(self, "branches", tuple(sorted(self.branches, key=lambda b: b[0])))

    def get(self, label):
        for lab, prog in self.branches:
            if lab == label:
                return prog
        return None

    @property
    def labels(self):
        return tuple(lab for lab, _ in self.branches)


@dataclass(frozen=True, slots=True)
class Assign:
    x: str
    e: Expr


@dataclass(frozen=True, slots=True)
class Cond:
    e: Expr
    then: tuple
    orelse: tuple


@dataclass(frozen=True, slots=True)
class Trans:
    x: str
    t: str
    e: Expr


ProcInstr = SendTo | RecvFrom | Select | Branch | Assign | Cond | Trans


def format_program(P: tuple, indent: int = 0) -> str:
    pad = "  " * indent
    lines = []
    for i in P:
        t = type(i)
        if t is SendTo:
            lines.append(f"{pad}{i.q} ! {format_expr(i.e)}")
        elif t is RecvFrom:
            lines.append(f"{pad}{i.p} ? {i.x}")
        elif t is Select:
            lines.append(f"{pad}{i.q} (+) {i.label}")
        elif t is Branch:
            lines.append(f"{pad}{i.p} & {{")
            for lab, prog in i.branches:
                lines.append(f"{pad}  {lab}: {{")
                body = format_program(prog, indent + 2)
                if body:
                    lines.append(body)
                lines.append(f"{pad}  }}")
            lines.append(f"{pad}}}")
        elif t is Assign:
            lines.append(f"{pad}{i.x} := {format_expr(i.e)}")
        elif t is Trans:
            lines.append(f"{pad}{i.x} := {i.t}({format_expr(i.e)})")
        else:
            lines.append(f"{pad}if {format_expr(i.e)} {{")
            body = format_program(i.then, indent + 1)
            if body:
                lines.append(body)
            lines.append(f"{pad}}} else {{")
            body = format_program(i.orelse, indent + 1)
            if body:
                lines.append(body)
            lines.append(f"{pad}}}")
    return "\n".join(lines)


@dataclass(frozen=True, slots=True)
class NetConfig:
    N: FrozenMap
    sigma: FrozenMap
    K: FrozenMap
    S: FrozenMap
    T: FrozenMap
    A: frozenset
    env: Env = field(compare=False, repr=False)

    def program(self, p: str) -> tuple:
        return self.N.get(p, ())

    def with_(self, **kw) -> "NetConfig":
        return dataclasses.replace(self, **kw)


def make_network(programs: dict, env: Env, sigma=None, K=None, S=None, T=None, A=None) -> NetConfig:
    """Build a configuration whose start network (the restart target) is ``programs``."""
    missing = set(programs) - set(env.processes)
    if missing:
        raise ValueError(f"programs for undeclared processes {sorted(missing)}")
    N = FrozenMap({p: tuple(programs.get(p, ())) for p in env.processes})
    if env.n_start is None:
        env = dataclasses.replace(env, n_start=N)
    return NetConfig(
        N,
        env.sigma_start if sigma is None else sigma,
        st.EMPTY if K is None else K,
        st.EMPTY if S is None else S,
        st.EMPTY if T is None else T,
        env.a_start if A is None else frozenset(A),
        env,
    )


def restart_process(cfg: NetConfig, p: str) -> NetConfig:
    env = cfg.env
    if p not in env.a_start:
        raise KeyError(f"unknown process {p!r}")
    return NetConfig(
        cfg.N.set(p, env.n_start.get(p, ())),
        st.store_reset(cfg.sigma, p, env.sigma_start),
        cfg.K,
        st.restart_seq(cfg.S, p),
        cfg.T,
        cfg.A,
        env,
    )


def commit_transaction_net(cfg: NetConfig, p: str, t: str, v):
    """Run ``t(v)`` at ``p`` with replay idempotence.

    Returns ``(output, cfg')`` on success, ``(FAIL, cfg')`` on failure (log
    compensated, ``p`` deactivated) and ``(FAIL, None)`` when failure is not
    permitted because ``t`` already committed at ``p``.
    """
    tdef = cfg.env.transaction(t)
    prior = st.committed_output(cfg.T, p, t, v)
    if prior is not None:
        return prior.output, cfg
    out = tdef.run(v)
    if out is FAIL:
        if st.has_committed(cfg.T, p, t):
            return FAIL, None
        T2 = st.comp(cfg.T, p, cfg.env.transactions)
        return FAIL, cfg.with_(T=T2, A=cfg.A - {p})
    return out, cfg.with_(T=st.t_append(cfg.T, p, Commit(t, v, out)))


def _process_steps(cfg: NetConfig, p: str):
    P = cfg.N.get(p, ())
    if not P or p not in cfg.A:
        return
    instr, rest = P[0], P[1:]
    env = cfg.env
    sigma = cfg.sigma
    t = type(instr)
    if t is Assign:
        v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
        yield Tau(p), cfg.with_(N=cfg.N.set(p, rest), sigma=st.store_set(sigma, p, instr.x, v))
    elif t is SendTo:
        q = instr.q
        v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
        i = st.seq_get(cfg.S, p, q, st.SEND)
        yield SendEv(p, v, q), cfg.with_(
            N=cfg.N.set(p, rest), K=st.k_bind(cfg.K, p, q, i, v), S=st.inc_send(cfg.S, p, q))
    elif t is RecvFrom:
        q = instr.p
        i = st.seq_get(cfg.S, p, q, st.RECEIVE)
        v = cfg.K.get((q, p, i), _NONE)
        if v is not _NONE:
            if type(v) is SelLabel:
                raise ProtocolError(f"{p} expected a value from {q}, found label {v}")
            yield RecvEv(q, v, p), cfg.with_(
                N=cfg.N.set(p, rest), sigma=st.store_set(sigma, p, instr.x, v),
                S=st.inc_recv(cfg.S, p, q))
    elif t is Select:
        q = instr.q
        i = st.seq_get(cfg.S, p, q, st.SEND)
        yield SelSendEv(p, instr.label, q), cfg.with_(
            N=cfg.N.set(p, rest), K=st.k_bind(cfg.K, p, q, i, SelLabel(instr.label)),
            S=st.inc_send(cfg.S, p, q))
    elif t is Branch:
        q = instr.p
        i = st.seq_get(cfg.S, p, q, st.RECEIVE)
        v = cfg.K.get((q, p, i), _NONE)
        if v is not _NONE:
            if type(v) is not SelLabel:
                raise ProtocolError(f"{p} expected a label from {q}, found value {v!r}")
            cont = instr.get(v.name)
            if cont is None:
                raise ProtocolError(
                    f"{p} received unexpected label {v.name} from {q}; offers {list(instr.labels)}")
            yield SelRecvEv(q, v.name, p), cfg.with_(
                N=cfg.N.set(p, cont + rest), S=st.inc_recv(cfg.S, p, q))
    elif t is Cond:
        v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
        if type(v) is not bool:
            raise ProtocolError(f"condition at {p} evaluated to non-boolean {v!r}")
        yield Tau(p), cfg.with_(N=cfg.N.set(p, (instr.then if v else instr.orelse) + rest))
    elif t is Trans:
        v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
        out, cfg2 = commit_transaction_net(cfg, p, instr.t, v)
        if out is FAIL:
            if cfg2 is not None:
                yield CompensateEv(p), cfg2.with_(N=cfg2.N.set(p, rest))
        else:
            yield Tau(p), cfg2.with_(N=cfg2.N.set(p, rest), sigma=st.store_set(sigma, p, instr.x, out))
    else:
        raise TypeError(f"not a process instruction: {instr!r}")


_NONE = object()


def enumerate_net_steps(cfg: NetConfig, allow_restart: bool = False,
                        restartable=None) -> list[tuple[TransitionLabel, NetConfig]]:
    """All one-step successors in canonical label order.

    ``restartable`` narrows which processes may restart (default: all).
    """
    env = cfg.env
    out = []
    for p in env.processes:
        out.extend(_process_steps(cfg, p))
    if cfg.A != env.a_start:
        for p in sorted(cfg.A):
            out.append((CompensateEv(p), cfg.with_(
                T=st.comp(cfg.T, p, env.transactions), A=cfg.A - {p})))
    if allow_restart:
        for p in env.processes:
            if restartable is None or p in restartable:
                out.append((RestartEv(p), restart_process(cfg, p)))
    out.sort(key=lambda s: s[0].encoding())
    return out


def is_net_terminated(cfg: NetConfig) -> bool:
    return not enumerate_net_steps(cfg, allow_restart=False)


def is_net_deadlocked(cfg: NetConfig) -> bool:
    return (is_net_terminated(cfg)
            and any(cfg.N.get(p, ()) for p in cfg.env.processes)
            and bool(cfg.A))
