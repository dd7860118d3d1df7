"""Choreographies: syntax and labelled transition semantics.

A choreography is a tuple of instructions (the empty tuple is ``0``).
``InFlight`` and ``SelInFlight`` are runtime terms produced by a send step;
source programs never contain them.

Out-of-order execution follows the delay rule: a step of a later instruction
may fire as long as its performing process does not own any earlier
instruction.  Conditionals additionally let a process step inside both
branches when it can take the same step in each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from . import state as st
from .state import (
    FAIL,
    CompensateEv,
    Commit,
    Env,
    FrozenMap,
    RecvEv,
    SelRecvEv,
    SelSendEv,
    SendEv,
    Tau,
    TransitionLabel,
)
from .values import Expr, SelLabel, eval_expr, format_expr


class ProtocolError(Exception):
    """A receive found the wrong kind of payload (value vs. label)."""


# -- syntax ----------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Send:
    p: str
    e: Expr
    q: str
    x: str


@dataclass(frozen=True, slots=True)
class InFlight:
    p: str
    q: str
    x: str


@dataclass(frozen=True, slots=True)
class SelSend:
    p: str
    q: str
    label: str


@dataclass(frozen=True, slots=True)
class SelInFlight:
    p: str
    q: str
    label: str


@dataclass(frozen=True, slots=True)
class Assign:
    p: str
    x: str
    e: Expr


@dataclass(frozen=True, slots=True)
class Cond:
    p: str
    e: Expr
    then: tuple
    orelse: tuple


@dataclass(frozen=True, slots=True)
class Trans:
    p: str
    x: str
    t: str
    e: Expr


ChorInstr = Send | InFlight | SelSend | SelInFlight | Assign | Cond | Trans
Choreography = tuple  # tuple[ChorInstr, ...]

NIL: Choreography = ()


def owners(instr: ChorInstr) -> frozenset:
    """Processes whose later steps must wait for ``instr``."""
    t = type(instr)
    if t is Send or t is SelSend:
        return frozenset((instr.p, instr.q))
    if t is InFlight or t is SelInFlight:
        return frozenset((instr.q,))
    if t is Cond:
        ps = {instr.p}
        for sub in (instr.then, instr.orelse):
            for i in sub:
                ps |= owners(i)
        return frozenset(ps)
    return frozenset((instr.p,))


def processes_of(C: Choreography) -> set:
    """Every process name mentioned in ``C``."""
    ps = set()
    for i in C:
        t = type(i)
        if t in (Send, InFlight, SelSend, SelInFlight):
            ps.update((i.p, i.q))
        elif t is Cond:
            ps.add(i.p)
            ps |= processes_of(i.then)
            ps |= processes_of(i.orelse)
        else:
            ps.add(i.p)
    return ps


def transactions_of(C: Choreography) -> list:
    out = []
    for i in C:
        if type(i) is Trans:
            out.append((i.p, i.t))
        elif type(i) is Cond:
            out += transactions_of(i.then) + transactions_of(i.orelse)
    return out


def is_source(C: Choreography) -> bool:
    """True iff ``C`` contains no runtime-only terms."""
    for i in C:
        if type(i) in (InFlight, SelInFlight):
            return False
        if type(i) is Cond and not (is_source(i.then) and is_source(i.orelse)):
            return False
    return True


def format_chor(C: Choreography, indent: int = 0) -> str:
    pad = "  " * indent
    lines = []
    for i in C:
        t = type(i)
        if t is Send:
            lines.append(f"{pad}{i.p}.{format_expr(i.e)} -> {i.q}.{i.x}")
        elif t is InFlight:
            lines.append(f"{pad}{i.p} ~> {i.q}.{i.x}")
        elif t is SelSend:
            lines.append(f"{pad}{i.p} -> {i.q}[{i.label}]")
        elif t is SelInFlight:
            lines.append(f"{pad}{i.p} ~> {i.q}[{i.label}]")
        elif t is Assign:
            lines.append(f"{pad}{i.p}.{i.x} := {format_expr(i.e)}")
        elif t is Trans:
            lines.append(f"{pad}{i.p}.{i.x} := {i.t}({format_expr(i.e)})")
        else:
            lines.append(f"{pad}if {i.p}.{format_expr(i.e)} {{")
            body = format_chor(i.then, indent + 1)
            if body:
                lines.append(body)
            lines.append(f"{pad}}} else {{")
            body = format_chor(i.orelse, indent + 1)
            if body:
                lines.append(body)
            lines.append(f"{pad}}}")
    return "\n".join(lines)


# -- configurations -----------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class ChorConfig:
    chor: Choreography
    sigma: FrozenMap
    K: FrozenMap
    S: FrozenMap
    T: FrozenMap
    A: frozenset
    env: Env = field(compare=False, repr=False)

    def stores(self):
        return (self.sigma, self.K, self.S, self.T, self.A)


def initial_config(C: Choreography, env: Env) -> ChorConfig:
    return ChorConfig(C, env.sigma_start, st.EMPTY, st.EMPTY, st.EMPTY, env.a_start, env)


# -- semantics --------------------------------------------------------------------------

# internal store tuple: (sigma, K, S, T, A)


def _head_steps(instr, rest, stores, env, blocked) -> Iterator:
    """Steps performed by ``instr`` itself; yields (label, replacement, stores)."""
    sigma, K, S, T, A = stores
    t = type(instr)
    if t is Assign:
        p = instr.p
        if p in A and p not in blocked:
            v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
            yield Tau(p), (), (st.store_set(sigma, p, instr.x, v), K, S, T, A)
    elif t is Send:
        p, q = instr.p, instr.q
        if p in A and p not in blocked:
            v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
            i = st.seq_get(S, p, q, st.SEND)
            K2 = st.k_bind(K, p, q, i, v)
            yield SendEv(p, v, q), (InFlight(p, q, instr.x),), (
                sigma, K2, st.inc_send(S, p, q), T, A)
    elif t is InFlight:
        p, q = instr.p, instr.q
        if q in A and q not in blocked:
            i = st.seq_get(S, q, p, st.RECEIVE)
            v = K.get((p, q, i), _NONE)
            if v is not _NONE:
                if type(v) is SelLabel:
                    raise ProtocolError(f"{q} expected a value from {p}, found label {v}")
                yield RecvEv(p, v, q), (), (
                    st.store_set(sigma, q, instr.x, v), K, st.inc_recv(S, q, p), T, A)
    elif t is SelSend:
        p, q = instr.p, instr.q
        if p in A and p not in blocked:
            i = st.seq_get(S, p, q, st.SEND)
            K2 = st.k_bind(K, p, q, i, SelLabel(instr.label))
            yield SelSendEv(p, instr.label, q), (SelInFlight(p, q, instr.label),), (
                sigma, K2, st.inc_send(S, p, q), T, A)
    elif t is SelInFlight:
        p, q = instr.p, instr.q
        if q in A and q not in blocked:
            i = st.seq_get(S, q, p, st.RECEIVE)
            v = K.get((p, q, i), _NONE)
            if v is not _NONE:
                if type(v) is not SelLabel or v.name != instr.label:
                    raise ProtocolError(f"{q} expected label {instr.label} from {p}, found {v!r}")
                yield SelRecvEv(p, instr.label, q), (), (sigma, K, st.inc_recv(S, q, p), T, A)
    elif t is Trans:
        p = instr.p
        if p in A and p not in blocked:
            v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
            out = env.transaction(instr.t).run(v)
            if out is FAIL:
                if not st.has_committed(T, p, instr.t):
                    yield CompensateEv(p), (), (
                        sigma, K, S, st.comp(T, p, env.transactions), A - {p})
            else:
                yield Tau(p), (), (
                    st.store_set(sigma, p, instr.x, out), K, S,
                    st.t_append(T, p, Commit(instr.t, v, out)), A)
    elif t is Cond:
        p = instr.p
        if p in A and p not in blocked:
            v = eval_expr(st.store_view(sigma, p), instr.e, env.functions)
            if type(v) is not bool:
                raise ProtocolError(f"condition at {p} evaluated to non-boolean {v!r}")
            yield Tau(p), instr.then if v else instr.orelse, stores
        # a process other than p may step inside both branches alike
        inner = blocked | {p}
        left = list(_steps(instr.then, stores, env, inner))
        if left:
            right = {}
            for mu, c2, s2 in _steps(instr.orelse, stores, env, inner):
                right.setdefault((mu, s2), []).append(c2)
            for mu, c1, s1 in left:
                for c2 in right.get((mu, s1), ()):
                    yield mu, (Cond(p, instr.e, c1, c2),), s1
    else:
        raise TypeError(f"not a choreography instruction: {instr!r}")


_NONE = object()


def _steps(C: Choreography, stores, env, blocked=frozenset()) -> Iterator:
    """All steps of ``C`` (without top-level compensation); yields (label, C', stores')."""
    everyone = env.a_start
    for idx, instr in enumerate(C):
        if blocked >= everyone:
            return
        for mu, repl, stores2 in _head_steps(instr, C[idx + 1:], stores, env, blocked):
            yield mu, C[:idx] + repl + C[idx + 1:], stores2
        blocked = blocked | owners(instr)


def enumerate_chor_steps(cfg: ChorConfig) -> list[tuple[TransitionLabel, ChorConfig]]:
    """Every configuration reachable in one labelled step, in canonical order."""
    env = cfg.env
    stores = cfg.stores()
    seen = set()
    out = []
    for mu, C2, (sigma, K, S, T, A) in _steps(cfg.chor, stores, env):
        nxt = ChorConfig(C2, sigma, K, S, T, A, env)
        if (mu, nxt) not in seen:
            seen.add((mu, nxt))
            out.append((mu, nxt))
    if cfg.A != env.a_start:
        for p in sorted(cfg.A):
            nxt = ChorConfig(cfg.chor, cfg.sigma, cfg.K, cfg.S,
                             st.comp(cfg.T, p, env.transactions), cfg.A - {p}, env)
            out.append((CompensateEv(p), nxt))
    out.sort(key=lambda s: s[0].encoding())
    return out


def is_chor_terminated(cfg: ChorConfig) -> bool:
    return not enumerate_chor_steps(cfg)


# -- well-formedness --------------------------------------------------------------------


@dataclass
class CheckResult:
    ok: bool
    diagnostics: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def check_chor_wellformed(cfg: ChorConfig) -> CheckResult:
    """Clauses: (a) in-flight terms backed by K, (b) no self-communication,
    (c) projectable, (d) A within the start set."""
    from .projection import check_projectability

    diags = []

    def walk(C, offsets):
        offsets = dict(offsets)
        for i in C:
            t = type(i)
            if t in (Send, SelSend, InFlight, SelInFlight) and i.p == i.q:
                diags.append(f"(b) self-communication at {i.p}: {format_chor((i,))}")
            if t in (InFlight, SelInFlight):
                off = offsets.get((i.p, i.q), 0)
                idx = st.seq_get(cfg.S, i.q, i.p, st.RECEIVE) + off
                v = cfg.K.get((i.p, i.q, idx), _NONE)
                if v is _NONE:
                    diags.append(f"(a) dangling in-flight {format_chor((i,))}: K{(i.p, i.q, idx)} unbound")
                elif t is InFlight and type(v) is SelLabel:
                    diags.append(f"(a) in-flight value {format_chor((i,))} but K holds label {v}")
                elif t is SelInFlight and (type(v) is not SelLabel or v.name != i.label):
                    diags.append(f"(a) in-flight label {format_chor((i,))} but K holds {v!r}")
                offsets[(i.p, i.q)] = off + 1
            elif t is Cond:
                walk(i.then, offsets)
                walk(i.orelse, offsets)

    walk(cfg.chor, {})
    proj = check_projectability(cfg.chor, cfg.env.processes)
    if not proj.ok:
        diags += [f"(c) {d}" for d in proj.diagnostics]
    if not cfg.A <= cfg.env.a_start:
        diags.append(f"(d) active set {sorted(cfg.A)} not within {sorted(cfg.env.a_start)}")
    return CheckResult(not diags, diags)


@dataclass(frozen=True)
class Saga:
    """A source choreography bundled with the environment it runs in."""

    chor: Choreography
    env: Env

    def initial(self) -> ChorConfig:
        return initial_config(self.chor, self.env)
