"""Endpoint projection with full merging.

Projected programs keep conditionals and branches in tail position: the
continuation after a choreographic conditional is pushed into both branches,
so a program produced here never has instructions after a ``Cond`` or
``Branch``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import lru_cache

from . import chor as C_
from . import net as N_
from .chor import CheckResult, ChorConfig
from .net import NetConfig
from .state import FrozenMap
from .values import format_expr


class MergeError(Exception):
    def __init__(self, left, right):
        self.left, self.right = left, right
        super().__init__(f"cannot merge {_show(left)} with {_show(right)}")


class ProjectionError(Exception):
    """Projection undefined for ``process`` at the conditional ``cond``."""

    def __init__(self, process: str, cond: str, detail: str):
        self.process, self.cond, self.detail = process, cond, detail
        super().__init__(f"process {process} is not projectable at `{cond}`: {detail}")


def _show(x):
    if x is None:
        return "end of program"
    return N_.format_program((x,)).replace("\n", " ")


# -- merging ---------------------------------------------------------------------------


def merge(P: tuple, Q: tuple) -> tuple:
    """Full merge: identical programs, or branches on the same sender with label union."""
    if P == Q:
        return P
    if not P or not Q:
        raise MergeError(P[0] if P else None, Q[0] if Q else None)
    a, b = P[0], Q[0]
    ta = type(a)
    if ta is N_.Branch and type(b) is N_.Branch and a.p == b.p:
        conts = dict(a.branches)
        for lab, prog in b.branches:
            conts[lab] = merge(conts[lab], prog) if lab in conts else prog
        head = N_.Branch(a.p, tuple(conts.items()))
    elif ta is N_.Cond and type(b) is N_.Cond and a.e == b.e:
        head = N_.Cond(a.e, merge(a.then, b.then), merge(a.orelse, b.orelse))
    elif a == b:
        head = a
    else:
        raise MergeError(a, b)
    return (head,) + merge(P[1:], Q[1:])


def prog_geq(P: tuple, Q: tuple) -> bool:
    """``P ⊒ Q``: equal up to branches in ``P`` offering extra labels."""
    if len(P) != len(Q):
        return False
    for a, b in zip(P, Q):
        if a == b:
            continue
        ta = type(a)
        if ta is N_.Branch and type(b) is N_.Branch and a.p == b.p:
            for lab, prog in b.branches:
                mine = a.get(lab)
                if mine is None or not prog_geq(mine, prog):
                    return False
        elif ta is N_.Cond and type(b) is N_.Cond and a.e == b.e:
            if not (prog_geq(a.then, b.then) and prog_geq(a.orelse, b.orelse)):
                return False
        else:
            return False
    return True


def net_geq(N: FrozenMap, M: FrozenMap, processes) -> bool:
    return all(prog_geq(N.get(p, ()), M.get(p, ())) for p in processes)


# -- projection -----------------------------------------------------------------------


@lru_cache(maxsize=200_000)
def project(C: tuple, r: str) -> tuple:
    """``⟦C⟧_r``; raises :class:`ProjectionError` if a merge is undefined."""
    out = []
    for idx, i in enumerate(C):
        t = type(i)
        if t is C_.Send:
            if r == i.p:
                out.append(N_.SendTo(i.q, i.e))
            elif r == i.q:
                out.append(N_.RecvFrom(i.p, i.x))
        elif t is C_.InFlight:
            if r == i.q:
                out.append(N_.RecvFrom(i.p, i.x))
        elif t is C_.SelSend or t is C_.SelInFlight:
            if r == i.p and t is C_.SelSend:
                out.append(N_.Select(i.q, i.label))
            elif r == i.q:
                out.append(N_.Branch(i.p, ((i.label, project(C[idx + 1:], r)),)))
                return tuple(out)
        elif t is C_.Assign:
            if r == i.p:
                out.append(N_.Assign(i.x, i.e))
        elif t is C_.Trans:
            if r == i.p:
                out.append(N_.Trans(i.x, i.t, i.e))
        elif t is C_.Cond:
            rest = C[idx + 1:]
            P1 = project(i.then + rest, r)
            P2 = project(i.orelse + rest, r)
            if r == i.p:
                out.append(N_.Cond(i.e, P1, P2))
                return tuple(out)
            try:
                return tuple(out) + merge(P1, P2)
            except MergeError as exc:
                raise ProjectionError(r, f"if {i.p}.{format_expr(i.e)}", str(exc)) from None
        else:
            raise TypeError(f"not a choreography instruction: {i!r}")
    return tuple(out)


@dataclass
class ProjectionResult:
    programs: dict
    diagnostics: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.diagnostics


def project_all(C: tuple, processes=()) -> ProjectionResult:
    """Project onto every process in ``C`` plus ``processes`` (unused ones get ``()``)."""
    names = sorted(C_.processes_of(C) | set(processes))
    res = ProjectionResult({})
    for r in names:
        try:
            res.programs[r] = project(C, r)
        except ProjectionError as exc:
            res.diagnostics.append(str(exc))
    return res


def check_projectability(C: tuple, processes=()) -> CheckResult:
    res = project_all(C, processes)
    return CheckResult(res.ok, res.diagnostics)


def projected_config(cfg: ChorConfig) -> NetConfig:
    """The network configuration ``⟨⟦C⟧, Σ, K, S, T, A⟩``."""
    env = cfg.env
    N = FrozenMap({p: project(cfg.chor, p) for p in env.processes})
    if env.n_start is None:
        env = dataclasses.replace(env, n_start=N)
    return NetConfig(N, cfg.sigma, cfg.K, cfg.S, cfg.T, cfg.A, env)
