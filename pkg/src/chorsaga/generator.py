"""Random saga choreographies that are projectable by construction."""

from __future__ import annotations

import random
from dataclasses import dataclass

from . import chor as C_
from .state import Env, builtin_transaction, make_store
from .values import Call, Lit, Var


@dataclass(frozen=True)
class ChorGenSpec:
    """Generation bounds.

    ``depth`` bounds the number of generated instructions on any path (the
    selections announcing a branch are not counted).  ``fail_rate`` is the
    probability that a transaction is one that can fail.
    """

    n_procs: int = 3
    depth: int = 8
    cond_prob: float = 0.2
    max_conds: int = 2
    max_trans: int = 3
    fail_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_procs < 2:
            raise ValueError("need at least two processes")
        if self.depth < 0:
            raise ValueError("depth must be nonnegative")


VARS = ("x", "y")


class _Gen:
    def __init__(self, spec: ChorGenSpec):
        self.spec = spec
        self.rng = random.Random(spec.seed)
        self.procs = tuple(f"p{i}" for i in range(spec.n_procs))
        self.conds = 0
        self.tdefs = {}

    def expr(self):
        rng = self.rng
        v = Var(rng.choice(VARS))
        if rng.random() < 0.5:
            return v
        return Call("add", (v, Lit(rng.randint(1, 3))))

    def simple(self):
        rng = self.rng
        kinds = ["send", "send", "assign"]
        if len(self.tdefs) < self.spec.max_trans:
            kinds += ["trans", "trans"]
        kind = rng.choice(kinds)
        p = rng.choice(self.procs)
        if kind == "send":
            q = rng.choice([q for q in self.procs if q != p])
            return C_.Send(p, self.expr(), q, rng.choice(VARS))
        if kind == "assign":
            return C_.Assign(p, rng.choice(VARS), self.expr())
        name = f"t{len(self.tdefs)}"
        if rng.random() < self.spec.fail_rate:
            tdef = builtin_transaction(name, rng.choice(("fail", "fail_if_odd")))
        elif rng.random() < 0.5:
            tdef = builtin_transaction(name, "add", rng.randint(1, 5))
        else:
            tdef = builtin_transaction(name, "ok")
        self.tdefs[name] = tdef
        return C_.Trans(p, rng.choice(VARS), name, Var(rng.choice(VARS)))

    def block(self, budget: int) -> tuple:
        out = []
        rng = self.rng
        while budget > 0:
            if self.conds < self.spec.max_conds and rng.random() < self.spec.cond_prob:
                self.conds += 1
                p = rng.choice(self.procs)
                inner = rng.randint(0, budget - 1)
                guard = Call("lt", (Var(rng.choice(VARS)), Lit(rng.randint(0, 9))))
                others = [q for q in self.procs if q != p]
                then = tuple(C_.SelSend(p, q, "L") for q in others) + self.block(inner)
                orelse = tuple(C_.SelSend(p, q, "R") for q in others) + self.block(inner)
                out.append(C_.Cond(p, guard, then, orelse))
                budget -= 1 + inner
            else:
                out.append(self.simple())
                budget -= 1
        return tuple(out)


def generate_saga(spec: ChorGenSpec) -> C_.Saga:
    g = _Gen(spec)
    chor = g.block(spec.depth)
    init = {p: {x: g.rng.randint(0, 9) for x in VARS} for p in g.procs}
    env = Env(g.procs, transactions=g.tdefs, sigma_start=make_store(init))
    return C_.Saga(chor, env)


def generate_choreography(spec: ChorGenSpec) -> tuple:
    return generate_saga(spec).chor


def corpus(n: int, seed: int = 0, n_procs: int = 3, max_depth: int = 8,
           fail_rate: float = 0.3, cond_prob: float = 0.2) -> list[C_.Saga]:
    """``n`` sagas with depths drawn from 1..max_depth, reproducible per seed."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        spec = ChorGenSpec(n_procs=rng.randint(2, n_procs), depth=rng.randint(1, max_depth),
                           cond_prob=cond_prob, fail_rate=fail_rate, seed=rng.getrandbits(32))
        out.append(generate_saga(spec))
    return out
