"""Stores shared by the choreography and network semantics.

A configuration carries five stores next to its program:

* ``sigma`` -- variable store, keyed ``(process, variable)``; total, unbound is unit
* ``K``     -- durable message state, keyed ``(sender, receiver, seqnum)``; write-once
* ``S``     -- sequence numbers, keyed ``(local, remote, SEND|RECEIVE)``; zero rows omitted
* ``T``     -- transaction logs, process -> tuple of :class:`Commit` / :class:`Comp`
* ``A``     -- active set (frozenset of process names)

All of them are immutable; "updates" return new objects so configurations can
be hashed and shared freely during exploration.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .values import (
    DEFAULT_FUNCTIONS,
    UNIT,
    Value,
    format_value,
    value_key,
)

SEND = "send"
RECEIVE = "receive"


class DeterminismViolation(Exception):
    """A message slot was rebound to a different value."""


class InvariantViolation(Exception):
    """An internal kernel invariant does not hold (kernel bug surface)."""


class FrozenMap(Mapping):
    """Small immutable dict with structural (type-tagged) equality and cached hash."""

    __slots__ = ("_d", "_canon", "_hash")

    def __init__(self, data=None):
        self._d = dict(data) if data else {}
        self._canon = None
        self._hash = None

    @classmethod
    def _wrap(cls, d):
        m = cls.__new__(cls)
        m._d = d
        m._canon = None
        m._hash = None
        return m

    def __getitem__(self, k):
        return self._d[k]

    def __iter__(self):
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    def __contains__(self, k):
        return k in self._d

    def get(self, k, default=None):
        return self._d.get(k, default)

    def set(self, k, v) -> "FrozenMap":
        d = self._d.copy()
        d[k] = v
        return FrozenMap._wrap(d)

    def update(self, items) -> "FrozenMap":
        d = self._d.copy()
        d.update(items)
        return FrozenMap._wrap(d)

    def without(self, k) -> "FrozenMap":
        if k not in self._d:
            return self
        d = self._d.copy()
        del d[k]
        return FrozenMap._wrap(d)

    def filter(self, pred) -> "FrozenMap":
        return FrozenMap._wrap({k: v for k, v in self._d.items() if pred(k)})

    def canon(self):
        if self._canon is None:
            self._canon = frozenset((k, value_key(v)) for k, v in self._d.items())
        return self._canon

    def __eq__(self, other):
        if self is other:
            return True
        if not isinstance(other, FrozenMap):
            return NotImplemented
        if len(self._d) != len(other._d):
            return False
        return self.canon() == other.canon()

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(self.canon())
        return self._hash

    def __repr__(self):
        return f"FrozenMap({self._d!r})"


EMPTY = FrozenMap()


# -- variable store -------------------------------------------------------------


def store_get(sigma: FrozenMap, p: str, x: str) -> Value:
    return sigma.get((p, x), UNIT)


def store_view(sigma: FrozenMap, p: str) -> dict:
    """Per-process view ``Σ(p)`` as a plain dict of variable -> value."""
    return {x: v for (q, x), v in sigma.items() if q == p}


def store_set(sigma: FrozenMap, p: str, x: str, v: Value) -> FrozenMap:
    return sigma.set((p, x), v)


def store_reset(sigma: FrozenMap, p: str, sigma_start: FrozenMap) -> FrozenMap:
    d = {k: v for k, v in sigma.items() if k[0] != p}
    d.update((k, v) for k, v in sigma_start.items() if k[0] == p)
    return FrozenMap._wrap(d)


def make_store(values: Mapping[str, Mapping[str, Value]] | None = None) -> FrozenMap:
    """Build Σ from ``{process: {var: value}}``."""
    d = {}
    for p, vs in (values or {}).items():
        for x, v in vs.items():
            d[(p, x)] = v
    return FrozenMap(d)


# -- message state ---------------------------------------------------------------


def k_bind(K: FrozenMap, p: str, q: str, i: int, v) -> FrozenMap:
    key = (p, q, i)
    old = K.get(key, _MISSING)
    if old is _MISSING:
        return K.set(key, v)
    if value_key(old) != value_key(v):
        raise DeterminismViolation(
            f"K{key} already bound to {format_value(old)}, rebind to {format_value(v)}"
        )
    return K


_MISSING = object()


# -- sequence numbers ------------------------------------------------------------


def seq_get(S: FrozenMap, p: str, q: str, direction: str) -> int:
    return S.get((p, q, direction), 0)


def inc_send(S: FrozenMap, p: str, q: str) -> FrozenMap:
    return S.set((p, q, SEND), S.get((p, q, SEND), 0) + 1)


def inc_recv(S: FrozenMap, p: str, q: str) -> FrozenMap:
    return S.set((p, q, RECEIVE), S.get((p, q, RECEIVE), 0) + 1)


def restart_seq(S: FrozenMap, p: str) -> FrozenMap:
    return S.filter(lambda k: k[0] != p)


# -- transaction logs --------------------------------------------------------------


@dataclass(frozen=True, slots=True, eq=False)
class Commit:
    t: str
    input: Value
    output: Value

    def _key(self):
        return ("commit", self.t, value_key(self.input), value_key(self.output))

    def __eq__(self, other):
        return type(other) is Commit and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __str__(self):
        return f"{self.t}({format_value(self.input)})={format_value(self.output)}"


@dataclass(frozen=True, slots=True)
class Comp:
    of: Commit

    def __str__(self):
        return f"c({self.of})"


TransEntry = Commit | Comp


def t_log(T: FrozenMap, p: str) -> tuple:
    return T.get(p, ())


def committed_output(T: FrozenMap, p: str, t: str, v: Value):
    """Output of a prior ``t(v)`` commit by ``p``, or ``None`` if there is none."""
    key = value_key(v)
    for e in T.get(p, ()):
        if type(e) is Commit and e.t == t and value_key(e.input) == key:
            return e
    return None


def has_committed(T: FrozenMap, p: str, t: str) -> bool:
    return any(type(e) is Commit and e.t == t for e in T.get(p, ()))


def t_append(T: FrozenMap, p: str, entry: TransEntry) -> FrozenMap:
    return T.set(p, T.get(p, ()) + (entry,))


def comp(T: FrozenMap, p: str, transactions: Mapping | None = None) -> FrozenMap:
    """Append reverse-order compensations of every commit in ``T(p)``."""
    log = T.get(p, ())
    if any(type(e) is Comp for e in log):
        raise InvariantViolation(f"process {p} compensated twice")
    commits = [e for e in log if type(e) is Commit]
    if not commits:
        return T
    comps = tuple(Comp(c) for c in reversed(commits))
    if transactions is not None:
        for c in comps:
            tdef = transactions.get(c.of.t)
            if tdef is not None and tdef.compensate is not None:
                tdef.compensate(c.of.input, c.of.output)
    return T.set(p, log + comps)


def is_saga_shaped(log: Iterable[TransEntry]) -> bool:
    """True iff ``log`` is ``t1..ti, c(ti)..c(t1)`` for some i >= 0."""
    log = tuple(log)
    n = len(log)
    if n % 2:
        return False
    i = n // 2
    commits, comps = log[:i], log[i:]
    if any(type(e) is not Commit for e in commits):
        return False
    return all(type(c) is Comp and c.of == e for c, e in zip(comps, reversed(commits)))


def compensation_free(T: FrozenMap) -> bool:
    return all(type(e) is Commit for log in T.values() for e in log)


# -- transactions ------------------------------------------------------------------


class _Fail:
    __slots__ = ()

    def __repr__(self):
        return "FAIL"

    def __reduce__(self):
        return "FAIL"


FAIL = _Fail()


@dataclass(frozen=True)
class TransactionDef:
    """A local transaction: ``commit`` maps an input to an output or ``FAIL``.

    ``spec`` optionally describes a builtin behaviour so the definition can be
    written to and read back from trace files.
    """

    name: str
    commit: Callable[[Value], Any]
    compensate: Callable[[Value, Value], Any] | None = None
    spec: tuple | None = None

    def run(self, v: Value):
        out = self.commit(v)
        if out is not FAIL and not _is_plain_value(out):
            raise InvariantViolation(f"transaction {self.name} returned {out!r}")
        return out


def _is_plain_value(v):
    return type(v) in (int, bool, str) or v is UNIT


def builtin_transaction(name: str, kind: str = "ok", arg: int | None = None) -> TransactionDef:
    """Transactions described by data.

    ``ok`` returns its input, ``add k`` adds ``k`` to an integer input, ``fail``
    always fails, ``fail_above k`` fails on integer inputs greater than ``k``,
    ``fail_if_odd`` fails on odd integers.
    """
    if kind == "ok":
        fn = lambda v: v
    elif kind == "add":
        k = int(arg or 0)
        fn = lambda v: v + k if type(v) is int else v
    elif kind == "fail":
        fn = lambda v: FAIL
    elif kind == "fail_above":
        k = int(arg or 0)
        fn = lambda v: FAIL if type(v) is int and v > k else v
    elif kind == "fail_if_odd":
        fn = lambda v: FAIL if type(v) is int and v % 2 else v
    else:
        raise ValueError(f"unknown transaction kind {kind!r}")
    spec = (kind,) if arg is None else (kind, int(arg))
    return TransactionDef(name, fn, spec=spec)


# -- transition labels -------------------------------------------------------------

TAU = "tau"
SEND_EV = "send"
RECV_EV = "recv"
SELSEND_EV = "selsend"
SELRECV_EV = "selrecv"
COMPENSATE_EV = "compensate"
RESTART_EV = "restart"


@dataclass(frozen=True, slots=True, eq=False)
class TransitionLabel:
    """Observable event of one step.

    For communication events ``p`` is the sender and ``q`` the receiver; the
    performing process :attr:`pn` is the sender for sends and the receiver for
    receives.
    """

    kind: str
    p: str
    q: str | None = None
    value: Any = None

    @property
    def pn(self) -> str:
        if self.kind in (RECV_EV, SELRECV_EV):
            return self.q
        return self.p

    def encoding(self) -> tuple:
        v = "" if self.value is None else _value_text(self.value)
        return (self.kind, self.p, self.q or "", v)

    def __eq__(self, other):
        return type(other) is TransitionLabel and self.encoding() == other.encoding()

    def __hash__(self):
        return hash(self.encoding())

    def __str__(self):
        k = self.kind
        if k == TAU:
            return f"tau@{self.p}"
        if k == SEND_EV:
            return f"{self.p}.{format_value(self.value)}->{self.q}!"
        if k == RECV_EV:
            return f"{self.p}.{format_value(self.value)}->{self.q}?"
        if k == SELSEND_EV:
            return f"{self.p}->{self.q}[{self.value}]!"
        if k == SELRECV_EV:
            return f"{self.p}->{self.q}[{self.value}]?"
        return f"{k}@{self.p}"

    __repr__ = __str__


def _value_text(v):
    # selection labels travel as plain strings inside the label
    if type(v) is str:
        return "s:" + v
    return format_value(v)


def Tau(p):
    return TransitionLabel(TAU, p)


def SendEv(p, v, q):
    return TransitionLabel(SEND_EV, p, q, v)


def RecvEv(p, v, q):
    return TransitionLabel(RECV_EV, p, q, v)


def SelSendEv(p, label, q):
    return TransitionLabel(SELSEND_EV, p, q, label)


def SelRecvEv(p, label, q):
    return TransitionLabel(SELRECV_EV, p, q, label)


def CompensateEv(p):
    return TransitionLabel(COMPENSATE_EV, p)


def RestartEv(p):
    return TransitionLabel(RESTART_EV, p)


def pn(mu: TransitionLabel) -> str:
    return mu.pn


# -- environment ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Env:
    """Everything fixed for one run: the process set (``A_start``), registries
    and the start stores that ``restart`` resets to."""

    processes: tuple[str, ...]
    functions: Mapping[str, Callable] = field(default_factory=lambda: DEFAULT_FUNCTIONS)
    transactions: Mapping[str, TransactionDef] = field(default_factory=dict)
    sigma_start: FrozenMap = EMPTY
    n_start: FrozenMap | None = None

    def __post_init__(self):
        object.__setattr__(self, "processes", tuple(sorted(set(self.processes))))
        object.__setattr__(self, "a_start", frozenset(self.processes))

    def transaction(self, t: str) -> TransactionDef:
        tdef = self.transactions.get(t)
        if tdef is None:
            raise KeyError(f"unregistered transaction {t!r}")
        return tdef
