"""Value domain, expressions and canonical encodings.

Values are plain Python objects: ``int``, ``bool``, ``str`` and the ``UNIT``
singleton.  Selection labels stored in the message state are wrapped in
:class:`SelLabel` so they can never be confused with string values.

Because ``True == 1`` in Python, anything that needs structural equality
(hashing of configurations, write-once checks on the message state) goes
through :func:`value_key`.
"""

from __future__ import annotations

import hashlib
import json
import operator
from dataclasses import dataclass
from typing import Any, Callable, Mapping


class EvalError(Exception):
    """Expression evaluation failed (unknown function, bad argument types)."""


class Unit:
    __slots__ = ()
    _instance: "Unit | None" = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "()"

    def __reduce__(self):
        return (Unit, ())


UNIT = Unit()


@dataclass(frozen=True, slots=True)
class SelLabel:
    """A branch label travelling through the message state."""

    name: str

    def __repr__(self):
        return f"[{self.name}]"


Value = Any  # int | bool | str | Unit


def is_value(v: object) -> bool:
    return type(v) in (int, bool, str) or v is UNIT


def value_key(v: object):
    """Type-tagged key with structural equality (``True`` differs from ``1``)."""
    t = type(v)
    if t is bool:
        return ("bool", v)
    if t is int:
        return ("int", v)
    if t is str:
        return ("str", v)
    if v is UNIT:
        return ("unit",)
    if t is SelLabel:
        return ("label", v.name)
    return v


def values_equal(a: object, b: object) -> bool:
    return value_key(a) == value_key(b)


# -- expressions -------------------------------------------------------------


@dataclass(frozen=True, slots=True, eq=False)
class Lit:
    value: Value

    def __eq__(self, other):
        return type(other) is Lit and value_key(self.value) == value_key(other.value)

    def __hash__(self):
        return hash(("Lit", value_key(self.value)))


@dataclass(frozen=True, slots=True)
class Var:
    name: str


@dataclass(frozen=True, slots=True)
class Call:
    fn: str
    args: tuple


Expr = Lit | Var | Call


def _as_int(v):
    if type(v) is not int:
        raise EvalError(f"expected integer, got {format_value(v)}")
    return v


def _as_bool(v):
    if type(v) is not bool:
        raise EvalError(f"expected boolean, got {format_value(v)}")
    return v


def _arith(op):
    def f(a, b):
        return op(_as_int(a), _as_int(b))

    return f


def _compare(op):
    def f(a, b):
        if type(a) is not type(b) or type(a) not in (int, str):
            raise EvalError(f"cannot compare {format_value(a)} and {format_value(b)}")
        return op(a, b)

    return f


def _mod(a, b):
    if _as_int(b) == 0:
        raise EvalError("modulo by zero")
    return _as_int(a) % b


def _concat(*args):
    for a in args:
        if type(a) is not str:
            raise EvalError(f"concat expects strings, got {format_value(a)}")
    return "".join(args)


DEFAULT_FUNCTIONS: dict[str, Callable[..., Value]] = {
    "add": _arith(operator.add),
    "sub": _arith(operator.sub),
    "mul": _arith(operator.mul),
    "mod": _mod,
    "neg": lambda a: -_as_int(a),
    "min": _arith(min),
    "max": _arith(max),
    "eq": lambda a, b: values_equal(a, b),
    "ne": lambda a, b: not values_equal(a, b),
    "lt": _compare(operator.lt),
    "le": _compare(operator.le),
    "gt": _compare(operator.gt),
    "ge": _compare(operator.ge),
    "not": lambda a: not _as_bool(a),
    "and": lambda a, b: _as_bool(a) and _as_bool(b),
    "or": lambda a, b: _as_bool(a) or _as_bool(b),
    "concat": _concat,
    "id": lambda a: a,
}


def eval_expr(
    store: Mapping[str, Value],
    e: Expr,
    functions: Mapping[str, Callable[..., Value]] = DEFAULT_FUNCTIONS,
) -> Value:
    """Evaluate ``e`` against one process's variables; unbound names are unit."""
    t = type(e)
    if t is Lit:
        return e.value
    if t is Var:
        return store.get(e.name, UNIT)
    if t is Call:
        fn = functions.get(e.fn)
        if fn is None:
            raise EvalError(f"unknown function {e.fn!r}")
        args = [eval_expr(store, a, functions) for a in e.args]
        try:
            out = fn(*args)
        except EvalError:
            raise
        except TypeError as exc:
            raise EvalError(f"bad call {e.fn}/{len(args)}: {exc}") from exc
        if not is_value(out):
            raise EvalError(f"function {e.fn!r} returned non-value {out!r}")
        return out
    raise EvalError(f"not an expression: {e!r}")


def expr_functions(e: Expr):
    """All function names used in ``e``."""
    if type(e) is Call:
        yield e.fn
        for a in e.args:
            yield from expr_functions(a)


def expr_vars(e: Expr):
    if type(e) is Var:
        yield e.name
    elif type(e) is Call:
        for a in e.args:
            yield from expr_vars(a)


# -- text rendering -----------------------------------------------------------


def format_value(v: object) -> str:
    if type(v) is bool:
        return "true" if v else "false"
    if type(v) is int:
        return str(v)
    if type(v) is str:
        return json.dumps(v, ensure_ascii=False)
    if v is UNIT:
        return "()"
    if type(v) is SelLabel:
        return f"[{v.name}]"
    return repr(v)


def format_expr(e: Expr) -> str:
    if type(e) is Lit:
        return format_value(e.value)
    if type(e) is Var:
        return e.name
    return f"{e.fn}({', '.join(format_expr(a) for a in e.args)})"


# -- canonical serialization --------------------------------------------------


def encode_value(v: object) -> dict:
    """JSON-ready tagged form; inverse of :func:`decode_value`."""
    t = type(v)
    if t is bool:
        return {"bool": v}
    if t is int:
        return {"int": v}
    if t is str:
        return {"str": v}
    if v is UNIT:
        return {"unit": None}
    if t is SelLabel:
        return {"label": v.name}
    raise TypeError(f"not a value: {v!r}")


def decode_value(d: Mapping) -> object:
    if len(d) != 1:
        raise ValueError(f"malformed value encoding: {d!r}")
    (tag, x), = d.items()
    if tag == "bool" and type(x) is bool:
        return x
    if tag == "int" and type(x) is int:
        return x
    if tag == "str" and type(x) is str:
        return x
    if tag == "unit" and x is None:
        return UNIT
    if tag == "label" and type(x) is str:
        return SelLabel(x)
    raise ValueError(f"malformed value encoding: {d!r}")


def canonical_json(obj: object) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def value_bytes(v: object) -> bytes:
    return canonical_json(encode_value(v))


def value_from_bytes(b: bytes) -> object:
    return decode_value(json.loads(b.decode("utf-8")))


def digest(obj: object) -> str:
    """sha256 hex digest of the canonical JSON serialization of ``obj``."""
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def encode_expr(e: Expr) -> object:
    if type(e) is Lit:
        return {"lit": encode_value(e.value)}
    if type(e) is Var:
        return {"var": e.name}
    return {"call": e.fn, "args": [encode_expr(a) for a in e.args]}


def decode_expr(d: Mapping) -> Expr:
    if "lit" in d:
        return Lit(decode_value(d["lit"]))
    if "var" in d:
        return Var(d["var"])
    return Call(d["call"], tuple(decode_expr(a) for a in d["args"]))
