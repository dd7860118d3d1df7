"""Local transactions with effects, and the three-service warehouse saga.

A :class:`LocalTransaction` never touches storage itself: ``commit`` reads the
node's key-value state and returns ``(output, writes)``; the sidecar persists
the writes in the same log record that marks the transaction committed, so an
effect and its commit marker are never separated by a crash.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

from ..dsl import parse_chor
from ..state import FAIL
from ..values import EvalError

WAREHOUSE_CHOR = """\
process warehouse payment loyalty
warehouse.stock := reserve(order)
warehouse.order -> payment.order
payment.receipt := charge(order)
payment.order -> loyalty.order
loyalty.points := award(order)
loyalty.points -> payment.points
loyalty.points -> warehouse.points
"""

ROLES = ("warehouse", "payment", "loyalty")
INITIATOR = "warehouse"
INPUT_VAR = "order"

INITIAL_STOCK = 1000
INITIAL_BALANCE = 100_000
CHARGE_LIMIT = 500  # charge fails above this amount
AWARD_REFUSED_MOD = 7  # award fails for multiples of this


@dataclass(frozen=True)
class LocalTransaction:
    name: str
    commit: Callable[[Mapping, object], tuple]
    compensate: Callable[[Mapping, object, object], dict]


def _amount(v) -> int:
    if type(v) is not int or v <= 0:
        raise EvalError(f"order amount must be a positive int, got {v!r}")
    return v


def _reserve(kv, order):
    _amount(order)
    stock = kv.get("stock", INITIAL_STOCK)
    if stock <= 0:
        return FAIL, {}
    return stock - 1, {"stock": stock - 1}


def _unreserve(kv, order, out):
    return {"stock": kv.get("stock", INITIAL_STOCK) + 1}


def _charge(kv, order):
    amt = _amount(order)
    if amt > CHARGE_LIMIT:
        return FAIL, {}
    bal = kv.get("balance", INITIAL_BALANCE)
    return amt, {"balance": bal - amt}


def _refund(kv, order, out):
    return {"balance": kv.get("balance", INITIAL_BALANCE) + out}


def _award(kv, order):
    amt = _amount(order)
    if amt % AWARD_REFUSED_MOD == 0:
        return FAIL, {}
    pts = amt // 10
    return pts, {"points": kv.get("points", 0) + pts}


def _revoke(kv, order, out):
    return {"points": kv.get("points", 0) - out}


WAREHOUSE_TRANSACTIONS = {
    "reserve": LocalTransaction("reserve", _reserve, _unreserve),
    "charge": LocalTransaction("charge", _charge, _refund),
    "award": LocalTransaction("award", _award, _revoke),
}

# order amounts exercising each outcome
ORDER_OK = 20
ORDER_CHARGE_FAILS = 600
ORDER_AWARD_FAILS = 490


def warehouse_saga():
    return parse_chor(WAREHOUSE_CHOR, "<warehouse>")


def expected_kv(order: int, role: str) -> dict:
    """Service state after one session of ``order`` on a fresh node."""
    ok = saga_succeeds(order)
    if role == "warehouse":
        return {"stock": INITIAL_STOCK - 1 if ok else INITIAL_STOCK}
    if role == "payment":
        return {"balance": INITIAL_BALANCE - order if ok else INITIAL_BALANCE}
    if role == "loyalty":
        return {"points": order // 10 if ok else 0}
    raise ValueError(f"unknown role {role!r}")


def saga_succeeds(order: int) -> bool:
    return order <= CHARGE_LIMIT and order % AWARD_REFUSED_MOD != 0
