"""Node configuration.

A node config file is JSON::

    {
      "name": "payment",
      "listen": "127.0.0.1:7002",
      "peers": {"warehouse": "127.0.0.1:7001", "loyalty": "127.0.0.1:7003"},
      "mode": "AT_LEAST_ONCE",
      "store": "payment.wal",
      "ack_timeout": 0.5, "backoff_initial": 0.1, "backoff_cap": 5.0,
      "max_attempts": 20, "session_deadline": 30.0,
      "choreographies": {"warehouse": {"program": "payment.prog", "input_var": "order"}},
      "transactions": {"charge": "warehouse:charge"}
    }

Relative paths are resolved against the config file's directory.  Transaction
bindings name ``registry:transaction`` pairs from :data:`REGISTRIES`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .saga import WAREHOUSE_TRANSACTIONS
from .store import AT_LEAST_ONCE, MODES

REGISTRIES = {"warehouse": WAREHOUSE_TRANSACTIONS}


class ConfigError(ValueError):
    pass


def parse_addr(s: str) -> tuple[str, int]:
    host, sep, port = s.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"address {s!r} is not host:port")
    return host or "127.0.0.1", int(port)


@dataclass
class NodeConfig:
    name: str
    host: str = "127.0.0.1"
    port: int = 0
    peers: dict = field(default_factory=dict)  # name -> (host, port)
    mode: str = AT_LEAST_ONCE
    store_path: str = "node.wal"
    ack_timeout: float = 0.5
    backoff_initial: float = 0.1
    backoff_cap: float = 5.0
    max_attempts: int = 20
    session_deadline: float = 30.0
    fsync: bool = True
    choreographies: dict = field(default_factory=dict)  # chor id -> {"program": path, "input_var": x}
    transactions: dict = field(default_factory=dict)  # name -> "registry:name"
    kill_after: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ack_timeout <= 0 or self.backoff_initial <= 0 or self.backoff_cap < self.backoff_initial:
            raise ConfigError("timeouts must be positive and backoff_cap >= backoff_initial")
        if self.max_attempts < 1:
            raise ConfigError("max_attempts must be at least 1")


def load_config(path: str) -> NodeConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    base = os.path.dirname(os.path.abspath(path))

    def rel(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        host, port = parse_addr(raw.pop("listen", "127.0.0.1:0"))
        peers = {k: parse_addr(v) for k, v in raw.pop("peers", {}).items()}
        chors = {}
        for cid, c in raw.pop("choreographies", {}).items():
            c = dict(c)
            c["program"] = rel(c["program"])
            chors[cid] = c
        store = rel(raw.pop("store", raw["name"] + ".wal"))
        return NodeConfig(host=host, port=port, peers=peers, choreographies=chors,
                          store_path=store, **raw)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: bad config: {exc}") from None


def resolve_transactions(bindings: dict) -> dict:
    out = {}
    for name, ref in bindings.items():
        reg, _, tname = ref.partition(":")
        try:
            out[name] = REGISTRIES[reg][tname]
        except KeyError:
            raise ConfigError(f"transaction binding {name!r}: unknown {ref!r}") from None
    return out
