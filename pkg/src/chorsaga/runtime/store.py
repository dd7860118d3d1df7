"""Append-only durable store with checksummed records.

Each record on disk is ``u32 length | u32 crc32(payload) | payload`` where the
payload is canonical JSON.  Records are fsynced before ``append`` returns.
A record cut short at the end of the file (a torn write) is truncated away on
open; a complete record whose checksum does not match raises
:class:`CorruptLogError`.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field

from ..values import canonical_json, digest

log = logging.getLogger(__name__)

STARTED = "STARTED"
FAILED = "FAILED"
COMPLETED = "COMPLETED"
AT_MOST_ONCE = "AT_MOST_ONCE"
AT_LEAST_ONCE = "AT_LEAST_ONCE"
MODES = (AT_MOST_ONCE, AT_LEAST_ONCE)

_HDR = struct.Struct(">II")


class CorruptLogError(Exception):
    def __init__(self, path, offset, detail):
        self.path, self.offset = path, offset
        super().__init__(f"{path}: corrupt record at byte {offset}: {detail}")


class StoreClosed(Exception):
    """The store was closed (or its node killed); no further writes happen."""


@dataclass
class Tables:
    """In-memory image of the log; rebuilt by replaying every record."""

    sessions: dict = field(default_factory=dict)  # sid -> row dict
    inbox: dict = field(default_factory=dict)  # (sid, sender, seq) -> payload
    outbox: dict = field(default_factory=dict)  # (sid, receiver, seq) -> payload digest
    transactions: dict = field(default_factory=dict)  # (sid, t, input digest) -> row
    commit_order: dict = field(default_factory=dict)  # sid -> [transaction key]
    kv: dict = field(default_factory=dict)  # service state touched by effects
    bcast_acks: set = field(default_factory=set)  # (sid, peer)
    effects: dict = field(default_factory=dict)  # (sid, t, kind) -> count
    conflicts: list = field(default_factory=list)

    def apply(self, rec: dict) -> None:
        op = rec["op"]
        if op == "session":
            self.sessions[rec["sid"]] = {k: rec[k] for k in ("sid", "chor", "mode", "status", "deadline", "input", "reason")}
        elif op == "status":
            row = self.sessions[rec["sid"]]
            if row["status"] != STARTED:
                raise ValueError(f"illegal status transition {row['status']} -> {rec['status']}")
            row["status"] = rec["status"]
            row["reason"] = rec.get("reason")
        elif op == "inbox":
            self.inbox[(rec["sid"], rec["sender"], rec["seq"])] = rec["payload"]
        elif op == "outbox":
            self.outbox[(rec["sid"], rec["receiver"], rec["seq"])] = rec["digest"]
        elif op == "commit":
            key = (rec["sid"], rec["t"], rec["digest"])
            self.transactions[key] = {"input": rec["input"], "output": rec["output"],
                                      "committed": True, "compensated": False}
            self.commit_order.setdefault(rec["sid"], []).append(key)
            self.kv.update(rec["writes"])
            ek = (rec["sid"], rec["t"], "commit")
            self.effects[ek] = self.effects.get(ek, 0) + 1
        elif op == "compensate":
            key = (rec["sid"], rec["t"], rec["digest"])
            self.transactions[key]["compensated"] = True
            self.kv.update(rec["writes"])
            ek = (rec["sid"], rec["t"], "compensate")
            self.effects[ek] = self.effects.get(ek, 0) + 1
        elif op == "kv":
            self.kv.update(rec["writes"])
        elif op == "bcast_ack":
            self.bcast_acks.add((rec["sid"], rec["peer"]))
        elif op == "conflict":
            self.conflicts.append({"sid": rec["sid"], "detail": rec["detail"]})
        else:
            raise ValueError(f"unknown record op {op!r}")

    def snapshot(self) -> list:
        """Records that rebuild these tables; used by compaction."""
        out = []
        for row in self.sessions.values():
            out.append({"op": "session", **row})
        for (sid, sender, seq), payload in self.inbox.items():
            out.append({"op": "inbox", "sid": sid, "sender": sender, "seq": seq, "payload": payload})
        for (sid, rcv, seq), d in self.outbox.items():
            out.append({"op": "outbox", "sid": sid, "receiver": rcv, "seq": seq, "digest": d})
        # commit writes are dropped; the final kv image is restored in one record
        tail = []
        for sid, keys in self.commit_order.items():
            for key in keys:
                row = self.transactions[key]
                out.append({"op": "commit", "sid": sid, "t": key[1], "digest": key[2],
                            "input": row["input"], "output": row["output"], "writes": {}})
                if row["compensated"]:
                    tail.append({"op": "compensate", "sid": sid, "t": key[1], "digest": key[2], "writes": {}})
        out.extend(tail)
        out.append({"op": "kv", "writes": dict(self.kv)})
        for sid, peer in sorted(self.bcast_acks):
            out.append({"op": "bcast_ack", "sid": sid, "peer": peer})
        for c in self.conflicts:
            out.append({"op": "conflict", **c})
        return out

    def digest(self) -> str:
        return digest({
            "sessions": sorted(self.sessions.items()),
            "inbox": sorted((list(k), v) for k, v in self.inbox.items()),
            "outbox": sorted((list(k), v) for k, v in self.outbox.items()),
            "transactions": sorted((list(k), v) for k, v in self.transactions.items()),
            "kv": sorted(self.kv.items()),
            "bcast": sorted(self.bcast_acks),
            "conflicts": self.conflicts,
        })


def _frame(rec: dict) -> bytes:
    payload = canonical_json(rec)
    return _HDR.pack(len(payload), zlib.crc32(payload)) + payload


def read_log(path: str) -> tuple[list, int]:
    """Records in ``path`` and the byte length of the valid prefix."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return [], 0
    recs, pos = [], 0
    while pos < len(data):
        if pos + _HDR.size > len(data):
            break
        n, crc = _HDR.unpack_from(data, pos)
        end = pos + _HDR.size + n
        if end > len(data):
            break
        payload = data[pos + _HDR.size:end]
        if zlib.crc32(payload) != crc:
            raise CorruptLogError(path, pos, "checksum mismatch")
        try:
            recs.append(json.loads(payload))
        except ValueError as exc:
            raise CorruptLogError(path, pos, f"undecodable payload: {exc}") from None
        pos = end
    return recs, pos


class DurableStore:
    """Single-writer log plus the tables it materialises."""

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self.tables = Tables()
        self.appends = 0
        self.before_append = None  # hook: called before each write, may raise
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        recs, valid = read_log(path)
        size = os.path.getsize(path) if os.path.exists(path) else 0
        if valid < size:
            log.warning("%s: truncating torn tail (%d bytes)", path, size - valid)
            with open(path, "r+b") as fh:
                fh.truncate(valid)
        for n, rec in enumerate(recs):
            try:
                self.tables.apply(rec)
            except (KeyError, ValueError) as exc:
                raise CorruptLogError(path, n, f"record {n} does not apply: {exc}") from None
        self._fh = open(path, "ab")

    @property
    def closed(self) -> bool:
        return self._fh is None

    def append(self, rec: dict) -> None:
        if self._fh is None:
            raise StoreClosed(self.path)
        if self.before_append is not None:
            self.before_append(rec)
            if self._fh is None:
                raise StoreClosed(self.path)
        probe = json.loads(canonical_json(rec))
        if probe["op"] == "status":
            row = self.tables.sessions.get(probe["sid"])
            if row is None or row["status"] != STARTED:
                raise ValueError(f"illegal status transition for session {probe['sid']}")
        self._fh.write(_frame(probe))
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        self.tables.apply(probe)
        self.appends += 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def compact(self) -> None:
        """Rewrite the log as the minimal record set, swapped in atomically."""
        if self._fh is None:
            raise StoreClosed(self.path)
        tmp = self.path + ".compact"
        with open(tmp, "wb") as fh:
            for rec in self.tables.snapshot():
                fh.write(_frame(json.loads(canonical_json(rec))))
            fh.flush()
            os.fsync(fh.fileno())
        self._fh.close()
        os.replace(tmp, self.path)
        self._fh = open(self.path, "ab")

    # -- convenience readers ---------------------------------------------------------

    def session(self, sid: str) -> dict | None:
        return self.tables.sessions.get(sid)
