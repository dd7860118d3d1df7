"""Sidecar node: runs endpoint programs for many sessions over framed TCP.

One asyncio task per session interprets the node's endpoint program.  In
``AT_LEAST_ONCE`` mode every inbound message is persisted to the inbox
before it is acknowledged, acknowledged sends are recorded in the outbox,
and transactions are keyed by (session, name, input digest); a session that
misses an acknowledgement is replayed from its initial state, and the tables
make the replay externally invisible.  ``AT_MOST_ONCE`` sessions keep
messages in memory only and are reclaimed once past their deadline.
"""

from __future__ import annotations

import asyncio
import contextlib
import logging
import time
import uuid
from collections import Counter
from dataclasses import dataclass

from .. import net as N_
from ..state import FAIL
from ..values import (
    DEFAULT_FUNCTIONS,
    UNIT,
    EvalError,
    decode_value,
    digest,
    encode_value,
    eval_expr,
    value_bytes,
    value_from_bytes,
)
from .config import NodeConfig
from .store import (
    AT_LEAST_ONCE,
    AT_MOST_ONCE,
    COMPLETED,
    FAILED,
    STARTED,
    DurableStore,
    StoreClosed,
)
from .wire import BROADCAST_SEQ, Frame, FrameError, Kind, encode_frame, read_frame

log = logging.getLogger(__name__)

EXPIRED = "expired"
TOMBSTONE = "tombstone"


class NodeKilled(Exception):
    """Raised inside a node's tasks once an injected kill point is reached."""


class UnknownChoreography(KeyError):
    pass


class DuplicateSession(ValueError):
    pass


class SessionFailed(Exception):
    pass


@dataclass(frozen=True)
class Binding:
    chor_id: str
    program: tuple
    participants: tuple
    input_var: str | None = None


def program_peers(P, out=None) -> set:
    out = set() if out is None else out
    for i in P:
        t = type(i)
        if t is N_.SendTo or t is N_.Select:
            out.add(i.q)
        elif t is N_.RecvFrom:
            out.add(i.p)
        elif t is N_.Branch:
            out.add(i.p)
            for _, sub in i.branches:
                program_peers(sub, out)
        elif t is N_.Cond:
            program_peers(i.then, out)
            program_peers(i.orelse, out)
    return out


def _transactions_on_paths(P, seen=()):
    """Raise if some path through ``P`` invokes the same transaction twice."""
    seen = list(seen)
    for n, i in enumerate(P):
        t = type(i)
        if t is N_.Trans:
            if i.t in seen:
                raise ValueError(f"transaction {i.t!r} invoked twice on one path")
            seen.append(i.t)
        elif t is N_.Cond:
            for sub in (i.then, i.orelse):
                _transactions_on_paths(sub + P[n + 1:], seen)
            return
        elif t is N_.Branch:
            for _, sub in i.branches:
                _transactions_on_paths(sub + P[n + 1:], seen)
            return


class _Session:
    __slots__ = ("sid", "binding", "mode", "task", "mailbox", "recv_next", "changed",
                 "restart", "attempt", "pending", "deadline")

    def __init__(self, sid, binding, mode, deadline):
        self.sid = sid
        self.binding = binding
        self.mode = mode
        self.task = None
        self.mailbox = {}  # (sender, seq) -> payload, at-most-once only
        self.recv_next = Counter()
        self.changed = asyncio.Event()
        self.restart = asyncio.Event()
        self.attempt = 0
        self.pending = {}
        self.deadline = deadline


class Node:
    def __init__(self, config: NodeConfig, transactions: dict, functions=DEFAULT_FUNCTIONS):
        self.cfg = config
        self.name = config.name
        self.transactions = dict(transactions)
        self.functions = functions
        self.bindings: dict[str, Binding] = {}
        self.store: DurableStore | None = None
        self.sessions: dict[str, _Session] = {}
        self.kill_after = config.kill_after
        self.steps = 0
        self.killed = False
        self.frames_sent = Counter()  # Kind -> count
        self.wire_log = []  # (kind, sid, receiver, seq) for every frame written
        self.delivered = Counter()  # (sid, sender, receiver, seq) -> times handed to a program
        self._server = None
        self._conns = {}
        self._conn_locks = {}
        self._inbound = set()
        self._tasks = set()
        self._ack_waiters = {}
        self._bcast_events = {}
        self._broadcasting = set()

    # -- lifecycle ------------------------------------------------------------------

    def register(self, chor_id: str, program: tuple, input_var: str | None = None,
                 participants=()) -> None:
        _transactions_on_paths(program)
        peers = (program_peers(program) | set(participants)) - {self.name}
        self.bindings[chor_id] = Binding(chor_id, tuple(program), tuple(sorted(peers)), input_var)

    @property
    def port(self) -> int:
        return self.cfg.port

    async def start(self, recover: bool = True) -> None:
        self.store = DurableStore(self.cfg.store_path, fsync=self.cfg.fsync)
        self.store.before_append = lambda rec: self._step()
        self._server = await asyncio.start_server(self._on_conn, self.cfg.host, self.cfg.port)
        self.cfg.port = self._server.sockets[0].getsockname()[1]
        self._spawn(self._reaper())
        if recover:
            self.recover_on_boot()

    async def stop(self) -> None:
        """Graceful shutdown: stop tasks, close sockets and the log."""
        for t in list(self._tasks):
            t.cancel()
        for t in list(self._tasks):
            with contextlib.suppress(BaseException):
                await t
        self._close_io()

    def crash(self) -> None:
        """Abrupt stop: nothing further is written or sent by this instance."""
        if self.killed:
            return
        self.killed = True
        self._close_io()
        cur = asyncio.current_task()
        for t in list(self._tasks):
            if t is not cur:
                t.cancel()

    def _close_io(self):
        if self.store is not None:
            self.store.close()
        if self._server is not None:
            self._server.close()
        for w in list(self._conns.values()) + list(self._inbound):
            w.transport.abort()
        self._conns.clear()
        self._inbound.clear()

    def _step(self):
        if self.killed:
            raise NodeKilled(self.name)
        if self.kill_after is not None and self.steps >= self.kill_after:
            self.crash()
            raise NodeKilled(self.name)
        self.steps += 1

    def _spawn(self, coro) -> asyncio.Task:
        if self.killed:
            coro.close()
            raise NodeKilled(self.name)
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._reap)
        return task

    def _reap(self, task):
        self._tasks.discard(task)
        if task.cancelled():
            return
        exc = task.exception()
        if exc is not None and not isinstance(exc, (NodeKilled, StoreClosed)) and not self.killed:
            log.error("%s: task failed", self.name, exc_info=exc)

    # -- transport --------------------------------------------------------------------

    async def _on_conn(self, reader, writer):
        self._inbound.add(writer)
        try:
            while not self.killed:
                frame = await read_frame(reader)
                if frame is None:
                    break
                await self.handle_inbound(frame)
        except FrameError as exc:
            log.warning("%s: dropping connection: %s", self.name, exc)
        except (ConnectionError, NodeKilled, StoreClosed, asyncio.CancelledError):
            pass
        finally:
            self._inbound.discard(writer)
            writer.transport.abort()

    async def _connect(self, peer):
        w = self._conns.get(peer)
        if w is not None and not w.is_closing():
            return w
        lock = self._conn_locks.setdefault(peer, asyncio.Lock())
        async with lock:
            w = self._conns.get(peer)
            if w is not None and not w.is_closing():
                return w
            addr = self.cfg.peers.get(peer)
            if addr is None:
                log.warning("%s: no address for peer %s", self.name, peer)
                return None
            try:
                reader, w = await asyncio.wait_for(asyncio.open_connection(*addr), self.cfg.ack_timeout)
            except (OSError, asyncio.TimeoutError):
                return None
            if self.killed:
                w.transport.abort()
                raise NodeKilled(self.name)
            self._conns[peer] = w
            self._spawn(self._watch(peer, reader, w))
            return w

    async def _watch(self, peer, reader, w):
        # peers never write on our outbound connections; EOF means they went away
        with contextlib.suppress(OSError):
            await reader.read()
        if self._conns.get(peer) is w:
            del self._conns[peer]
        w.transport.abort()

    async def _send_frame(self, peer: str, frame: Frame) -> bool:
        self._step()
        w = await self._connect(peer)
        if w is None:
            return False
        try:
            w.write(encode_frame(frame))
            await w.drain()
        except (ConnectionError, OSError):
            if self._conns.get(peer) is w:
                del self._conns[peer]
            return False
        self.frames_sent[frame.kind] += 1
        self.wire_log.append((frame.kind, str(frame.session_id), peer, frame.seqnum))
        return True

    async def _reply(self, f: Frame, kind: Kind):
        ack = Frame(kind, f.session_id, f.chor_id, f.sender, f.seqnum, self.name.encode())
        await self._send_frame(f.sender, ack)

    # -- sessions -----------------------------------------------------------------------

    def start_session(self, chor_id: str, value=UNIT, session_id: uuid.UUID | str | None = None) -> uuid.UUID:
        if chor_id not in self.bindings:
            raise UnknownChoreography(chor_id)
        sid = uuid.UUID(str(session_id)) if session_id is not None else uuid.uuid4()
        if self.store.session(str(sid)) is not None:
            raise DuplicateSession(str(sid))
        self._create(str(sid), chor_id, value)
        return sid

    def _create(self, sid, chor_id, value):
        deadline = time.time() + self.cfg.session_deadline
        self.store.append({"op": "session", "sid": sid, "chor": chor_id, "mode": self.cfg.mode,
                           "status": STARTED, "deadline": deadline,
                           "input": None if value is None else encode_value(value), "reason": None})
        self._launch(sid)

    def _launch(self, sid):
        row = self.store.session(sid)
        sess = _Session(sid, self.bindings[row["chor"]], row["mode"],
                        time.time() + self.cfg.session_deadline)
        self.sessions[sid] = sess
        sess.task = self._spawn(self._run_session(sess))

    def status(self, sid) -> str | None:
        row = self.store.session(str(sid)) if self.store else None
        return row and row["status"]

    def _initial_store(self, sess):
        row = self.store.session(sess.sid)
        vars_ = {}
        if row["input"] is not None and sess.binding.input_var:
            vars_[sess.binding.input_var] = decode_value(row["input"])
        return vars_

    async def _run_session(self, sess: _Session):
        delay = self.cfg.backoff_initial
        while True:
            sess.attempt += 1
            sess.pending = {}
            sess.restart = asyncio.Event()
            sess.deadline = time.time() + self.cfg.session_deadline
            acks = None
            interp = asyncio.ensure_future(self._interpret(sess, sess.binding.program, self._initial_store(sess),
                                                           Counter(), Counter()))
            restart = asyncio.ensure_future(sess.restart.wait())
            try:
                await asyncio.wait({interp, restart}, return_when=asyncio.FIRST_COMPLETED)
                if interp.done():
                    exc = interp.exception()
                    if isinstance(exc, (SessionFailed, EvalError)):
                        self.fail_session(sess.sid, str(exc))
                        return
                    if exc is not None:
                        raise exc
                    if sess.mode == AT_LEAST_ONCE and sess.pending:
                        acks = asyncio.ensure_future(asyncio.wait(list(sess.pending.values())))
                        await asyncio.wait({acks, restart}, return_when=asyncio.FIRST_COMPLETED)
                        if not acks.done():
                            acks.cancel()
                            raise _Restart
                    self.store.append({"op": "status", "sid": sess.sid, "status": COMPLETED})
                    self.sessions.pop(sess.sid, None)
                    return
                raise _Restart
            except _Restart:
                pass
            finally:
                for t in (interp, restart, acks):
                    if t is None:
                        continue
                    if not t.done():
                        t.cancel()
                        with contextlib.suppress(BaseException):
                            await t
                    elif not t.cancelled():
                        t.exception()  # retrieved; the session task reports it
            if self.status(sess.sid) != STARTED:
                return
            if sess.attempt >= self.cfg.max_attempts:
                self.fail_session(sess.sid, "retry budget exhausted")
                return
            log.info("%s: restarting session %s (attempt %d)", self.name, sess.sid, sess.attempt + 1)
            await asyncio.sleep(delay)
            delay = min(delay * 2, self.cfg.backoff_cap)

    async def _interpret(self, sess, P, store, sent, recvd):
        for n, i in enumerate(P):
            t = type(i)
            if t is N_.SendTo:
                v = eval_expr(store, i.e, self.functions)
                await self._send(sess, i.q, Kind.VALUE, value_bytes(v), sent)
            elif t is N_.Select:
                await self._send(sess, i.q, Kind.LABEL, i.label.encode(), sent)
            elif t is N_.RecvFrom:
                kind, data = await self._receive(sess, i.p, recvd)
                if kind != "VALUE":
                    raise SessionFailed(f"expected a value from {i.p}, got a label")
                store[i.x] = decode_value(data)
            elif t is N_.Branch:
                kind, data = await self._receive(sess, i.p, recvd)
                sub = i.get(data) if kind == "LABEL" else None
                if sub is None:
                    raise SessionFailed(f"no branch for {data!r} from {i.p}")
                return await self._interpret(sess, sub + P[n + 1:], store, sent, recvd)
            elif t is N_.Assign:
                store[i.x] = eval_expr(store, i.e, self.functions)
            elif t is N_.Cond:
                b = eval_expr(store, i.e, self.functions)
                if type(b) is not bool:
                    raise SessionFailed(f"guard evaluated to {b!r}")
                sub = i.then if b else i.orelse
                return await self._interpret(sess, sub + P[n + 1:], store, sent, recvd)
            elif t is N_.Trans:
                v = eval_expr(store, i.e, self.functions)
                store[i.x] = self.commit_transaction(sess.sid, i.t, v)
            else:
                raise TypeError(f"not an instruction: {i!r}")

    async def _send(self, sess, q, kind, payload, sent):
        seq = sent[q]
        sent[q] += 1
        sid = uuid.UUID(sess.sid)
        frame = Frame(kind, sid, sess.binding.chor_id, self.name, seq, payload,
                      (("attempt", str(sess.attempt)),))
        if sess.mode == AT_MOST_ONCE:
            await self._send_frame(q, frame)
            return
        key = (sess.sid, q, seq)
        if key in self.store.tables.outbox:
            return
        fut = self._ack_waiters.get(key)
        if fut is None or fut.done():
            fut = self._ack_waiters[key] = asyncio.get_running_loop().create_future()
        sess.pending[key] = fut
        await self._send_frame(q, frame)
        self._spawn(self._ack_watch(sess, fut))

    async def _ack_watch(self, sess, fut):
        restart = sess.restart
        try:
            await asyncio.wait_for(asyncio.shield(fut), self.cfg.ack_timeout)
        except asyncio.TimeoutError:
            restart.set()

    async def _receive(self, sess, p, recvd):
        seq = recvd[p]
        while True:
            if sess.mode == AT_LEAST_ONCE:
                payload = self.store.tables.inbox.get((sess.sid, p, seq))
            else:
                payload = sess.mailbox.pop((p, seq), None)
            if payload is not None:
                break
            sess.changed.clear()
            await sess.changed.wait()
        recvd[p] += 1
        if sess.mode == AT_MOST_ONCE:
            sess.recv_next[p] = seq + 1
        self.delivered[(sess.sid, p, self.name, seq)] += 1
        return payload["kind"], payload["data"]

    # -- transactions ------------------------------------------------------------------

    def commit_transaction(self, sid: str, t: str, v):
        tx = self.transactions.get(t)
        if tx is None:
            raise SessionFailed(f"no local binding for transaction {t!r}")
        enc = encode_value(v)
        key = (sid, t, digest(enc))
        row = self.store.tables.transactions.get(key)
        if row is not None:
            return decode_value(row["output"])
        out, writes = tx.commit(self.store.tables.kv, v)
        if out is FAIL:
            raise SessionFailed(f"transaction {t} failed")
        self.store.append({"op": "commit", "sid": sid, "t": t, "digest": key[2], "input": enc,
                           "output": encode_value(out), "writes": writes})
        return out

    def compensate_session(self, sid: str) -> int:
        """Undo this node's committed transactions of ``sid`` in reverse order; idempotent."""
        tables = self.store.tables
        n = 0
        for key in reversed(tables.commit_order.get(sid, [])):
            row = tables.transactions[key]
            if row["compensated"]:
                continue
            tx = self.transactions[key[1]]
            writes = tx.compensate(tables.kv, decode_value(row["input"]), decode_value(row["output"]))
            self.store.append({"op": "compensate", "sid": sid, "t": key[1], "digest": key[2],
                               "writes": writes})
            n += 1
        return n

    def fail_session(self, sid: str, reason: str, broadcast: bool = True) -> None:
        sess = self.sessions.pop(sid, None)
        if sess is not None and sess.task is not None and sess.task is not asyncio.current_task():
            sess.task.cancel()
        if self.status(sid) == STARTED:
            self.store.append({"op": "status", "sid": sid, "status": FAILED, "reason": reason})
        self.compensate_session(sid)
        if broadcast:
            self._start_broadcast(sid)

    # -- failure broadcast ----------------------------------------------------------------

    def _start_broadcast(self, sid):
        if sid in self._broadcasting:
            return
        row = self.store.session(sid)
        binding = self.bindings.get(row["chor"])
        if binding is None:
            return
        self._broadcasting.add(sid)
        for peer in binding.participants:
            if (sid, peer) not in self.store.tables.bcast_acks:
                self._spawn(self._broadcast_to(sid, binding.chor_id, peer))

    async def _broadcast_to(self, sid, chor_id, peer):
        ev = self._bcast_events.setdefault((sid, peer), asyncio.Event())
        delay = self.cfg.backoff_initial
        frame = Frame(Kind.FAILURE_BROADCAST, uuid.UUID(sid), chor_id, self.name, BROADCAST_SEQ)
        for _ in range(self.cfg.max_attempts):
            if (sid, peer) in self.store.tables.bcast_acks:
                return
            await self._send_frame(peer, frame)
            with contextlib.suppress(asyncio.TimeoutError):
                await asyncio.wait_for(ev.wait(), self.cfg.ack_timeout)
            if (sid, peer) in self.store.tables.bcast_acks:
                return
            await asyncio.sleep(delay)
            delay = min(delay * 2, self.cfg.backoff_cap)
        log.error("%s: peer %s never acknowledged failure of %s", self.name, peer, sid)

    def handle_failure_broadcast(self, sid: str, chor_id: str, origin: str) -> None:
        row = self.store.session(sid)
        if row is None:
            # tombstone: a later first message must not resurrect the session
            if chor_id in self.bindings:
                self.store.append({"op": "session", "sid": sid, "chor": chor_id, "mode": self.cfg.mode,
                                   "status": FAILED, "deadline": time.time(), "input": None,
                                   "reason": TOMBSTONE})
                self._start_broadcast(sid)
        elif row["status"] == STARTED:
            self.fail_session(sid, f"failure broadcast from {origin}")
        elif row["status"] == COMPLETED:
            if not any(c["sid"] == sid for c in self.store.tables.conflicts):
                log.warning("%s: failure broadcast for completed session %s", self.name, sid)
                self.store.append({"op": "conflict", "sid": sid,
                                   "detail": f"failure broadcast from {origin} after completion"})

    # -- inbound ------------------------------------------------------------------------

    async def handle_inbound(self, f: Frame) -> None:
        if self.killed:
            raise NodeKilled(self.name)
        if f.kind in (Kind.ACK, Kind.FINISHED):
            self._on_ack(f)
        elif f.kind == Kind.FAILURE_BROADCAST:
            self.handle_failure_broadcast(str(f.session_id), f.chor_id, f.sender)
            await self._reply(f, Kind.ACK)
        else:
            await self._on_message(f)

    def _on_ack(self, f: Frame):
        sid = str(f.session_id)
        acker = f.payload.decode(errors="replace")
        if f.sender != self.name or self.store.session(sid) is None:
            return
        if f.seqnum == BROADCAST_SEQ:
            if (sid, acker) not in self.store.tables.bcast_acks:
                self.store.append({"op": "bcast_ack", "sid": sid, "peer": acker})
            ev = self._bcast_events.get((sid, acker))
            if ev is not None:
                ev.set()
            return
        key = (sid, acker, f.seqnum)
        if key not in self.store.tables.outbox:
            self.store.append({"op": "outbox", "sid": sid, "receiver": acker, "seq": f.seqnum,
                               "digest": f.kind.name})
        fut = self._ack_waiters.pop(key, None)
        if fut is not None and not fut.done():
            fut.set_result(f.kind)

    async def _on_message(self, f: Frame):
        sid = str(f.session_id)
        binding = self.bindings.get(f.chor_id)
        if binding is None:
            log.warning("%s: message for unknown choreography %r dropped", self.name, f.chor_id)
            return
        if f.kind == Kind.VALUE:
            try:
                payload = {"kind": "VALUE", "data": encode_value(value_from_bytes(f.payload))}
            except ValueError as exc:
                raise FrameError(f"bad value payload: {exc}") from None
        else:
            payload = {"kind": "LABEL", "data": f.payload.decode()}
        row = self.store.session(sid)
        if row is None:
            self._create(sid, f.chor_id, None)
            row = self.store.session(sid)
        mode = row["mode"]
        if row["status"] != STARTED:
            # killed, expired or finished sessions ignore their messages
            if mode == AT_LEAST_ONCE:
                if row["status"] == COMPLETED:
                    await self._reply(f, Kind.FINISHED)
                else:
                    await self._send_frame(f.sender, Frame(Kind.FAILURE_BROADCAST, f.session_id,
                                                           f.chor_id, self.name, BROADCAST_SEQ))
            return
        sess = self.sessions.get(sid)
        if mode == AT_LEAST_ONCE:
            key = (sid, f.sender, f.seqnum)
            if key not in self.store.tables.inbox:
                self.store.append({"op": "inbox", "sid": sid, "sender": f.sender, "seq": f.seqnum,
                                   "payload": payload})
            await self._reply(f, Kind.ACK)
        else:
            if sess is None or f.seqnum < sess.recv_next[f.sender] or (f.sender, f.seqnum) in sess.mailbox:
                return
            sess.mailbox[(f.sender, f.seqnum)] = payload
        if sess is not None:
            sess.changed.set()

    # -- recovery and expiry --------------------------------------------------------------

    def recover_on_boot(self) -> None:
        for sid, row in list(self.store.tables.sessions.items()):
            if row["chor"] not in self.bindings:
                log.warning("%s: session %s of unregistered choreography %r left as is",
                            self.name, sid, row["chor"])
                continue
            if row["status"] == STARTED:
                if row["mode"] == AT_LEAST_ONCE:
                    self._launch(sid)
                else:
                    self.fail_session(sid, EXPIRED, broadcast=False)
            elif row["status"] == FAILED:
                self.compensate_session(sid)
                if row["reason"] != EXPIRED:
                    self._start_broadcast(sid)

    def expire_sessions(self, now: float | None = None) -> list[str]:
        """Reclaim at-most-once sessions past their deadline; restart late at-least-once ones."""
        now = time.time() if now is None else now
        expired = []
        for sid, sess in list(self.sessions.items()):
            if sess.deadline >= now or self.status(sid) != STARTED:
                continue
            if sess.mode == AT_MOST_ONCE:
                sess.mailbox.clear()
                self.fail_session(sid, EXPIRED, broadcast=False)
                expired.append(sid)
            else:
                sess.deadline = now + self.cfg.session_deadline
                sess.restart.set()
        return expired

    async def _reaper(self):
        period = min(0.05, self.cfg.session_deadline / 4)
        while True:
            await asyncio.sleep(period)
            self.expire_sessions()

    # -- inspection ------------------------------------------------------------------------

    def quiescent(self) -> bool:
        """No running session and no failure broadcast still waiting for an acknowledgement."""
        if self.sessions:
            return False
        tables = self.store.tables
        for sid, row in tables.sessions.items():
            if row["status"] == STARTED:
                return False
            if row["status"] == FAILED and row["reason"] != EXPIRED:
                binding = self.bindings.get(row["chor"])
                if binding and any((sid, p) not in tables.bcast_acks for p in binding.participants):
                    return False
        return True


class _Restart(Exception):
    pass
