import asyncio
import os
import struct
import time
import uuid

import pytest

from chorsaga import net as N
from chorsaga.runtime import saga as S
from chorsaga.runtime.cluster import CHOR_ID, Cluster, check_all_or_nothing, run_with_kill
from chorsaga.runtime.config import ConfigError, NodeConfig, load_config, parse_addr, resolve_transactions
from chorsaga.runtime.sidecar import DuplicateSession, Node, UnknownChoreography
from chorsaga.runtime.store import (
    AT_LEAST_ONCE,
    AT_MOST_ONCE,
    COMPLETED,
    FAILED,
    STARTED,
    CorruptLogError,
    DurableStore,
    read_log,
)
from chorsaga.runtime.wire import (
    BROADCAST_SEQ,
    Frame,
    FrameError,
    Kind,
    decode_frame,
    encode_frame,
    read_frame,
)
from chorsaga.values import Call, Lit, Var, value_bytes, value_from_bytes

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def arun(coro):
    return asyncio.run(coro)


# -- wire ---------------------------------------------------------------------------------------


def frame(**kw):
    base = dict(kind=Kind.VALUE, session_id=uuid.UUID(int=1), chor_id="c", sender="p", seqnum=0,
                payload=value_bytes(3))
    base.update(kw)
    return Frame(**base)


def test_frame_rejects_short_and_mismatched():
    data = encode_frame(frame())
    with pytest.raises(FrameError):
        decode_frame(data[:3])
    with pytest.raises(FrameError):
        decode_frame(data[:-1])
    with pytest.raises(FrameError):
        decode_frame(data + b"x")


def test_frame_rejects_bad_version():
    data = bytearray(encode_frame(frame()))
    data[4] = 99
    with pytest.raises(FrameError):
        decode_frame(bytes(data))


def test_frame_rejects_truncated_header_field():
    body = bytes([1, 1]) + uuid.UUID(int=1).bytes + struct.pack(">H", 50) + b"ab"
    with pytest.raises(FrameError):
        decode_frame(struct.pack(">I", len(body)) + body)


def test_frame_seq_range():
    with pytest.raises(FrameError):
        encode_frame(frame(seqnum=2**64))
    assert decode_frame(encode_frame(frame(seqnum=BROADCAST_SEQ))).seqnum == 2**64 - 1


def test_read_frame_stream():
    async def go():
        r = asyncio.StreamReader()
        r.feed_data(encode_frame(frame()) + encode_frame(frame(seqnum=1)))
        r.feed_eof()
        a, b, c = await read_frame(r), await read_frame(r), await read_frame(r)
        assert (a.seqnum, b.seqnum, c) == (0, 1, None)
        r = asyncio.StreamReader()
        r.feed_data(encode_frame(frame())[:10])
        r.feed_eof()
        with pytest.raises(FrameError):
            await read_frame(r)

    arun(go())


def test_value_payload_round_trip():
    for v in (0, -5, True, "x y"):
        assert value_from_bytes(value_bytes(v)) == v


# -- store ---------------------------------------------------------------------------------------


def session_rec(sid="s1", status=STARTED):
    return {"op": "session", "sid": sid, "chor": "c", "mode": AT_LEAST_ONCE, "status": status,
            "deadline": 0, "input": None, "reason": None}


def test_store_reopens_identically(tmp_path):
    path = str(tmp_path / "n.wal")
    st = DurableStore(path)
    st.append(session_rec())
    st.append({"op": "kv", "writes": {"stock": 3}})
    d = st.tables.digest()
    st.close()
    assert DurableStore(path).tables.digest() == d
    assert DurableStore(path).tables.digest() == d


def test_store_truncates_torn_tail(tmp_path):
    path = str(tmp_path / "n.wal")
    st = DurableStore(path)
    st.append(session_rec())
    st.close()
    good = os.path.getsize(path)
    with open(path, "ab") as fh:
        fh.write(b"\x00\x00\x01\x00garbage")
    st = DurableStore(path)
    assert os.path.getsize(path) == good
    assert st.session("s1")["status"] == STARTED


def test_store_checksum_mismatch_raises(tmp_path):
    path = str(tmp_path / "n.wal")
    st = DurableStore(path)
    st.append(session_rec())
    st.append(session_rec("s2"))
    st.close()
    data = bytearray(open(path, "rb").read())
    data[12] ^= 0xFF
    open(path, "wb").write(bytes(data))
    with pytest.raises(CorruptLogError):
        DurableStore(path)


def test_store_compaction_keeps_tables(tmp_path):
    path = str(tmp_path / "n.wal")
    st = DurableStore(path)
    st.append(session_rec())
    for n in range(20):
        st.append({"op": "kv", "writes": {"stock": n}})
    st.append({"op": "status", "sid": "s1", "status": COMPLETED})
    d = st.tables.digest()
    before = os.path.getsize(path)
    st.compact()
    assert os.path.getsize(path) < before
    assert st.tables.digest() == d
    st.append({"op": "kv", "writes": {"x": 1}})
    st.close()
    recs, _ = read_log(path)
    assert recs[-1]["op"] == "kv"
    assert DurableStore(path).tables.kv == {"stock": 19, "x": 1}


def test_store_rejects_illegal_status_transition(tmp_path):
    st = DurableStore(str(tmp_path / "n.wal"))
    st.append(session_rec(status=COMPLETED))
    with pytest.raises(ValueError):
        st.append({"op": "status", "sid": "s1", "status": FAILED})


def test_empty_boot_is_noop(tmp_path):
    async def go():
        node = Node(NodeConfig("q", store_path=str(tmp_path / "q.wal"), fsync=False), {})
        await node.start()
        assert node.store.tables.sessions == {} and node.quiescent()
        await node.stop()

    arun(go())


# -- config --------------------------------------------------------------------------------------


def test_shipped_configs_load():
    for role in S.ROLES:
        cfg = load_config(os.path.join(ROOT, "configs", f"{role}.json"))
        assert cfg.name == role and set(cfg.peers) == set(S.ROLES) - {role}
        assert os.path.exists(cfg.choreographies["warehouse"]["program"])
        resolve_transactions(cfg.transactions)


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_addr("nohost")
    with pytest.raises(ConfigError):
        NodeConfig("x", mode="SOMETIMES")
    with pytest.raises(ConfigError):
        resolve_transactions({"t": "warehouse:nope"})


# -- single node against a hand-driven peer -----------------------------------------------------


class FakePeer:
    """Listens as process ``p`` and records every frame; never acknowledges."""

    def __init__(self):
        self.frames = asyncio.Queue()

    async def start(self):
        self.server = await asyncio.start_server(self._on_conn, "127.0.0.1", 0)
        self.port = self.server.sockets[0].getsockname()[1]
        return self

    async def _on_conn(self, reader, writer):
        while (f := await read_frame(reader)) is not None:
            await self.frames.put(f)

    def stop(self):
        self.server.close()


async def send(port, *frames):
    _, w = await asyncio.open_connection("127.0.0.1", port)
    for f in frames:
        w.write(encode_frame(f))
    await w.drain()
    return w


def node_for(tmp_path, program, mode=AT_LEAST_ONCE, name="q", peer_port=None, tx=None, input_var=None, **kw):
    peers = {"p": ("127.0.0.1", peer_port)} if peer_port else {}
    cfg = NodeConfig(name, mode=mode, store_path=str(tmp_path / f"{name}.wal"), fsync=False, peers=peers,
                     ack_timeout=0.1, backoff_initial=0.02, backoff_cap=0.1, max_attempts=50, **kw)
    node = Node(cfg, tx or {})
    node.register("c", program, input_var=input_var)
    return node


async def until(pred, timeout=5.0):
    end = time.monotonic() + timeout
    while not pred():
        if time.monotonic() > end:
            raise AssertionError("condition not reached")
        await asyncio.sleep(0.005)


DIFF = (N.RecvFrom("p", "x"), N.RecvFrom("p", "y"), N.SendTo("p", Call("sub", (Var("x"), Var("y")))))


@pytest.mark.parametrize("mode", [AT_LEAST_ONCE, AT_MOST_ONCE])
def test_out_of_order_delivery_is_buffered(tmp_path, mode):
    async def go():
        peer = await FakePeer().start()
        node = node_for(tmp_path, DIFF, mode=mode, peer_port=peer.port)
        await node.start()
        sid = uuid.UUID(int=7)
        w = await send(node.port, frame(session_id=sid, seqnum=1, payload=value_bytes(2)))
        await asyncio.sleep(0.05)
        w2 = await send(node.port, frame(session_id=sid, seqnum=0, payload=value_bytes(10)))
        f = await asyncio.wait_for(_first(peer, Kind.VALUE), 5)
        assert value_from_bytes(f.payload) == 10 - 2 and f.seqnum == 0
        for ww in (w, w2):
            ww.close()
        await node.stop()
        peer.stop()

    arun(go())


async def _first(peer, kind):
    while True:
        f = await peer.frames.get()
        if f.kind == kind:
            return f


def test_inbound_duplicates_delivered_once(tmp_path):
    async def go():
        node = node_for(tmp_path, (N.RecvFrom("p", "x"),))
        await node.start()
        sid = uuid.UUID(int=8)
        f = frame(session_id=sid)
        w = await send(node.port, f, f, f)
        await until(lambda: node.status(sid) == COMPLETED)
        assert node.delivered[(str(sid), "p", "q", 0)] == 1
        w.close()
        await node.stop()

    arun(go())


def test_message_after_completion_is_ignored(tmp_path):
    async def go():
        peer = await FakePeer().start()
        node = node_for(tmp_path, (N.RecvFrom("p", "x"),), peer_port=peer.port)
        await node.start()
        sid = uuid.UUID(int=9)
        w = await send(node.port, frame(session_id=sid))
        await until(lambda: node.status(sid) == COMPLETED)
        before = (dict(node.delivered), node.store.tables.digest())
        w2 = await send(node.port, frame(session_id=sid, seqnum=1))
        f = await asyncio.wait_for(_first(peer, Kind.FINISHED), 5)
        assert f.seqnum == 1
        assert (dict(node.delivered), node.store.tables.digest()) == before
        w.close(), w2.close()
        await node.stop()
        peer.stop()

    arun(go())


def test_start_session_rules(tmp_path):
    async def go():
        node = node_for(tmp_path, (N.Assign("x", Lit(1)),))
        await node.start()
        a, b = node.start_session("c"), node.start_session("c")
        assert a != b
        # the session row exists before anything is sent
        assert node.store.session(str(a)) is not None
        with pytest.raises(DuplicateSession):
            node.start_session("c", session_id=a)
        with pytest.raises(UnknownChoreography):
            node.start_session("nope")
        await until(lambda: node.status(a) == COMPLETED and node.status(b) == COMPLETED)
        await node.stop()

    arun(go())


def test_registration_rejects_repeated_transaction(tmp_path):
    node = node_for(tmp_path, ())
    prog = (N.Trans("x", "t", Lit(1)), N.Cond(Lit(True), (N.Trans("y", "t", Lit(2)),), ()))
    with pytest.raises(ValueError):
        node.register("d", prog)
    node.register("ok", (N.Cond(Lit(True), (N.Trans("y", "t", Lit(2)),), (N.Trans("y", "t", Lit(3)),)),))


HOLD = (N.Trans("r", "reserve", Var("order")), N.RecvFrom("p", "x"))


def hold_node(tmp_path, **kw):
    return node_for(tmp_path, HOLD, tx=S.WAREHOUSE_TRANSACTIONS, input_var="order", **kw)


def test_failure_broadcast_twice_compensates_once(tmp_path):
    async def go():
        peer = await FakePeer().start()
        node = hold_node(tmp_path, peer_port=peer.port)
        await node.start()
        sid = node.start_session("c", 5)
        await until(lambda: (str(sid), "reserve", "commit") in node.store.tables.effects)
        for _ in range(2):
            node.handle_failure_broadcast(str(sid), "c", "p")
        assert node.status(sid) == FAILED
        t = node.store.tables
        assert t.effects[(str(sid), "reserve", "compensate")] == 1
        assert t.kv["stock"] == S.INITIAL_STOCK
        await node.stop()
        peer.stop()

    arun(go())


def test_broadcast_for_unknown_session_tombstones(tmp_path):
    async def go():
        node = node_for(tmp_path, (N.RecvFrom("p", "x"),))
        await node.start()
        sid = uuid.UUID(int=11)
        node.handle_failure_broadcast(str(sid), "c", "p")
        row = node.store.session(str(sid))
        assert row["status"] == FAILED and row["reason"] == "tombstone"
        w = await send(node.port, frame(session_id=sid))
        await asyncio.sleep(0.1)
        assert node.status(sid) == FAILED and not node.delivered
        w.close()
        await node.stop()

    arun(go())


def test_broadcast_after_completion_logs_conflict(tmp_path):
    async def go():
        node = node_for(tmp_path, (N.Assign("x", Lit(1)),))
        await node.start()
        sid = node.start_session("c")
        await until(lambda: node.status(sid) == COMPLETED)
        node.handle_failure_broadcast(str(sid), "c", "p")
        node.handle_failure_broadcast(str(sid), "c", "p")
        assert node.status(sid) == COMPLETED
        assert len(node.store.tables.conflicts) == 1
        await node.stop()

    arun(go())


def test_at_most_once_session_expires(tmp_path):
    async def go():
        node = hold_node(tmp_path, mode=AT_MOST_ONCE)
        await node.start()
        sid = node.start_session("c", 5)
        await until(lambda: (str(sid), "reserve", "commit") in node.store.tables.effects)
        assert node.expire_sessions(time.time() + 3600) == [str(sid)]
        row = node.store.session(str(sid))
        assert row["status"] == FAILED and row["reason"] == "expired"
        assert node.store.tables.kv["stock"] == S.INITIAL_STOCK
        await node.stop()

    arun(go())


def test_at_least_once_session_restarts_past_deadline(tmp_path):
    async def go():
        node = hold_node(tmp_path)
        await node.start()
        sid = node.start_session("c", 5)
        await until(lambda: str(sid) in node.sessions and node.sessions[str(sid)].attempt == 1)
        assert node.expire_sessions(time.time() + 3600) == []
        await until(lambda: node.sessions[str(sid)].attempt >= 2)
        assert node.status(sid) == STARTED
        assert node.store.tables.effects[(str(sid), "reserve", "commit")] == 1
        await node.stop()

    arun(go())


def test_recovery_is_idempotent(tmp_path):
    async def go():
        node = hold_node(tmp_path)
        await node.start()
        sid = node.start_session("c", 5)
        await until(lambda: (str(sid), "reserve", "commit") in node.store.tables.effects)
        node.fail_session(str(sid), "test", broadcast=False)
        await node.stop()
        digests = []
        for _ in range(2):
            n2 = hold_node(tmp_path)
            await n2.start()
            await asyncio.sleep(0.05)
            digests.append(n2.store.tables.digest())
            await n2.stop()
        assert digests[0] == digests[1]
        assert n2.store.tables.effects[(str(sid), "reserve", "compensate")] == 1

    arun(go())


# -- three-node saga ---------------------------------------------------------------------------


@pytest.mark.parametrize("order", [S.ORDER_OK, S.ORDER_CHARGE_FAILS, S.ORDER_AWARD_FAILS])
def test_saga_fault_free(tmp_path, order):
    run, cl = arun(run_with_kill(str(tmp_path), order, None, None, fsync=False))
    assert run.violations == []
    wh = cl.nodes[S.INITIATOR]
    sid = str(uuid.UUID(int=order))
    first = [e for e in wh.wire_log if e[0] == Kind.VALUE and e[1] == sid and e[2] == "payment"]
    assert [e[3] for e in first] == [0]
    if not S.saga_succeeds(order):
        for node in cl.nodes.values():
            assert node.store.session(sid)["status"] == FAILED


def test_lost_ack_causes_retransmission(tmp_path):
    dropped = []

    def drop_first_payment_ack(f):
        if f.kind == Kind.ACK and f.payload == b"payment" and not dropped:
            dropped.append(f)
            return True
        return False

    async def go():
        cl = Cluster(str(tmp_path), fsync=False, proxy_args={"drop_if": drop_first_payment_ack})
        await cl.start()
        try:
            sid = cl.nodes[S.INITIATOR].start_session(CHOR_ID, S.ORDER_OK)
            assert await cl.wait_quiescent(timeout=20)
            wh = cl.nodes[S.INITIATOR]
            to_payment = [e for e in wh.wire_log if e[0] == Kind.VALUE and e[2] == "payment"]
            assert len(to_payment) >= 2
            assert cl.nodes["payment"].delivered[(str(sid), "warehouse", "payment", 0)] == 1
            assert check_all_or_nothing(cl.outcome(sid), S.ORDER_OK) == []
        finally:
            await cl.stop()

    arun(go())
    assert dropped
