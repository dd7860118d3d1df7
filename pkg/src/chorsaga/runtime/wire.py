"""Framed wire protocol.

Frame layout (all integers big-endian)::

    u32  length of everything after this field
    u8   version (0x01)
    u8   kind
    16B  session id
    u16  + bytes  choreography id (utf-8)
    u16  + bytes  sender id (utf-8)
    u64  seqnum
    u16  telemetry pair count, then per pair: u16 + key bytes, u16 + value bytes
    ...  payload (rest of the frame)

ACK and FINISHED frames echo the session id, sender id and seqnum of the
frame they acknowledge; their payload is the acknowledging node's name.
"""

from __future__ import annotations

import asyncio
import enum
import struct
import uuid
from dataclasses import dataclass, field

VERSION = 1
MAX_FRAME = 16 * 1024 * 1024
BROADCAST_SEQ = 2**64 - 1


class Kind(enum.IntEnum):
    VALUE = 1
    LABEL = 2
    ACK = 3
    FINISHED = 4
    FAILURE_BROADCAST = 5


class FrameError(Exception):
    """Malformed frame; the connection carrying it is dropped."""


@dataclass(frozen=True)
class Frame:
    kind: Kind
    session_id: uuid.UUID
    chor_id: str
    sender: str
    seqnum: int
    payload: bytes = b""
    telemetry: tuple = field(default=())

    @property
    def key(self):
        return (self.session_id, self.sender, self.seqnum)


_U16 = struct.Struct(">H")
_HEAD = struct.Struct(">BB16s")
_SEQ = struct.Struct(">Q")


def _short(b: bytes, what: str) -> bytes:
    if len(b) > 0xFFFF:
        raise FrameError(f"{what} longer than 65535 bytes")
    return _U16.pack(len(b)) + b


def encode_frame(f: Frame) -> bytes:
    if not 0 <= f.seqnum < 2**64:
        raise FrameError(f"seqnum {f.seqnum} out of range")
    parts = [
        _HEAD.pack(VERSION, int(f.kind), f.session_id.bytes),
        _short(f.chor_id.encode(), "choreography id"),
        _short(f.sender.encode(), "sender id"),
        _SEQ.pack(f.seqnum),
        _U16.pack(len(f.telemetry)),
    ]
    for k, v in f.telemetry:
        parts.append(_short(k.encode(), "telemetry key"))
        parts.append(_short(v.encode(), "telemetry value"))
    parts.append(f.payload)
    body = b"".join(parts)
    if len(body) > MAX_FRAME:
        raise FrameError("frame too large")
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> Frame:
    try:
        version, kind, sid = _HEAD.unpack_from(body, 0)
        if version != VERSION:
            raise FrameError(f"unsupported version {version}")
        pos = _HEAD.size
        fields = []
        for _ in range(2):
            (n,) = _U16.unpack_from(body, pos)
            pos += 2
            if pos + n > len(body):
                raise FrameError("truncated header field")
            fields.append(body[pos:pos + n].decode())
            pos += n
        (seq,) = _SEQ.unpack_from(body, pos)
        pos += 8
        (count,) = _U16.unpack_from(body, pos)
        pos += 2
        tele = []
        for _ in range(count):
            kv = []
            for _ in range(2):
                (n,) = _U16.unpack_from(body, pos)
                pos += 2
                if pos + n > len(body):
                    raise FrameError("truncated telemetry")
                kv.append(body[pos:pos + n].decode())
                pos += n
            tele.append(tuple(kv))
        return Frame(Kind(kind), uuid.UUID(bytes=sid), fields[0], fields[1], seq,
                     bytes(body[pos:]), tuple(tele))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FrameError(f"malformed frame: {exc}") from None


def decode_frame(data: bytes) -> Frame:
    if len(data) < 4:
        raise FrameError("short frame")
    (n,) = struct.unpack_from(">I", data, 0)
    if n > MAX_FRAME or len(data) != 4 + n:
        raise FrameError("length prefix does not match frame size")
    return decode_body(data[4:])


async def read_frame(reader: asyncio.StreamReader) -> Frame | None:
    """Next frame, or ``None`` at a clean end of stream."""
    try:
        head = await reader.readexactly(4)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise FrameError("truncated length prefix") from None
        return None
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise FrameError(f"frame length {n} exceeds limit")
    try:
        body = await reader.readexactly(n)
    except asyncio.IncompleteReadError:
        raise FrameError("truncated frame") from None
    return decode_body(body)
