"""Frame-aware TCP proxy that drops, duplicates and reorders traffic."""

from __future__ import annotations

import asyncio
import contextlib
import random
from collections import Counter

from .wire import FrameError, encode_frame, read_frame


class FaultProxy:
    """Forwards frames to ``target``, perturbing them with a seeded RNG.

    ``drop_if(frame)`` drops matching frames deterministically on top of the
    random ``drop`` rate.  A reordered frame is held back until the next frame
    on the same connection has been forwarded (or ``hold`` seconds pass).
    """

    def __init__(self, target: tuple, seed: int = 0, drop: float = 0.0, dup: float = 0.0,
                 reorder: float = 0.0, drop_if=None, hold: float = 0.05, host: str = "127.0.0.1"):
        self.target = target
        self.rng = random.Random(seed)
        self.drop, self.dup, self.reorder = drop, dup, reorder
        self.drop_if = drop_if
        self.hold = hold
        self.host = host
        self.port = 0
        self.stats = Counter()
        self._server = None
        self._writers = set()
        self._tasks = set()

    async def start(self) -> "FaultProxy":
        self._server = await asyncio.start_server(self._on_conn, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
        for w in list(self._writers):
            w.transport.abort()
        for t in list(self._tasks):
            t.cancel()

    @property
    def address(self) -> tuple:
        return (self.host, self.port)

    async def _on_conn(self, reader, writer):
        self._writers.add(writer)
        try:
            _, up = await asyncio.open_connection(*self.target)
        except OSError:
            writer.transport.abort()
            return
        self._writers.add(up)
        held = []
        try:
            while True:
                frame = await read_frame(reader)
                if frame is None:
                    break
                self.stats["seen"] += 1
                if (self.drop_if is not None and self.drop_if(frame)) or self.rng.random() < self.drop:
                    self.stats["dropped"] += 1
                    continue
                data = encode_frame(frame)
                if self.rng.random() < self.reorder:
                    self.stats["reordered"] += 1
                    held.append(data)
                    self._later(up, data, held)
                    continue
                up.write(data)
                if self.rng.random() < self.dup:
                    self.stats["duplicated"] += 1
                    up.write(data)
                while held:
                    up.write(held.pop(0))
                await up.drain()
                self.stats["forwarded"] += 1
        except (FrameError, ConnectionError, OSError):
            pass
        finally:
            for w in (writer, up):
                self._writers.discard(w)
                w.transport.abort()

    def _later(self, up, data, held):
        async def release():
            await asyncio.sleep(self.hold)
            if data in held:
                held.remove(data)
                with contextlib.suppress(ConnectionError, OSError):
                    up.write(data)

        t = asyncio.ensure_future(release())
        self._tasks.add(t)
        t.add_done_callback(self._tasks.discard)
