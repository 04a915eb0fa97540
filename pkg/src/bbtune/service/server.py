"""Stream-socket server: u32 little-endian length prefix, then one protocol payload."""

from __future__ import annotations

import asyncio
import itertools
import logging
import struct
import threading

from .core import InferenceService

log = logging.getLogger(__name__)

FRAME_HEADER = struct.Struct("<I")
MAX_FRAME = 64 * 1024 * 1024


class TcpServer:
    """Asyncio server answering frames in order per connection."""

    def __init__(self, service: InferenceService, host: str = "127.0.0.1", port: int = 0,
                 max_connections: int = 64):
        self.service = service
        self.host = host
        self.port = port
        self.max_connections = max_connections
        self.connection_counts: dict[int, int] = {}
        self._ids = itertools.count()
        self._active = 0
        self._server: asyncio.base_events.Server | None = None
        self._handlers: set[asyncio.Task] = set()

    @property
    def total_requests(self) -> int:
        return sum(self.connection_counts.values())

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._client, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        log.info("listening on %s:%d", self.host, self.port)

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
        for task in list(self._handlers):
            task.cancel()
        await asyncio.gather(*self._handlers, return_exceptions=True)
        if self._server is not None:
            await self._server.wait_closed()

    async def _client(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if self._active >= self.max_connections:
            writer.close()
            return
        self._active += 1
        task = asyncio.current_task()
        self._handlers.add(task)
        cid = next(self._ids)
        self.connection_counts[cid] = 0
        loop = asyncio.get_running_loop()
        try:
            while True:
                try:
                    head = await reader.readexactly(FRAME_HEADER.size)
                except asyncio.IncompleteReadError:
                    break
                (size,) = FRAME_HEADER.unpack(head)
                if size > MAX_FRAME:
                    log.warning("connection %d: frame of %d bytes refused", cid, size)
                    break
                payload = await reader.readexactly(size)
                self.connection_counts[cid] += 1
                reply = await loop.run_in_executor(None, self.service.handle_bytes, payload)
                writer.write(FRAME_HEADER.pack(len(reply)) + reply)
                await writer.drain()
        except (asyncio.IncompleteReadError, ConnectionError, asyncio.CancelledError):
            pass
        finally:
            self._active -= 1
            self._handlers.discard(task)
            writer.close()


class ServerThread:
    """Run a :class:`TcpServer` on a background event loop (tests, local runs).

    >>> with ServerThread(service) as srv:  # doctest: +SKIP
    ...     client = TcpTransport(srv.address)
    """

    def __init__(self, service: InferenceService, host: str = "127.0.0.1", port: int = 0,
                 max_connections: int = 64):
        self.server = TcpServer(service, host, port, max_connections)
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)

    @property
    def address(self) -> str:
        return f"{self.server.host}:{self.server.port}"

    def start(self) -> "ServerThread":
        self._thread.start()
        asyncio.run_coroutine_threadsafe(self.server.start(), self._loop).result()
        return self

    def stop(self) -> None:
        asyncio.run_coroutine_threadsafe(self.server.close(), self._loop).result()
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join()
        self._loop.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def serve(service: InferenceService, host: str, port: int, max_connections: int = 64) -> None:
    """Blocking entry point; returns on Ctrl-C."""
    server = TcpServer(service, host, port, max_connections)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        log.info("shutting down")
