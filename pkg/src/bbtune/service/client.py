"""Client-side transports. Each one moves protocol payloads and nothing else."""

from __future__ import annotations

import socket
import threading
from concurrent.futures import ThreadPoolExecutor

from .core import InferenceService
from .server import FRAME_HEADER


class TransportError(ConnectionError):
    """The request may not have been evaluated; safe to retry."""


class LocalTransport:
    """In-process transport: same bytes, same handler, no socket."""

    def __init__(self, service: InferenceService):
        self.service = service
        self.requests = 0

    def call(self, payload: bytes) -> bytes:
        self.requests += 1
        return self.service.handle_bytes(payload)

    def call_many(self, payloads: list[bytes]) -> list[bytes]:
        return [self.call(p) for p in payloads]

    def close(self):
        pass


class TcpTransport:
    """One persistent connection; ``call_many`` pipelines all frames before reading."""

    def __init__(self, address: str, timeout: float = 30.0):
        host, _, port = address.rpartition(":")
        self.address = (host or "127.0.0.1", int(port))
        self.timeout = timeout
        self.requests = 0
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                sock = socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot connect to {self.address}: {exc}") from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
        return self._sock

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        while n:
            chunk = self._sock.recv(n)
            if not chunk:
                raise TransportError("connection closed by server")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    def call_many(self, payloads: list[bytes]) -> list[bytes]:
        with self._lock:
            try:
                sock = self._connect()
                sock.sendall(b"".join(FRAME_HEADER.pack(len(p)) + p for p in payloads))
                self.requests += len(payloads)
                replies = []
                for _ in payloads:
                    (size,) = FRAME_HEADER.unpack(self._recv_exact(FRAME_HEADER.size))
                    replies.append(self._recv_exact(size))
                return replies
            except (OSError, TransportError) as exc:
                self.close()
                if isinstance(exc, TransportError):
                    raise
                raise TransportError(str(exc)) from exc

    def call(self, payload: bytes) -> bytes:
        return self.call_many([payload])[0]

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class HttpTransport:
    """POSTs payloads to the HTTP front end's ``/v1/eval`` route."""

    def __init__(self, base_url: str, timeout: float = 30.0, workers: int = 8):
        import httpx

        self._httpx = httpx
        self._client = httpx.Client(base_url=base_url.rstrip("/"), timeout=timeout)
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._lock = threading.Lock()
        self.requests = 0

    def call(self, payload: bytes) -> bytes:
        with self._lock:
            self.requests += 1
        try:
            r = self._client.post(
                "/v1/eval", content=payload, headers={"content-type": "application/octet-stream"}
            )
        except self._httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if r.status_code != 200:
            raise TransportError(f"HTTP {r.status_code}")
        return r.content

    def call_many(self, payloads: list[bytes]) -> list[bytes]:
        return list(self._pool.map(self.call, payloads))

    def close(self):
        self._client.close()
        self._pool.shutdown(wait=False)


def connect(address: str):
    """Pick a transport from an address: ``http://...`` or ``host:port``."""
    if address.startswith(("http://", "https://")):
        return HttpTransport(address)
    return TcpTransport(address)
