"""The inference API: request handling, stream server, HTTP front end, transports."""

from .client import HttpTransport, LocalTransport, TcpTransport, TransportError, connect
from .core import InferenceService, ServerConfig, handle_request
from .server import ServerThread, TcpServer, serve

__all__ = [
    "HttpTransport",
    "InferenceService",
    "LocalTransport",
    "ServerConfig",
    "ServerThread",
    "TcpServer",
    "TcpTransport",
    "TransportError",
    "connect",
    "handle_request",
    "serve",
]
