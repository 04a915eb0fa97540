"""Request handling shared by every transport."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass

import numpy as np

from ..objective import SurrogateModel
from ..protocol import (
    EvalRequest,
    EvalResponse,
    Mode,
    ProtocolError,
    Status,
    decode_request,
    encode_response,
)
from ..subspace import PromptBase, project

log = logging.getLogger(__name__)

__all__ = ["InferenceService", "ServerConfig", "handle_request"]


@dataclass(frozen=True)
class ServerConfig:
    listen_address: str = "127.0.0.1:7878"
    model_seed: int = 0
    proj_seed: int | None = 0
    sub_dim: int | None = 500
    prompt_length: int = 50
    max_batch: int = 256
    max_connections: int = 64

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.listen_address.rpartition(":")
        return host or "127.0.0.1", int(port)


def _error(req: EvalRequest | None, status: Status) -> EvalResponse:
    if req is None:
        return EvalResponse(status, 0, 0)
    return EvalResponse(status, req.batch.size, req.num_classes)


def handle_request(model: SurrogateModel, projection: tuple[np.ndarray, PromptBase] | None,
                   req: EvalRequest, max_batch: int | None = None) -> EvalResponse:
    """Evaluate one request. Pure given ``(model, projection)``."""
    b = req.batch
    if req.num_classes != model.num_classes:
        return _error(req, Status.BAD_REQUEST)
    if max_batch is not None and b.size > max_batch:
        return _error(req, Status.BAD_REQUEST)
    if req.mode == Mode.SUBSPACE_VEC:
        if projection is None:
            return _error(req, Status.BAD_REQUEST)
        A, p0 = projection
        if req.prompt.size != A.shape[1]:
            return _error(req, Status.BAD_REQUEST)
        if not np.all(np.isfinite(req.prompt)):
            return _error(req, Status.BAD_REQUEST)
        # round to the wire type so this path matches a client-projected full prompt
        prompt = project(A, req.prompt, p0).astype(np.float32).astype(np.float64)
    else:
        if req.prompt.size % model.embed_dim or req.prompt.size == 0:
            return _error(req, Status.BAD_REQUEST)
        if projection is not None and req.prompt.size != projection[0].shape[0]:
            return _error(req, Status.BAD_REQUEST)
        prompt = req.prompt.astype(np.float64)
    try:
        logits = model.forward(prompt, b)
    except ValueError:
        return _error(req, Status.MODEL_ERROR)
    if not np.all(np.isfinite(logits)):
        return _error(req, Status.MODEL_ERROR)
    return EvalResponse(Status.OK, b.size, req.num_classes, logits.astype(np.float32))


class InferenceService:
    """The model behind the API plus request accounting."""

    def __init__(self, model: SurrogateModel, projection=None, max_batch: int = 256):
        self.model = model
        self.projection = projection
        self.max_batch = max_batch
        self._lock = threading.Lock()
        self.requests_served = 0

    @classmethod
    def from_config(cls, config: ServerConfig, vocab_size: int = 2000, num_classes: int = 2):
        from ..objective import build_world

        world = build_world(
            model_seed=config.model_seed,
            proj_seed=config.proj_seed or 0,
            sub_dim=config.sub_dim or 1,
            prompt_length=config.prompt_length,
            vocab_size=vocab_size,
            num_classes=num_classes,
        )
        projection = (world.A, world.p0) if config.sub_dim else None
        return cls(world.model, projection, config.max_batch)

    def handle(self, req: EvalRequest) -> EvalResponse:
        return handle_request(self.model, self.projection, req, self.max_batch)

    def handle_bytes(self, payload: bytes) -> bytes:
        with self._lock:
            self.requests_served += 1
        try:
            req = decode_request(payload)
        except ProtocolError as exc:
            log.debug("bad request: %s", exc)
            return encode_response(_error(None, Status.BAD_REQUEST))
        return encode_response(self.handle(req))

    def info(self) -> dict:
        return {
            "num_classes": self.model.num_classes,
            "vocab_size": self.model.vocab_size,
            "embed_dim": self.model.embed_dim,
            "full_dim": None if self.projection is None else int(self.projection[0].shape[0]),
            "sub_dim": None if self.projection is None else int(self.projection[0].shape[1]),
            "max_batch": self.max_batch,
        }
