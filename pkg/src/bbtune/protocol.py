"""Binary wire format for evaluation requests/responses and payload accounting.

All integers and floats are little-endian; floats are IEEE float32.

Request::

    "BBT1" | version u8 | mode u8 | B u16 | S u16 | K u8 | plen u32
    | prompt f32[plen] | ids u16[B*S] | mask u8[B*S] | mask_pos u16[B]

Response::

    "BBR1" | status u8 | B u16 | K u8 | logits f32[B*K]   (logits only when status is OK)
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

import numpy as np

from .objective import EvalBatch

__all__ = [
    "EvalRequest",
    "EvalResponse",
    "Mode",
    "PayloadSizes",
    "ProtocolError",
    "Status",
    "decode_request",
    "decode_response",
    "encode_request",
    "encode_response",
    "payload_sizes",
]

REQUEST_MAGIC = b"BBT1"
RESPONSE_MAGIC = b"BBR1"
VERSION = 1
REQUEST_HEADER = struct.Struct("<4sBBHHBI")
RESPONSE_HEADER = struct.Struct("<4sBHB")


class ProtocolError(ValueError):
    pass


class VersionMismatch(ProtocolError):
    pass


class Mode(enum.IntEnum):
    FULL_PROMPT = 0
    SUBSPACE_VEC = 1


class Status(enum.IntEnum):
    OK = 0
    BAD_REQUEST = 1
    MODEL_ERROR = 2


@dataclass(frozen=True, eq=False)
class EvalRequest:
    """One evaluation call. Labels never leave the client, so they are not encoded."""

    mode: Mode
    prompt: np.ndarray
    batch: EvalBatch
    num_classes: int

    def __eq__(self, other):
        if not isinstance(other, EvalRequest):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.num_classes == other.num_classes
            and np.asarray(self.prompt, "<f4").tobytes() == np.asarray(other.prompt, "<f4").tobytes()
            and np.array_equal(self.batch.input_ids, other.batch.input_ids)
            and np.array_equal(self.batch.attention_mask, other.batch.attention_mask)
            and np.array_equal(self.batch.mask_pos, other.batch.mask_pos)
        )


@dataclass(frozen=True, eq=False)
class EvalResponse:
    status: Status
    batch_size: int
    num_classes: int
    logits: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, EvalResponse):
            return NotImplemented
        return encode_response(self) == encode_response(other)


def encode_request(req: EvalRequest) -> bytes:
    prompt = np.asarray(req.prompt, dtype="<f4")
    b = req.batch
    B, S = b.input_ids.shape
    if B > 0xFFFF or S > 0xFFFF or not 0 < req.num_classes <= 0xFF:
        raise ProtocolError("batch shape does not fit the header fields")
    header = REQUEST_HEADER.pack(
        REQUEST_MAGIC, VERSION, int(req.mode), B, S, req.num_classes, prompt.size
    )
    return b"".join([
        header,
        prompt.tobytes(),
        b.input_ids.astype("<u2").tobytes(),
        b.attention_mask.astype("u1").tobytes(),
        b.mask_pos.astype("<u2").tobytes(),
    ])


def decode_request(buf: bytes) -> EvalRequest:
    if len(buf) < REQUEST_HEADER.size:
        raise ProtocolError("truncated request header")
    magic, version, mode, B, S, K, plen = REQUEST_HEADER.unpack_from(buf, 0)
    if magic != REQUEST_MAGIC:
        raise ProtocolError(f"bad request magic {magic!r}")
    if version != VERSION:
        raise VersionMismatch(f"unsupported protocol version {version}")
    try:
        mode = Mode(mode)
    except ValueError:
        raise ProtocolError(f"unknown mode {mode}") from None
    expected = REQUEST_HEADER.size + 4 * plen + 3 * B * S + 2 * B
    if len(buf) != expected:
        raise ProtocolError(f"request length {len(buf)} != declared {expected}")
    off = REQUEST_HEADER.size
    prompt = np.frombuffer(buf, "<f4", plen, off)
    off += 4 * plen
    ids = np.frombuffer(buf, "<u2", B * S, off).reshape(B, S)
    off += 2 * B * S
    mask = np.frombuffer(buf, "u1", B * S, off).reshape(B, S)
    off += B * S
    pos = np.frombuffer(buf, "<u2", B, off)
    try:
        batch = EvalBatch(ids, mask, pos, np.zeros(B, dtype=np.uint8))
    except ValueError as exc:
        raise ProtocolError(str(exc)) from None
    return EvalRequest(mode, prompt.astype(np.float32), batch, K)


def encode_response(resp: EvalResponse) -> bytes:
    header = RESPONSE_HEADER.pack(RESPONSE_MAGIC, int(resp.status), resp.batch_size, resp.num_classes)
    if resp.status != Status.OK:
        return header
    logits = np.asarray(resp.logits, dtype="<f4")
    if logits.shape != (resp.batch_size, resp.num_classes):
        raise ProtocolError("OK responses must carry exactly B x K logits")
    return header + logits.tobytes()


def decode_response(buf: bytes) -> EvalResponse:
    if len(buf) < RESPONSE_HEADER.size:
        raise ProtocolError("truncated response header")
    magic, status, B, K = RESPONSE_HEADER.unpack_from(buf, 0)
    if magic != RESPONSE_MAGIC:
        raise ProtocolError(f"bad response magic {magic!r}")
    try:
        status = Status(status)
    except ValueError:
        raise ProtocolError(f"unknown status {status}") from None
    body = len(buf) - RESPONSE_HEADER.size
    if status != Status.OK:
        if body:
            raise ProtocolError("error responses carry no logits")
        return EvalResponse(status, B, K)
    if body != 4 * B * K:
        raise ProtocolError(f"expected {4 * B * K} logit bytes, got {body}")
    logits = np.frombuffer(buf, "<f4", B * K, RESPONSE_HEADER.size).reshape(B, K)
    return EvalResponse(status, B, K, logits.copy())


@dataclass(frozen=True)
class PayloadSizes:
    upload_ids: int
    upload_mask: int
    upload_prompt: int
    download: int
    upload_mask_pos: int = 0
    request_header: int = REQUEST_HEADER.size
    response_header: int = RESPONSE_HEADER.size

    @property
    def upload(self) -> int:
        return self.upload_ids + self.upload_mask + self.upload_prompt

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.upload_ids, self.upload_mask, self.upload_prompt, self.download)


def payload_sizes(B: int, S: int, K: int, plen: int) -> PayloadSizes:
    """Uncompressed byte counts per call, excluding the fixed headers.

    ``upload_mask_pos`` is the mask-position vector this format adds; it is
    kept out of ``upload`` so the ids/mask/prompt figures stand on their own.
    """
    return PayloadSizes(
        upload_ids=2 * B * S,
        upload_mask=B * S,
        upload_prompt=4 * plen,
        download=4 * B * K,
        upload_mask_pos=2 * B,
    )
