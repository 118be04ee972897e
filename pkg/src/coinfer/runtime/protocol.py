"""Wire format shared by the edge server and device clients.

Frame layout (all integers big-endian)::

    msg_type  u8     0x00 scheduling, 0x01 task, 0x02 result
    task_id   u64
    size      u32    length of everything that follows
    flag      u8     0x00 raw, 0x01 zlib
    payload   size - 1 bytes

Payloads of at least 256 bytes are zlib-compressed. See ``docs/protocol.md``.
"""
from __future__ import annotations

import asyncio
import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from ..core import canonical_json

MSG_SCHEDULING = 0x00
MSG_TASK = 0x01
MSG_RESULT = 0x02
MSG_TYPES = (MSG_SCHEDULING, MSG_TASK, MSG_RESULT)

SUB_START = 0x00
SUB_PAUSE = 0x01
SUB_SCHEME_UPDATE = 0x02
SUB_REGISTER = 0x03
SUB_REGISTER_ACK = 0x04
SUBTYPES = (SUB_START, SUB_PAUSE, SUB_SCHEME_UPDATE, SUB_REGISTER, SUB_REGISTER_ACK)

HEADER = struct.Struct(">BQI")
COMPRESS_THRESHOLD = 256
FLAG_RAW = 0x00
FLAG_ZLIB = 0x01
MAX_SIZE = 2 ** 32 - 1


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class MessageHeader:
    msg_type: int
    task_id: int
    size: int


def encode_message(msg_type: int, task_id: int, payload: bytes) -> bytes:
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    if not 0 <= task_id < 2 ** 64:
        raise ProtocolError("task id out of u64 range")
    payload = bytes(payload)
    if len(payload) >= COMPRESS_THRESHOLD:
        body = bytes([FLAG_ZLIB]) + zlib.compress(payload)
    else:
        body = bytes([FLAG_RAW]) + payload
    if len(body) > MAX_SIZE:
        raise ProtocolError("payload too large for a u32 size field")
    return HEADER.pack(msg_type, task_id, len(body)) + body


def decode_header(buf: bytes) -> MessageHeader:
    if len(buf) < HEADER.size:
        raise ProtocolError(f"truncated frame: {len(buf)} header bytes")
    msg_type, task_id, size = HEADER.unpack_from(buf)
    if msg_type not in MSG_TYPES:
        raise ProtocolError(f"unknown message type 0x{msg_type:02x}")
    if size < 1:
        raise ProtocolError("size mismatch: frame has no flag byte")
    return MessageHeader(msg_type, task_id, size)


def decode_body(body: bytes) -> bytes:
    flag, data = body[0], body[1:]
    if flag == FLAG_RAW:
        return bytes(data)
    if flag == FLAG_ZLIB:
        try:
            return zlib.decompress(data)
        except zlib.error as exc:
            raise ProtocolError(f"decompression failure: {exc}") from None
    raise ProtocolError(f"unknown compression flag 0x{flag:02x}")


def decode_message(buf: bytes) -> tuple[MessageHeader, bytes]:
    """Decode exactly one frame; trailing or missing bytes are errors."""
    header = decode_header(buf)
    body = buf[HEADER.size:]
    if len(body) < header.size:
        raise ProtocolError(f"truncated frame: expected {header.size} bytes, got {len(body)}")
    if len(body) > header.size:
        raise ProtocolError(f"size mismatch: {len(body) - header.size} trailing bytes")
    return header, decode_body(body)


async def read_frame(reader: asyncio.StreamReader) -> tuple[MessageHeader, bytes]:
    try:
        head = await reader.readexactly(HEADER.size)
        header = decode_header(head)
        body = await reader.readexactly(header.size)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial and exc.expected == HEADER.size:
            raise EOFError("connection closed") from None
        raise ProtocolError("truncated frame") from None
    return header, decode_body(body)


async def write_frame(writer: asyncio.StreamWriter, msg_type: int, task_id: int, payload: bytes) -> None:
    writer.write(encode_message(msg_type, task_id, payload))
    await writer.drain()


# --------------------------------------------------------------------------- scheduling payloads

def encode_scheduling(subtype: int, body: Any = None) -> bytes:
    if subtype not in SUBTYPES:
        raise ProtocolError(f"unknown scheduling subtype 0x{subtype:02x}")
    text = "" if body is None else canonical_json(body)
    return bytes([subtype]) + text.encode()


def decode_scheduling(payload: bytes) -> tuple[int, Any]:
    if not payload:
        raise ProtocolError("empty scheduling payload")
    subtype = payload[0]
    if subtype not in SUBTYPES:
        raise ProtocolError(f"unknown scheduling subtype 0x{subtype:02x}")
    text = payload[1:].decode()
    try:
        body = json.loads(text) if text else None
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"scheduling body does not parse: {exc}") from None
    return subtype, body


# --------------------------------------------------------------------------- task blocks

@dataclass(frozen=True)
class TaskBlock:
    """Task or result envelope: ``u32 meta length | canonical JSON meta | data``.

    ``layers`` is the half-open range the receiver must execute; results
    carry an empty range.
    """

    task_id: int
    device_type: str
    source: str
    task_type: str
    data: bytes
    arrival_ms: float
    model_id: str
    scheme: str
    layers: tuple[int, int] = (0, 0)
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {"id": self.task_id, "device_type": self.device_type, "source": self.source,
                "task_type": self.task_type, "arrival_ms": self.arrival_ms, "model": self.model_id,
                "scheme": self.scheme, "layers": list(self.layers), "extra": self.extra}

    def to_bytes(self) -> bytes:
        meta = canonical_json(self.meta()).encode()
        return struct.pack(">I", len(meta)) + meta + self.data

    @classmethod
    def from_bytes(cls, buf: bytes) -> "TaskBlock":
        if len(buf) < 4:
            raise ProtocolError("truncated task block")
        (n,) = struct.unpack_from(">I", buf)
        if len(buf) < 4 + n:
            raise ProtocolError("truncated task block meta")
        try:
            m = json.loads(buf[4:4 + n].decode())
            return cls(int(m["id"]), m["device_type"], m["source"], m["task_type"], bytes(buf[4 + n:]),
                       float(m["arrival_ms"]), m["model"], m["scheme"], tuple(m["layers"]), m.get("extra", {}))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad task block meta: {exc}") from None


# --------------------------------------------------------------------------- task data

def encode_task_data(features: np.ndarray, edges: Sequence[tuple[int, int]]) -> bytes:
    feats = np.asarray(features, dtype=">f4")
    if feats.ndim != 2:
        raise ValueError("features must be a (nodes, dim) matrix")
    n, dim = feats.shape
    edge_arr = np.asarray(edges, dtype=">u4").reshape(-1, 2)
    if edge_arr.size and edge_arr.max() >= n:
        raise ValueError("edge endpoint out of range")
    return (struct.pack(">II", n, dim) + feats.tobytes() + struct.pack(">I", len(edge_arr)) + edge_arr.tobytes())


def decode_task_data(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if len(buf) < 8:
        raise ProtocolError("truncated task data")
    n, dim = struct.unpack_from(">II", buf)
    off = 8 + 4 * n * dim
    if len(buf) < off + 4:
        raise ProtocolError("truncated task data features")
    feats = np.frombuffer(buf, dtype=">f4", count=n * dim, offset=8).reshape(n, dim).astype(np.float32)
    (m,) = struct.unpack_from(">I", buf, off)
    if len(buf) != off + 4 + 8 * m:
        raise ProtocolError("task data edge list length mismatch")
    edges = np.frombuffer(buf, dtype=">u4", count=2 * m, offset=off + 4).reshape(m, 2).astype(np.int64)
    return feats, edges


def synthetic_task_data(volume_bytes: float, rng: np.random.Generator, dim: int = 16) -> bytes:
    """A point-cloud-like payload of roughly ``volume_bytes`` with ring edges."""
    n = max(1, int(round(volume_bytes / (4 * dim + 8))))
    feats = rng.standard_normal((n, dim)).astype(np.float32)
    edges = [(i, (i + 1) % n) for i in range(n)]
    return encode_task_data(feats, edges)
