"""Binary ingestion protocol: framing, payload codecs, incremental decoding.

Frame layout (integers little-endian):

    4 bytes magic "VZRL"
    u8  version (1)
    u8  msg_type
    u64 payload_len
    payload bytes

A frame consumes exactly 14 + payload_len bytes. Unknown message types
and bad magic are framing errors that close the connection; they are
never skipped over.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FramingError, SchemaError
from .model import DType, SessionSchema, StepBatch
from . import tensors

MAGIC = b"VZRL"
VERSION = 1
HEADER = struct.Struct("<4sBBQ")
HEADER_SIZE = HEADER.size  # 14

MSG_INIT = 0x01
MSG_LOG_STATE = 0x02
MSG_FLUSH = 0x03
MSG_ACK = 0x06
MSG_ERROR = 0x07

_KNOWN_TYPES = frozenset({MSG_INIT, MSG_LOG_STATE, MSG_FLUSH, MSG_ACK, MSG_ERROR})

# Error payload codes.
ERR_PROTOCOL = 1
ERR_SCHEMA = 2
ERR_BACKPRESSURE = 3
ERR_INTERNAL = 4

MAX_PAYLOAD_LEN = 1 << 34  # refuse absurd frames instead of allocating


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    payload: bytes = b""


def encode_message(msg: WireMessage) -> bytes:
    if msg.msg_type not in _KNOWN_TYPES:
        raise FramingError(f"unknown msg_type 0x{msg.msg_type:02x}")
    return HEADER.pack(MAGIC, VERSION, msg.msg_type, len(msg.payload)) + msg.payload


def decode_message(buf: bytes) -> WireMessage:
    """Decode exactly one message; the buffer must contain the whole frame."""
    msg, consumed = decode_message_at(buf, 0)
    if consumed != len(buf):
        raise FramingError(f"trailing bytes after frame ({len(buf) - consumed})")
    return msg


def decode_message_at(buf: bytes | memoryview, offset: int) -> tuple[WireMessage, int]:
    view = memoryview(buf)
    if offset + HEADER_SIZE > len(view):
        raise FramingError("truncated frame header")
    magic, version, msg_type, payload_len = HEADER.unpack_from(view, offset)
    if magic != MAGIC:
        raise FramingError(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise FramingError(f"unsupported protocol version {version}")
    if msg_type not in _KNOWN_TYPES:
        raise FramingError(f"unknown msg_type 0x{msg_type:02x}")
    if payload_len > MAX_PAYLOAD_LEN:
        raise FramingError(f"payload_len {payload_len} exceeds limit")
    end = offset + HEADER_SIZE + payload_len
    if end > len(view):
        raise FramingError("truncated payload")
    return WireMessage(msg_type, bytes(view[offset + HEADER_SIZE:end])), end


@dataclass
class StreamDecoder:
    """Incremental frame parser, insensitive to arrival fragmentation.

    feed() buffers bytes and returns every complete message, in order. A
    framing error raises and poisons the decoder; the connection owning it
    must close.
    """

    _buf: bytearray = field(default_factory=bytearray)
    _failed: bool = False

    def feed(self, data: bytes) -> list[WireMessage]:
        if self._failed:
            raise FramingError("decoder previously failed")
        self._buf.extend(data)
        out: list[WireMessage] = []
        while True:
            if len(self._buf) < HEADER_SIZE:
                # validate what we can see so bad magic fails fast
                self._peek_validate()
                break
            magic, version, msg_type, payload_len = HEADER.unpack_from(self._buf, 0)
            try:
                if magic != MAGIC:
                    raise FramingError(f"bad magic {bytes(magic)!r}")
                if version != VERSION:
                    raise FramingError(f"unsupported protocol version {version}")
                if msg_type not in _KNOWN_TYPES:
                    raise FramingError(f"unknown msg_type 0x{msg_type:02x}")
                if payload_len > MAX_PAYLOAD_LEN:
                    raise FramingError(f"payload_len {payload_len} exceeds limit")
            except FramingError:
                self._failed = True
                raise
            total = HEADER_SIZE + payload_len
            if len(self._buf) < total:
                break
            out.append(WireMessage(msg_type, bytes(self._buf[HEADER_SIZE:total])))
            del self._buf[:total]
        return out

    def _peek_validate(self) -> None:
        n = min(len(self._buf), len(MAGIC))
        if self._buf[:n] != MAGIC[:n]:
            self._failed = True
            raise FramingError(f"bad magic prefix {bytes(self._buf[:n])!r}")

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# Payload codecs
# ---------------------------------------------------------------------------

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_schema(schema: SessionSchema) -> bytes:
    parts = [_U64.pack(schema.steps)]
    for dtype, shape in ((schema.obs_type, schema.obs_dim),
                         (schema.action_type, schema.action_dim)):
        parts.append(_U8.pack(int(dtype)))
        parts.append(_U8.pack(len(shape)))
        for d in shape:
            parts.append(_U32.pack(d))
    parts.append(_U8.pack(int(schema.reward_type)))
    parts.append(_U32.pack(schema.reward_dim))
    parts.append(_U8.pack(1 if schema.has_frames else 0))
    return b"".join(parts)


def decode_schema(buf: bytes, offset: int = 0) -> tuple[SessionSchema, int]:
    view = memoryview(buf)

    def take(s: struct.Struct):
        nonlocal offset
        if offset + s.size > len(view):
            raise FramingError("truncated schema payload")
        val = s.unpack_from(view, offset)[0]
        offset += s.size
        return val

    steps = take(_U64)
    shapes = []
    dtypes = []
    for _ in range(2):
        dtypes.append(DType.from_code(take(_U8)))
        ndim = take(_U8)
        shapes.append(tuple(take(_U32) for _ in range(ndim)))
    reward_type = DType.from_code(take(_U8))
    reward_dim = take(_U32)
    has_frames = take(_U8) != 0
    schema = SessionSchema(steps=steps, obs_dim=shapes[0], obs_type=dtypes[0],
                           action_dim=shapes[1], action_type=dtypes[1],
                           reward_dim=reward_dim, reward_type=reward_type,
                           has_frames=has_frames)
    return schema, offset


def encode_step_batch(batch: StepBatch, schema: SessionSchema) -> bytes:
    """LOG_STATE payload: u32 n_samples, then tensor blocks for obses,
    actions, rewards, frames (iff the schema has frames), then the dones
    bitset packed LSB-first."""
    batch.validate(schema)
    parts = [_U32.pack(batch.n_samples)]
    parts.append(tensors.encode_tensor(batch.obses, schema.obs_type))
    parts.append(tensors.encode_tensor(batch.actions, schema.action_type))
    parts.append(tensors.encode_tensor(batch.rewards, schema.reward_type))
    if schema.has_frames:
        parts.append(tensors.encode_tensor(batch.frames, DType.U8))
    parts.append(tensors.encode_bitset(batch.dones))
    return b"".join(parts)


def decode_step_batch(buf: bytes, schema: SessionSchema) -> StepBatch:
    view = memoryview(buf)
    if len(view) < _U32.size:
        raise FramingError("truncated LOG_STATE payload")
    n_samples = _U32.unpack_from(view, 0)[0]
    if n_samples < 1:
        raise SchemaError("n_samples must be >= 1")
    pos = _U32.size
    obses, pos = tensors.decode_tensor(view, pos)
    actions, pos = tensors.decode_tensor(view, pos)
    rewards, pos = tensors.decode_tensor(view, pos)
    frames = None
    if schema.has_frames:
        frames, pos = tensors.decode_tensor(view, pos)
    dones, pos = tensors.decode_bitset(view, n_samples, pos)
    if pos != len(view):
        raise FramingError(f"trailing bytes in LOG_STATE payload ({len(view) - pos})")
    batch = StepBatch(n_samples=n_samples, obses=obses, actions=actions,
                      rewards=rewards, dones=dones, frames=frames)
    batch.validate(schema)
    return batch


def encode_ack(value: int | None = None) -> bytes:
    msg = WireMessage(MSG_ACK, b"" if value is None else _U64.pack(value))
    return encode_message(msg)


def decode_ack_value(payload: bytes) -> int | None:
    if len(payload) == 0:
        return None
    if len(payload) != _U64.size:
        raise FramingError(f"bad ACK payload length {len(payload)}")
    return _U64.unpack(payload)[0]


def encode_error(code: int, message: str, retry_after_ms: int = 0) -> bytes:
    payload = _U16.pack(code) + _U32.pack(retry_after_ms) + message.encode("utf-8")
    return encode_message(WireMessage(MSG_ERROR, payload))


def decode_error(payload: bytes) -> tuple[int, int, str]:
    """Returns (code, retry_after_ms, message)."""
    if len(payload) < _U16.size + _U32.size:
        raise FramingError("truncated ERROR payload")
    code = _U16.unpack_from(payload, 0)[0]
    retry = _U32.unpack_from(payload, _U16.size)[0]
    text = payload[_U16.size + _U32.size:].decode("utf-8", errors="replace")
    return code, retry, text
