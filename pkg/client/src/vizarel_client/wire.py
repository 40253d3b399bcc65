"""Client-side encoder for the vizarel binary protocol.

Implemented from the published byte layout (FORMAT.md in the server
repository), deliberately independent of the server code so that the
two sides keep each other honest. Golden-file tests pin this module to
the server's reference frames.

All integers are little-endian. A frame is a 14-byte header followed by
the payload:

    magic "VZRL" | version u8 | msg_type u8 | payload_len u64
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VZRL"
VERSION = 1

HEADER = struct.Struct("<4sBBQ")
HEADER_SIZE = HEADER.size  # 14

MSG_INIT = 0x01
MSG_LOG_STATE = 0x02
MSG_FLUSH = 0x03
MSG_ACK = 0x06
MSG_ERROR = 0x07

ERR_PROTOCOL = 1
ERR_SCHEMA = 2
ERR_BACKPRESSURE = 3
ERR_INTERNAL = 4

# dtype name -> (wire code, numpy dtype); names are what callers write
DTYPES: dict[str, tuple[int, np.dtype]] = {
    "f32": (1, np.dtype("<f4")),
    "f64": (2, np.dtype("<f8")),
    "i32": (3, np.dtype("<i4")),
    "u8": (4, np.dtype("u1")),
}


class WireError(Exception):
    """A reply from the server could not be parsed."""


@dataclass(frozen=True)
class SchemaConfig:
    """Session schema as the INIT payload carries it."""

    steps: int
    obs_dim: tuple[int, ...]
    obs_type: str
    action_dim: tuple[int, ...]
    action_type: str
    reward_dim: int
    reward_type: str
    has_frames: bool = False


def encode_frame(msg_type: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type, len(payload)) + payload


def _encode_shape(dim: tuple[int, ...], dtype: str) -> bytes:
    code = DTYPES[dtype][0]
    return struct.pack("<BB", code, len(dim)) + struct.pack(
        f"<{len(dim)}I", *dim)


def encode_init(cfg: SchemaConfig) -> bytes:
    """Full INIT frame for a session schema."""
    payload = struct.pack("<Q", cfg.steps)
    payload += _encode_shape(cfg.obs_dim, cfg.obs_type)
    payload += _encode_shape(cfg.action_dim, cfg.action_type)
    payload += struct.pack("<BIB", DTYPES[cfg.reward_type][0],
                           cfg.reward_dim, int(cfg.has_frames))
    return encode_frame(MSG_INIT, payload)


def encode_tensor_block(arr: np.ndarray, dtype: str) -> bytes:
    """dtype code u8, ndim u8, dims u32 each, then raw row-major bytes."""
    code, np_dtype = DTYPES[dtype]
    arr = np.ascontiguousarray(arr, dtype=np_dtype)
    head = struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode_bitset(flags: np.ndarray) -> bytes:
    # one bit per flag, LSB-first within each byte
    return np.packbits(np.asarray(flags, dtype=bool),
                       bitorder="little").tobytes()


def encode_log_state(cfg: SchemaConfig, n_samples: int, obses: np.ndarray,
                     actions: np.ndarray, rewards: np.ndarray,
                     dones: np.ndarray,
                     frames: np.ndarray | None = None) -> bytes:
    """Full LOG_STATE frame. Arrays must already match the schema."""
    payload = struct.pack("<I", n_samples)
    payload += encode_tensor_block(obses, cfg.obs_type)
    payload += encode_tensor_block(actions, cfg.action_type)
    payload += encode_tensor_block(rewards, cfg.reward_type)
    if cfg.has_frames:
        payload += encode_tensor_block(frames, "u8")
    payload += encode_bitset(dones)  # dones close the payload
    return encode_frame(MSG_LOG_STATE, payload)


def encode_flush() -> bytes:
    return encode_frame(MSG_FLUSH)


def decode_frame(header: bytes) -> tuple[int, int]:
    """Parse a reply header, returning (msg_type, payload_len)."""
    if len(header) != HEADER_SIZE:
        raise WireError(f"short header: {len(header)} bytes")
    magic, version, msg_type, payload_len = HEADER.unpack(header)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported protocol version {version}")
    return msg_type, payload_len


def decode_ack(payload: bytes) -> int | None:
    """ACK payload: empty, or one signed 64-bit value."""
    if not payload:
        return None
    if len(payload) != 8:
        raise WireError(f"ACK payload of {len(payload)} bytes")
    return struct.unpack("<q", payload)[0]


def decode_error(payload: bytes) -> tuple[int, int, str]:
    """ERROR payload: code u16, retry_after_ms u32, UTF-8 message."""
    if len(payload) < 6:
        raise WireError(f"ERROR payload of {len(payload)} bytes")
    code, retry_ms = struct.unpack_from("<HI", payload)
    return code, retry_ms, payload[6:].decode("utf-8", errors="replace")
