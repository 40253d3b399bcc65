"""Tensor block codec: the one binary encoding of tensors used everywhere.

Block layout (all integers little-endian):

    u8  dtype code      (see model.DType)
    u8  ndim
    u32 dims[ndim]
    raw row-major element data

The same bytes appear in wire message payloads and in chunk records, so
this module is the single source of truth for the layout.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import FramingError, SchemaError
from .model import DType

_HEADER = struct.Struct("<BB")
_DIM = struct.Struct("<I")


def encode_tensor(arr: np.ndarray, dtype: DType) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != dtype.np_dtype:
        raise SchemaError(f"tensor dtype {arr.dtype} does not match {dtype.name}")
    parts = [_HEADER.pack(int(dtype), arr.ndim)]
    for d in arr.shape:
        parts.append(_DIM.pack(d))
    parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def tensor_header_size(ndim: int) -> int:
    return _HEADER.size + ndim * _DIM.size


def tensor_block_size(shape: tuple[int, ...], dtype: DType) -> int:
    """Total encoded size of a block with the given shape."""
    n = 1
    for d in shape:
        n *= d
    return tensor_header_size(len(shape)) + n * dtype.itemsize


def decode_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one block starting at `offset`; returns (array, next_offset)."""
    view = memoryview(buf)
    if offset + _HEADER.size > len(view):
        raise FramingError("truncated tensor block header")
    code, ndim = _HEADER.unpack_from(view, offset)
    dtype = DType.from_code(code)
    pos = offset + _HEADER.size
    if pos + ndim * _DIM.size > len(view):
        raise FramingError("truncated tensor block dims")
    dims = []
    for _ in range(ndim):
        dims.append(_DIM.unpack_from(view, pos)[0])
        pos += _DIM.size
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if pos + nbytes > len(view):
        raise FramingError("truncated tensor block data")
    arr = np.frombuffer(view, dtype=dtype.np_dtype, count=count, offset=pos)
    arr = arr.reshape(tuple(dims)).copy()
    return arr, pos + nbytes


def encode_bitset(flags) -> bytes:
    """Pack booleans LSB-first: element 8k+j lives in byte k, bit j."""
    arr = np.asarray(flags, dtype=bool)
    return np.packbits(arr, bitorder="little").tobytes()


def bitset_size(n: int) -> int:
    return (n + 7) // 8


def decode_bitset(buf: bytes | memoryview, n: int, offset: int = 0) -> tuple[np.ndarray, int]:
    nbytes = bitset_size(n)
    view = memoryview(buf)
    if offset + nbytes > len(view):
        raise FramingError("truncated bitset")
    bits = np.unpackbits(np.frombuffer(view, dtype=np.uint8, count=nbytes, offset=offset),
                         count=n, bitorder="little")
    return bits.astype(bool), offset + nbytes
