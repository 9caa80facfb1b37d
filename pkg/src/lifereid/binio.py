"""Byte-level helpers shared by the on-disk formats.

All float payloads are little-endian float64, row-major.  Integrity checks
use FNV-1a 64 over raw bytes; it is cheap, dependency-free, and more than
enough to catch the accidental corruption these formats care about (it is
not a cryptographic hash and does not try to be).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import FormatError

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = _FNV_OFFSET) -> int:
    """FNV-1a 64-bit hash of ``data``; ``seed`` lets callers chain chunks."""
    h = seed
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def floats_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array as little-endian float64, row-major."""
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def bytes_to_floats(payload: bytes, shape: tuple) -> np.ndarray:
    """Parse little-endian float64 bytes back into an array of ``shape``."""
    expected = math.prod(shape) * 8
    if len(payload) != expected:
        raise FormatError(f"payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)


def write_u64(value: int) -> bytes:
    return int(value).to_bytes(8, "little")


def read_u64(payload: bytes, offset: int) -> tuple[int, int]:
    if offset + 8 > len(payload):
        raise FormatError("truncated integer field")
    return int.from_bytes(payload[offset:offset + 8], "little"), offset + 8
