"""Simulation state snapshots.

An NPS1 file is a 24-byte header (magic "NPS1", then version, B, N, D, C
as little-endian u32) followed by positions then states, both as
little-endian float32 in C order.
"""

import struct

import numpy as np

from .errors import FormatError, InputError

SNAPSHOT_MAGIC = b"NPS1"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<5I")


def save_snapshot(path, x, S):
    x = np.asarray(x)
    S = np.asarray(S)
    if x.ndim != 3 or S.ndim != 3 or x.shape[:2] != S.shape[:2]:
        raise InputError(
            f"snapshot wants x (B, N, D) and S (B, N, C), got {x.shape}, {S.shape}")
    B, N, D = x.shape
    C = S.shape[2]
    with open(path, "wb") as f:
        f.write(SNAPSHOT_MAGIC)
        f.write(_HEADER.pack(SNAPSHOT_VERSION, B, N, D, C))
        f.write(np.ascontiguousarray(x, "<f4").tobytes())
        f.write(np.ascontiguousarray(S, "<f4").tobytes())


def load_snapshot(path):
    """Read an NPS1 file -> (x (B, N, D) f32, S (B, N, C) f32)."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:4] != SNAPSHOT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}, want {SNAPSHOT_MAGIC!r}")
    version, B, N, D, C = _HEADER.unpack_from(buf, 4)
    if version != SNAPSHOT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    want = 4 + _HEADER.size + 4 * B * N * (D + C)
    if len(buf) != want:
        raise FormatError(
            f"{path}: payload length mismatch: file is {len(buf)} bytes, "
            f"header implies {want}")
    off = 4 + _HEADER.size
    x = np.frombuffer(buf, "<f4", B * N * D, off).reshape(B, N, D)
    S = np.frombuffer(buf, "<f4", B * N * C, off + 4 * B * N * D).reshape(B, N, C)
    return x.copy(), S.copy()
