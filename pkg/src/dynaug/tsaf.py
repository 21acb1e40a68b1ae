"""TSAF checkpoint container: mode byte + JSON config + named f64 tensors.

Layout (all integers little-endian u32 unless noted):
magic ``TSAF``, version, mode byte (u8), config JSON length + bytes, tensor
count, then per tensor: name length + UTF-8 name, rows, cols, rows*cols f64.
Tensors are written sorted by name; 1-D arrays are stored as (1, n) and
scalars as (1, 1). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .dataset import DataFormatError, _Cursor

__all__ = ["MODE_BYTES", "MODE_NAMES", "TSAF_MAGIC", "TSAF_VERSION", "load_tsaf", "save_tsaf"]

TSAF_MAGIC = b"TSAF"
TSAF_VERSION = 1

MODE_BYTES = {"stateless": 0, "recursive": 1, "cnn": 2, "cnn-att": 3, "talstm": 4}
MODE_NAMES = {v: k for k, v in MODE_BYTES.items()}


def _as_2d(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"TSAF tensors must be at most 2-D, got shape {arr.shape}")


def save_tsaf(path, mode: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    if mode not in MODE_BYTES:
        raise ValueError(f"unknown checkpoint mode {mode!r}")
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(TSAF_MAGIC)
        fh.write(struct.pack("<I", TSAF_VERSION))
        fh.write(struct.pack("<B", MODE_BYTES[mode]))
        fh.write(struct.pack("<I", len(config_bytes)))
        fh.write(config_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = _as_2d(tensors[name])
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tsaf(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Return (mode, config, tensors); tensors come back 2-D as stored."""
    with open(path, "rb") as fh:
        cur = _Cursor(fh.read(), what=str(path))
    if cur.take(4) != TSAF_MAGIC:
        raise DataFormatError(f"{cur.what}: bad magic, not a TSAF checkpoint")
    version = cur.u32()
    if version != TSAF_VERSION:
        raise DataFormatError(f"{cur.what}: unsupported TSAF version {version}")
    mode_byte = struct.unpack("<B", cur.take(1))[0]
    if mode_byte not in MODE_NAMES:
        raise DataFormatError(f"{cur.what}: unknown mode byte {mode_byte}")
    try:
        config = json.loads(cur.take(cur.u32()).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{cur.what}: corrupt config block: {exc}") from None
    tensors = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        rows = cur.u32()
        cols = cur.u32()
        raw = cur.take(rows * cols * 8)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    cur.done()
    return MODE_NAMES[mode_byte], config, tensors
