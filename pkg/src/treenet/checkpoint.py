"""Bit-exact named-tensor checkpoints.

Layout, all little-endian::

    b"TRNW" | u32 version | u32 count
    count x ( u32 name_len | name utf-8 | u8 dtype | u8 rank | u32 dims[rank] | raw data )

Records are written in sorted name order.  dtype 0 = f32, 1 = f64.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

MAGIC = b"TRNW"
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def dumps(state: dict, dtype=np.float32) -> bytes:
    buf = io.BytesIO()
    write(buf, state, dtype)
    return buf.getvalue()


def write(f: BinaryIO, state: dict, dtype=np.float32) -> None:
    code = CODE_OF[np.dtype(dtype)]
    f.write(MAGIC)
    f.write(struct.pack("<II", VERSION, len(state)))
    for name in sorted(state):
        arr = np.asarray(state[name], dtype=DTYPE_CODES[code], order="C")
        raw_name = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw_name)))
        f.write(raw_name)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes(order="C"))


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise CheckpointError("checkpoint truncated")
    return b


def read(f: BinaryIO) -> "OrderedDict[str, np.ndarray]":
    if _read_exact(f, 4) != MAGIC:
        raise CheckpointError("not a TRNW checkpoint (bad magic)")
    version, count = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", _read_exact(f, 2))
        if code not in DTYPE_CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
        dt = DTYPE_CODES[code]
        count_el = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(_read_exact(f, count_el * dt.itemsize), dtype=dt).reshape(dims)
        state[name] = data.astype(dt.newbyteorder("="))
    if f.read(1):
        raise CheckpointError("trailing bytes after last record")
    return state


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    return read(io.BytesIO(blob))


def save(path: Union[str, Path], state: dict, dtype=np.float32) -> None:
    with open(path, "wb") as f:
        write(f, state, dtype)


def load(path: Union[str, Path]) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as f:
        return read(f)


def save_model(model, path: Union[str, Path]) -> None:
    save(path, model.state_dict())


def load_model(model, path: Union[str, Path]):
    """Load weights and BN buffers into ``model``; shape mismatches raise ValueError."""
    state = load(path)
    model.load_state_dict(state)
    return model
