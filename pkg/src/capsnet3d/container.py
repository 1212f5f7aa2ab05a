"""Binary tensor container and the checkpoint archive built on it.

Container layout: magic ``VCT1``, u8 dtype code (0 = f32, 1 = f64), u8 rank,
rank little-endian u32 extents, then the raw little-endian row-major payload.

Checkpoint layout: magic ``VCKP``, u32 JSON header length, UTF-8 JSON header,
then repeated entries of [u16 name length, name UTF-8, container bytes].
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO, Union

import numpy as np

from .errors import CheckpointError, UsageError

MAGIC = b"VCT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

CHECKPOINT_MAGIC = b"VCKP"


def write_tensor(stream: BinaryIO, array: np.ndarray) -> int:
    """Serialize one array; returns the number of bytes written."""
    arr = np.asarray(array)
    if arr.dtype not in _CODE_FOR:
        raise UsageError(f"container supports float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise UsageError("container rank limit is 255")
    header = MAGIC + struct.pack("<BB", _CODE_FOR[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    stream.write(header)
    stream.write(payload)
    return len(header) + len(payload)


def read_tensor(stream: BinaryIO) -> np.ndarray:
    head = stream.read(6)
    if len(head) != 6 or head[:4] != MAGIC:
        raise UsageError("not a tensor container (bad magic)")
    code, rank = struct.unpack("<BB", head[4:6])
    if code not in _DTYPE_CODES:
        raise UsageError(f"unknown dtype code {code}")
    extents = struct.unpack(f"<{rank}I", stream.read(4 * rank)) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(extents)) if extents else 1
    payload = stream.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise UsageError("truncated tensor container payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(extents)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# checkpoint archive


def save_checkpoint(path, header: dict, tensors: dict) -> None:
    """Write a named-tensor archive with a JSON provenance header."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for name in sorted(tensors):
            name_bytes = name.encode("utf-8")
            if len(name_bytes) > 0xFFFF:
                raise UsageError(f"parameter name too long: {name!r}")
            fh.write(struct.pack("<H", len(name_bytes)))
            fh.write(name_bytes)
            write_tensor(fh, tensors[name])


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header dict, name -> ndarray)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        while True:
            raw = fh.read(2)
            if not raw:
                break
            (nlen,) = struct.unpack("<H", raw)
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = read_tensor(fh)
        return header, tensors
