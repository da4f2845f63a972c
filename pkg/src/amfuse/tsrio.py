"""Binary tensor and parameter-archive formats.

TSR1: 4-byte magic b"TSR1", u32 LE rank, rank x u32 LE extents, then the
row-major f64 LE payload.

NNZ (".nnz"): named-tensor archive. Layout: magic b"NNZ1", u32 LE length of a
UTF-8 JSON index {name: {"offset": int, "shape": [int, ...]}}, the index
bytes, then a concatenation of TSR1 records; offsets are relative to the
start of the payload region.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError

_TSR_MAGIC = b"TSR1"
_NNZ_MAGIC = b"NNZ1"


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    head = _TSR_MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype("<f8").tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one TSR1 record; returns (array, offset past the record)."""
    if buf[offset:offset + 4] != _TSR_MAGIC:
        raise FormatError(f"bad TSR1 magic at offset {offset}")
    if len(buf) < offset + 8:
        raise FormatError("truncated TSR1 header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise FormatError("truncated TSR1 shape")
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError(f"truncated TSR1 payload: need {end - len(buf)} more bytes")
    arr = np.frombuffer(buf[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
    return arr, end


def write_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    payload = bytearray()
    index: dict[str, dict] = {}
    for name, arr in tensors.items():
        index[name] = {"offset": len(payload), "shape": list(np.shape(arr))}
        payload += tensor_to_bytes(np.asarray(arr))
    idx_bytes = json.dumps(index, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_NNZ_MAGIC + struct.pack("<I", len(idx_bytes)) + idx_bytes + bytes(payload))


def read_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _NNZ_MAGIC:
        raise FormatError(f"{path}: bad NNZ magic")
    (idx_len,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + idx_len:
        raise FormatError(f"{path}: truncated index")
    try:
        index = json.loads(buf[8:8 + idx_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable index: {exc}") from exc
    payload = buf[8 + idx_len:]
    out: dict[str, np.ndarray] = {}
    for name in sorted(index):
        entry = index[name]
        arr, _ = tensor_from_bytes(payload, entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError(f"{path}: shape mismatch for {name!r}")
        out[name] = arr
    return out
