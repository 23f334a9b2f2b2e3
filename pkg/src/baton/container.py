"""``BTN1`` named-tensor container shared by datasets and checkpoints.

Layout (all integers little-endian)::

    b"BTN1" | u32 count | count x entry
    entry = u16 name_len | name (UTF-8) | u8 dtype | u8 rank | rank x u64 dim | payload

dtype codes: 0 = f32, 1 = f64, 2 = i64. Payload is row-major.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"BTN1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}


def _as_array(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        arr = arr.astype("<f8" if arr.dtype.itemsize == 8 else "<f4", copy=False)
    elif arr.dtype.kind in "iub":
        arr = arr.astype("<i8", copy=False)
    else:
        raise TypeError(f"cannot store dtype {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return np.ascontiguousarray(arr)


def encode(tensors: Mapping[str, object]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        arr = _as_array(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{source}: truncated at byte offset {pos} while reading {what}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError(f"{source}: bad magic, not a BTN1 container")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{source}: entry name at byte offset {pos - nlen} is not UTF-8") from None
        code, rank = struct.unpack("<BB", take(2, f"header of {name!r}"))
        if code not in _DTYPES:
            raise FormatError(f"{source}: unknown dtype code {code} for {name!r} at byte offset {pos - 2}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name!r}"))
        dtype = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if pos != len(buf):
        raise FormatError(f"{source}: {len(buf) - pos} trailing bytes after byte offset {pos}")
    return out


def write_container(path: str | Path, tensors: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode(tensors))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode(path.read_bytes(), source=str(path))


def text_to_i64(text: str) -> np.ndarray:
    """UTF-8 bytes as an i64 vector (metadata entries carry JSON this way)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype("<i8")


def i64_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.int64).astype(np.uint8)).decode("utf-8")
