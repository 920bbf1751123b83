"""Little-endian binary tensor files (``.wfmt``).

Layout: magic ``WFMT``, u32 version, u32 dtype tag, u32 rank, rank x u64 dims,
then the row-major payload. No padding, no footer.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"WFMT"
VERSION = 1
MAX_RANK = 8

_TAG_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


class TensorFormatError(ValueError):
    """Raised for malformed or unsupported tensor files."""


def _dtype_tag(dtype) -> int:
    try:
        return _DTYPE_TO_TAG[np.dtype(dtype)]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {dtype!r}; expected float32 or float64") from None


def write_tensor(path, data: np.ndarray, dtype=None) -> None:
    """Write ``data`` to ``path``. ``dtype`` defaults to the array's own dtype."""
    data = np.asarray(data)
    dtype = np.dtype(dtype if dtype is not None else data.dtype)
    tag = _dtype_tag(dtype)
    if data.ndim < 1 or data.ndim > MAX_RANK:
        raise TensorFormatError(f"rank must be in [1, {MAX_RANK}], got {data.ndim}")
    header = MAGIC + struct.pack("<III", VERSION, tag, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape)
    payload = np.ascontiguousarray(data, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    """Read a tensor file; the returned array keeps the stored dtype."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TensorFormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, tag, rank = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if tag not in _TAG_TO_DTYPE:
        raise TensorFormatError(f"{path}: unknown dtype tag {tag}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} out of range")
    offset = 16 + 8 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated shape block")
    dims = struct.unpack_from(f"<{rank}Q", raw, 16)
    dtype = _TAG_TO_DTYPE[tag]
    count = 1
    for d in dims:
        count *= d
    nbytes = count * dtype.itemsize
    if nbytes >= 2**63:
        raise TensorFormatError(f"{path}: shape {dims} overflows")
    if len(raw) - offset != nbytes:
        raise TensorFormatError(
            f"{path}: payload has {len(raw) - offset} bytes, shape {dims} needs {nbytes}"
        )
    return np.frombuffer(raw, dtype=dtype, offset=offset, count=count).reshape(dims).copy()
