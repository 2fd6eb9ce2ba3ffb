"""Minimal binary tensor container.

Layout, all little-endian:

    magic   4 bytes  b"UGTF"
    version u16      1
    dtype   u8       1 = float32
    ndim    u8
    dims    ndim x u32
    payload product(dims) x 4 bytes, row-major float32

Readers reject wrong magic/version/dtype, truncated or oversized payloads,
and non-finite values.
"""

import os
import struct

import numpy as np

from .errors import NumericalError, TensorFormatError

MAGIC = b"UGTF"
VERSION = 1
DTYPE_FLOAT32 = 1

_HEADER = struct.Struct("<4sHBB")


def write_tensor(path, tensor):
    """Write a tensor as float32; values must be finite."""
    arr = np.ascontiguousarray(np.asarray(tensor), dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"refusing to write non-finite tensor to {path}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise TensorFormatError(f"unsupported rank {arr.ndim}")
    if any(d > 0xFFFFFFFF or d < 1 for d in arr.shape):
        raise TensorFormatError(f"dimension out of range in shape {arr.shape}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_tensor(path):
    """Read a tensor back as float32; bit-exact with what was written."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TensorFormatError(f"{path}: truncated header")
    magic, version, dtype, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
    dims_end = _HEADER.size + 4 * ndim
    if len(raw) < dims_end:
        raise TensorFormatError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{ndim}I", raw, _HEADER.size)
    count = 1
    for d in dims:
        if d < 1:
            raise TensorFormatError(f"{path}: zero dimension in {dims}")
        count *= d
    payload = raw[dims_end:]
    if len(payload) != 4 * count:
        raise TensorFormatError(f"{path}: payload holds {len(payload)} bytes, dims require {4 * count}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(dims)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{path}: payload contains non-finite values")
    return arr.copy()


def read_tensor_dims(path):
    """Header-only read of the dimension tuple."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TensorFormatError(f"{path}: truncated header")
        magic, version, dtype, ndim = _HEADER.unpack(head)
        if magic != MAGIC:
            raise TensorFormatError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise TensorFormatError(f"{path}: unsupported version {version}")
        if dtype != DTYPE_FLOAT32:
            raise TensorFormatError(f"{path}: unsupported dtype code {dtype}")
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise TensorFormatError(f"{path}: truncated dimension list")
        return struct.unpack(f"<{ndim}I", dims_raw)


def convert(src, dst):
    """Convert between this format and .npy based on file extensions."""
    if src.endswith(".npy"):
        write_tensor(dst, np.load(src, allow_pickle=False))
    elif dst.endswith(".npy"):
        np.save(dst, read_tensor(src))
    else:
        raise TensorFormatError("convert needs a .npy file on exactly one side")
