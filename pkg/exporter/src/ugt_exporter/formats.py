"""Writers for the ugt wire formats.

The exporter talks to the classification engine only through files, so the
tensor container and manifest schema are implemented here independently:

    tensor: magic "UGTF", u16 version=1, u8 dtype=1 (float32 LE),
            u8 ndim, ndim x u32 dims, row-major payload
    manifest: JSON with schema "ugt-manifest/1"
"""

import json
import os
import struct

import numpy as np

MAGIC = b"UGTF"
VERSION = 1
DTYPE_FLOAT32 = 1
MANIFEST_SCHEMA = "ugt-manifest/1"

_HEADER = struct.Struct("<4sHBB")


def write_tensor(path, array):
    arr = np.ascontiguousarray(np.asarray(array), dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"refusing to write non-finite tensor to {path}")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_tensor(path):
    """Round-trip reader, used by the exporter's own tests."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, dtype, ndim = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION or dtype != DTYPE_FLOAT32:
        raise ValueError(f"{path}: not a supported tensor file")
    dims = struct.unpack_from(f"<{ndim}I", raw, _HEADER.size)
    payload = raw[_HEADER.size + 4 * ndim :]
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_manifest(path, dim, height, width, entries):
    """Entries: iterable of dicts with tensor/label/domain (+optional occlusion)."""
    doc = {
        "schema": MANIFEST_SCHEMA,
        "dim": int(dim),
        "height": int(height),
        "width": int(width),
        "entries": [
            {
                "tensor": e["tensor"],
                "label": e.get("label"),
                "domain": e["domain"],
                "occlusion": e.get("occlusion"),
            }
            for e in entries
        ],
    }
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
