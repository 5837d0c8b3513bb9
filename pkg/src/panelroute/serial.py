"""Deterministic binary bundle format for checkpoints and feature matrices.

Layout: magic, format version, uint64 header length, canonical-JSON header,
then raw array bytes in header order. No timestamps anywhere, so identical
content always produces identical bytes.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PRTB"
FORMAT_VERSION = 1


class BundleError(Exception):
    pass


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_bundle(path, meta: dict, arrays: dict | None = None) -> None:
    """Write meta (JSON-able) plus named float/int arrays to a single file."""
    arrays = arrays or {}
    specs = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        specs.append(
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape), "offset": offset}
        )
        blobs.append(blob)
        offset += len(blob)
    header = _canonical_json({"version": FORMAT_VERSION, "meta": meta, "arrays": specs})
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_bundle(path):
    """Return (meta, arrays) from a bundle file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BundleError(f"{path}: not a bundle file (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise BundleError(f"{path}: unsupported bundle version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for spec in header["arrays"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        n = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        start = spec["offset"]
        arrays[spec["name"]] = np.frombuffer(
            payload[start : start + n], dtype=dtype
        ).reshape(shape).copy()
    return header["meta"], arrays


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_obj(obj) -> str:
    return hashlib.sha256(_canonical_json(obj)).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(
        json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
