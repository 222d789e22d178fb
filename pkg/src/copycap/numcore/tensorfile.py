"""Flat binary container for named float64 arrays.

Layout: magic line ``NCT1``, one JSON header line listing names and shapes
in storage order, then the raw row-major little-endian float64 payloads
back to back. Round-trips bit exactly and needs no third-party reader.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"NCT1\n"


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.astype("<f8").tobytes())
    header = json.dumps({"arrays": entries}).encode() + b"\n"
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not an NCT1 array file")
    nl = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC) : nl])
    out = {}
    offset = nl + 1
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"{path}: truncated payload for {entry['name']!r}")
        out[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: trailing bytes after declared arrays")
    return out
