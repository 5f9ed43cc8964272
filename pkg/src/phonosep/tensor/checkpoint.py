"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"PHSPCKPT"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length H
    next H bytes  UTF-8 JSON header:
                    {"entries": [{"name", "dtype", "shape", "offset", "nbytes"}, ...],
                     "metadata": {...}}
    remainder     payload; each entry's raw little-endian values start at
                  ``offset`` bytes into the payload

Entry names are prefixed by kind: ``param/``, ``buffer/`` and ``optim/``.
Values are stored verbatim, so a save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MAGIC = b"PHSPCKPT"
VERSION = 1


def save(path, arrays: Dict[str, np.ndarray], metadata: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "metadata": metadata}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 20
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen :]
    arrays = {}
    for e in header["entries"]:
        buf = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header["metadata"]
