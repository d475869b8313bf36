"""Named-tensor container: the on-disk checkpoint byte format.

Exact layout (all multi-byte integers little-endian):

====================  =======================================================
bytes 0..3            magic ``b"NTC1"``
bytes 4..7            uint32 ``H`` = length of the JSON header in bytes
bytes 8 .. 8+H-1      UTF-8 JSON header (sorted keys)::

                          {
                            "version": 1,
                            "meta": {...},            # caller's JSON metadata
                            "tensors": [
                              {"name": str, "shape": [int, ...], "offset": int},
                              ...
                            ]
                          }

bytes 8+H ..          payload: for each entry, prod(shape) float64 values,
                      little-endian (``<f8``), row-major, starting at
                      ``8 + H + offset`` (offset is in bytes)
====================  =======================================================

Entries are sorted by name and packed contiguously, so a container's bytes
are a pure function of (tensors, meta) — equal inputs give equal files,
which is what the training pipeline's bit-exact determinism contract needs.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"NTC1"
VERSION = 1


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write named float64 arrays plus JSON metadata to a container file."""
    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps(
        {"version": VERSION, "meta": meta or {}, "tensors": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_tensors(path) -> tuple[dict, dict]:
    """Read a container file; returns ({name: float64 array}, meta)."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a named-tensor container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if 8 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable header ({e})") from e
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported container version {header.get('version')}")
    base = 8 + hlen
    out = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        stop = start + 8 * count
        if stop > len(raw):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(raw[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        out[entry["name"]] = arr
    return out, header["meta"]
