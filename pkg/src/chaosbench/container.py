"""Single-file array container: JSON header followed by a little-endian float64 payload.

Layout::

    b"CHBK" | uint64 LE header length | UTF-8 JSON header | payload

The header lists every array with its name, shape, byte offset into the payload
and element count, plus a free-form ``meta`` object.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"CHBK"
VERSION = 1


class ContainerError(ValueError):
    pass


def write_container(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = {
        "version": VERSION,
        "endianness": "little",
        "dtype": "float64",
        "entries": entries,
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def read_container(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContainerError(f"{path}: not a container file")
    (n,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    if header.get("endianness") != "little":
        raise ContainerError("only little-endian payloads are supported")
    payload = memoryview(raw)[12 + n :]
    arrays = OrderedDict()
    for e in header["entries"]:
        start = e["offset"]
        stop = start + 8 * e["count"]
        if stop > len(payload):
            raise ContainerError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(payload[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, header["meta"]
