"""Checkpoint container.

Layout (all integers little-endian)::

    b"SFDCKPT\\n"                  8-byte magic
    uint32 format version
    uint64 header length H
    H bytes of UTF-8 JSON header   {"version", "meta", "arrays", "sha256"}
    payload                        float64 / int64 arrays back to back, "<f8" / "<i8"

``arrays`` lists ``{"name", "dtype", "shape", "offset"}`` with byte offsets
into the payload; ``sha256`` is the digest of the payload.  The JSON header
is written with sorted keys and no whitespace, so saving the same state
twice gives identical bytes.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct

import numpy as np

MAGIC = b"SFDCKPT\n"
FORMAT_VERSION = 1
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


class CheckpointError(RuntimeError):
    pass


def dumps(arrays, meta):
    chunks, entries, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": FORMAT_VERSION, "meta": meta, "arrays": entries,
              "sha256": hashlib.sha256(payload).hexdigest()}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(blob)) + blob + payload


def loads(data):
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        version, hlen = struct.unpack("<IQ", data[8:20])
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(data[20:20 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from None
    payload = data[20 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError("checkpoint payload checksum mismatch")
    arrays = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return arrays, header["meta"]


def save(path, arrays, meta):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
