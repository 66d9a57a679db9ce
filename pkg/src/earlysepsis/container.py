"""Byte-deterministic array container used for checkpoints and distance caches.

Layout::

    EARLYSEPSIS-ARRAYS <version>\\n
    <one line of JSON: {"meta": ..., "arrays": [{"name", "dtype", "shape"}, ...], "sha256": ...}>\\n
    <raw little-endian array bytes, concatenated in header order>

No timestamps are written, so identical content gives identical bytes.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = "EARLYSEPSIS-ARRAYS"
VERSION = 1


def dumps(meta, arrays):
    entries = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, order="C")  # keeps 0-d shape, unlike ascontiguousarray
        dtype = arr.dtype.newbyteorder("<")
        arr = arr.astype(dtype, copy=False)
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta, "arrays": entries, "sha256": hashlib.sha256(payload).hexdigest()},
                        sort_keys=True)
    return f"{MAGIC} {VERSION}\n{header}\n".encode("utf-8") + payload


def loads(blob):
    try:
        first, header, payload = blob.split(b"\n", 2)
        magic, version = first.decode("utf-8").split(" ")
    except ValueError as exc:
        raise DataError("not an array container") from exc
    if magic != MAGIC or int(version) != VERSION:
        raise DataError(f"unsupported container {first!r}")
    try:
        header = json.loads(header)
    except ValueError as exc:
        raise DataError("corrupt container header") from exc
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise DataError("container payload checksum mismatch")
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(payload):
            raise DataError(f"truncated container at array {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise DataError("trailing bytes in container")
    return header["meta"], arrays


def save(path, meta, arrays):
    blob = dumps(meta, arrays)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path):
    return loads(Path(path).read_bytes())


def digest(meta, arrays):
    return hashlib.sha256(dumps(meta, arrays)).hexdigest()
