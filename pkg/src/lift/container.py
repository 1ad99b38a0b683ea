"""Small deterministic binary container used for lead caches and checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes   e.g. b"LIFTLEAD" or b"LIFTCKPT"
    hdr_len    uint32    length of the JSON header in bytes
    header     hdr_len   UTF-8 JSON, sorted keys, with an "arrays" manifest
    payload    ...       each manifest array as raw C-order bytes, in order

Every manifest entry is ``{"name", "dtype", "shape"}`` where dtype is a numpy
little-endian type string such as ``"<f8"``. Identical inputs always produce
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest = []
    chunks = []
    for name, arr in sorted(arrays.items()):
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        arr = arr.astype(dt, copy=False)
        manifest.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes(order="C"))
    head = dict(header)
    head["arrays"] = manifest
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(blob)) + blob + b"".join(chunks)


def decode(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != magic:
        raise ParseError(f"not a {magic.decode(errors='replace')} file")
    (hdr_len,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hdr_len].decode("utf-8"))
    offset = 12 + hdr_len
    arrays = {}
    for entry in header.pop("arrays"):
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if offset + size > len(data):
            raise ParseError(f"truncated payload for array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dt, count=size // dt.itemsize, offset=offset).reshape(shape).copy()
        offset += size
    if offset != len(data):
        raise ParseError("trailing bytes after payload")
    return header, arrays


def save(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode(magic, header, arrays))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)
