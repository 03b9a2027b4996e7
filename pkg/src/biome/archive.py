"""Minimal tensor archive.

Layout: 8-byte little-endian header length, a UTF-8 JSON header mapping
tensor names to ``{"shape", "dtype", "offset", "length"}``, then the
little-endian payload. Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODES = {v: k for k, v in DTYPES.items()}


class ArchiveError(ValueError):
    pass


def _as_array(value) -> np.ndarray:
    if hasattr(value, "detach"):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.float64:
        return arr.astype("<f8", copy=False)
    return arr.astype("<f4", copy=False)


def dumps(tensors: Mapping[str, object]) -> bytes:
    header, chunks, offset = {}, [], 0
    for name in sorted(tensors):
        arr = _as_array(tensors[name])
        arr = np.ascontiguousarray(arr).reshape(arr.shape)
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": _CODES[arr.dtype], "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 8:
        raise ArchiveError("truncated archive: missing header length")
    (n,) = struct.unpack_from("<Q", blob, 0)
    if 8 + n > len(blob):
        raise ArchiveError("truncated archive: header runs past end of file")
    try:
        header = json.loads(blob[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArchiveError(f"malformed archive header: {e}") from None
    if not isinstance(header, dict):
        raise ArchiveError("archive header must be a JSON object")
    payload = memoryview(blob)[8 + n :]
    out, spans = {}, []
    for name, entry in header.items():
        try:
            dtype = DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError):
            raise ArchiveError(f"bad header entry for {name!r}") from None
        if length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise ArchiveError(f"{name!r}: declared length {length} does not match shape {shape}")
        if offset < 0 or offset + length > len(payload):
            raise ArchiveError(f"{name!r}: data out of bounds")
        spans.append((offset, offset + length, name))
        out[name] = np.frombuffer(payload[offset : offset + length], dtype=dtype).reshape(shape).copy()
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise ArchiveError(f"tensors {a!r} and {b!r} overlap")
    return out


def save(path, tensors: Mapping[str, object]) -> None:
    """Write atomically via a temp file in the same directory."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
