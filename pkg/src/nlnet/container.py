"""Binary container shared by checkpoints and dataset caches.

Layout::

    b"NLNET1" | uint64 LE manifest length | manifest JSON (UTF-8, sorted keys) | payload

The manifest carries an ``entries`` list of ``{name, shape, dtype, offset}``;
offsets are relative to the start of the payload. Arrays are stored
little-endian and C-contiguous, so equal content gives equal bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NLNET1"
_DTYPES = {"float64": "<f8", "int64": "<i8"}


class ContainerError(ValueError):
    pass


def dumps(manifest: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = "float64" if a.dtype.kind == "f" else "int64" if a.dtype.kind in "iub" else None
        if kind is None:
            raise ContainerError(f"{name}: unsupported dtype {a.dtype}")
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": kind, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    head = dict(manifest)
    head["entries"] = entries
    blob = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(blob)) + blob + b"".join(chunks)


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:len(MAGIC)] != MAGIC:
        raise ContainerError("not an NLNET1 container (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise ContainerError("truncated header")
    (n,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    try:
        manifest = json.loads(data[pos:pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"corrupt manifest: {e}") from None
    payload = memoryview(data)[pos + n:]
    arrays = {}
    for e in manifest.get("entries", []):
        dt = np.dtype(_DTYPES[e["dtype"]])
        count = int(np.prod(e["shape"], dtype=np.int64))
        start, stop = e["offset"], e["offset"] + count * dt.itemsize
        if stop > len(payload):
            raise ContainerError(f"entry {e['name']!r} runs past the end of the file")
        arrays[e["name"]] = np.frombuffer(payload[start:stop], dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return manifest, arrays


def write(path, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(dumps(manifest, arrays))
    return path


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
