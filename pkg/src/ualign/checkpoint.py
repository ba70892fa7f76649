"""Binary tensor container shared by adapter and LLM checkpoints.

Layout::

    b"UALN" | u32 version | u32 manifest length | manifest (UTF-8 JSON) | data

The manifest lists, per section, ``{"name", "shape", "offset"}`` entries;
offsets are byte positions into the data block, which holds raw
little-endian float64 values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"UALN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> bytes:
    manifest: dict = {"meta": meta or {}, "sections": {}}
    chunks = []
    offset = 0
    for sec, tensors in sections.items():
        entries = []
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype="<f8")
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes(order="C"))
            offset += a.nbytes
        manifest["sections"][sec] = entries
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, found {blob[:4]!r}")
    version, n = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version: expected {VERSION}, found {version}")
    try:
        manifest = json.loads(blob[12 : 12 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    data = memoryview(blob)[12 + n :]
    out: dict[str, dict[str, np.ndarray]] = {}
    for sec, entries in manifest["sections"].items():
        out[sec] = {}
        for e in entries:
            count = int(np.prod(e["shape"], dtype=np.int64))
            end = e["offset"] + 8 * count
            if end > len(data):
                raise CheckpointError(
                    f"tensor {sec}/{e['name']} with shape {e['shape']} runs past the data block "
                    f"(needs byte {end}, found {len(data)})"
                )
            arr = np.frombuffer(data[e["offset"] : end], dtype="<f8").reshape(tuple(e["shape"]))
            out[sec][e["name"]] = arr.astype(np.float64)
    return out, manifest["meta"]


def save(path: str | Path, sections: dict[str, dict[str, np.ndarray]], meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(sections, meta))


def load(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    return loads(Path(path).read_bytes())


def check_shapes(section: str, found: dict[str, np.ndarray], expected: dict[str, tuple]) -> None:
    if set(found) != set(expected):
        raise CheckpointError(
            f"section {section!r}: expected tensors {sorted(expected)}, found {sorted(found)}"
        )
    for name, shape in expected.items():
        if tuple(found[name].shape) != tuple(shape):
            raise CheckpointError(
                f"section {section!r} tensor {name!r}: expected shape {tuple(shape)}, "
                f"found {tuple(found[name].shape)}"
            )
