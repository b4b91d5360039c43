"""Manifest + flat float32 container used for datasets, pair sets and checkpoints.

Layout (all integers little-endian)::

    bytes 0..7     magic  b"TRIMPACK"
    bytes 8..11    uint32 manifest length L
    bytes 12..12+L UTF-8 JSON manifest
    remainder      arrays listed in manifest["arrays"], in order, each as
                   C-ordered little-endian float32

The manifest carries ``version`` (currently 1), ``kind``, a free-form ``meta``
object, ``arrays`` (list of ``{"name", "shape"}``) and ``payload_bytes``.
Scalars that must survive exactly (scores, seeds) belong in ``meta``; JSON
round-trips float64 values without loss.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TRIMPACK"
VERSION = 1


class ContainerError(ValueError):
    pass


class HeaderError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


def dumps(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    specs, chunks = [], []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        specs.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    manifest = {"version": VERSION, "kind": kind, "meta": meta, "arrays": specs, "payload_bytes": len(payload)}
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + payload


def loads(blob: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise HeaderError("bad magic bytes")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise TruncatedError("manifest truncated")
    try:
        manifest = json.loads(blob[12:12 + hlen].decode("utf-8"))
        version = manifest["version"]
        specs = manifest["arrays"]
        declared = manifest["payload_bytes"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"malformed manifest: {exc}") from exc
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    if kind is not None and manifest.get("kind") != kind:
        raise HeaderError(f"expected a {kind!r} container, found {manifest.get('kind')!r}")
    payload = blob[12 + hlen:]
    need = sum(4 * int(np.prod(s["shape"], dtype=np.int64)) for s in specs)
    if need != declared:
        raise HeaderError("array shapes disagree with payload_bytes")
    if len(payload) < declared:
        raise TruncatedError(f"payload has {len(payload)} bytes, manifest declares {declared}")
    arrays, off = {}, 0
    for s in specs:
        n = int(np.prod(s["shape"], dtype=np.int64))
        arrays[s["name"]] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).reshape(s["shape"]).astype(np.float32)
        off += 4 * n
    return manifest, arrays


def save(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(kind, meta, arrays))


def load(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), kind)
