"""Binary container shared by encoder checkpoints and memory snapshots.

Layout (all integers little-endian)::

    8 bytes   magic  b"PICLCKPT"
    uint32    format version
    uint32    header length N
    N bytes   UTF-8 JSON header: kind, seed, meta, and an ordered list of
              {"name", "shape"} array descriptors
    ...       every array in header order as little-endian float64, C order

The header is serialized with sorted keys and no whitespace, so equal
content always produces identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"PICLCKPT"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def encode(kind: str, arrays: dict[str, np.ndarray], seed: int | None = None,
           meta: dict | None = None) -> bytes:
    descriptors = []
    payload = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        descriptors.append({"name": name, "shape": list(a.shape)})
        payload.append(a.astype(_LE_F64, copy=False).tobytes())
    header = {"kind": kind, "seed": seed, "meta": meta or {}, "arrays": descriptors}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes, *payload])


def decode(blob: bytes, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a picl container")
    if len(blob) < 16:
        raise CheckpointError("truncated header")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if expect_kind is not None and header.get("kind") != expect_kind:
        raise CheckpointError(f"expected a {expect_kind!r} container, found {header.get('kind')!r}")
    offset = 16 + hlen
    arrays: dict[str, np.ndarray] = {}
    for desc in header["arrays"]:
        shape = tuple(desc["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"payload truncated while reading {desc['name']!r}")
        arrays[desc["name"]] = (
            np.frombuffer(blob, dtype=_LE_F64, count=count, offset=offset)
            .astype(np.float64).reshape(shape)
        )
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")
    return header, arrays


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
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


def save(path, kind: str, arrays: dict[str, np.ndarray], seed: int | None = None,
         meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode(kind, arrays, seed=seed, meta=meta))


def load(path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), expect_kind=expect_kind)
