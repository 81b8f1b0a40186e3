"""Binary checkpoint files.

Layout, all integers little-endian:

    magic    4 bytes    b"PFCK"
    version  u32
    count    u32        number of entries
    per entry, sorted by name:
        name_len u32, then UTF-8 name bytes
        rank     u32
        dims     rank x u64
        payload  prod(dims) float64 values, little-endian
    metadata: canonical JSON (sorted keys, no whitespace) to end of file

Sorted entries plus canonical JSON make save(load(path)) byte-identical.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"PFCK"
VERSION = 1


class Checkpoint:
    """Named float64 arrays plus a JSON metadata block."""

    def __init__(self, entries: dict[str, np.ndarray], metadata: dict | None = None,
                 version: int = VERSION):
        self.version = version
        self.entries = {name: np.asarray(arr, dtype=np.float64) for name, arr in entries.items()}
        if len(self.entries) != len(entries):
            raise DataError("duplicate entry names in checkpoint")
        self.metadata = dict(metadata or {})

    def names(self) -> list[str]:
        return sorted(self.entries)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<II", self.version, len(self.entries)))
            for name in self.names():
                arr = self.entries[name]
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", arr.ndim))
                for dim in arr.shape:
                    f.write(struct.pack("<Q", dim))
                f.write(arr.astype("<f8", copy=False).tobytes(order="C"))
            f.write(json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: not a checkpoint file (bad magic)")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        offset = 12
        entries: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                name = blob[offset:offset + name_len].decode("utf-8")
                offset += name_len
                (rank,) = struct.unpack_from("<I", blob, offset)
                offset += 4
                dims = struct.unpack_from(f"<{rank}Q", blob, offset)
                offset += 8 * rank
                size = int(np.prod(dims, dtype=np.int64)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(dims)
                offset += 8 * size
                entries[name] = arr.astype(np.float64)
        except (struct.error, ValueError):
            raise DataError(f"{path}: truncated checkpoint")
        try:
            metadata = json.loads(blob[offset:].decode("utf-8")) if offset < len(blob) else {}
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: corrupt metadata block")
        return cls(entries, metadata, version=version)
