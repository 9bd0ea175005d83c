"""Adapter checkpoint serialization.

A checkpoint directory holds exactly two files:

* ``adapter_config.json`` — format version, adapter name, config, and the
  model dims the adapter was built for (sorted keys, 2-space indent);
* ``weights.bin`` — magic ``ADPT``, little-endian u32 format version,
  u64 tensor count, then per tensor: u32 name length, utf-8 name bytes,
  u32 rank, u64 extents, float32 payload in row-major order.

Tensors are written in sorted-name order, so save -> load -> save is
byte-identical.  Compute stays float64; only persisted payloads are float32.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ADPT"
FORMAT_VERSION = 1
CONFIG_FILE = "adapter_config.json"
WEIGHTS_FILE = "weights.bin"


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint contents."""


def write_weights(path, tensors: dict) -> None:
    """Write named float arrays to the pinned binary layout."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            for e in arr.shape:
                f.write(struct.pack("<Q", e))
            f.write(arr.astype("<f4").tobytes(order="C"))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated weights file {self.path} (checksum failure)")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_weights(path) -> dict:
    """Read the binary layout back into float32 arrays keyed by name."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read weights file {path}: {e}") from None
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not an adapter weights file (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported weights format version {version} (expected {FORMAT_VERSION})"
        )
    count = r.u64()
    out = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u64() for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * n)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if r.pos != len(blob):
        raise CheckpointError(f"{path} has {len(blob) - r.pos} trailing bytes (checksum failure)")
    return out


def write_manifest(path, name: str, config_dict: dict, dims_dict: dict) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "name": name,
        "config": config_dict,
        "dims": dims_dict,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as e:
        raise CheckpointError(f"cannot read manifest {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed manifest {path}: {e}") from None
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported manifest version {doc.get('format_version')!r} "
            f"(expected {FORMAT_VERSION})"
        )
    for key in ("name", "config", "dims"):
        if key not in doc:
            raise CheckpointError(f"manifest {path} is missing {key!r}")
    return doc
