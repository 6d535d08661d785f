"""Writer for the PSCA activation-file contract.

Implemented against the published byte layout so the exporter stays
decoupled from the consumer package:

    magic "PSCA" | u32 version | u32 layer_id | u8 kind (0=conv, 1=fc)
    | u8 dtype (0=f32) | u32 ndim | u64 dims[ndim]
    | payload f32 little-endian row-major | u16 labels[N]

plus the JSON manifest {split, class_count, name, layers: [{path,
layer_id, sha256}]}.  An optional "metadata" object records capture
conventions; consumers ignore unknown keys.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSCA"
FORMAT_VERSION = 1
KIND_CODES = {"conv": 0, "fc": 1}
_FIXED_HEADER = struct.Struct("<4sIIBBI")


class LayerFileWriter:
    """Streams one layer's activations: header, batched payload, labels."""

    def __init__(self, path, layer_id: int, kind: str, dims: tuple[int, ...]):
        if kind not in KIND_CODES:
            raise ValueError(f"unknown layer kind {kind!r}")
        want = 4 if kind == "conv" else 2
        if len(dims) != want:
            raise ValueError(f"{kind} layer needs {want} dims, got {dims}")
        self.path = Path(path)
        self.dims = tuple(int(d) for d in dims)
        self._written = 0
        self._fh = open(self.path, "wb")
        self._fh.write(
            _FIXED_HEADER.pack(MAGIC, FORMAT_VERSION, layer_id, KIND_CODES[kind], 0, len(dims))
        )
        self._fh.write(struct.pack(f"<{len(dims)}Q", *self.dims))

    def append(self, values: np.ndarray) -> None:
        values = np.ascontiguousarray(values, dtype="<f4")
        if tuple(values.shape[1:]) != self.dims[1:]:
            raise ValueError(
                f"batch shape {values.shape[1:]} does not match layer dims {self.dims[1:]}"
            )
        self._fh.write(values.tobytes())
        self._written += values.shape[0]

    def finish(self, labels: np.ndarray) -> None:
        if self._written != self.dims[0]:
            raise ValueError(f"wrote {self._written} samples, header says {self.dims[0]}")
        labels = np.ascontiguousarray(labels, dtype="<u2")
        if labels.shape != (self.dims[0],):
            raise ValueError("label count mismatch")
        self._fh.write(labels.tobytes())
        self._fh.close()

    def abort(self) -> None:
        self._fh.close()
        self.path.unlink(missing_ok=True)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    path,
    split: str,
    class_count: int,
    name: str,
    layer_files: list[tuple[Path, int]],
    metadata: dict | None = None,
) -> Path:
    path = Path(path)
    base = path.parent.resolve()
    doc = {
        "split": split,
        "class_count": int(class_count),
        "name": name,
        "layers": [
            {
                "path": os.path.relpath(Path(p).resolve(), base),
                "layer_id": int(layer_id),
                "sha256": sha256_file(p),
            }
            for p, layer_id in layer_files
        ],
    }
    if metadata:
        doc["metadata"] = metadata
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
