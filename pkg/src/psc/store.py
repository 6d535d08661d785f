"""On-disk activation storage: the PSCA layer-file format and manifests.

A layer file holds one layer's activations for a whole dataset split,
together with the per-sample class labels, so that each file is
self-describing.  The binary layout is little-endian:

    magic "PSCA" | u32 version | u32 layer_id | u8 kind (0=conv, 1=fc)
    | u8 dtype (0=f32) | u32 ndim | u64 dims[ndim]
    | payload f32 row-major | u16 labels[N]

conv dims are (N, C, h, w); fc dims are (N, d).  A manifest is a UTF-8
JSON document {split, class_count, name, layers: [{path, layer_id,
sha256}]} whose layer paths are resolved relative to the manifest file.

Values are stored as binary32; readers hand out float32 arrays and all
downstream accumulation is done in float64.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ValidationError

MAGIC = b"PSCA"
FORMAT_VERSION = 1

KIND_CONV = "conv"
KIND_FC = "fc"
_KIND_CODES = {KIND_CONV: 0, KIND_FC: 1}
_KIND_NAMES = {code: name for name, code in _KIND_CODES.items()}

_DTYPE_F32 = 0
_FIXED_HEADER = struct.Struct("<4sIIBBI")
_MAX_LABEL = 65535


@dataclass(frozen=True)
class LayerRecordHeader:
    """Descriptor of one stored layer: identity, kind, and tensor shape."""

    layer_id: int
    kind: str  # "conv" or "fc"
    shape: tuple[int, ...]  # (N, C, h, w) for conv, (N, d) for fc

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        want = 4 if self.kind == KIND_CONV else 2
        if len(self.shape) != want:
            raise ValidationError(
                f"{self.kind} layer needs {want} dims, got shape {self.shape}"
            )
        if any(int(s) < 1 for s in self.shape):
            raise ValidationError(f"all dims must be >= 1, got {self.shape}")
        if self.layer_id < 0:
            raise ValidationError("layer_id must be >= 0")

    @property
    def n_samples(self) -> int:
        return int(self.shape[0])

    @property
    def payload_elems(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def header_size(self) -> int:
        return _FIXED_HEADER.size + 8 * len(self.shape)

    @property
    def label_offset(self) -> int:
        """Byte offset of the u16 label block within the file."""
        return self.header_size + 4 * self.payload_elems

    @property
    def feature_shape(self) -> tuple[int, ...]:
        """Per-sample shape with conv channels flattened: (C, h*w) or (d,)."""
        if self.kind == KIND_CONV:
            _, c, h, w = self.shape
            return (c, h * w)
        return (self.shape[1],)


@dataclass
class ActivationBatch:
    """A contiguous slice of one layer's samples.

    `values` is (B, C, h*w) float32 for conv layers, with each channel
    flattened row-major (element (c, i, j) lands at flat index i*w + j),
    and (B, d) for fc layers.
    """

    layer_id: int
    kind: str
    values: np.ndarray
    labels: np.ndarray


def write_layer_file(path, header: LayerRecordHeader, values, labels) -> Path:
    """Write one PSCA layer file; returns the path written."""
    path = Path(path)
    values = np.asarray(values)
    labels = np.asarray(labels)
    if tuple(values.shape) != tuple(header.shape):
        raise ValidationError(
            f"values shape {values.shape} does not match header shape {header.shape}"
        )
    if labels.ndim != 1 or labels.shape[0] != header.n_samples:
        raise ValidationError(
            f"label count mismatch: got {labels.size}, expected {header.n_samples}"
        )
    if labels.size and (labels.min() < 0 or labels.max() > _MAX_LABEL):
        raise ValidationError(f"label out of range [0, {_MAX_LABEL}]")
    with open(path, "wb") as fh:
        fh.write(
            _FIXED_HEADER.pack(
                MAGIC,
                FORMAT_VERSION,
                header.layer_id,
                _KIND_CODES[header.kind],
                _DTYPE_F32,
                len(header.shape),
            )
        )
        fh.write(struct.pack(f"<{len(header.shape)}Q", *header.shape))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())
    return path


def read_layer_header(path) -> LayerRecordHeader:
    """Parse and validate a layer file's header, including total file size."""
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        fixed = fh.read(_FIXED_HEADER.size)
        if len(fixed) < _FIXED_HEADER.size:
            raise ValidationError(f"{path}: truncated header")
        magic, version, layer_id, kind_code, dtype, ndim = _FIXED_HEADER.unpack(fixed)
        if magic != MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise ValidationError(
                f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}"
            )
        if dtype != _DTYPE_F32:
            raise ValidationError(f"{path}: unsupported element type code {dtype}")
        if kind_code not in _KIND_NAMES:
            raise ValidationError(f"{path}: unknown layer kind code {kind_code}")
        kind = _KIND_NAMES[kind_code]
        want_ndim = 4 if kind == KIND_CONV else 2
        if ndim != want_ndim:
            raise ValidationError(f"{path}: {kind} layer with ndim {ndim}")
        dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    header = LayerRecordHeader(layer_id=layer_id, kind=kind, shape=tuple(map(int, dims)))
    expected = header.label_offset + 2 * header.n_samples
    if size != expected:
        raise ValidationError(
            f"{path}: file size {size} does not match header (expected {expected})"
        )
    return header


def read_layer_file(path) -> tuple[LayerRecordHeader, np.ndarray, np.ndarray]:
    """Read a full layer file: (header, values in natural shape, labels)."""
    header = read_layer_header(path)
    with open(path, "rb") as fh:
        fh.seek(header.header_size)
        values = np.fromfile(fh, dtype="<f4", count=header.payload_elems)
        labels = np.fromfile(fh, dtype="<u2", count=header.n_samples)
    return header, values.reshape(header.shape), labels.astype(np.int64)


def read_labels(path, header: LayerRecordHeader | None = None) -> np.ndarray:
    header = header or read_layer_header(path)
    with open(path, "rb") as fh:
        fh.seek(header.label_offset)
        labels = np.fromfile(fh, dtype="<u2", count=header.n_samples)
    return labels.astype(np.int64)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class ManifestEntry:
    path: str
    layer_id: int
    sha256: str


@dataclass
class DatasetManifest:
    split: str
    class_count: int
    name: str
    layers: list[ManifestEntry] = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "class_count": self.class_count,
            "name": self.name,
            "layers": [
                {"path": e.path, "layer_id": e.layer_id, "sha256": e.sha256}
                for e in self.layers
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


_SPLITS = {"train", "val", "test", "ood"}


def build_manifest(split, class_count, name, layer_paths, base_dir) -> DatasetManifest:
    """Construct a manifest for already-written layer files.

    Stored paths are relative to base_dir (the manifest's directory), so
    the whole split stays relocatable.
    """
    base_dir = Path(base_dir).resolve()
    entries = []
    for p in layer_paths:
        p = Path(p)
        header = read_layer_header(p)
        rel = os.path.relpath(p.resolve(), base_dir)
        entries.append(ManifestEntry(rel, header.layer_id, sha256_file(p)))
    return DatasetManifest(split=split, class_count=int(class_count), name=name, layers=entries)


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.write_text(manifest.to_json(), encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid manifest JSON ({exc})")
    for key in ("split", "class_count", "name", "layers"):
        if key not in doc:
            raise ValidationError(f"{path}: manifest missing key {key!r}")
    if doc["split"] not in _SPLITS:
        raise ValidationError(f"{path}: unknown split {doc['split']!r}")
    entries = [
        ManifestEntry(path=e["path"], layer_id=int(e["layer_id"]), sha256=e["sha256"])
        for e in doc["layers"]
    ]
    return DatasetManifest(
        split=doc["split"],
        class_count=int(doc["class_count"]),
        name=doc["name"],
        layers=entries,
    )


class ActivationDataset:
    """Validated, lazily-streamed view over one split's layer files."""

    def __init__(self, manifest: DatasetManifest, manifest_dir: Path, verify_checksums=True):
        self.manifest = manifest
        self._dir = Path(manifest_dir)
        if not manifest.layers:
            raise ValidationError("manifest lists no layers")
        ids = [e.layer_id for e in manifest.layers]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValidationError(f"non-monotone layer ids: {ids}")
        self._paths: dict[int, Path] = {}
        self.headers: dict[int, LayerRecordHeader] = {}
        labels_ref = None
        for entry in manifest.layers:
            path = (self._dir / entry.path).resolve()
            if not path.is_file():
                raise ValidationError(f"layer file missing: {path}")
            if verify_checksums and sha256_file(path) != entry.sha256:
                raise ValidationError(f"checksum mismatch for {path}")
            header = read_layer_header(path)
            if header.layer_id != entry.layer_id:
                raise ValidationError(
                    f"{path}: layer_id {header.layer_id} does not match manifest entry "
                    f"{entry.layer_id}"
                )
            labels = read_labels(path, header)
            if labels_ref is None:
                labels_ref = labels
            else:
                if header.n_samples != labels_ref.size:
                    raise ValidationError(
                        f"inconsistent sample count: layer {header.layer_id} has "
                        f"{header.n_samples}, expected {labels_ref.size}"
                    )
                if not np.array_equal(labels, labels_ref):
                    raise ValidationError(
                        f"label sequence of layer {header.layer_id} differs from "
                        "the other layers"
                    )
            self._paths[header.layer_id] = path
            self.headers[header.layer_id] = header
        if labels_ref.size and labels_ref.max() >= manifest.class_count:
            raise ValidationError(
                f"label {int(labels_ref.max())} out of range for class_count "
                f"{manifest.class_count}"
            )
        self.labels = labels_ref

    @property
    def layer_ids(self) -> list[int]:
        return [e.layer_id for e in self.manifest.layers]

    @property
    def n_samples(self) -> int:
        return int(self.labels.size)

    @property
    def class_count(self) -> int:
        return int(self.manifest.class_count)

    def header(self, layer_id: int) -> LayerRecordHeader:
        if layer_id not in self.headers:
            raise ValidationError(f"unknown layer_id {layer_id}")
        return self.headers[layer_id]

    def read_batches(self, layer_id: int, batch_size: int) -> Iterator[ActivationBatch]:
        """Stream one layer in stored order; the last batch may be short.

        Conv batches come out as (B, C, h*w) with row-major channel
        flattening; fc batches as (B, d).
        """
        if batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        header = self.header(layer_id)
        per_sample = header.payload_elems // header.n_samples
        feature_shape = header.feature_shape
        with open(self._paths[layer_id], "rb") as fh:
            fh.seek(header.header_size)
            for start in range(0, header.n_samples, batch_size):
                count = min(batch_size, header.n_samples - start)
                flat = np.fromfile(fh, dtype="<f4", count=count * per_sample)
                yield ActivationBatch(
                    layer_id=layer_id,
                    kind=header.kind,
                    values=flat.reshape((count,) + feature_shape),
                    labels=self.labels[start : start + count],
                )


def open_dataset(manifest_path, verify_checksums=True) -> ActivationDataset:
    """Load and validate a manifest; returns a streaming dataset view."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    return ActivationDataset(manifest, manifest_path.parent, verify_checksums=verify_checksums)
