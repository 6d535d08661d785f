"""Hook-based activation extraction from torch models.

Layers are enumerated in execution order by running a probe forward pass
with hooks attached; activations are captured at each module's output
(post-module) and cast to float32 before writing.  Shortcut-branch
convolutions (module names containing "downsample" or "shortcut") are
excluded so layer indices follow the main path, matching how depth is
usually counted for residual architectures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .format import LayerFileWriter, write_manifest

_SHORTCUT_MARKERS = ("downsample", "shortcut")


@dataclass(frozen=True)
class LayerDescriptor:
    layer_id: int
    name: str
    kind: str  # "conv", "pool", or "fc"
    shape: tuple[int, ...]  # per-sample output shape

    @property
    def storage_kind(self) -> str:
        """PSCA kind: pooled maps are conv-shaped."""
        return "fc" if self.kind == "fc" else "conv"


@dataclass
class ExportSpec:
    model: nn.Module
    data: np.ndarray  # (N, C, H, W) float
    labels: np.ndarray  # (N,)
    out_dir: Path
    split: str = "train"
    name: str = "export"
    layer_filter: str = "all_conv"  # all_conv | all_fc | named_list
    layer_names: list[str] = field(default_factory=list)
    batch_size: int = 32
    device: str = "cpu"
    pool_cap: int | None = None


def _module_kind(module: nn.Module, name: str) -> str | None:
    if isinstance(module, nn.Conv2d):
        if any(marker in name for marker in _SHORTCUT_MARKERS):
            return None
        return "conv"
    if isinstance(module, (nn.AdaptiveAvgPool2d, nn.AvgPool2d)):
        return "pool"
    if isinstance(module, nn.Linear):
        return "fc"
    return None


def enumerate_layers(model: nn.Module, example_input: torch.Tensor) -> list[LayerDescriptor]:
    """Depth-ordered descriptors of conv / avg-pool / linear layers.

    Ids follow execution order during a probe forward pass and are stable
    across runs for a fixed architecture.  Modules invoked more than once
    are recorded at their first call with a warning.
    """
    records: list[tuple[str, str, tuple[int, ...]]] = []
    seen: set[str] = set()
    handles = []

    def make_hook(name, kind):
        def hook(_module, _inputs, output):
            if name in seen:
                warnings.warn(f"module {name} invoked more than once; keeping first call")
                return
            seen.add(name)
            records.append((name, kind, tuple(output.shape[1:])))

        return hook

    for name, module in model.named_modules():
        kind = _module_kind(module, name)
        if kind is not None:
            handles.append(module.register_forward_hook(make_hook(name, kind)))
    model.eval()
    try:
        with torch.no_grad():
            model(example_input)
    finally:
        for handle in handles:
            handle.remove()
    return [
        LayerDescriptor(layer_id=i, name=name, kind=kind, shape=shape)
        for i, (name, kind, shape) in enumerate(records)
    ]


def _select(descriptors: list[LayerDescriptor], spec: ExportSpec) -> list[LayerDescriptor]:
    if spec.layer_filter == "all_conv":
        chosen = [d for d in descriptors if d.kind == "conv"]
    elif spec.layer_filter == "all_fc":
        chosen = [d for d in descriptors if d.kind == "fc"]
    elif spec.layer_filter == "named_list":
        by_name = {d.name: d for d in descriptors}
        chosen = []
        for name in spec.layer_names:
            if name in by_name:
                chosen.append(by_name[name])
            else:
                warnings.warn(f"requested layer {name!r} not found or unsupported; skipped")
        chosen.sort(key=lambda d: d.layer_id)
    else:
        raise ValueError(f"unknown layer filter {spec.layer_filter!r}")
    if not chosen:
        raise ValueError(f"layer filter {spec.layer_filter!r} matched no layers")
    return chosen


def _pool_side(shape: tuple[int, ...], cap: int) -> int | None:
    if len(shape) != 3:
        return None
    h, w = shape[1], shape[2]
    if h * w <= cap:
        return None
    return max(1, int(np.floor(np.sqrt(cap))))


def _storage_dims(d: LayerDescriptor, n: int, pool_cap: int | None):
    shape = d.shape
    if d.storage_kind == "fc":
        return (n, int(np.prod(shape)))
    if len(shape) == 3:
        c, h, w = shape
    else:
        c, h, w = shape[0], 1, 1
    if pool_cap is not None:
        side = _pool_side((c, h, w), pool_cap)
        if side is not None:
            h = w = side
    return (n, c, h, w)


_COMPUTE_CHUNK = 16


def export_activations(spec: ExportSpec) -> Path:
    """Stream the split through the model and write one PSCA file per layer.

    Inference runs in eval mode under no_grad and always in fixed-size
    micro-batches aligned to absolute sample indices: CPU convolution
    kernels round differently for different batch shapes, so forwarding
    with the caller's batch size would leak it into the payload bytes.
    With fixed micro-batches the emitted files are identical for any
    requested batch_size (which remains an I/O granularity hint).
    Partial files are removed on failure.  Returns the manifest path.
    """
    data = np.asarray(spec.data, dtype=np.float32)
    labels = np.asarray(spec.labels).astype(np.int64)
    if data.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) inputs, got {data.shape}")
    if labels.shape != (data.shape[0],):
        raise ValueError("label count mismatch")
    n = data.shape[0]
    device = torch.device(spec.device)
    model = spec.model.to(device).eval()
    example = torch.from_numpy(data[:1]).to(device)
    descriptors = enumerate_layers(model, example)
    chosen = _select(descriptors, spec)

    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writers: dict[str, LayerFileWriter] = {}
    pooled_layers: dict[str, int] = {}
    captures: dict[str, np.ndarray] = {}
    handles = []

    def make_hook(descriptor: LayerDescriptor):
        def hook(_module, _inputs, output):
            if descriptor.name in captures:
                return
            values = output.detach()
            if descriptor.storage_kind == "conv":
                if values.ndim == 2:
                    values = values[:, :, None, None]
                if spec.pool_cap is not None:
                    side = _pool_side(tuple(values.shape[1:]), spec.pool_cap)
                    if side is not None:
                        values = torch.nn.functional.adaptive_avg_pool2d(values, side)
                        pooled_layers[descriptor.name] = side
            else:
                values = values.reshape(values.shape[0], -1)
            captures[descriptor.name] = values.cpu().numpy().astype(np.float32)

        return hook

    by_name = dict(model.named_modules())
    for descriptor in chosen:
        handles.append(by_name[descriptor.name].register_forward_hook(make_hook(descriptor)))

    try:
        for descriptor in chosen:
            dims = _storage_dims(descriptor, n, spec.pool_cap)
            path = out_dir / f"{spec.split}_layer{descriptor.layer_id:03d}.psca"
            writers[descriptor.name] = LayerFileWriter(
                path, descriptor.layer_id, descriptor.storage_kind, dims
            )
        if spec.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        with torch.no_grad():
            for start in range(0, n, _COMPUTE_CHUNK):
                batch = torch.from_numpy(data[start : start + _COMPUTE_CHUNK]).to(device)
                captures.clear()
                model(batch)
                for descriptor in chosen:
                    writers[descriptor.name].append(captures[descriptor.name])
        for descriptor in chosen:
            writers[descriptor.name].finish(labels)
    except BaseException:
        for writer in writers.values():
            writer.abort()
        raise
    finally:
        for handle in handles:
            handle.remove()

    metadata = {"capture": "module_output"}
    if pooled_layers:
        metadata["pooled"] = {
            name: {"cap": spec.pool_cap, "side": side} for name, side in pooled_layers.items()
        }
    return write_manifest(
        out_dir / f"{spec.split}_manifest.json",
        spec.split,
        int(labels.max()) + 1 if labels.size else 1,
        spec.name,
        [(writers[d.name].path, d.layer_id) for d in chosen],
        metadata=metadata,
    )
