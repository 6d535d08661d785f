"""Layerwise neural-collapse metrics and candidate-layer selection.

Collapse at a layer is the trace ratio of within-class to total
activation covariance, where both covariances use the 1/(N*C) weighting
and the total covariance is taken about the unweighted mean of the class
means.  Only traces are ever formed (a sum of per-coordinate variances),
so feature dimension can be large.  Layer usefulness is the accuracy of
a nearest-centroid classifier with centroids fitted on train data and
accuracy measured on validation data.

The candidate layer for a skip connection is the one with the highest
centroid accuracy among layers whose collapse ratio is still above the
cutoff; if that layer sits within `near_band` of the cutoff, the next
deeper layer is included as well.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ComputeError, ValidationError
from .store import ActivationDataset

DEFAULT_EPSILON = 0.2
DEFAULT_NEAR_BAND = 0.05


class _TraceAccumulator:
    """Two-pass streaming accumulator for the collapse trace ratio.

    Pass 1 (`add_sums`) accumulates per-class feature sums and counts;
    `finalize_means` derives class means and their unweighted average.
    Pass 2 (`add_deviations`) accumulates the within-class and total
    squared deviations.  All accumulation is float64.
    """

    def __init__(self, class_count: int, dim: int):
        self.class_count = class_count
        self.dim = dim
        self.sums = np.zeros((class_count, dim))
        self.counts = np.zeros(class_count, dtype=np.int64)
        self.means = None
        self.grand_mean = None
        self.sw = 0.0
        self.st = 0.0

    def add_sums(self, values: np.ndarray, labels: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        np.add.at(self.sums, labels, values)
        np.add.at(self.counts, labels, 1)

    def finalize_means(self) -> None:
        present = self.counts > 0
        if not present.any():
            raise ValidationError("no samples accumulated")
        empty = np.flatnonzero(~present)
        if empty.size:
            warnings.warn(
                f"classes {empty.tolist()} have no samples; excluded from the grand mean"
            )
        self.means = np.full((self.class_count, self.dim), np.nan)
        self.means[present] = self.sums[present] / self.counts[present, None]
        self.grand_mean = self.means[present].mean(axis=0)

    def add_deviations(self, values: np.ndarray, labels: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        dev_w = values - self.means[labels]
        dev_t = values - self.grand_mean
        self.sw += float(np.sum(dev_w * dev_w))
        self.st += float(np.sum(dev_t * dev_t))

    def ratio(self) -> float:
        if self.st == 0.0:
            raise ComputeError("degenerate activations: total covariance trace is zero")
        return self.sw / self.st

    def statistics(self) -> "ClassStatistics":
        n = int(self.counts.sum())
        n_present = int((self.counts > 0).sum())
        norm = n * n_present
        return ClassStatistics(
            class_means=self.means,
            grand_mean=self.grand_mean,
            within_trace=self.sw / norm,
            total_trace=self.st / norm,
            class_counts=self.counts.copy(),
        )


@dataclass
class ClassStatistics:
    """Per-layer class means plus within/total covariance traces."""

    class_means: np.ndarray  # (class_count, p), NaN rows for empty classes
    grand_mean: np.ndarray  # unweighted mean of the present class means
    within_trace: float
    total_trace: float
    class_counts: np.ndarray


def _check_features(values, labels):
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if values.ndim != 2:
        raise ValidationError(f"expected a 2-D (N, p) array, got shape {values.shape}")
    if labels.shape != (values.shape[0],):
        raise ValidationError("labels must be one class index per sample")
    return values, labels.astype(np.int64)


def nc1(values, labels, class_count: int | None = None) -> float:
    """Within-to-total covariance trace ratio of a flattened layer."""
    values, labels = _check_features(values, labels)
    if values.shape[0] < 2:
        raise ValidationError("nc1 needs at least 2 samples")
    if class_count is None:
        class_count = int(labels.max()) + 1
    acc = _TraceAccumulator(class_count, values.shape[1])
    acc.add_sums(values, labels)
    acc.finalize_means()
    acc.add_deviations(values, labels)
    return acc.ratio()


def class_statistics(values, labels, class_count: int | None = None) -> ClassStatistics:
    values, labels = _check_features(values, labels)
    if class_count is None:
        class_count = int(labels.max()) + 1
    acc = _TraceAccumulator(class_count, values.shape[1])
    acc.add_sums(values, labels)
    acc.finalize_means()
    acc.add_deviations(values, labels)
    return acc.statistics()


def _centroids(train_values, train_labels, class_count):
    means = np.full((class_count, train_values.shape[1]), np.nan)
    for c in range(class_count):
        mask = train_labels == c
        if mask.any():
            means[c] = train_values[mask].mean(axis=0)
    return means


def _ncc_predict(values, means, present_classes):
    # Direct squared distances (no expansion) so near-ties resolve the same
    # way as a straightforward reference implementation.
    diffs = values[:, None, :] - means[None, present_classes, :]
    dists = np.einsum("ncp,ncp->nc", diffs, diffs)
    return present_classes[np.argmin(dists, axis=1)]


def nc4(train_values, train_labels, eval_values, eval_labels) -> float:
    """Nearest-centroid accuracy: centroids on train, scored on eval.

    Distance ties resolve to the lowest class index.
    """
    train_values, train_labels = _check_features(train_values, train_labels)
    eval_values, eval_labels = _check_features(eval_values, eval_labels)
    if train_values.shape[1] != eval_values.shape[1]:
        raise ValidationError(
            f"feature dims differ: train {train_values.shape[1]}, eval {eval_values.shape[1]}"
        )
    class_count = int(max(train_labels.max(), eval_labels.max())) + 1
    means = _centroids(train_values, train_labels, class_count)
    present = np.flatnonzero(~np.isnan(means[:, 0]))
    missing = sorted(set(eval_labels.tolist()) - set(present.tolist()))
    if missing:
        raise ValidationError(f"classes {missing} missing from train data")
    pred = _ncc_predict(eval_values, means, present)
    return float(np.mean(pred == eval_labels))


@dataclass
class LayerCollapse:
    layer_id: int
    nc1: float
    nc4: float


@dataclass
class CollapseReport:
    """Per-layer collapse/accuracy values plus the selected candidates."""

    entries: list[LayerCollapse]
    epsilon: float = DEFAULT_EPSILON
    near_band: float = DEFAULT_NEAR_BAND
    candidate_layers: list[int] = field(default_factory=list)
    all_collapsed: bool = False

    def to_csv(self) -> str:
        lines = ["layer_id,nc1,nc4,candidate"]
        for e in self.entries:
            flag = 1 if e.layer_id in self.candidate_layers else 0
            lines.append(f"{e.layer_id},{float(e.nc1)!r},{float(e.nc4)!r},{flag}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "epsilon": self.epsilon,
            "near_band": self.near_band,
            "candidate_layers": self.candidate_layers,
            "all_collapsed": self.all_collapsed,
            "layers": [
                {"layer_id": e.layer_id, "nc1": e.nc1, "nc4": e.nc4} for e in self.entries
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "CollapseReport":
        doc = json.loads(text)
        entries = [
            LayerCollapse(int(e["layer_id"]), float(e["nc1"]), float(e["nc4"]))
            for e in doc["layers"]
        ]
        return CollapseReport(
            entries=entries,
            epsilon=float(doc["epsilon"]),
            near_band=float(doc["near_band"]),
            candidate_layers=[int(i) for i in doc["candidate_layers"]],
            all_collapsed=bool(doc["all_collapsed"]),
        )


def select_candidate(
    entries: "list[LayerCollapse] | CollapseReport",
    epsilon: float = DEFAULT_EPSILON,
    near_band: float = DEFAULT_NEAR_BAND,
) -> tuple[list[int], bool]:
    """Pick the candidate layer(s) from per-layer collapse values.

    Among layers with nc1 > epsilon, the one with the highest nc4 wins
    (nc4 ties go to the deeper layer).  If the winner's nc1 sits within
    `near_band` of the cutoff, the next deeper layer joins it.  If every
    layer has collapsed, the layer with maximal nc1 is returned alone
    together with an all-collapsed flag.
    """
    if isinstance(entries, CollapseReport):
        entries = entries.entries
    if not entries:
        raise ValidationError("no layers in report")
    ordered = sorted(entries, key=lambda e: e.layer_id)
    eligible = [e for e in ordered if e.nc1 > epsilon]
    if not eligible:
        best = max(ordered, key=lambda e: (e.nc1, e.layer_id))
        return [best.layer_id], True
    best = max(eligible, key=lambda e: (e.nc4, e.layer_id))
    candidates = [best.layer_id]
    if abs(best.nc1 - epsilon) <= near_band:
        deeper = [e.layer_id for e in ordered if e.layer_id > best.layer_id]
        if deeper:
            candidates.append(deeper[0])
    return candidates, False


def _layer_trace_ratio(dataset: ActivationDataset, layer_id: int, batch_size: int) -> float:
    header = dataset.header(layer_id)
    dim = int(np.prod(header.feature_shape))
    acc = _TraceAccumulator(dataset.class_count, dim)
    for batch in dataset.read_batches(layer_id, batch_size):
        acc.add_sums(batch.values.reshape(batch.values.shape[0], -1), batch.labels)
    acc.finalize_means()
    for batch in dataset.read_batches(layer_id, batch_size):
        acc.add_deviations(batch.values.reshape(batch.values.shape[0], -1), batch.labels)
    return acc.ratio()


def _layer_ncc_accuracy(
    train: ActivationDataset, val: ActivationDataset, layer_id: int, batch_size: int
) -> float:
    header = train.header(layer_id)
    dim = int(np.prod(header.feature_shape))
    sums = np.zeros((train.class_count, dim))
    counts = np.zeros(train.class_count, dtype=np.int64)
    for batch in train.read_batches(layer_id, batch_size):
        flat = batch.values.reshape(batch.values.shape[0], -1).astype(np.float64)
        np.add.at(sums, batch.labels, flat)
        np.add.at(counts, batch.labels, 1)
    present = np.flatnonzero(counts > 0)
    means = np.full((train.class_count, dim), np.nan)
    means[present] = sums[present] / counts[present, None]
    correct = 0
    total = 0
    for batch in val.read_batches(layer_id, batch_size):
        flat = batch.values.reshape(batch.values.shape[0], -1).astype(np.float64)
        missing = sorted(set(batch.labels.tolist()) - set(present.tolist()))
        if missing:
            raise ValidationError(f"classes {missing} missing from train data")
        pred = _ncc_predict(flat, means, present)
        correct += int(np.sum(pred == batch.labels))
        total += batch.labels.size
    return correct / total


def scan_layers(
    train: ActivationDataset,
    val: ActivationDataset,
    batch_size: int = 1024,
    epsilon: float = DEFAULT_EPSILON,
    near_band: float = DEFAULT_NEAR_BAND,
) -> CollapseReport:
    """Collapse ratio (train) and centroid accuracy (train->val) per layer.

    Layers stream one at a time, so peak memory does not grow with the
    number of layers.
    """
    if train.layer_ids != val.layer_ids:
        raise ValidationError(
            f"train/val layer lists differ: {train.layer_ids} vs {val.layer_ids}"
        )
    if train.class_count != val.class_count:
        raise ValidationError("train/val class counts differ")
    if not train.layer_ids:
        raise ValidationError("no layers")
    entries = []
    for layer_id in train.layer_ids:
        try:
            ratio = _layer_trace_ratio(train, layer_id, batch_size)
            acc = _layer_ncc_accuracy(train, val, layer_id, batch_size)
        except (ValidationError, ComputeError) as exc:
            raise type(exc)(f"layer {layer_id}: {exc}") from exc
        entries.append(LayerCollapse(layer_id=layer_id, nc1=ratio, nc4=acc))
    candidates, collapsed = select_candidate(entries, epsilon, near_band)
    return CollapseReport(
        entries=entries,
        epsilon=epsilon,
        near_band=near_band,
        candidate_layers=candidates,
        all_collapsed=collapsed,
    )
