"""Evaluation metrics over prediction streams: AUROC, ECE, NLL, histograms."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata

from .errors import ValidationError

DEFAULT_ECE_BINS = 15
DEFAULT_HISTOGRAM_BINS = 50
NLL_FLOOR = 1e-12


def auroc(positive_scores, negative_scores) -> float:
    """Probability a positive score outranks a negative one (ties count half).

    Rank-sum formulation with average ranks, identical to pairwise
    (wins + 0.5 * ties) / (n_pos * n_neg).
    """
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValidationError("auroc needs non-empty positive and negative groups")
    ranks = rankdata(np.concatenate([pos, neg]))
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size))


def ece(probabilities, labels, bin_count: int = DEFAULT_ECE_BINS) -> float:
    """Expected calibration error over equal-width, right-closed confidence bins.

    Bin b covers ((b-1)/B, b/B]; confidence 0 lands in bin 1.
    """
    if bin_count < 1:
        raise ValidationError("bin_count must be >= 1")
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValidationError("probabilities must be a non-empty (N, C) array")
    if labels.shape != (probs.shape[0],):
        raise ValidationError("labels must be one class index per sample")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    bins = np.ceil(conf * bin_count).astype(np.int64)
    bins = np.clip(bins, 1, bin_count)
    total = 0.0
    for b in range(1, bin_count + 1):
        mask = bins == b
        if not mask.any():
            continue
        acc = correct[mask].mean()
        avg_conf = conf[mask].mean()
        total += (mask.sum() / probs.shape[0]) * abs(acc - avg_conf)
    return float(total)


def nll_accuracy(probabilities, labels) -> tuple[float, float]:
    """Mean negative log-likelihood (probability floor 1e-12) and accuracy.

    Accuracy uses argmax with ties going to the lowest class index.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValidationError("probabilities must be a non-empty (N, C) array")
    if labels.shape != (probs.shape[0],):
        raise ValidationError("labels must be one class index per sample")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValidationError(
            f"label out of range [0, {probs.shape[1]}) in {sorted(set(labels.tolist()))}"
        )
    picked = probs[np.arange(probs.shape[0]), labels]
    nll = float(-np.mean(np.log(np.maximum(picked, NLL_FLOOR))))
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return nll, accuracy


def entropy_histogram(
    scores_by_group: dict[str, np.ndarray], bin_count: int = DEFAULT_HISTOGRAM_BINS
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Per-group counts over shared equal-width bins spanning all groups.

    Bins follow the numpy convention: left-closed, with the final bin
    also closed on the right.  Returns (edges, {group: counts}).
    """
    if bin_count < 1:
        raise ValidationError("bin_count must be >= 1")
    groups = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in scores_by_group.items()}
    non_empty = [v for v in groups.values() if v.size]
    if not non_empty:
        warnings.warn("all score groups are empty; emitting an empty histogram")
        return np.array([]), {k: np.zeros(0, dtype=np.int64) for k in groups}
    lo = min(float(v.min()) for v in non_empty)
    hi = max(float(v.max()) for v in non_empty)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bin_count + 1)
    counts = {}
    for name, vals in groups.items():
        if vals.size == 0:
            warnings.warn(f"score group {name!r} is empty")
            counts[name] = np.zeros(bin_count, dtype=np.int64)
        else:
            counts[name] = np.histogram(vals, bins=edges)[0]
    return edges, counts


def histogram_csv(edges: np.ndarray, counts_by_group: dict[str, np.ndarray]) -> str:
    lines = ["group,bin_left,bin_right,count"]
    for group in counts_by_group:
        for i, count in enumerate(counts_by_group[group]):
            lines.append(
                f"{group},{float(edges[i])!r},{float(edges[i + 1])!r},{int(count)}"
            )
    return "\n".join(lines) + "\n"
