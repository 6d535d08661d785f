"""Collapse metrics against dense-matrix and pairwise oracles."""

import numpy as np
import pytest

from psc.collapse import (
    CollapseReport,
    LayerCollapse,
    nc1,
    nc4,
    scan_layers,
    select_candidate,
)
from psc.errors import ComputeError, ValidationError
from psc.store import KIND_FC, LayerRecordHeader, build_manifest, open_dataset, write_layer_file, write_manifest

# Two classes, two points each: within-trace 4/8, total-trace 8/8.
FOUR_POINTS = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
FOUR_LABELS = np.array([0, 0, 1, 1])


def dense_nc1_oracle(values, labels):
    """Literal trace ratio from explicitly materialized p x p covariances."""
    values = np.asarray(values, dtype=np.float64)
    classes = np.unique(labels)
    means = {c: values[labels == c].mean(axis=0) for c in classes}
    grand = np.mean([means[c] for c in classes], axis=0)
    n, k = values.shape[0], classes.size
    p = values.shape[1]
    sigma_w = np.zeros((p, p))
    sigma_t = np.zeros((p, p))
    for c in classes:
        for row in values[labels == c]:
            dw = (row - means[c])[:, None]
            dt = (row - grand)[:, None]
            sigma_w += dw @ dw.T
            sigma_t += dt @ dt.T
    sigma_w /= n * k
    sigma_t /= n * k
    return np.trace(sigma_w) / np.trace(sigma_t)


def ncc_oracle(train_values, train_labels, eval_values, eval_labels):
    """O(N^2) nearest-centroid accuracy with lowest-class tie-breaking."""
    classes = np.unique(train_labels)
    means = {c: train_values[train_labels == c].mean(axis=0) for c in classes}
    correct = 0
    for row, label in zip(eval_values, eval_labels):
        best_c, best_d = None, np.inf
        for c in classes:
            d = np.sum((row - means[c]) ** 2)
            if d < best_d:
                best_c, best_d = c, d
        correct += int(best_c == label)
    return correct / len(eval_labels)


def random_dataset(rng):
    n = int(rng.integers(4, 201))
    p = int(rng.integers(1, 9))
    k = int(rng.integers(2, 6))
    labels = rng.integers(0, k, size=n)
    # Guarantee every class has at least one sample.
    labels[:k] = np.arange(k)
    centers = rng.standard_normal((k, p)) * 3.0
    values = centers[labels] + rng.standard_normal((n, p))
    return values, labels


class TestNc1:
    def test_four_point_example(self):
        assert nc1(FOUR_POINTS, FOUR_LABELS) == 0.5

    def test_four_point_permutation_invariant(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            perm = rng.permutation(4)
            assert nc1(FOUR_POINTS[perm], FOUR_LABELS[perm]) == 0.5

    def test_collapsed_classes_give_zero(self):
        values = np.array([[1.0, 0.0], [1.0, 0.0], [5.0, 2.0], [5.0, 2.0]])
        assert nc1(values, np.array([0, 0, 1, 1])) == 0.0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(42)
        values = rng.standard_normal((60, 6))
        labels = rng.integers(0, 3, size=60)
        got = nc1(values, labels)
        want = dense_nc1_oracle(values, labels)
        assert abs(got - want) <= 1e-10 * abs(want)

    def test_degenerate_activations(self):
        values = np.ones((4, 3))
        with pytest.raises(ComputeError, match="degenerate activations"):
            nc1(values, np.array([0, 0, 1, 1]))

    def test_empty_class_warns_and_excludes(self):
        values = FOUR_POINTS
        with pytest.warns(UserWarning, match="no samples"):
            value = nc1(values, FOUR_LABELS, class_count=3)
        assert value == 0.5

    def test_rotation_and_scale_invariance(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            values, labels = random_dataset(rng)
            base = nc1(values, labels)
            q, _ = np.linalg.qr(rng.standard_normal((values.shape[1], values.shape[1])))
            scale = float(rng.uniform(0.1, 10.0))
            transformed = nc1(values @ q.T * scale, labels)
            assert abs(transformed - base) <= 1e-8 * abs(base)


class TestNc4:
    def test_four_point_example(self):
        assert nc4(FOUR_POINTS, FOUR_LABELS, FOUR_POINTS, FOUR_LABELS) == 1.0

    def test_single_class(self):
        values = np.array([[0.0], [1.0], [2.0]])
        labels = np.zeros(3, dtype=int)
        assert nc4(values, labels, values, labels) == 1.0

    def test_tie_goes_to_lowest_class(self):
        train = np.array([[0.0, 1.0], [0.0, -1.0]])
        train_labels = np.array([0, 1])
        point = np.array([[3.0, 0.0]])
        assert nc4(train, train_labels, point, np.array([1])) == 0.0
        assert nc4(train, train_labels, point, np.array([0])) == 1.0

    def test_missing_class_rejected(self):
        train = np.array([[0.0], [1.0]])
        with pytest.raises(ValidationError, match="missing from train"):
            nc4(train, np.array([0, 0]), np.array([[2.0]]), np.array([1]))

    def test_invariance_translation_rotation_scale(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            train, labels = random_dataset(rng)
            ev, ev_labels = random_dataset(rng)
            ev = ev[:, : train.shape[1]] if ev.shape[1] >= train.shape[1] else None
            if ev is None:
                continue
            base = nc4(train, labels, ev, ev_labels % (labels.max() + 1))
            q, _ = np.linalg.qr(rng.standard_normal((train.shape[1], train.shape[1])))
            shift = rng.standard_normal(train.shape[1])
            scale = float(rng.uniform(0.1, 5.0))
            f = lambda x: (x @ q.T) * scale + shift
            moved = nc4(f(train), labels, f(ev), ev_labels % (labels.max() + 1))
            assert moved == base


class TestSelectCandidate:
    def test_near_band_adds_next_layer(self):
        entries = [
            LayerCollapse(0, 0.9, 0.6),
            LayerCollapse(1, 0.5, 0.9),
            LayerCollapse(2, 0.21, 0.95),
            LayerCollapse(3, 0.05, 0.96),
        ]
        candidates, collapsed = select_candidate(entries, 0.2, 0.05)
        assert candidates == [2, 3]
        assert not collapsed

    def test_clear_winner(self):
        entries = [LayerCollapse(0, 0.9, 0.6), LayerCollapse(1, 0.5, 0.9)]
        candidates, collapsed = select_candidate(entries, 0.2, 0.05)
        assert candidates == [1]
        assert not collapsed

    def test_all_collapsed_fallback(self):
        entries = [LayerCollapse(0, 0.1, 0.9), LayerCollapse(1, 0.05, 0.95)]
        candidates, collapsed = select_candidate(entries, 0.2, 0.05)
        assert candidates == [0]
        assert collapsed

    def test_order_invariance(self):
        entries = [
            LayerCollapse(0, 0.9, 0.6),
            LayerCollapse(1, 0.5, 0.9),
            LayerCollapse(2, 0.21, 0.95),
            LayerCollapse(3, 0.05, 0.96),
        ]
        shuffled = [entries[2], entries[0], entries[3], entries[1]]
        assert select_candidate(entries) == select_candidate(shuffled)

    def test_nc4_tie_goes_deeper(self):
        entries = [LayerCollapse(0, 0.9, 0.9), LayerCollapse(1, 0.8, 0.9)]
        candidates, _ = select_candidate(entries, 0.2, 0.05)
        assert candidates == [1]

    def test_empty_report(self):
        with pytest.raises(ValidationError, match="no layers"):
            select_candidate([])

    def test_accepts_report_object(self):
        entries = [LayerCollapse(0, 0.9, 0.6), LayerCollapse(1, 0.5, 0.9)]
        report = CollapseReport(entries=entries)
        assert select_candidate(report) == select_candidate(entries)


def _dump_layers(tmp_path, split, layer_values, labels):
    paths = []
    for layer_id, values in layer_values:
        header = LayerRecordHeader(layer_id=layer_id, kind=KIND_FC, shape=values.shape)
        path = tmp_path / f"{split}_{layer_id}.psca"
        write_layer_file(path, header, values.astype(np.float32), labels)
        paths.append(path)
    manifest = build_manifest(split, int(labels.max()) + 1, "scan", paths, tmp_path)
    return write_manifest(tmp_path / f"{split}.json", manifest)


class TestScanLayers:
    def _datasets(self, tmp_path, rng, n_layers=3):
        labels_tr = rng.integers(0, 3, size=40)
        labels_tr[:3] = [0, 1, 2]
        labels_va = rng.integers(0, 3, size=20)
        labels_va[:3] = [0, 1, 2]
        train_layers, val_layers = [], []
        for layer in range(n_layers):
            p = int(rng.integers(2, 6))
            centers = rng.standard_normal((3, p)) * (layer + 1)
            train_layers.append((layer, centers[labels_tr] + rng.standard_normal((40, p)) * 0.5))
            val_layers.append((layer, centers[labels_va] + rng.standard_normal((20, p)) * 0.5))
        train_path = _dump_layers(tmp_path / "tr", "train", train_layers, labels_tr)
        val_path = _dump_layers(tmp_path / "va", "val", val_layers, labels_va)
        return train_layers, val_layers, labels_tr, labels_va, train_path, val_path

    def test_matches_independent_per_layer_calls(self, tmp_path):
        (tmp_path / "tr").mkdir()
        (tmp_path / "va").mkdir()
        rng = np.random.default_rng(21)
        train_layers, val_layers, ltr, lva, train_path, val_path = self._datasets(tmp_path, rng)
        train = open_dataset(train_path)
        val = open_dataset(val_path)
        report = scan_layers(train, val, batch_size=64)
        assert [e.layer_id for e in report.entries] == [0, 1, 2]
        for entry, (_, tr_values), (_, va_values) in zip(
            report.entries, train_layers, val_layers
        ):
            tr32 = tr_values.astype(np.float32).astype(np.float64)
            va32 = va_values.astype(np.float32).astype(np.float64)
            assert entry.nc1 == pytest.approx(nc1(tr32, ltr), rel=1e-12)
            assert entry.nc4 == pytest.approx(nc4(tr32, ltr, va32, lva), abs=0)

    def test_streaming_equals_full_batch(self, tmp_path):
        (tmp_path / "tr").mkdir()
        (tmp_path / "va").mkdir()
        rng = np.random.default_rng(22)
        *_, train_path, val_path = self._datasets(tmp_path, rng)
        train = open_dataset(train_path)
        val = open_dataset(val_path)
        full = scan_layers(train, val, batch_size=4096)
        for batch_size in (1, 7, 40):
            streamed = scan_layers(train, val, batch_size=batch_size)
            for a, b in zip(full.entries, streamed.entries):
                assert b.nc1 == pytest.approx(a.nc1, rel=1e-12)
                assert b.nc4 == a.nc4
            assert streamed.candidate_layers == full.candidate_layers

    def test_mismatched_layer_lists(self, tmp_path):
        (tmp_path / "tr").mkdir()
        (tmp_path / "va").mkdir()
        rng = np.random.default_rng(23)
        *_, train_path, _ = self._datasets(tmp_path, rng)
        rng2 = np.random.default_rng(24)
        labels = rng2.integers(0, 3, size=20)
        labels[:3] = [0, 1, 2]
        other = _dump_layers(tmp_path, "val", [(5, rng2.standard_normal((20, 3)))], labels)
        with pytest.raises(ValidationError, match="layer lists differ"):
            scan_layers(open_dataset(train_path), open_dataset(other))

    def test_csv_structure(self, tmp_path):
        report = CollapseReport(
            entries=[LayerCollapse(0, 0.4, 0.8), LayerCollapse(1, 0.3, 0.9)],
            candidate_layers=[1],
        )
        lines = report.to_csv().splitlines()
        assert lines[0] == "layer_id,nc1,nc4,candidate"
        assert lines[1] == "0,0.4,0.8,0"
        assert lines[2] == "1,0.3,0.9,1"

    def test_report_json_round_trip(self):
        report = CollapseReport(
            entries=[LayerCollapse(0, 0.4, 0.8)],
            candidate_layers=[0],
            all_collapsed=False,
        )
        again = CollapseReport.from_json(report.to_json())
        assert again == report
