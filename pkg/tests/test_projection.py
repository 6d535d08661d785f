"""Channel moments, correlation transform, Tucker factors, projection pipeline."""

import numpy as np
import pytest

from psc.collapse import nc1, nc4
from psc.errors import ValidationError
from psc.projection import (
    TuckerProjection,
    attach_output_moments,
    auto_select_dims,
    compute_channel_moments,
    covariance_to_correlation,
    default_dim_grid,
    fit_projection,
    fit_tucker,
    load_projection,
    process_pipeline,
    project,
    reshape_concat,
    save_projection,
    standardize,
)
from psc.store import ActivationBatch, KIND_CONV, KIND_FC


def _conv_batch(layer_id, values):
    return ActivationBatch(layer_id=layer_id, kind=KIND_CONV, values=values, labels=None)


def _fc_batch(layer_id, values):
    return ActivationBatch(layer_id=layer_id, kind=KIND_FC, values=values, labels=None)


def random_psd_tensor(rng, c, d):
    """Random per-channel PSD covariance slices."""
    out = np.empty((c, d, d))
    for i in range(c):
        a = rng.standard_normal((d + 2, d))
        out[i] = a.T @ a / (d + 2)
    return out


def tucker_reconstruct(core_source, factor_a, factor_b):
    """G x1 A x2 B x3 B with G formed from the same factors."""
    core = np.einsum("cde,ck,dj,el->kjl", core_source, factor_a, factor_b, factor_b)
    return np.einsum("kjl,ck,dj,el->cde", core, factor_a, factor_b, factor_b)


class TestReshapeConcat:
    def test_single_conv_layer(self):
        rng = np.random.default_rng(0)
        values = rng.standard_normal((3, 2, 4)).astype(np.float32)  # C=2, hw=4
        stacked = reshape_concat([_conv_batch(0, values)])
        assert stacked.shape == (3, 2, 4)
        np.testing.assert_allclose(stacked, values.astype(np.float64))

    def test_two_conv_layers_concatenate_features(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((5, 2, 4)).astype(np.float32)  # 2x2 spatial
        b = rng.standard_normal((5, 2, 9)).astype(np.float32)  # 3x3 spatial
        stacked = reshape_concat([_conv_batch(0, a), _conv_batch(1, b)])
        assert stacked.shape == (5, 2, 13)
        np.testing.assert_allclose(stacked[:, :, :4], a)
        np.testing.assert_allclose(stacked[:, :, 4:], b)

    def test_fc_layers_single_channel(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 5)).astype(np.float32)
        b = rng.standard_normal((4, 3)).astype(np.float32)
        stacked = reshape_concat([_fc_batch(0, a), _fc_batch(1, b)])
        assert stacked.shape == (4, 1, 8)
        np.testing.assert_allclose(stacked[:, 0, :5], a)

    def test_mixed_kinds_rejected(self):
        a = np.zeros((2, 2, 4), dtype=np.float32)
        b = np.zeros((2, 3), dtype=np.float32)
        with pytest.raises(ValidationError, match="conv and fc"):
            reshape_concat([_conv_batch(0, a), _fc_batch(1, b)])

    def test_channel_mismatch_rejected(self):
        a = np.zeros((2, 2, 4), dtype=np.float32)
        b = np.zeros((2, 3, 4), dtype=np.float32)
        with pytest.raises(ValidationError, match="channel counts differ"):
            reshape_concat([_conv_batch(0, a), _conv_batch(1, b)])


class TestChannelMoments:
    def test_hand_example(self):
        x = np.array([[[1.0]], [[3.0]]])  # N=2, C=1, D=1
        moments = compute_channel_moments(x)
        assert moments.mean[0, 0] == 2.0
        assert moments.cov[0, 0, 0] == 1.0  # population: ((1-2)^2+(3-2)^2)/2

    def test_constant_channel_zero_cov(self):
        x = np.ones((5, 2, 3))
        moments = compute_channel_moments(x)
        np.testing.assert_array_equal(moments.cov, np.zeros((2, 3, 3)))

    def test_partition_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((40, 3, 5))
        reference = compute_channel_moments(x)
        for batch_size in (1, 7, 40):
            chunks = [x[i : i + batch_size] for i in range(0, 40, batch_size)]
            got = compute_channel_moments(lambda c=chunks: iter(c))
            np.testing.assert_allclose(got.mean, reference.mean, rtol=1e-12, atol=1e-15)
            np.testing.assert_allclose(got.cov, reference.cov, rtol=1e-12, atol=1e-15)

    def test_matches_numpy_cov(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((30, 2, 4))
        moments = compute_channel_moments(x)
        for c in range(2):
            want = np.cov(x[:, c, :].T, bias=True)
            np.testing.assert_allclose(moments.cov[c], want, rtol=1e-12, atol=1e-14)

    def test_too_few_samples(self):
        with pytest.raises(ValidationError, match="at least 2"):
            compute_channel_moments(np.zeros((1, 2, 2)))

    def test_non_finite_rejected(self):
        x = np.zeros((3, 1, 2))
        x[1, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="non-finite"):
            compute_channel_moments(x)

    def test_symmetry_and_psd(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((25, 3, 6))
        moments = compute_channel_moments(x)
        for c in range(3):
            slice_ = moments.cov[c]
            asym = np.max(np.abs(slice_ - slice_.T))
            assert asym <= 1e-9 * max(np.max(np.abs(slice_)), 1e-30)
            eigvals = np.linalg.eigvalsh(slice_)
            assert eigvals.min() >= -1e-8 * np.trace(slice_)


class TestStandardize:
    def test_mean_input_maps_to_zero(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((10, 2, 3))
        moments = compute_channel_moments(x)
        out = standardize(moments.mean, moments.mean, moments.std())
        np.testing.assert_array_equal(out, np.zeros((2, 3)))

    def test_restandardized_training_set(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((50, 2, 4)) * 3.0 + 1.0
        moments = compute_channel_moments(x)
        out = standardize(x, moments.mean, moments.std())
        again = compute_channel_moments(out)
        np.testing.assert_allclose(again.mean, 0.0, atol=1e-6)
        variances = np.einsum("cdd->cd", again.cov)
        np.testing.assert_allclose(variances, 1.0, atol=1e-6)

    def test_constant_coordinate_centered_only(self):
        x = np.ones((5, 1, 2))
        x[:, 0, 1] = np.linspace(0, 1, 5)
        moments = compute_channel_moments(x)
        out = standardize(x, moments.mean, moments.std())
        np.testing.assert_array_equal(out[:, 0, 0], np.zeros(5))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError, match="shape mismatch"):
            standardize(np.zeros((2, 3)), np.zeros((2, 4)), np.ones((2, 4)))


class TestCorrelation:
    def test_hand_example(self):
        moments_cov = np.array([[[4.0, 2.0], [2.0, 1.0]]])
        from psc.projection import ChannelMoments

        moments = ChannelMoments(mean=np.zeros((1, 2)), cov=moments_cov, n_samples=10)
        corr = covariance_to_correlation(moments)
        np.testing.assert_allclose(corr[0], np.ones((2, 2)), atol=1e-12)

    def test_diagonal_becomes_identity(self):
        from psc.projection import ChannelMoments

        moments = ChannelMoments(
            mean=np.zeros((1, 3)), cov=np.diag([2.0, 5.0, 0.1])[None], n_samples=10
        )
        corr = covariance_to_correlation(moments)
        np.testing.assert_allclose(corr[0], np.eye(3), atol=1e-12)

    def test_entries_bounded(self):
        from psc.projection import ChannelMoments

        rng = np.random.default_rng(8)
        cov = random_psd_tensor(rng, 4, 5)
        moments = ChannelMoments(mean=np.zeros((4, 5)), cov=cov, n_samples=10)
        corr = covariance_to_correlation(moments)
        assert corr.min() >= -1.0 - 1e-9
        assert corr.max() <= 1.0 + 1e-9

    def test_zero_variance_row_zeroed(self):
        from psc.projection import ChannelMoments

        cov = np.zeros((1, 2, 2))
        cov[0, 1, 1] = 4.0
        moments = ChannelMoments(mean=np.zeros((1, 2)), cov=cov, n_samples=10)
        corr = covariance_to_correlation(moments)
        assert corr[0, 0, 0] == 0.0
        assert corr[0, 1, 1] == 1.0


class TestFitTucker:
    def test_diagonal_dominant_direction(self):
        corr = np.diag([4.0, 1.0])[None]
        proj = fit_tucker(corr, 1, 1)
        np.testing.assert_allclose(proj.factor_b[:, 0], [1.0, 0.0], atol=1e-12)

    def test_orthonormal_factors(self):
        rng = np.random.default_rng(9)
        tensor = random_psd_tensor(rng, 4, 6)
        proj = fit_tucker(tensor, 3, 4)
        np.testing.assert_allclose(
            proj.factor_a.T @ proj.factor_a, np.eye(3), atol=1e-8
        )
        np.testing.assert_allclose(
            proj.factor_b.T @ proj.factor_b, np.eye(4), atol=1e-8
        )

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(10)
        tensor = random_psd_tensor(rng, 3, 5)
        proj = fit_tucker(tensor, 3, 5)
        recon = tucker_reconstruct(tensor, proj.factor_a, proj.factor_b)
        np.testing.assert_allclose(recon, tensor, atol=1e-8)

    def test_reconstruction_error_monotone_in_d_proj(self):
        rng = np.random.default_rng(11)
        tensor = random_psd_tensor(rng, 2, 6)
        errors = []
        for d in range(1, 7):
            proj = fit_tucker(tensor, 2, d)
            recon = tucker_reconstruct(tensor, proj.factor_a, proj.factor_b)
            errors.append(np.linalg.norm(recon - tensor))
        for a, b in zip(errors, errors[1:]):
            assert b <= a + 1e-12

    def test_sign_convention(self):
        rng = np.random.default_rng(12)
        tensor = random_psd_tensor(rng, 3, 4)
        proj = fit_tucker(tensor, 3, 4)
        for factor in (proj.factor_a, proj.factor_b):
            for j in range(factor.shape[1]):
                col = factor[:, j]
                nz = np.flatnonzero(col)
                assert col[nz[0]] > 0

    def test_rank_deficiency_pads_with_warning(self):
        tensor = np.zeros((1, 3, 3))
        tensor[0, 0, 0] = 1.0  # rank-1 slice
        with pytest.warns(UserWarning, match="orthonormal completion"):
            proj = fit_tucker(tensor, 1, 3)
        np.testing.assert_allclose(proj.factor_b.T @ proj.factor_b, np.eye(3), atol=1e-8)

    def test_dims_validated(self):
        tensor = np.zeros((2, 3, 3))
        with pytest.raises(ValidationError, match="c_proj"):
            fit_tucker(tensor, 3, 2)
        with pytest.raises(ValidationError, match="d_proj"):
            fit_tucker(tensor, 1, 4)


class TestProject:
    def _identity_proj(self, c, d):
        return TuckerProjection(
            mean=np.zeros((c, d)),
            std=np.ones((c, d)),
            factor_a=np.eye(c),
            factor_b=np.eye(d),
            mode1_singular_values=np.ones(c),
            mode2_singular_values=np.ones(d),
        )

    def test_identity_factors_flatten(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 3))
        z = project(x, self._identity_proj(2, 3))
        np.testing.assert_array_equal(z, x.ravel())

    def test_rank_one_projection_picks_coordinate(self):
        corr = np.diag([4.0, 1.0])[None]
        proj = fit_tucker(corr, 1, 1)
        z = project(np.array([[2.5, -1.0]]), proj)
        np.testing.assert_allclose(z, [2.5], atol=1e-12)

    def test_projection_is_contraction(self):
        rng = np.random.default_rng(14)
        tensor = random_psd_tensor(rng, 3, 5)
        proj = fit_tucker(tensor, 2, 3)
        for _ in range(20):
            x = rng.standard_normal((3, 5))
            z = project(x, proj)
            assert np.linalg.norm(z) <= np.linalg.norm(x) + 1e-12


class TestPipeline:
    def test_equals_manual_composition(self):
        rng = np.random.default_rng(15)
        a = rng.standard_normal((6, 2, 4)).astype(np.float32)
        b = rng.standard_normal((6, 2, 9)).astype(np.float32)
        batches = [_conv_batch(0, a), _conv_batch(1, b)]
        stacked = reshape_concat(batches)
        moments = compute_channel_moments(stacked)
        proj = fit_projection(moments, 2, 3)
        manual = project(standardize(stacked, moments.mean, moments.std()), proj)
        piped = process_pipeline(batches, proj)
        np.testing.assert_array_equal(piped, manual)

    def test_batch_partition_invariance(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((20, 2, 5))
        moments = compute_channel_moments(x)
        proj = fit_projection(moments, 2, 3)
        full = process_pipeline(x, proj)
        parts = [process_pipeline(x[i : i + 7], proj) for i in range(0, 20, 7)]
        np.testing.assert_array_equal(np.concatenate(parts), full)

    def test_non_finite_identifies_sample(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((5, 1, 3))
        moments = compute_channel_moments(x)
        proj = fit_projection(moments, 1, 2)
        x[3, 0, 1] = np.inf
        with pytest.raises(ValidationError, match="sample index 3"):
            process_pipeline(x, proj)

    def test_output_scaling(self):
        rng = np.random.default_rng(18)
        x = rng.standard_normal((30, 2, 4)) * 2.0 + 0.5
        moments = compute_channel_moments(x)
        proj = fit_projection(moments, 2, 2)
        z = process_pipeline(x, proj)
        attach_output_moments(proj, z)
        z_scaled = process_pipeline(x, proj, scale_output=True)
        np.testing.assert_allclose(z_scaled.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(z_scaled.var(axis=0), 1.0, atol=1e-10)


class TestNcPreservation:
    def test_full_dim_projection_preserves_metrics(self):
        rng = np.random.default_rng(19)
        labels = rng.integers(0, 3, size=60)
        labels[:3] = [0, 1, 2]
        centers = rng.standard_normal((3, 2, 4)) * 2.0
        x = centers[labels] + rng.standard_normal((60, 2, 4))
        moments = compute_channel_moments(x)
        std = standardize(x, moments.mean, moments.std())
        proj = fit_projection(moments, 2, 4)
        z = project(std, proj)
        flat = std.reshape(60, -1)
        assert abs(nc1(z, labels) - nc1(flat, labels)) <= 1e-8
        assert abs(nc4(z, labels, z, labels) - nc4(flat, labels, flat, labels)) <= 1e-8


class TestAutoDims:
    def test_toy_runs_keep_collapse_metrics(self, toy_runs):
        """Recommended dims on the toy pipeline: NC1 stays above the cutoff
        and NC4 moves by at most 0.02."""
        import json

        runs, _ = toy_runs
        for seed, out in runs.items():
            report = json.loads((out / "fit_report.json").read_text())
            assert report["nc1_after"] > 0.2, f"seed {seed}"
            assert abs(report["nc4_after"] - report["nc4_before"]) <= 0.02, f"seed {seed}"

    def test_grid(self):
        assert default_dim_grid(1) == [1]
        assert default_dim_grid(2) == [2]
        assert default_dim_grid(4) == [2, 4]
        assert default_dim_grid(6) == [2, 4, 6]
        assert default_dim_grid(16) == [2, 4, 8, 16]

    def test_sweep_selects_smallest_qualifying(self):
        rng = np.random.default_rng(20)
        labels = np.tile([0, 1], 40)
        # Two latent factors drive all 8 coordinates, so the top-2
        # correlation directions capture everything and (1, 2) qualifies.
        class_factor = np.where(labels == 0, -3.0, 3.0) + rng.standard_normal(80) * 0.3
        nuisance = rng.standard_normal(80)
        x = np.empty((80, 1, 8))
        x[:, 0, :4] = class_factor[:, None] + rng.standard_normal((80, 4)) * 0.01
        x[:, 0, 4:] = nuisance[:, None] + rng.standard_normal((80, 4)) * 0.01
        moments = compute_channel_moments(x)
        std = standardize(x, moments.mean, moments.std())
        proj, table = auto_select_dims(std, labels, std, labels, moments)
        assert (proj.c_proj, proj.d_proj) == (1, 2)
        assert table[-1]["selected"]


class TestPersistence:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((25, 2, 4))
        moments = compute_channel_moments(x)
        proj = fit_projection(moments, 2, 3)
        attach_output_moments(proj, process_pipeline(x, proj))
        path = save_projection(tmp_path / "p.pscp", proj)
        again = load_projection(path)
        for attr in (
            "mean",
            "std",
            "factor_a",
            "factor_b",
            "z_mean",
            "z_var",
            "mode1_singular_values",
            "mode2_singular_values",
        ):
            np.testing.assert_array_equal(getattr(again, attr), getattr(proj, attr))

    def test_round_trip_without_output_moments(self, tmp_path):
        rng = np.random.default_rng(22)
        x = rng.standard_normal((25, 2, 4))
        moments = compute_channel_moments(x)
        proj = fit_projection(moments, 1, 2)
        again = load_projection(save_projection(tmp_path / "p.pscp", proj))
        assert again.z_mean is None and again.z_var is None
        np.testing.assert_array_equal(again.factor_b, proj.factor_b)
