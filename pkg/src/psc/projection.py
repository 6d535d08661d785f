"""Candidate-layer processing: reshape, channelwise scale, Tucker projection.

The candidate layer(s) are stacked into a per-sample C x D matrix, each
channel is centered and scaled by its own per-coordinate standard
deviation, the channelwise covariances are turned into correlation
matrices, and a truncated higher-order SVD of the resulting C x D x D
tensor yields two orthonormal factor matrices.  Projecting a sample
onto those factors and flattening row-major gives the feature vector fed
to the uncertainty heads.  Because every covariance slice is symmetric,
the two feature-side factors coincide, so only two matrices are kept;
the core tensor is never needed for projection.

Cross-channel covariance is deliberately never formed: with C channels
of D features the dense alternative would be a (C*D)^2 matrix, far too
large for real networks.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import collapse
from .errors import ComputeError, ValidationError
from .store import ActivationBatch, KIND_CONV, KIND_FC

VARIANCE_FLOOR = 1e-12


@dataclass
class ChannelMoments:
    """Per-channel mean (C, D) and population covariance (C, D, D)."""

    mean: np.ndarray
    cov: np.ndarray
    n_samples: int

    @property
    def channels(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def std(self) -> np.ndarray:
        """Per-coordinate standard deviations, (C, D)."""
        var = np.einsum("cdd->cd", self.cov)
        return np.sqrt(np.clip(var, 0.0, None))


def reshape_concat(batches: list[ActivationBatch]) -> np.ndarray:
    """Stack one batch of candidate layers into (B, C, D) float64.

    Conv layers keep their channel axis and concatenate flattened spatial
    features; fc layers become single-channel rows and concatenate along
    the feature axis.  Mixing conv and fc layers is rejected, as is a
    channel-count mismatch between conv layers.
    """
    if not batches:
        raise ValidationError("no layer batches to combine")
    kinds = {b.kind for b in batches}
    if kinds == {KIND_CONV}:
        channels = {b.values.shape[1] for b in batches}
        if len(channels) > 1:
            raise ValidationError(f"conv channel counts differ: {sorted(channels)}")
        parts = [np.asarray(b.values, dtype=np.float64) for b in batches]
    elif kinds == {KIND_FC}:
        parts = [np.asarray(b.values, dtype=np.float64)[:, None, :] for b in batches]
    else:
        raise ValidationError("cannot combine conv and fc layers in one candidate set")
    sizes = {p.shape[0] for p in parts}
    if len(sizes) > 1:
        raise ValidationError(f"layer batches disagree on batch size: {sorted(sizes)}")
    return np.concatenate(parts, axis=2)


def _as_stream_factory(source) -> Callable[[], Iterable[np.ndarray]]:
    if callable(source):
        return source
    arr = np.asarray(source, dtype=np.float64)
    if arr.ndim != 3:
        raise ValidationError(f"expected (N, C, D) stacked activations, got {arr.shape}")
    return lambda: (arr,)


def compute_channel_moments(source) -> ChannelMoments:
    """Exact two-pass channelwise moments over a re-iterable batch stream.

    `source` is either a full (N, C, D) array or a zero-argument callable
    returning a fresh iterator of (B, C, D) blocks (the stream is
    consumed twice: once for the mean, once for the covariance).  The
    result is independent of how the data is partitioned into batches.
    """
    make_stream = _as_stream_factory(source)
    total = None
    n = 0
    shape = None
    for block in make_stream():
        block = np.asarray(block, dtype=np.float64)
        if not np.isfinite(block).all():
            raise ValidationError("non-finite activations in input")
        if shape is None:
            shape = block.shape[1:]
            total = np.zeros(shape)
        elif block.shape[1:] != shape:
            raise ValidationError(f"inconsistent block shape {block.shape[1:]} vs {shape}")
        total += block.sum(axis=0)
        n += block.shape[0]
    if n < 2:
        raise ValidationError(f"need at least 2 samples to estimate moments, got {n}")
    mean = total / n
    cov = np.zeros(shape + (shape[1],))
    for block in make_stream():
        dev = np.asarray(block, dtype=np.float64) - mean
        cov += np.einsum("bcd,bce->cde", dev, dev)
    cov /= n
    return ChannelMoments(mean=mean, cov=cov, n_samples=n)


def _inv_scale(std: np.ndarray) -> np.ndarray:
    # Coordinates whose variance sits below the floor are centered only.
    ok = std * std >= VARIANCE_FLOOR
    return np.where(ok, 1.0 / np.where(ok, std, 1.0), 1.0)


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """Center and scale channelwise; accepts (C, D) or (B, C, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != mean.shape:
        raise ValidationError(f"shape mismatch: data {x.shape[-2:]}, moments {mean.shape}")
    return (x - mean) * _inv_scale(std)


def covariance_to_correlation(moments: ChannelMoments) -> np.ndarray:
    """Per-channel correlation slices; zero-variance rows/columns zero out."""
    std = moments.std()
    ok = (std * std >= VARIANCE_FLOOR).astype(np.float64)
    inv = np.where(ok > 0, 1.0 / np.where(ok > 0, std, 1.0), 0.0)
    corr = moments.cov * inv[:, :, None] * inv[:, None, :]
    # Exact unit diagonal where the variance is healthy.
    d = np.arange(moments.dim)
    corr[:, d, d] = ok
    return corr


def _mode_unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def _fix_signs(u: np.ndarray) -> np.ndarray:
    u = u.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
    return u


def _factor_basis(unfolding: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Full orthonormal left-singular basis of an unfolding.

    Computed from the (small) Gram matrix so the basis always spans the
    whole mode, which doubles as the orthonormal completion when the
    unfolding is rank deficient.
    """
    gram = unfolding @ unfolding.T
    gram = (gram + gram.T) / 2.0
    try:
        eigvals, eigvecs = np.linalg.eigh(gram)
    except np.linalg.LinAlgError as exc:
        raise ComputeError(f"eigendecomposition failed: {exc}") from exc
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    singular_values = np.sqrt(np.clip(eigvals, 0.0, None))
    return _fix_signs(eigvecs), singular_values


def _numerical_rank(singular_values: np.ndarray) -> int:
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.sum(singular_values > singular_values[0] * 1e-12))


@dataclass
class TuckerProjection:
    """Fitted reduction: channel moments plus two orthonormal factors.

    factor_a is C x c_proj (channel mode), factor_b is D x d_proj (both
    feature modes, shared because the correlation slices are symmetric).
    Columns carry a deterministic sign convention: the first nonzero
    entry of each column is positive.  z_mean/z_var, when set, describe
    the projected training features for the optional output scaling.
    """

    mean: np.ndarray  # (C, D)
    std: np.ndarray  # (C, D)
    factor_a: np.ndarray  # (C, c_proj)
    factor_b: np.ndarray  # (D, d_proj)
    mode1_singular_values: np.ndarray
    mode2_singular_values: np.ndarray
    z_mean: np.ndarray | None = None
    z_var: np.ndarray | None = None

    @property
    def channels(self) -> int:
        return self.factor_a.shape[0]

    @property
    def dim(self) -> int:
        return self.factor_b.shape[0]

    @property
    def c_proj(self) -> int:
        return self.factor_a.shape[1]

    @property
    def d_proj(self) -> int:
        return self.factor_b.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.c_proj * self.d_proj


def fit_tucker(
    correlation: np.ndarray,
    c_proj: int,
    d_proj: int,
    moments: ChannelMoments | None = None,
) -> TuckerProjection:
    """Truncated HOSVD of the channelwise correlation tensor.

    The factors are the leading left singular vectors of the mode-1
    (C x D^2) and mode-2 (D x C*D) unfoldings; the mode-3 unfolding
    coincides with mode-2 because every slice is symmetric.  Requested
    dims beyond the numerical rank are padded with an orthonormal
    completion and flagged with a warning.
    """
    correlation = np.asarray(correlation, dtype=np.float64)
    if correlation.ndim != 3 or correlation.shape[1] != correlation.shape[2]:
        raise ValidationError(f"expected a (C, D, D) tensor, got {correlation.shape}")
    channels, dim = correlation.shape[0], correlation.shape[1]
    asym = np.max(np.abs(correlation - np.transpose(correlation, (0, 2, 1))))
    scale = max(np.max(np.abs(correlation)), 1.0)
    if asym > 1e-9 * scale:
        raise ValidationError("correlation slices are not symmetric")
    if not 1 <= c_proj <= channels:
        raise ValidationError(f"c_proj must be in [1, {channels}], got {c_proj}")
    if not 1 <= d_proj <= dim:
        raise ValidationError(f"d_proj must be in [1, {dim}], got {d_proj}")
    basis_a, sv1 = _factor_basis(_mode_unfold(correlation, 0))
    basis_b, sv2 = _factor_basis(_mode_unfold(correlation, 1))
    if c_proj > _numerical_rank(sv1) or d_proj > _numerical_rank(sv2):
        warnings.warn(
            "requested projection dims exceed the numerical rank; "
            "padding with an orthonormal completion"
        )
    if moments is not None:
        if moments.mean.shape != (channels, dim):
            raise ValidationError(
                f"moments shape {moments.mean.shape} does not match tensor "
                f"({channels}, {dim})"
            )
        mean, std = moments.mean.copy(), moments.std()
    else:
        mean, std = np.zeros((channels, dim)), np.ones((channels, dim))
    return TuckerProjection(
        mean=mean,
        std=std,
        factor_a=basis_a[:, :c_proj],
        factor_b=basis_b[:, :d_proj],
        mode1_singular_values=sv1,
        mode2_singular_values=sv2,
    )


def fit_projection(moments: ChannelMoments, c_proj: int, d_proj: int) -> TuckerProjection:
    """Correlation transform + Tucker fit in one step."""
    return fit_tucker(covariance_to_correlation(moments), c_proj, d_proj, moments=moments)


def project(
    x_std: np.ndarray, proj: TuckerProjection, scale_output: bool = False
) -> np.ndarray:
    """Project standardized (C, D) or (B, C, D) data to feature vectors.

    Returns row-major flattened A^T X B, i.e. (feature_dim,) or
    (B, feature_dim).  With scale_output the projected-feature moments
    stored on the projection are applied as a final diagonal scaling.
    """
    x_std = np.asarray(x_std, dtype=np.float64)
    single = x_std.ndim == 2
    batch = x_std[None] if single else x_std
    if batch.shape[-2:] != (proj.channels, proj.dim):
        raise ValidationError(
            f"data shape {batch.shape[-2:]} does not match projection "
            f"({proj.channels}, {proj.dim})"
        )
    z = np.einsum("ck,bcd,dj->bkj", proj.factor_a, batch, proj.factor_b)
    z = z.reshape(batch.shape[0], proj.feature_dim)
    if scale_output:
        if proj.z_mean is None or proj.z_var is None:
            raise ValidationError("projection has no output moments for scaling")
        z = (z - proj.z_mean) * _inv_scale(np.sqrt(proj.z_var))
    return z[0] if single else z


def attach_output_moments(proj: TuckerProjection, z_train: np.ndarray) -> None:
    """Record mean/variance of projected training features on the projection."""
    z_train = np.asarray(z_train, dtype=np.float64)
    proj.z_mean = z_train.mean(axis=0)
    proj.z_var = z_train.var(axis=0)


def process_pipeline(
    batches: list[ActivationBatch] | np.ndarray,
    proj: TuckerProjection,
    scale_output: bool = False,
) -> np.ndarray:
    """reshape -> standardize -> project (-> optional output scale)."""
    if isinstance(batches, np.ndarray):
        stacked = np.asarray(batches, dtype=np.float64)
    else:
        stacked = reshape_concat(batches)
    finite = np.isfinite(stacked).all(axis=(1, 2))
    if not finite.all():
        raise ValidationError(
            f"non-finite activation at sample index {int(np.flatnonzero(~finite)[0])}"
        )
    x_std = standardize(stacked, proj.mean, proj.std)
    return project(x_std, proj, scale_output=scale_output)


def default_dim_grid(cap: int) -> list[int]:
    """Projection-dimension grid: powers of two up to the mode size, which
    is always included so the sweep can fall back to the exact identity."""
    if cap < 2:
        return [cap]
    vals = []
    v = 2
    while v < cap:
        vals.append(v)
        v *= 2
    vals.append(cap)
    return vals


def auto_select_dims(
    std_train: np.ndarray,
    train_labels: np.ndarray,
    std_val: np.ndarray,
    val_labels: np.ndarray,
    moments: ChannelMoments,
    drift: float = 0.05,
) -> tuple[TuckerProjection, list[dict]]:
    """Smallest grid dims whose projection moves NC1 and NC4 by < drift.

    Baseline metrics come from the standardized, unprojected layer; grid
    pairs are tried in order of increasing projected feature size.
    Returns the fitted projection and the sweep table.
    """
    correlation = covariance_to_correlation(moments)
    flat_train = std_train.reshape(std_train.shape[0], -1)
    flat_val = std_val.reshape(std_val.shape[0], -1)
    base_nc1 = collapse.nc1(flat_train, train_labels)
    base_nc4 = collapse.nc4(flat_train, train_labels, flat_val, val_labels)
    basis_a, sv1 = _factor_basis(_mode_unfold(correlation, 0))
    basis_b, sv2 = _factor_basis(_mode_unfold(correlation, 1))
    pairs = sorted(
        (
            (c, d)
            for c in default_dim_grid(moments.channels)
            for d in default_dim_grid(moments.dim)
        ),
        key=lambda cd: (cd[0] * cd[1], cd[0], cd[1]),
    )
    table = []
    chosen = None
    for c, d in pairs:
        proj = TuckerProjection(
            mean=moments.mean.copy(),
            std=moments.std(),
            factor_a=basis_a[:, :c],
            factor_b=basis_b[:, :d],
            mode1_singular_values=sv1,
            mode2_singular_values=sv2,
        )
        z_train = project(std_train, proj)
        z_val = project(std_val, proj)
        p_nc1 = collapse.nc1(z_train, train_labels)
        p_nc4 = collapse.nc4(z_train, train_labels, z_val, val_labels)
        row = {
            "c_proj": c,
            "d_proj": d,
            "nc1": p_nc1,
            "nc4": p_nc4,
            "delta_nc1": p_nc1 - base_nc1,
            "delta_nc4": p_nc4 - base_nc4,
            "selected": False,
        }
        table.append(row)
        if abs(row["delta_nc1"]) < drift and abs(row["delta_nc4"]) < drift:
            row["selected"] = True
            chosen = proj
            break
    if chosen is None:
        lines = [
            f"  c={r['c_proj']} d={r['d_proj']} nc1={r['nc1']:.4f} nc4={r['nc4']:.4f}"
            for r in table
        ]
        raise ComputeError(
            "auto dimension sweep failed: no grid pair kept both metrics within "
            f"{drift} of the unprojected layer\n" + "\n".join(lines)
        )
    return chosen, table


_PROJ_MAGIC = b"PSCP"
_PROJ_VERSION = 1


def save_projection(path, proj: TuckerProjection) -> Path:
    """Persist a projection (binary64 little-endian, magic PSCP)."""
    path = Path(path)
    has_z = proj.z_mean is not None and proj.z_var is not None
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIIIBII",
                _PROJ_MAGIC,
                _PROJ_VERSION,
                proj.channels,
                proj.dim,
                proj.c_proj,
                proj.d_proj,
                1 if has_z else 0,
                proj.mode1_singular_values.size,
                proj.mode2_singular_values.size,
            )
        )
        for arr in (proj.mean, proj.std, proj.factor_a, proj.factor_b):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if has_z:
            fh.write(np.ascontiguousarray(proj.z_mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(proj.z_var, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.mode1_singular_values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(proj.mode2_singular_values, dtype="<f8").tobytes())
    return path


def load_projection(path) -> TuckerProjection:
    path = Path(path)
    head = struct.Struct("<4sIIIIIBII")
    with open(path, "rb") as fh:
        magic, version, channels, dim, c_proj, d_proj, has_z, n_sv1, n_sv2 = head.unpack(
            fh.read(head.size)
        )
        if magic != _PROJ_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != _PROJ_VERSION:
            raise ValidationError(f"{path}: unsupported projection version {version}")

        def take(*shape):
            count = int(np.prod(shape))
            return np.fromfile(fh, dtype="<f8", count=count).reshape(shape)

        mean = take(channels, dim)
        std = take(channels, dim)
        factor_a = take(channels, c_proj)
        factor_b = take(dim, d_proj)
        z_mean = z_var = None
        if has_z:
            z_mean = take(c_proj * d_proj)
            z_var = take(c_proj * d_proj)
        sv1 = take(n_sv1)
        sv2 = take(n_sv2)
    return TuckerProjection(
        mean=mean,
        std=std,
        factor_a=factor_a,
        factor_b=factor_b,
        mode1_singular_values=sv1,
        mode2_singular_values=sv2,
        z_mean=z_mean,
        z_var=z_var,
    )
