"""Distance-aware heads on projected features.

Two heads share the same feature vector.  A Gaussian discriminant model
(per-class full covariances, class-frequency priors) scores epistemic
uncertainty via the feature log-density

    log p(z) = logsumexp_c [ log pi_c + log N(z; mu_c, Sigma_c + lambda I) ].

A multinomial logistic head fitted to the MAP under an L2 prior carries a
Kronecker-factored Laplace posterior over its weights; class
probabilities are posterior predictive averages over seeded Monte Carlo
weight draws, and their entropy is the aleatoric score.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import logsumexp

from .errors import ComputeError, ValidationError

DEFAULT_LAMBDA_GRID = tuple(10.0 ** np.arange(-9, 0))
DEFAULT_TAU = 1.0
DEFAULT_MC_SAMPLES = 100
_LOG_2PI = float(np.log(2.0 * np.pi))


def _check_features(z, labels=None):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValidationError(f"expected (N, p) features, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValidationError("non-finite feature values")
    if labels is None:
        return z
    labels = np.asarray(labels).astype(np.int64)
    if labels.shape != (z.shape[0],):
        raise ValidationError("labels must be one class index per sample")
    if labels.size and labels.min() < 0:
        raise ValidationError("labels must be non-negative class indices")
    return z, labels


# ---------------------------------------------------------------------------
# Gaussian discriminant density
# ---------------------------------------------------------------------------


@dataclass
class GdaModel:
    """Class priors/means plus Cholesky factors of the jittered covariances.

    When the optional PCA reduction is enabled at fit time, pca_mean and
    pca_basis hold the centering vector and the orthonormal basis applied
    to incoming features before density evaluation.
    """

    priors: np.ndarray  # (C,)
    means: np.ndarray  # (C, p)
    chol: np.ndarray  # (C, p, p) lower-triangular factors of Sigma_c + lambda*I
    lam: float
    pca_mean: np.ndarray | None = None  # (p_in,)
    pca_basis: np.ndarray | None = None  # (p_in, p), orthonormal columns

    @property
    def class_count(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.means.shape[1]

    @property
    def input_dim(self) -> int:
        return self.pca_basis.shape[0] if self.pca_basis is not None else self.feature_dim

    def reduce(self, z: np.ndarray) -> np.ndarray:
        if self.pca_basis is None:
            return z
        return (z - self.pca_mean) @ self.pca_basis


def _class_moments(z, labels, class_count):
    """Per-class mean and unbiased covariance; every class needs >= 2 samples."""
    p = z.shape[1]
    means = np.zeros((class_count, p))
    covs = np.zeros((class_count, p, p))
    counts = np.zeros(class_count, dtype=np.int64)
    for c in range(class_count):
        rows = z[labels == c]
        counts[c] = rows.shape[0]
        if rows.shape[0] < 2:
            raise ValidationError(
                f"class {c} has {rows.shape[0]} samples; need >= 2 for an unbiased covariance"
            )
        means[c] = rows.mean(axis=0)
        dev = rows - means[c]
        covs[c] = dev.T @ dev / (rows.shape[0] - 1)
    return means, covs, counts


def _cholesky_all(covs, lam):
    p = covs.shape[1]
    try:
        return np.linalg.cholesky(covs + lam * np.eye(p))
    except np.linalg.LinAlgError:
        return None


def _log_density_from(priors, means, chol, z):
    """(B,) mixture log-density given explicit parameters."""
    b = z.shape[0]
    terms = np.empty((b, means.shape[0]))
    logdet = 2.0 * np.log(np.einsum("cii->ci", chol)).sum(axis=1)
    p = means.shape[1]
    for c in range(means.shape[0]):
        dev = (z - means[c]).T  # (p, B)
        y = solve_triangular(chol[c], dev, lower=True)
        maha = np.einsum("ib,ib->b", y, y)
        terms[:, c] = np.log(priors[c]) - 0.5 * (p * _LOG_2PI + logdet[c] + maha)
    return logsumexp(terms, axis=1), terms


def _fit_pca(z: np.ndarray, dim: int) -> tuple[np.ndarray, np.ndarray]:
    if not 1 <= dim <= z.shape[1]:
        raise ValidationError(f"pca_dim must be in [1, {z.shape[1]}], got {dim}")
    center = z.mean(axis=0)
    _, _, vt = np.linalg.svd(z - center, full_matrices=False)
    basis = vt[:dim].T.copy()
    for j in range(dim):
        col = basis[:, j]
        nz = np.flatnonzero(col)
        if nz.size and col[nz[0]] < 0:
            basis[:, j] = -col
    return center, basis


def fit_gda(
    z,
    labels,
    lam_grid=None,
    lam: float | None = None,
    class_count: int | None = None,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    pca_dim: int | None = None,
) -> GdaModel:
    """Fit the class-conditional Gaussians and select the covariance jitter.

    With `lam` given the value is used directly; otherwise it is picked
    from `lam_grid` (default 1e-9..1e-1, log-spaced) by maximizing total
    log-density on a per-class 20% holdout, then the moments are refitted
    on all data.  `pca_dim` optionally reduces the features with a PCA
    basis (fitted here, applied again at evaluation) before the
    Gaussians are estimated; off by default.
    """
    z, labels = _check_features(z, labels)
    if class_count is None:
        class_count = int(labels.max()) + 1
    pca_mean = pca_basis = None
    if pca_dim is not None:
        pca_mean, pca_basis = _fit_pca(z, int(pca_dim))
        z = (z - pca_mean) @ pca_basis
    priors = np.bincount(labels, minlength=class_count).astype(np.float64) / labels.size
    if lam is None:
        grid = sorted(float(g) for g in (lam_grid if lam_grid is not None else DEFAULT_LAMBDA_GRID))
        lam = _select_lambda(z, labels, class_count, grid, holdout_fraction, seed)
    elif lam < 0:
        raise ValidationError("lambda must be >= 0")
    means, covs, _ = _class_moments(z, labels, class_count)
    chol = _cholesky_all(covs, lam)
    if chol is None:
        raise ComputeError(f"Cholesky factorization failed at lambda={lam:g}")
    return GdaModel(
        priors=priors,
        means=means,
        chol=chol,
        lam=float(lam),
        pca_mean=pca_mean,
        pca_basis=pca_basis,
    )


def _select_lambda(z, labels, class_count, grid, holdout_fraction, seed):
    rng = np.random.default_rng(seed)
    fit_idx, held_idx = [], []
    for c in range(class_count):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.permutation(rows.size)]
        n_fit = max(2, int(np.ceil((1.0 - holdout_fraction) * rows.size)))
        fit_idx.append(rows[:n_fit])
        held_idx.append(rows[n_fit:])
    fit_idx = np.concatenate(fit_idx)
    held_idx = np.concatenate(held_idx)
    if held_idx.size == 0:
        warnings.warn("holdout is empty; using the smallest feasible jitter")
        for lam in grid:
            means, covs, _ = _class_moments(z, labels, class_count)
            if _cholesky_all(covs, lam) is not None:
                return lam
        raise ComputeError(f"Cholesky factorization failed at lambda={grid[-1]:g}")
    means, covs, counts = _class_moments(z[fit_idx], labels[fit_idx], class_count)
    priors = counts / counts.sum()
    best_lam, best_score = None, -np.inf
    for lam in grid:
        chol = _cholesky_all(covs, lam)
        if chol is None:
            continue
        score = float(_log_density_from(priors, means, chol, z[held_idx])[0].sum())
        if score > best_score:
            best_lam, best_score = lam, score
    if best_lam is None:
        raise ComputeError(f"Cholesky factorization failed at lambda={grid[-1]:g}")
    return best_lam


def _gda_prepare(model: GdaModel, z):
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    batch = _check_features(z[None] if single else z)
    if batch.shape[1] != model.input_dim:
        raise ValidationError(
            f"feature dim {batch.shape[1]} does not match model dim {model.input_dim}"
        )
    return model.reduce(batch), single


def gda_log_density(model: GdaModel, z) -> np.ndarray | float:
    """Mixture log-density log sum_c pi_c N(z; mu_c, Sigma_c + lambda I)."""
    batch, single = _gda_prepare(model, z)
    out = _log_density_from(model.priors, model.means, model.chol, batch)[0]
    return float(out[0]) if single else out


def gda_posterior(model: GdaModel, z) -> np.ndarray:
    """Class posterior p(y | z) under the fitted Gaussians."""
    batch, single = _gda_prepare(model, z)
    total, terms = _log_density_from(model.priors, model.means, model.chol, batch)
    probs = np.exp(terms - total[:, None])
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# MAP logistic head + Kronecker-factored Laplace posterior
# ---------------------------------------------------------------------------


def _with_bias(z):
    return np.hstack([z, np.ones((z.shape[0], 1))])


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _objective(w_flat, zt, labels, tau, class_count):
    """Summed cross-entropy + (tau/2)||W||_F^2 with gradient."""
    m = zt.shape[1]
    w = w_flat.reshape(class_count, m)
    logits = zt @ w.T
    lse = logsumexp(logits, axis=1)
    loss = float(lse.sum() - logits[np.arange(zt.shape[0]), labels].sum())
    loss += 0.5 * tau * float(np.sum(w * w))
    probs = np.exp(logits - lse[:, None])
    probs[np.arange(zt.shape[0]), labels] -= 1.0
    grad = probs.T @ zt + tau * w
    return loss, grad.ravel()


def _hessian(w, zt, tau, class_count):
    """Exact Hessian w.r.t. feature-major vec(W), (m*C) x (m*C)."""
    probs = _softmax(zt @ w.T)
    lam = probs[:, :, None] * (np.eye(class_count) - probs[:, None, :])
    h = np.einsum("ij,ik,icd->jckd", zt, zt, lam)
    m = zt.shape[1]
    h = h.reshape(m * class_count, m * class_count)
    h[np.diag_indices_from(h)] += tau
    return h


_NEWTON_DIM_CAP = 3000


def train_linear_map(
    z,
    labels,
    tau: float = DEFAULT_TAU,
    class_count: int | None = None,
    tol: float = 1e-6,
    max_iter: int = 500,
) -> np.ndarray:
    """MAP weights (C, p+1) of the L2-regularized multinomial logistic head.

    The objective is convex, so Newton with backtracking converges to the
    unique optimum; problems too large for an explicit Hessian fall back
    to L-BFGS.  Convergence means gradient infinity-norm below `tol`.
    """
    z, labels = _check_features(z, labels)
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    if class_count is None:
        class_count = int(labels.max()) + 1
    if class_count < 2:
        raise ValidationError("need at least 2 classes to fit a classification head")
    if np.unique(labels).size < 2:
        raise ValidationError("training labels contain a single class")
    if z.shape[0] < class_count:
        raise ValidationError(f"need at least {class_count} samples, got {z.shape[0]}")
    zt = _with_bias(z)
    m = zt.shape[1]
    w = np.zeros(class_count * m)

    if class_count * m <= _NEWTON_DIM_CAP:
        loss, grad = _objective(w, zt, labels, tau, class_count)
        for _ in range(max_iter):
            gnorm = np.max(np.abs(grad))
            if gnorm < tol:
                break
            h = _hessian(w.reshape(class_count, m), zt, tau, class_count)
            # grad/hessian index orders differ: grad is class-major, the
            # Hessian is feature-major; permute to feature-major.
            g_fm = grad.reshape(class_count, m).T.ravel()
            step_fm = np.linalg.solve(h, g_fm)
            step = step_fm.reshape(m, class_count).T.ravel()
            t = 1.0
            for _ in range(60):
                new_loss, new_grad = _objective(w - t * step, zt, labels, tau, class_count)
                if new_loss <= loss:
                    break
                t *= 0.5
            w = w - t * step
            loss, grad = new_loss, new_grad
        else:
            raise ComputeError(
                "logistic fit did not converge: final gradient inf-norm "
                f"{np.max(np.abs(grad)):.3g}"
            )
        return w.reshape(class_count, m)

    result = minimize(
        _objective,
        w,
        args=(zt, labels, tau, class_count),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-18, "gtol": tol / 10},
    )
    gnorm = float(np.max(np.abs(result.jac)))
    if gnorm >= tol:
        raise ComputeError(f"logistic fit did not converge: final gradient inf-norm {gnorm:.3g}")
    return result.x.reshape(class_count, m)


DEFAULT_TAU_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


def select_tau(
    z_train,
    train_labels,
    z_val,
    val_labels,
    grid=DEFAULT_TAU_GRID,
    class_count: int | None = None,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
) -> tuple[float, list[dict]]:
    """Prior precision by validation NLL of the posterior predictive.

    Fits the head once per grid value and scores mean negative
    log-likelihood on the validation features; ties go to the smaller
    value.  Returns the winner and the sweep table.
    """
    z_val, val_labels = _check_features(z_val, val_labels)
    table = []
    best = None
    for tau in sorted(float(t) for t in grid):
        weights = train_linear_map(z_train, train_labels, tau=tau, class_count=class_count)
        model = fit_laplace(
            z_train, train_labels, weights, tau=tau, mc_samples=mc_samples, seed=seed
        )
        probs = predict_probabilities(model, z_val)
        picked = probs[np.arange(val_labels.size), val_labels]
        nll = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
        table.append({"tau": tau, "val_nll": nll})
        if best is None or nll < best[1]:
            best = (tau, nll)
    return best[0], table


@dataclass
class LaplaceLinearModel:
    """MAP logistic weights plus Kronecker-factored posterior curvature.

    The posterior precision over feature-major vec(W) is
    (sqrt(N) A + sqrt(tau) I) kron (sqrt(N) G + sqrt(tau) I), where A is
    the input second moment over bias-augmented features and G is the
    average softmax curvature at the MAP.
    """

    weights: np.ndarray  # (C, p+1), bias column last
    a_factor: np.ndarray  # (p+1, p+1)
    g_factor: np.ndarray  # (C, C)
    tau: float
    n_samples: int
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0
    _sqrt_cov: tuple[np.ndarray, np.ndarray] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def class_count(self) -> int:
        return self.weights.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1] - 1

    def sqrt_covariance_factors(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetric inverse square roots of the two damped factors."""
        if self._sqrt_cov is None:
            self._sqrt_cov = (
                _inv_sqrt(np.sqrt(self.n_samples) * self.a_factor, np.sqrt(self.tau)),
                _inv_sqrt(np.sqrt(self.n_samples) * self.g_factor, np.sqrt(self.tau)),
            )
        return self._sqrt_cov


def _inv_sqrt(mat, ridge):
    damped = mat + ridge * np.eye(mat.shape[0])
    try:
        eigvals, eigvecs = np.linalg.eigh((damped + damped.T) / 2.0)
    except np.linalg.LinAlgError as exc:
        raise ComputeError(f"eigendecomposition failed: {exc}") from exc
    if eigvals.min() <= 0:
        raise ComputeError("posterior precision factor is not positive definite")
    return (eigvecs / np.sqrt(eigvals)) @ eigvecs.T


def fit_laplace(
    z,
    labels,
    weights: np.ndarray,
    tau: float = DEFAULT_TAU,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
) -> LaplaceLinearModel:
    """Kronecker factors of the curvature at the MAP weights."""
    z, labels = _check_features(z, labels)
    class_count = weights.shape[0]
    zt = _with_bias(z)
    if weights.shape[1] != zt.shape[1]:
        raise ValidationError(
            f"weights expect {weights.shape[1] - 1} features, got {z.shape[1]}"
        )
    n = zt.shape[0]
    a_factor = zt.T @ zt / n
    probs = _softmax(zt @ weights.T)
    g_factor = (np.einsum("ic,id->cd", probs, probs) * -1.0 + np.diag(probs.sum(axis=0))) / n
    g_factor = (g_factor + g_factor.T) / 2.0
    return LaplaceLinearModel(
        weights=np.asarray(weights, dtype=np.float64),
        a_factor=a_factor,
        g_factor=g_factor,
        tau=float(tau),
        n_samples=n,
        mc_samples=int(mc_samples),
        seed=int(seed),
    )


def predict_probabilities(
    model: LaplaceLinearModel,
    z,
    mc_samples: int | None = None,
    seed: int | None = None,
    index_offset: int = 0,
) -> np.ndarray:
    """Posterior predictive class probabilities via seeded MC weight draws.

    Each sample i uses its own generator seeded with base_seed XOR
    (index_offset + i), so batched, chunked, and single-sample calls all
    agree bit-for-bit.
    """
    s = int(mc_samples if mc_samples is not None else model.mc_samples)
    if s < 1:
        raise ValidationError("mc_samples must be >= 1")
    # Wrap into u64 so arbitrary Python ints stay valid XOR material.
    base_seed = int(seed if seed is not None else model.seed) & 0xFFFFFFFFFFFFFFFF
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    batch = _check_features(z[None] if single else z)
    if batch.shape[1] != model.feature_dim:
        raise ValidationError(
            f"feature dim {batch.shape[1]} does not match model dim {model.feature_dim}"
        )
    zt = _with_bias(batch)
    a_sqrt, g_sqrt = model.sqrt_covariance_factors()
    out = np.empty((batch.shape[0], model.class_count))
    for i in range(batch.shape[0]):
        rng = np.random.default_rng(np.uint64(base_seed) ^ np.uint64(index_offset + i))
        noise = rng.standard_normal((s, model.class_count, zt.shape[1]))
        w_draws = model.weights + np.einsum("ca,sab,bd->scd", g_sqrt, noise, a_sqrt)
        logits = np.einsum("scd,d->sc", w_draws, zt[i])
        out[i] = _softmax(logits).mean(axis=0)
    return out[0] if single else out


def predictive_entropy(probabilities) -> np.ndarray | float:
    """Shannon entropy of a class distribution, with 0*log(0) = 0."""
    p = np.asarray(probabilities, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class UncertaintyOutput:
    """Joint head verdict for one sample."""

    probabilities: np.ndarray
    entropy: float
    log_density: float
    ood_flag: bool


def assess(
    gda: GdaModel,
    laplace: LaplaceLinearModel | None,
    z: np.ndarray,
    z_scaled: np.ndarray | None = None,
    density_threshold: float = -np.inf,
    sample_index: int = 0,
) -> UncertaintyOutput:
    """Score one feature vector with both heads.

    Class probabilities come from the Laplace head when present (fed the
    scaled features) and from the GDA class posterior otherwise; the OOD
    flag marks log-densities below `density_threshold`.
    """
    log_density = gda_log_density(gda, z)
    if laplace is not None:
        probs = predict_probabilities(
            laplace, z if z_scaled is None else z_scaled, index_offset=sample_index
        )
    else:
        probs = gda_posterior(gda, z)
    return UncertaintyOutput(
        probabilities=probs,
        entropy=float(predictive_entropy(probs)),
        log_density=float(log_density),
        ood_flag=bool(log_density < density_threshold),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

_GDA_MAGIC = b"PSCG"
_LAPLACE_MAGIC = b"PSCL"
_HEAD_VERSION = 1


def save_gda(path, model: GdaModel) -> Path:
    path = Path(path)
    p_in = model.pca_basis.shape[0] if model.pca_basis is not None else 0
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIId",
                _GDA_MAGIC,
                _HEAD_VERSION,
                model.class_count,
                model.feature_dim,
                p_in,
                model.lam,
            )
        )
        for arr in (model.priors, model.means, model.chol):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if p_in:
            fh.write(np.ascontiguousarray(model.pca_mean, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(model.pca_basis, dtype="<f8").tobytes())
    return path


def load_gda(path) -> GdaModel:
    path = Path(path)
    head = struct.Struct("<4sIIIId")
    with open(path, "rb") as fh:
        magic, version, c, p, p_in, lam = head.unpack(fh.read(head.size))
        if magic != _GDA_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != _HEAD_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        priors = np.fromfile(fh, dtype="<f8", count=c)
        means = np.fromfile(fh, dtype="<f8", count=c * p).reshape(c, p)
        chol = np.fromfile(fh, dtype="<f8", count=c * p * p).reshape(c, p, p)
        pca_mean = pca_basis = None
        if p_in:
            pca_mean = np.fromfile(fh, dtype="<f8", count=p_in)
            pca_basis = np.fromfile(fh, dtype="<f8", count=p_in * p).reshape(p_in, p)
    return GdaModel(
        priors=priors, means=means, chol=chol, lam=lam, pca_mean=pca_mean, pca_basis=pca_basis
    )


def save_laplace(path, model: LaplaceLinearModel) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIIIQIQd",
                _LAPLACE_MAGIC,
                _HEAD_VERSION,
                model.class_count,
                model.weights.shape[1],
                model.n_samples,
                model.mc_samples,
                model.seed,
                model.tau,
            )
        )
        for arr in (model.weights, model.a_factor, model.g_factor):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def load_laplace(path) -> LaplaceLinearModel:
    path = Path(path)
    head = struct.Struct("<4sIIIQIQd")
    with open(path, "rb") as fh:
        magic, version, c, m, n, s, seed, tau = head.unpack(fh.read(head.size))
        if magic != _LAPLACE_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != _HEAD_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        weights = np.fromfile(fh, dtype="<f8", count=c * m).reshape(c, m)
        a_factor = np.fromfile(fh, dtype="<f8", count=m * m).reshape(m, m)
        g_factor = np.fromfile(fh, dtype="<f8", count=c * c).reshape(c, c)
    return LaplaceLinearModel(
        weights=weights,
        a_factor=a_factor,
        g_factor=g_factor,
        tau=tau,
        n_samples=int(n),
        mc_samples=int(s),
        seed=int(seed),
    )
