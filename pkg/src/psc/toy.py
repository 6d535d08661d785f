"""Desk-scale sign-example dataset and residual MLP for end-to-end tests.

The dataset draws 2-D Gaussian inputs and labels them by the sign of the
first coordinate, with a small label-flip probability; the second
coordinate is irrelevant to the label.  The network is a stack of
leaky-ReLU linear layers with residual connections wherever a layer's
input and output widths match, trained full-batch with Adam under a
cosine-annealed learning rate.  An optional hard spectral-norm
constraint rescales every weight matrix after each optimizer step.

Everything runs on numpy with explicit gradients, so the whole skip-
connection pipeline can be exercised without a deep-learning framework.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ComputeError, ValidationError
from .store import KIND_FC, LayerRecordHeader, build_manifest, write_layer_file, write_manifest


@dataclass
class SignDatasetConfig:
    sigma: float = 0.3
    flip_prob: float = 0.001
    n_train: int = 3000
    n_val: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError("sigma must be > 0")
        if not 0.0 <= self.flip_prob < 1.0:
            raise ValidationError("flip probability must be in [0, 1)")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


@dataclass
class MlpSpec:
    input_dim: int = 2
    hidden_dims: list[int] = field(default_factory=lambda: [4, 2, 2, 2, 2])
    negative_slope: float = 0.01
    output_dim: int = 2
    sn_bound: float | None = None

    def __post_init__(self):
        if self.sn_bound is not None and self.sn_bound <= 0:
            raise ValidationError("sn_bound must be > 0 when set")
        if not self.hidden_dims:
            raise ValidationError("need at least one hidden layer")


@dataclass
class TrainConfig:
    epochs: int = 350
    lr_start: float = 3e-2
    lr_end: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    batch_size: int | None = None  # None = full batch
    seed: int = 0

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValidationError("need lr_start >= lr_end > 0")
        if self.seed < 0:
            raise ValidationError("seed must be >= 0")


def sample_sign_points(rng: np.random.Generator, n: int, sigma: float, flip_prob: float):
    """Draw n labeled points: y = 1{x1 > 0}, flipped with flip_prob."""
    x = rng.normal(0.0, sigma, size=(n, 2))
    y = (x[:, 0] > 0).astype(np.int64)
    flips = rng.random(n) < flip_prob
    y[flips] = 1 - y[flips]
    return x, y


def generate_sign_dataset(config: SignDatasetConfig):
    """Deterministic (x_train, y_train, x_val, y_val) for a seed."""
    rng = np.random.default_rng(config.seed)
    x_train, y_train = sample_sign_points(rng, config.n_train, config.sigma, config.flip_prob)
    x_val, y_val = sample_sign_points(rng, config.n_val, config.sigma, config.flip_prob)
    return x_train, y_train, x_val, y_val


class ResidualMlp:
    """Leaky-ReLU MLP; hidden layer l adds its input when widths match."""

    def __init__(self, spec: MlpSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        dims = [spec.input_dim] + list(spec.hidden_dims) + [spec.output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        self.residual: list[bool] = []
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
            is_output = i == len(dims) - 2
            self.residual.append((not is_output) and fan_in == fan_out)

    @property
    def n_hidden(self) -> int:
        return len(self.spec.hidden_dims)

    def _slope_mask(self, pre):
        return np.where(pre >= 0, 1.0, self.spec.negative_slope)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for a batch; with keep=True also the internals for backprop."""
        x = np.asarray(x, dtype=np.float64)
        h = x
        inputs, pres = [], []
        for i in range(self.n_hidden):
            pre = h @ self.weights[i].T + self.biases[i]
            act = np.where(pre >= 0, pre, self.spec.negative_slope * pre)
            if keep:
                inputs.append(h)
                pres.append(pre)
            h = act + h if self.residual[i] else act
        if keep:
            inputs.append(h)
        logits = h @ self.weights[-1].T + self.biases[-1]
        if keep:
            return logits, inputs, pres
        return logits

    def forward_collect(self, x: np.ndarray) -> list[tuple[int, np.ndarray]]:
        """Post-activation output of every hidden layer plus the logits.

        Entries are (layer_id, values) with ids 0..n_hidden; the last
        entry is the logits layer.
        """
        x = np.asarray(x, dtype=np.float64)
        h = x
        collected = []
        for i in range(self.n_hidden):
            pre = h @ self.weights[i].T + self.biases[i]
            act = np.where(pre >= 0, pre, self.spec.negative_slope * pre)
            h = act + h if self.residual[i] else act
            collected.append((i, h))
        collected.append((self.n_hidden, h @ self.weights[-1].T + self.biases[-1]))
        return collected

    def loss_and_grads(self, x: np.ndarray, y: np.ndarray):
        """Mean cross-entropy and gradients for every weight and bias."""
        logits, inputs, pres = self.forward(x, keep=True)
        n = x.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        loss = float(-np.mean(np.log(probs[np.arange(n), y] + 1e-300)))
        d_logits = probs.copy()
        d_logits[np.arange(n), y] -= 1.0
        d_logits /= n
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        grads_w[-1] = d_logits.T @ inputs[-1]
        grads_b[-1] = d_logits.sum(axis=0)
        d_h = d_logits @ self.weights[-1]
        for i in range(self.n_hidden - 1, -1, -1):
            d_pre = d_h * self._slope_mask(pres[i])
            grads_w[i] = d_pre.T @ inputs[i]
            grads_b[i] = d_pre.sum(axis=0)
            d_h = d_pre @ self.weights[i] + (d_h if self.residual[i] else 0.0)
        return loss, grads_w, grads_b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x).argmax(axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == y))


def spectral_norm_of(
    w: np.ndarray, rtol: float = 1e-6, max_iter: int = 10_000, seed: int = 0
) -> float:
    """Largest singular value via power iteration from a seeded start vector.

    Iterates on W^T W; the Rayleigh-quotient residual bounds the
    eigenvalue error for symmetric matrices, so the stop test cannot
    fire early even when the top singular values nearly tie.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValidationError("empty matrix")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(w.shape[1])
    norm_v = np.linalg.norm(v)
    v /= norm_v
    for _ in range(max_iter):
        bv = w.T @ (w @ v)
        lam = float(v @ bv)  # Rayleigh quotient, >= 0
        residual = float(np.linalg.norm(bv - lam * v))
        # |lam - eigenvalue| <= residual; sigma-relative tolerance rtol
        # corresponds to 2*rtol on the eigenvalue.
        if residual <= 2.0 * rtol * lam:
            return float(np.sqrt(lam))
        norm_bv = np.linalg.norm(bv)
        if norm_bv == 0.0:
            return 0.0
        v = bv / norm_bv
    raise ComputeError(f"power iteration did not converge within {max_iter} iterations")


def _apply_sn_bound(mlp: ResidualMlp, bound: float) -> None:
    for i, w in enumerate(mlp.weights):
        sigma = spectral_norm_of(w)
        if sigma > bound:
            mlp.weights[i] = w * (bound / sigma)


def cosine_lr(epoch: int, total: int, lr_start: float, lr_end: float) -> float:
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * epoch / total))


def train_mlp(
    spec: MlpSpec,
    config: TrainConfig,
    x: np.ndarray,
    y: np.ndarray,
    x_val: np.ndarray | None = None,
    y_val: np.ndarray | None = None,
) -> tuple[ResidualMlp, dict]:
    """Adam + cosine annealing on softmax cross-entropy.

    Weight decay is added to the gradients before the Adam moments.  With
    an sn_bound, every weight matrix is rescaled to the bound after each
    step.  Returns the trained network and a small history dict.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if set(np.unique(y)) - set(range(spec.output_dim)):
        raise ValidationError("labels exceed the configured output dimension")
    mlp = ResidualMlp(spec, seed=config.seed)
    params = mlp.weights + mlp.biases
    m_state = [np.zeros_like(p) for p in params]
    v_state = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed + 1)
    step = 0
    last_loss = np.nan
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr_start, config.lr_end)
        if config.batch_size is None:
            batches = [(x, y)]
        else:
            order = rng.permutation(x.shape[0])
            batches = [
                (x[order[i : i + config.batch_size]], y[order[i : i + config.batch_size]])
                for i in range(0, x.shape[0], config.batch_size)
            ]
        for bx, by in batches:
            loss, grads_w, grads_b = mlp.loss_and_grads(bx, by)
            if not np.isfinite(loss):
                raise ComputeError(f"training diverged at epoch {epoch} (loss={loss})")
            last_loss = loss
            step += 1
            grads = grads_w + grads_b
            for k, (param, grad) in enumerate(zip(params, grads)):
                grad = grad + config.weight_decay * param
                m_state[k] = config.beta1 * m_state[k] + (1 - config.beta1) * grad
                v_state[k] = config.beta2 * v_state[k] + (1 - config.beta2) * grad * grad
                m_hat = m_state[k] / (1 - config.beta1**step)
                v_hat = v_state[k] / (1 - config.beta2**step)
                param -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
            if spec.sn_bound is not None:
                _apply_sn_bound(mlp, spec.sn_bound)
    history = {"final_loss": last_loss, "epochs": config.epochs}
    if x_val is not None:
        history["val_accuracy"] = mlp.accuracy(np.asarray(x_val, dtype=np.float64), y_val)
    return mlp, history


def dump_activations(mlp: ResidualMlp, x, y, out_dir, split: str, name: str) -> Path:
    """Write every collected layer as an fc activation file plus a manifest.

    Returns the manifest path.  Values go through the storage format's
    binary32 cast.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    y = np.asarray(y).astype(np.int64)
    paths = []
    for layer_id, values in mlp.forward_collect(x):
        header = LayerRecordHeader(layer_id=layer_id, kind=KIND_FC, shape=values.shape)
        path = out_dir / f"{split}_layer{layer_id:02d}.psca"
        write_layer_file(path, header, values.astype(np.float32), y)
        paths.append(path)
    manifest = build_manifest(split, mlp.spec.output_dim, name, paths, out_dir)
    return write_manifest(out_dir / f"{split}_manifest.json", manifest)


def pca_2d(values: np.ndarray) -> np.ndarray:
    """Top-2 principal component coordinates with a deterministic sign."""
    values = np.asarray(values, dtype=np.float64)
    centered = values - values.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[: min(2, vt.shape[0])]
    for j in range(comps.shape[0]):
        nz = np.flatnonzero(comps[j])
        if nz.size and comps[j, nz[0]] < 0:
            comps[j] = -comps[j]
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return coords


_NET_MAGIC = b"PSCN"
_NET_VERSION = 1


def save_checkpoint(path, mlp: ResidualMlp) -> Path:
    """Flat binary64 weight file with a per-layer shape header."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(
            struct.pack(
                "<4sIId", _NET_MAGIC, _NET_VERSION, len(mlp.weights), mlp.spec.negative_slope
            )
        )
        for w, b, res in zip(mlp.weights, mlp.biases, mlp.residual):
            fh.write(struct.pack("<IIB", w.shape[0], w.shape[1], 1 if res else 0))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> ResidualMlp:
    path = Path(path)
    head = struct.Struct("<4sIId")
    layer_head = struct.Struct("<IIB")
    with open(path, "rb") as fh:
        magic, version, n_layers, slope = head.unpack(fh.read(head.size))
        if magic != _NET_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        if version != _NET_VERSION:
            raise ValidationError(f"{path}: unsupported checkpoint version {version}")
        weights, biases, residual = [], [], []
        for _ in range(n_layers):
            out_dim, in_dim, res = layer_head.unpack(fh.read(layer_head.size))
            w = np.fromfile(fh, dtype="<f8", count=out_dim * in_dim).reshape(out_dim, in_dim)
            b = np.fromfile(fh, dtype="<f8", count=out_dim)
            weights.append(w)
            biases.append(b)
            residual.append(bool(res))
    spec = MlpSpec(
        input_dim=weights[0].shape[1],
        hidden_dims=[w.shape[0] for w in weights[:-1]],
        negative_slope=slope,
        output_dim=weights[-1].shape[0],
    )
    mlp = ResidualMlp(spec)
    mlp.weights = weights
    mlp.biases = biases
    mlp.residual = residual
    return mlp
