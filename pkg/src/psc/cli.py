"""File-mediated pipeline CLI.

Subcommands cover the retrofit workflow end to end: `train-toy` builds
the desk-scale sign example and dumps activations, `measure-collapse`
writes per-layer collapse metrics and the candidate selection, `fit`
persists the projection and uncertainty heads, `predict` streams test
(and optionally OOD) data into a prediction CSV, `evaluate` turns that
CSV into metrics and histograms, and `all` chains
measure-collapse/fit/predict/evaluate.  Every stage persists its
artifacts under --out, so stages can be rerun or swapped independently
and reruns with the same inputs and seed are byte-identical.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from filelock import FileLock

from . import collapse as collapse_mod
from . import heads as heads_mod
from . import metrics as metrics_mod
from . import projection as projection_mod
from . import toy as toy_mod
from .errors import ComputeError, PscError, ValidationError
from .store import ActivationDataset, open_dataset

GROUP_ID_CLEAN = "iD_clean"
GROUP_ID_AMBIGUOUS = "iD_ambiguous"
GROUP_OOD = "OOD"


def _fmt(x) -> str:
    return repr(float(x))


def max_threads() -> int:
    """Parallelism cap from PSC_THREADS (default 1)."""
    raw = os.environ.get("PSC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"PSC_THREADS must be an integer, got {raw!r}")


@dataclass
class RunConfig:
    """Pipeline configuration; paths resolve relative to the config file."""

    train_manifest: str | None = None
    val_manifest: str | None = None
    test_manifest: str | None = None
    ood_manifest: str | None = None
    ambiguous_manifest: str | None = None
    epsilon: float = collapse_mod.DEFAULT_EPSILON
    near_band: float = collapse_mod.DEFAULT_NEAR_BAND
    dims: str = "auto"
    head: str = "both"
    lambda_grid: list[float] | None = None
    lam: float | None = None
    pca_dim: int | None = None
    tau: float | str = heads_mod.DEFAULT_TAU  # number, or "auto" for NLL selection
    mc_samples: int = heads_mod.DEFAULT_MC_SAMPLES
    seed: int = 0
    batch_size: int = 1024
    ece_bins: int = metrics_mod.DEFAULT_ECE_BINS
    histogram_bins: int = metrics_mod.DEFAULT_HISTOGRAM_BINS
    drift: float = 0.05
    layer: list[int] | None = None

    @staticmethod
    def load(path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"--config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid config JSON ({exc})")
        known = {f.name for f in fields(RunConfig)} | {"lambda"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"{path}: unknown config keys {unknown}")
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        cfg = RunConfig(**doc)
        base = path.parent
        for name in (
            "train_manifest",
            "val_manifest",
            "test_manifest",
            "ood_manifest",
            "ambiguous_manifest",
        ):
            value = getattr(cfg, name)
            if value is not None:
                setattr(cfg, name, str((base / value).resolve()))
        return cfg

    def require(self, name: str, flag: str) -> str:
        value = getattr(self, name)
        if value is None:
            raise ValidationError(
                f"{flag} is required (set config key {name!r} or pass the flag)"
            )
        return value


def _parse_dims(text: str) -> tuple[int, int] | None:
    if text == "auto":
        return None
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ValidationError(f"--dims must be CxD or 'auto', got {text!r}")
    try:
        c, d = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValidationError(f"--dims must be CxD or 'auto', got {text!r}")
    return c, d


def _heads_requested(head: str) -> set[str]:
    if head not in {"gda", "laplace", "both"}:
        raise ValidationError(f"--head must be gda, laplace, or both, got {head!r}")
    return {"gda", "laplace"} if head == "both" else {head}


def _open_split(cfg: RunConfig, name: str, flag: str) -> ActivationDataset:
    return open_dataset(cfg.require(name, flag))


def _zipped_batches(dataset: ActivationDataset, layer_ids, batch_size):
    iterators = [dataset.read_batches(layer_id, batch_size) for layer_id in layer_ids]
    for group in zip(*iterators):
        yield list(group)


def _stacked_stream(dataset, layer_ids, batch_size):
    for group in _zipped_batches(dataset, layer_ids, batch_size):
        yield projection_mod.reshape_concat(group)


def _load_stacked(dataset, layer_ids, batch_size) -> np.ndarray:
    return np.concatenate(list(_stacked_stream(dataset, layer_ids, batch_size)), axis=0)


# ---------------------------------------------------------------------------
# Subcommand bodies
# ---------------------------------------------------------------------------


def cmd_measure_collapse(cfg: RunConfig, out: Path) -> None:
    train = _open_split(cfg, "train_manifest", "--train manifest")
    val = _open_split(cfg, "val_manifest", "--val manifest")
    report = collapse_mod.scan_layers(
        train, val, batch_size=cfg.batch_size, epsilon=cfg.epsilon, near_band=cfg.near_band
    )
    (out / "collapse.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "candidate.json").write_text(report.to_json(), encoding="utf-8")
    flag = " (all layers collapsed)" if report.all_collapsed else ""
    print(f"candidate layer(s): {report.candidate_layers}{flag}")


def _candidate_layers(cfg: RunConfig, out: Path) -> list[int]:
    if cfg.layer:
        return sorted(cfg.layer)
    candidate_path = out / "candidate.json"
    if not candidate_path.is_file():
        raise ValidationError(
            "no candidate selection found; run measure-collapse first or force one "
            "with --layer"
        )
    report = collapse_mod.CollapseReport.from_json(candidate_path.read_text(encoding="utf-8"))
    return report.candidate_layers


def cmd_fit(cfg: RunConfig, out: Path) -> None:
    train = _open_split(cfg, "train_manifest", "--train manifest")
    val = _open_split(cfg, "val_manifest", "--val manifest")
    layer_ids = _candidate_layers(cfg, out)
    for layer_id in layer_ids:
        train.header(layer_id)
        val.header(layer_id)
    kinds = {train.header(layer_id).kind for layer_id in layer_ids}

    moments = projection_mod.compute_channel_moments(
        lambda: _stacked_stream(train, layer_ids, cfg.batch_size)
    )
    stacked_train = _load_stacked(train, layer_ids, cfg.batch_size)
    stacked_val = _load_stacked(val, layer_ids, cfg.batch_size)
    std_train = projection_mod.standardize(stacked_train, moments.mean, moments.std())
    std_val = projection_mod.standardize(stacked_val, moments.mean, moments.std())
    flat_train = std_train.reshape(std_train.shape[0], -1)
    flat_val = std_val.reshape(std_val.shape[0], -1)
    nc1_before = collapse_mod.nc1(flat_train, train.labels, class_count=train.class_count)
    nc4_before = collapse_mod.nc4(flat_train, train.labels, flat_val, val.labels)

    dims = _parse_dims(cfg.dims)
    sweep = None
    if dims is None:
        proj, sweep = projection_mod.auto_select_dims(
            std_train, train.labels, std_val, val.labels, moments, drift=cfg.drift
        )
    else:
        proj = projection_mod.fit_projection(moments, dims[0], dims[1])

    z_train = projection_mod.project(std_train, proj)
    z_val = projection_mod.project(std_val, proj)
    nc1_after = collapse_mod.nc1(z_train, train.labels, class_count=train.class_count)
    nc4_after = collapse_mod.nc4(z_train, train.labels, z_val, val.labels)
    projection_mod.attach_output_moments(proj, z_train)
    projection_mod.save_projection(out / "projection.pscp", proj)

    wanted = _heads_requested(cfg.head)
    report = {
        "candidate_layers": layer_ids,
        "layer_kind": kinds.pop(),
        "channels": proj.channels,
        "dim": proj.dim,
        "c_proj": proj.c_proj,
        "d_proj": proj.d_proj,
        "heads": sorted(wanted),
        "pca_dim": cfg.pca_dim,
        "tau": None,
        "tau_sweep": None,
        "lambda": None,
        "nc1_before": nc1_before,
        "nc1_after": nc1_after,
        "nc4_before": nc4_before,
        "nc4_after": nc4_after,
        "sweep": sweep,
    }
    if "gda" in wanted:
        gda = heads_mod.fit_gda(
            z_train,
            train.labels,
            lam_grid=cfg.lambda_grid,
            lam=cfg.lam,
            class_count=train.class_count,
            seed=cfg.seed,
            pca_dim=cfg.pca_dim,
        )
        heads_mod.save_gda(out / "gda.pscg", gda)
        report["lambda"] = gda.lam
    if "laplace" in wanted:
        z_train_scaled = projection_mod.project(std_train, proj, scale_output=True)
        tau = cfg.tau
        if tau == "auto":
            z_val_scaled = projection_mod.project(std_val, proj, scale_output=True)
            tau, tau_sweep = heads_mod.select_tau(
                z_train_scaled,
                train.labels,
                z_val_scaled,
                val.labels,
                class_count=train.class_count,
                mc_samples=cfg.mc_samples,
                seed=cfg.seed,
            )
            report["tau_sweep"] = tau_sweep
        elif not isinstance(tau, (int, float)) or tau <= 0:
            raise ValidationError(f"tau must be a positive number or 'auto', got {cfg.tau!r}")
        report["tau"] = tau
        weights = heads_mod.train_linear_map(
            z_train_scaled, train.labels, tau=tau, class_count=train.class_count
        )
        laplace = heads_mod.fit_laplace(
            z_train_scaled,
            train.labels,
            weights,
            tau=tau,
            mc_samples=cfg.mc_samples,
            seed=cfg.seed,
        )
        heads_mod.save_laplace(out / "laplace.pscl", laplace)
    (out / "fit_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"fitted projection {proj.c_proj}x{proj.d_proj} on layers {layer_ids} "
        f"(nc1 {nc1_before:.4f}->{nc1_after:.4f}, nc4 {nc4_before:.4f}->{nc4_after:.4f})"
    )


def _predict_rows(
    dataset: ActivationDataset,
    group: str,
    layer_ids,
    proj,
    gda,
    laplace,
    cfg: RunConfig,
    start_index: int,
    threads: int,
) -> list[str]:
    rows = []
    index = start_index
    for group_batches in _zipped_batches(dataset, layer_ids, cfg.batch_size):
        stacked = projection_mod.reshape_concat(group_batches)
        labels = group_batches[0].labels
        z_plain = projection_mod.process_pipeline(stacked, proj)
        if gda is not None:
            log_density = heads_mod.gda_log_density(gda, z_plain)
        else:
            log_density = np.full(z_plain.shape[0], np.nan)
        if laplace is not None:
            z_scaled = projection_mod.process_pipeline(stacked, proj, scale_output=True)
            probs = _predict_parallel(laplace, z_scaled, cfg, index, threads)
        else:
            probs = heads_mod.gda_posterior(gda, z_plain)
        entropy = heads_mod.predictive_entropy(probs)
        preds = probs.argmax(axis=1)
        for i in range(z_plain.shape[0]):
            prob_cells = ",".join(_fmt(p) for p in probs[i])
            rows.append(
                f"{index + i},{int(labels[i])},{int(preds[i])},{_fmt(log_density[i])},"
                f"{_fmt(entropy[i])},{prob_cells},{group}"
            )
        index += z_plain.shape[0]
    return rows


def _predict_parallel(laplace, z_scaled, cfg: RunConfig, index_offset: int, threads: int):
    if threads <= 1 or z_scaled.shape[0] < 2 * threads:
        return heads_mod.predict_probabilities(
            laplace, z_scaled, mc_samples=cfg.mc_samples, seed=cfg.seed, index_offset=index_offset
        )
    chunks = np.array_split(np.arange(z_scaled.shape[0]), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [
            pool.submit(
                heads_mod.predict_probabilities,
                laplace,
                z_scaled[chunk],
                cfg.mc_samples,
                cfg.seed,
                index_offset + int(chunk[0]),
            )
            for chunk in chunks
            if chunk.size
        ]
        return np.concatenate([f.result() for f in futures], axis=0)


def cmd_predict(cfg: RunConfig, out: Path) -> None:
    report_path = out / "fit_report.json"
    if not report_path.is_file():
        raise ValidationError("fit_report.json not found; run fit first")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    layer_ids = [int(i) for i in report["candidate_layers"]]
    proj = projection_mod.load_projection(out / "projection.pscp")
    active = _heads_requested(cfg.head) & set(report["heads"])
    if not active:
        raise ValidationError(
            f"--head {cfg.head!r} requests none of the fitted heads {report['heads']}"
        )
    gda = laplace = None
    if "gda" in active:
        gda = heads_mod.load_gda(out / "gda.pscg")
    if "laplace" in active:
        laplace = heads_mod.load_laplace(out / "laplace.pscl")
    class_count = laplace.class_count if laplace is not None else gda.class_count
    threads = max_threads()

    splits = [("test_manifest", GROUP_ID_CLEAN, True)]
    if cfg.ambiguous_manifest is not None:
        splits.append(("ambiguous_manifest", GROUP_ID_AMBIGUOUS, False))
    if cfg.ood_manifest is not None:
        splits.append(("ood_manifest", GROUP_OOD, False))
    header = ["sample_id", "label", "pred", "log_density", "entropy"]
    header += [f"p_{c}" for c in range(class_count)]
    header.append("group")
    rows = [",".join(header)]
    index = 0
    for name, group, required in splits:
        if required:
            dataset = _open_split(cfg, name, "--test manifest")
        else:
            dataset = open_dataset(getattr(cfg, name))
        body = _predict_rows(
            dataset, group, layer_ids, proj, gda, laplace, cfg, index, threads
        )
        rows.extend(body)
        index += len(body)
    (out / "predictions.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {index} predictions")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    pred_path = out / "predictions.csv"
    if not pred_path.is_file():
        raise ValidationError("predictions.csv not found; run predict first")
    with open(pred_path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    prob_cols = [i for i, name in enumerate(header) if name.startswith("p_")]
    col = {name: i for i, name in enumerate(header)}
    labels, preds, densities, entropies, probs, groups = [], [], [], [], [], []
    for line in lines[1:]:
        cells = line.split(",")
        labels.append(int(cells[col["label"]]))
        preds.append(int(cells[col["pred"]]))
        densities.append(float(cells[col["log_density"]]))
        entropies.append(float(cells[col["entropy"]]))
        probs.append([float(cells[i]) for i in prob_cols])
        groups.append(cells[col["group"]])
    labels = np.array(labels)
    preds = np.array(preds)
    densities = np.array(densities)
    entropies = np.array(entropies)
    probs = np.array(probs)
    groups = np.array(groups)

    id_mask = (groups == GROUP_ID_CLEAN) | (groups == GROUP_ID_AMBIGUOUS)
    ood_mask = groups == GROUP_OOD
    if not id_mask.any():
        raise ValidationError("predictions.csv contains no in-distribution rows")
    results: dict[str, float | int] = {
        "n_id": int(id_mask.sum()),
        "n_ood": int(ood_mask.sum()),
    }
    results["accuracy"] = float(np.mean(preds[id_mask] == labels[id_mask]))
    nll, _ = metrics_mod.nll_accuracy(probs[id_mask], labels[id_mask])
    results["nll"] = nll
    results["ece"] = metrics_mod.ece(probs[id_mask], labels[id_mask], cfg.ece_bins)
    if ood_mask.any():
        if np.isfinite(densities[id_mask]).all() and np.isfinite(densities[ood_mask]).all():
            results["auroc_id_ood"] = metrics_mod.auroc(densities[id_mask], densities[ood_mask])
        else:
            print("notice: log-density unavailable; skipping auroc_id_ood")
    else:
        print("notice: no OOD rows; auroc_id_ood omitted")
    ambig_mask = groups == GROUP_ID_AMBIGUOUS
    clean_mask = groups == GROUP_ID_CLEAN
    if ambig_mask.any() and clean_mask.any():
        results["auroc_id_ambig"] = metrics_mod.auroc(
            entropies[ambig_mask], entropies[clean_mask]
        )
    (out / "metrics.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    present = [g for g in (GROUP_ID_CLEAN, GROUP_ID_AMBIGUOUS, GROUP_OOD) if (groups == g).any()]
    edges, counts = metrics_mod.entropy_histogram(
        {g: entropies[groups == g] for g in present}, cfg.histogram_bins
    )
    (out / "histogram.csv").write_text(
        metrics_mod.histogram_csv(edges, counts), encoding="utf-8"
    )
    if np.isfinite(densities).all():
        edges_d, counts_d = metrics_mod.entropy_histogram(
            {g: densities[groups == g] for g in present}, cfg.histogram_bins
        )
        (out / "density_histogram.csv").write_text(
            metrics_mod.histogram_csv(edges_d, counts_d), encoding="utf-8"
        )
    summary = ", ".join(f"{k}={results[k]:.4g}" for k in sorted(results))
    print(f"metrics: {summary}")


def cmd_train_toy(args, out: Path) -> None:
    doc = {}
    if args.config is not None:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ValidationError(f"--config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid config JSON ({exc})")
    dataset_cfg = toy_mod.SignDatasetConfig(**doc.get("dataset", {}))
    spec = toy_mod.MlpSpec(**doc.get("network", {}))
    train_cfg = toy_mod.TrainConfig(**doc.get("training", {}))
    if args.seed is not None:
        if args.seed < 0:
            raise ValidationError("--seed must be >= 0")
        dataset_cfg.seed = args.seed
        train_cfg.seed = args.seed
    n_test = int(doc.get("n_test", dataset_cfg.n_val))
    n_ood = int(doc.get("n_ood", dataset_cfg.n_val))
    shift = float(doc.get("ood_shift_sigmas", 6.0))
    name = doc.get("name", "sign-example")

    rng = np.random.default_rng(dataset_cfg.seed)
    x_train, y_train = toy_mod.sample_sign_points(
        rng, dataset_cfg.n_train, dataset_cfg.sigma, dataset_cfg.flip_prob
    )
    x_val, y_val = toy_mod.sample_sign_points(
        rng, dataset_cfg.n_val, dataset_cfg.sigma, dataset_cfg.flip_prob
    )
    x_test, y_test = toy_mod.sample_sign_points(
        rng, n_test, dataset_cfg.sigma, dataset_cfg.flip_prob
    )
    x_ood, y_ood = toy_mod.sample_sign_points(rng, n_ood, dataset_cfg.sigma, dataset_cfg.flip_prob)
    x_ood = x_ood + np.array([0.0, shift * dataset_cfg.sigma])

    mlp, history = toy_mod.train_mlp(spec, train_cfg, x_train, y_train, x_val, y_val)
    toy_mod.save_checkpoint(out / "network.pscn", mlp)
    for split, x, y in (
        ("train", x_train, y_train),
        ("val", x_val, y_val),
        ("test", x_test, y_test),
        ("ood", x_ood, y_ood),
    ):
        toy_mod.dump_activations(mlp, x, y, out, split, name)
    report = {
        "val_accuracy": history.get("val_accuracy"),
        "final_loss": history["final_loss"],
        "sn_bound": spec.sn_bound,
        "spectral_norms": [toy_mod.spectral_norm_of(w) for w in mlp.weights],
        "ood_shift_sigmas": shift,
        "seed": dataset_cfg.seed,
    }
    (out / "train_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if args.pca_report:
        lines = ["layer_id,sample_id,pc1,pc2,label"]
        for layer_id, values in mlp.forward_collect(x_train):
            coords = toy_mod.pca_2d(values)
            for i in range(coords.shape[0]):
                lines.append(
                    f"{layer_id},{i},{_fmt(coords[i, 0])},{_fmt(coords[i, 1])},{int(y_train[i])}"
                )
        (out / "pca.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    run_cfg = {
        "train_manifest": "train_manifest.json",
        "val_manifest": "val_manifest.json",
        "test_manifest": "test_manifest.json",
        "ood_manifest": "ood_manifest.json",
        "seed": dataset_cfg.seed,
    }
    (out / "run_config.json").write_text(
        json.dumps(run_cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    print(
        f"trained toy network (val accuracy {history.get('val_accuracy', float('nan')):.4f}); "
        f"activations and run_config.json under {out}"
    )


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True) -> None:
    parser.add_argument("--config", required=needs_config, help="run configuration JSON")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psc",
        description="Retrofit probabilistic skip connections onto a frozen classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the sign-example network and dump activations")
    p.add_argument("--config", default=None, help="toy configuration JSON (optional)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pca-report", action="store_true", help="emit per-layer 2-D PCA coordinates")

    p = sub.add_parser("measure-collapse", help="per-layer collapse metrics + candidate selection")
    _add_common(p)

    p = sub.add_parser("fit", help="fit projection and uncertainty heads")
    _add_common(p)
    p.add_argument("--layer", type=int, action="append", default=None, help="force candidate layer")
    p.add_argument("--dims", default=None, help="projection dims CxD, or 'auto'")
    p.add_argument("--head", default=None, choices=["gda", "laplace", "both"])

    p = sub.add_parser("predict", help="stream test/OOD manifests into predictions.csv")
    _add_common(p)
    p.add_argument("--head", default=None, choices=["gda", "laplace", "both"])

    p = sub.add_parser("evaluate", help="metrics.json + histogram.csv from predictions.csv")
    _add_common(p)

    p = sub.add_parser("all", help="measure-collapse, fit, predict, evaluate in order")
    _add_common(p)
    p.add_argument("--layer", type=int, action="append", default=None)
    p.add_argument("--dims", default=None)
    p.add_argument("--head", default=None, choices=["gda", "laplace", "both"])

    return parser


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "layer", None):
        cfg.layer = list(args.layer)
    if getattr(args, "dims", None) is not None:
        cfg.dims = args.dims
    if getattr(args, "head", None) is not None:
        cfg.head = args.head
    if cfg.seed < 0:
        raise ValidationError("--seed must be >= 0")
    _parse_dims(cfg.dims)
    _heads_requested(cfg.head)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(out / ".psc.lock"):
            if args.command == "train-toy":
                cmd_train_toy(args, out)
                return 0
            cfg = _config_from_args(args)
            if args.command == "measure-collapse":
                cmd_measure_collapse(cfg, out)
            elif args.command == "fit":
                cmd_fit(cfg, out)
            elif args.command == "predict":
                cmd_predict(cfg, out)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, out)
            elif args.command == "all":
                cmd_measure_collapse(cfg, out)
                cmd_fit(cfg, out)
                cmd_predict(cfg, out)
                cmd_evaluate(cfg, out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ComputeError as exc:
        print(f"compute error: {exc}", file=sys.stderr)
        return 3
    except PscError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
