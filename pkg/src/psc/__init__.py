"""Probabilistic skip connections for frozen classifiers.

Retrofit pipeline: pick an intermediate layer by its collapse/accuracy
trade-off, reduce its activations with a channelwise Tucker projection,
and fit distance-aware uncertainty heads (Gaussian discriminant density
for OOD scoring, a Laplace-approximated linear head for in-distribution
probabilities) without touching the host network.
"""

from .collapse import (
    CollapseReport,
    LayerCollapse,
    nc1,
    nc4,
    scan_layers,
    select_candidate,
)
from .errors import ComputeError, PscError, ValidationError
from .heads import (
    GdaModel,
    LaplaceLinearModel,
    UncertaintyOutput,
    assess,
    fit_gda,
    fit_laplace,
    gda_log_density,
    gda_posterior,
    predict_probabilities,
    predictive_entropy,
    select_tau,
    train_linear_map,
)
from .metrics import auroc, ece, entropy_histogram, nll_accuracy
from .projection import (
    ChannelMoments,
    TuckerProjection,
    compute_channel_moments,
    covariance_to_correlation,
    fit_projection,
    fit_tucker,
    process_pipeline,
    project,
    reshape_concat,
    standardize,
)
from .store import (
    ActivationBatch,
    ActivationDataset,
    DatasetManifest,
    LayerRecordHeader,
    open_dataset,
    read_layer_file,
    write_layer_file,
)
from .toy import (
    MlpSpec,
    ResidualMlp,
    SignDatasetConfig,
    TrainConfig,
    generate_sign_dataset,
    spectral_norm_of,
    train_mlp,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationBatch",
    "ActivationDataset",
    "ChannelMoments",
    "CollapseReport",
    "ComputeError",
    "DatasetManifest",
    "GdaModel",
    "LaplaceLinearModel",
    "LayerCollapse",
    "LayerRecordHeader",
    "MlpSpec",
    "PscError",
    "ResidualMlp",
    "SignDatasetConfig",
    "TrainConfig",
    "TuckerProjection",
    "UncertaintyOutput",
    "ValidationError",
    "assess",
    "auroc",
    "compute_channel_moments",
    "covariance_to_correlation",
    "ece",
    "entropy_histogram",
    "fit_gda",
    "fit_laplace",
    "fit_projection",
    "fit_tucker",
    "gda_log_density",
    "gda_posterior",
    "generate_sign_dataset",
    "nc1",
    "nc4",
    "nll_accuracy",
    "open_dataset",
    "predict_probabilities",
    "predictive_entropy",
    "process_pipeline",
    "project",
    "read_layer_file",
    "reshape_concat",
    "scan_layers",
    "select_candidate",
    "select_tau",
    "spectral_norm_of",
    "standardize",
    "train_linear_map",
    "train_mlp",
    "write_layer_file",
]
