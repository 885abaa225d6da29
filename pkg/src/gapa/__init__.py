"""Post-hoc uncertainty quantification for feedforward regression networks.

Attaches an independent 1-D Gaussian process to every first-hidden-layer
neuron of a pre-trained network (prior mean = the neuron's activation, so
predictions never move), propagates the GP variance to the output in
closed form, and calibrates it either with a two-parameter affine map or
by gradient-based variational training.  Predictions are scored with NLL,
CRPS, and centered-quantile coverage error.
"""

from .backbone import (
    Activation,
    BackboneNetwork,
    LayerSpec,
    TrainConfig,
    forward,
    load_network,
    save_network,
    train_backbone,
)
from .calibrate import (
    FreeFitResult,
    TrainLog,
    VariationalConfig,
    VariationalFitResult,
    fit_free,
    fit_variational,
    gaussian_nll,
    grad_check,
    nll,
)
from .dataio import (
    Dataset,
    SplitSpec,
    Standardizer,
    apply_standardizer,
    fit_standardizer,
    invert_target,
    load_csv,
    make_toy_gap,
    save_csv,
    split,
)
from .errors import (
    ConfigurationError,
    DomainError,
    GapaError,
    IngestionError,
    NotPositiveDefiniteError,
    NumericalConsistencyError,
    PersistenceError,
    ShapeError,
    TrainingError,
)
from .gpact import (
    FreeCalibration,
    GapaLayerState,
    GapaModel,
    GapaState,
    NeuronGP,
    RbfParams,
    VariationalCalibration,
    fit_gapa_layer,
    load_gapa,
    posterior_mean,
    posterior_var,
    save_gapa,
    select_inducing,
    variational_var,
)
from .metrics import MetricsReport, cqm, crps_gaussian, evaluate
from .propagate import (
    GaussianState,
    PredictiveDistribution,
    delta_push,
    gapa_forward,
    linear_push,
    mc_oracle,
    predict_rows,
)

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "BackboneNetwork",
    "ConfigurationError",
    "Dataset",
    "DomainError",
    "FreeCalibration",
    "FreeFitResult",
    "GapaError",
    "GapaLayerState",
    "GapaModel",
    "GapaState",
    "GaussianState",
    "IngestionError",
    "LayerSpec",
    "MetricsReport",
    "NeuronGP",
    "NotPositiveDefiniteError",
    "NumericalConsistencyError",
    "PersistenceError",
    "PredictiveDistribution",
    "RbfParams",
    "ShapeError",
    "SplitSpec",
    "Standardizer",
    "TrainConfig",
    "TrainLog",
    "TrainingError",
    "VariationalCalibration",
    "VariationalConfig",
    "VariationalFitResult",
    "apply_standardizer",
    "cqm",
    "crps_gaussian",
    "delta_push",
    "evaluate",
    "fit_free",
    "fit_gapa_layer",
    "fit_standardizer",
    "fit_variational",
    "forward",
    "gapa_forward",
    "gaussian_nll",
    "grad_check",
    "invert_target",
    "linear_push",
    "load_csv",
    "load_gapa",
    "load_network",
    "make_toy_gap",
    "mc_oracle",
    "nll",
    "posterior_mean",
    "posterior_var",
    "predict_rows",
    "save_csv",
    "save_gapa",
    "save_network",
    "select_inducing",
    "split",
    "train_backbone",
    "variational_var",
]
