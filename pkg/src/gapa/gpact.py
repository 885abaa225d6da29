"""Per-neuron one-dimensional Gaussian processes on first-layer
pre-activations.

Each neuron of the first hidden layer gets an independent GP whose prior
mean is the neuron's own activation function, so the mean prediction of the
wrapped network is preserved exactly; only the posterior covariance carries
information.  Inducing inputs are chosen from the empirical CDF of the
neuron's pre-activation values, and the RBF hyperparameters come from cheap
empirical rules: the lengthscale is the 25th percentile of pairwise inducing
distances and the output scale is ``max(1, Var(activations))``.

Two variance flavours are served from the same cached Cholesky factor of
``K(Z,Z) + noise*I``:

* posterior: ``k(x,x) - k(x,Z) K^-1 k(Z,x)``
* variational: the posterior plus ``k(x,Z) K^-1 S K^-1 k(Z,x)`` with
  ``S = L_S L_S^T`` a learned covariance factor.
"""

from __future__ import annotations

import concurrent.futures
import enum
import os
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

from . import linalg, persist
from .backbone import Activation, BackboneNetwork, activation_apply
from .dataio import Dataset
from .errors import (
    ConfigurationError,
    NumericalConsistencyError,
    PersistenceError,
)

__all__ = [
    "DEFAULT_INDUCING_COUNT",
    "DEFAULT_NOISE",
    "DEFAULT_SUBSAMPLE",
    "FreeCalibration",
    "GapaFile",
    "GapaLayerState",
    "GapaModel",
    "GapaState",
    "NeuronGP",
    "RbfParams",
    "VARIANCE_FLOOR",
    "VariationalCalibration",
    "fit_empirical_kernel",
    "fit_gapa_layer",
    "load_gapa",
    "posterior_mean",
    "posterior_var",
    "posterior_var_batch",
    "rbf_kernel",
    "rbf_matrix",
    "save_gapa",
    "select_inducing",
    "variational_var",
    "variational_var_batch",
    "worker_count",
]

GAPA_FORMAT_VERSION = "gapa.state/1"

DEFAULT_NOISE = 1e-6
DEFAULT_INDUCING_COUNT = 32
DEFAULT_SUBSAMPLE = 2048

#: Smallest variance (standardized units) any calibrated prediction may carry.
VARIANCE_FLOOR = 1e-8

#: Variances above this (scaled) negative threshold are clamped to zero;
#: anything more negative indicates a logic error rather than round-off.
NEGATIVE_VARIANCE_TOL = 1e-10


def worker_count() -> int:
    """Worker cap from the GAPA_THREADS environment variable (default 1)."""
    raw = os.environ.get("GAPA_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RbfParams:
    """RBF kernel hyperparameters: k(x,x') = outputscale * exp(-(x-x')^2 / (2 lengthscale^2))."""

    lengthscale: float
    outputscale: float
    noise: float

    def __post_init__(self) -> None:
        ok = (
            np.isfinite(self.lengthscale)
            and np.isfinite(self.outputscale)
            and np.isfinite(self.noise)
            and self.lengthscale > 0.0
            and self.outputscale > 0.0
            and self.noise >= 0.0
        )
        if not ok:
            raise ConfigurationError(f"invalid RBF parameters {self}")


def rbf_kernel(params: RbfParams, x: float, x_other: float) -> float:
    """Kernel value between two scalar inputs."""
    d = x - x_other
    return float(params.outputscale * np.exp(-(d * d) / (2.0 * params.lengthscale**2)))


def rbf_matrix(params: RbfParams, a, b) -> NDArray[np.float64]:
    """Cross-kernel matrix between two 1-D point sets."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a[:, None] - b[None, :]
    return params.outputscale * np.exp(-(d * d) / (2.0 * params.lengthscale**2))


def select_inducing(values, m: int) -> NDArray[np.float64]:
    """Pick inducing inputs from the empirical CDF of ``values``.

    The minimum and maximum are always kept; the remaining ``m - 2`` picks
    are the sorted values whose empirical CDF ``i/N`` is closest to the
    levels ``(j+1)/(m-1)`` for ``j = 1..m-2`` (ties to the smaller index).
    The final set is deduplicated, so it can be shorter than ``m``.
    """
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ConfigurationError("cannot select inducing inputs from an empty sample")
    if m < 2:
        raise ConfigurationError(f"need at least 2 inducing inputs, got m={m}")
    xs = np.sort(values)
    n = xs.size
    cdf = np.arange(1, n + 1) / n
    picks = [xs[0]]
    for j in range(1, m - 1):
        level = (j + 1) / (m - 1)
        picks.append(xs[int(np.argmin(np.abs(cdf - level)))])
    picks.append(xs[-1])
    return np.unique(picks)


def fit_empirical_kernel(inducing, train_activations, noise: float = DEFAULT_NOISE) -> RbfParams:
    """Empirical RBF hyperparameters for one neuron.

    Lengthscale: 0.25-quantile (linear interpolation) of the pairwise
    distances among inducing inputs, falling back to 1 when there are no
    positive distances.  Output scale: ``max(1, Var(train_activations))``
    with the population variance convention.
    """
    z = np.asarray(inducing, dtype=float)
    acts = np.asarray(train_activations, dtype=float)
    if z.size >= 2:
        iu = np.triu_indices(z.size, k=1)
        dists = np.abs(z[:, None] - z[None, :])[iu]
        lengthscale = float(np.quantile(dists, 0.25))
        if lengthscale <= 0.0:
            lengthscale = 1.0
    else:
        lengthscale = 1.0
    outputscale = max(1.0, float(np.var(acts))) if acts.size else 1.0
    return RbfParams(lengthscale=lengthscale, outputscale=outputscale, noise=noise)


@dataclass(frozen=True)
class NeuronGP:
    """One neuron's fitted GP state.

    ``gram_factor`` caches the Cholesky factor of ``K(Z,Z) + noise*I``;
    ``variational_factor`` (when present) is the lower-triangular ``L_S``
    with ``S = L_S L_S^T``.
    """

    inducing: NDArray[np.float64]
    kernel: RbfParams
    gram_factor: linalg.CholeskyFactor
    activation: Activation
    variational_factor: NDArray[np.float64] | None = None

    def __post_init__(self) -> None:
        z = np.asarray(self.inducing, dtype=float)
        if z.ndim != 1 or z.size == 0:
            raise ConfigurationError("inducing inputs must be a non-empty 1-D sequence")
        if np.any(np.diff(z) <= 0.0):
            raise ConfigurationError("inducing inputs must be strictly increasing")
        if self.gram_factor.n != z.size:
            raise ConfigurationError("gram factor size does not match the inducing count")
        if self.variational_factor is not None:
            ls = np.asarray(self.variational_factor, dtype=float)
            if ls.shape != (z.size, z.size):
                raise ConfigurationError("variational factor must be M x M")
            if np.any(np.triu(ls, k=1) != 0.0):
                raise ConfigurationError("variational factor must be lower-triangular")
            object.__setattr__(self, "variational_factor", ls)
        object.__setattr__(self, "inducing", z)

    @property
    def m(self) -> int:
        return self.inducing.size


def posterior_mean(neuron: NeuronGP, x):
    """The GP posterior mean, which is the neuron's original activation.

    The GP is conditioned on noise-free activation values with the
    activation itself as prior mean, so the training residuals vanish and
    the correction term is identically zero for every input.
    """
    x = np.asarray(x, dtype=float)
    out = activation_apply(neuron.activation, x)
    return float(out) if out.ndim == 0 else out


def _clamp_variance(v: NDArray[np.float64], outputscale: float) -> NDArray[np.float64]:
    threshold = -NEGATIVE_VARIANCE_TOL * max(1.0, outputscale)
    worst = float(v.min()) if v.size else 0.0
    if worst < threshold:
        raise NumericalConsistencyError(
            f"variance {worst:.3e} below the round-off threshold {threshold:.3e}"
        )
    return np.maximum(v, 0.0)


def posterior_var_batch(neuron: NeuronGP, xs) -> NDArray[np.float64]:
    """Posterior variance ``k(x,x) - k(x,Z) K^-1 k(Z,x)`` at each input."""
    xs = np.asarray(xs, dtype=float)
    kzx = rbf_matrix(neuron.kernel, neuron.inducing, xs)
    w = solve_triangular(neuron.gram_factor.lower, kzx, lower=True)
    v = neuron.kernel.outputscale - np.sum(w * w, axis=0)
    return _clamp_variance(v, neuron.kernel.outputscale)


def posterior_var(neuron: NeuronGP, x: float) -> float:
    return float(posterior_var_batch(neuron, [x])[0])


def variational_var_batch(neuron: NeuronGP, xs) -> NDArray[np.float64]:
    """Variational predictive variance at each input.

    Adds ``k(x,Z) K^-1 S K^-1 k(Z,x)`` to the posterior variance; the term
    is evaluated as a squared norm so it is nonnegative by construction.
    """
    if neuron.variational_factor is None:
        raise ConfigurationError("neuron carries no variational factor")
    xs = np.asarray(xs, dtype=float)
    kzx = rbf_matrix(neuron.kernel, neuron.inducing, xs)
    lower = neuron.gram_factor.lower
    w = solve_triangular(lower, kzx, lower=True)
    a = solve_triangular(lower.T, w, lower=False)
    u = neuron.variational_factor.T @ a
    v = neuron.kernel.outputscale - np.sum(w * w, axis=0) + np.sum(u * u, axis=0)
    return _clamp_variance(v, neuron.kernel.outputscale)


def variational_var(neuron: NeuronGP, x: float) -> float:
    return float(variational_var_batch(neuron, [x])[0])


@dataclass(frozen=True)
class GapaLayerState:
    """Independent per-neuron GPs attached to one layer (the first)."""

    neurons: tuple[NeuronGP, ...]
    layer_index: int = 1

    def __post_init__(self) -> None:
        if not self.neurons:
            raise ConfigurationError("layer state needs at least one neuron")
        object.__setattr__(self, "neurons", tuple(self.neurons))

    @property
    def width(self) -> int:
        return len(self.neurons)


def _fit_neuron(
    pre_activations: NDArray[np.float64],
    activation: Activation,
    m: int,
    noise: float,
) -> NeuronGP:
    inducing = select_inducing(pre_activations, m)
    targets = activation_apply(activation, pre_activations)
    params = fit_empirical_kernel(inducing, targets, noise)
    gram = rbf_matrix(params, inducing, inducing) + params.noise * np.eye(inducing.size)
    factor = linalg.cholesky(gram)
    return NeuronGP(inducing=inducing, kernel=params, gram_factor=factor, activation=activation)


def fit_gapa_layer(
    net: BackboneNetwork,
    train: Dataset,
    m: int = DEFAULT_INDUCING_COUNT,
    subsample: int = DEFAULT_SUBSAMPLE,
    noise: float = DEFAULT_NOISE,
    seed: int = 0,
) -> GapaLayerState:
    """Fit one GP per first-layer neuron on a seeded training subsample.

    Fitting is independent per neuron, so the result depends only on the
    data, seed, and configuration; with GAPA_THREADS > 1 the neurons are
    fitted concurrently without changing the outcome.
    """
    if m < 2:
        raise ConfigurationError(f"need at least 2 inducing inputs, got m={m}")
    if subsample < 1:
        raise ConfigurationError(f"subsample must be positive, got {subsample}")
    if train.n_features != net.in_dim:
        raise ConfigurationError("dataset width does not match the network input dim")
    n = train.n_rows
    if subsample < n:
        rng = np.random.Generator(np.random.PCG64(seed))
        rows = rng.choice(n, size=subsample, replace=False)
        feats = train.features[rows]
    else:
        feats = train.features
    pre = feats @ net.weights[0].T + net.biases[0]
    activation = net.layers[0].activation

    workers = worker_count()
    columns = [pre[:, d] for d in range(pre.shape[1])]
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            neurons = list(pool.map(lambda c: _fit_neuron(c, activation, m, noise), columns))
    else:
        neurons = [_fit_neuron(c, activation, m, noise) for c in columns]
    return GapaLayerState(neurons=tuple(neurons))


@dataclass(frozen=True)
class FreeCalibration:
    """Affine recalibration of the propagated output variance."""

    theta1: float
    theta2: float

    def __post_init__(self) -> None:
        ok = (
            np.isfinite(self.theta1)
            and np.isfinite(self.theta2)
            and self.theta1 >= 0.0
            and self.theta2 >= 0.0
        )
        if not ok:
            raise ConfigurationError(f"calibration parameters must be finite and >= 0, got {self}")

    def apply(self, variance):
        """theta1 * variance + theta2, floored at VARIANCE_FLOOR."""
        return np.maximum(self.theta1 * np.asarray(variance, dtype=float) + self.theta2, VARIANCE_FLOOR)


@dataclass(frozen=True)
class VariationalCalibration:
    """Marker: predictions use the learned variational covariances."""


Calibration = FreeCalibration | VariationalCalibration


@dataclass(frozen=True)
class GapaState:
    """Everything the GAPA file persists: GP layer plus calibration."""

    layer: GapaLayerState
    calibration: Calibration | None = None
    propagation_mode: str = "full"

    def __post_init__(self) -> None:
        if self.propagation_mode not in ("full", "diag"):
            raise ConfigurationError(f"unknown propagation mode {self.propagation_mode!r}")
        if isinstance(self.calibration, VariationalCalibration):
            if any(nrn.variational_factor is None for nrn in self.layer.neurons):
                raise ConfigurationError(
                    "variational calibration requires a variational factor on every neuron"
                )


@dataclass(frozen=True)
class GapaModel:
    """A backbone network paired with its fitted GAPA state."""

    network: BackboneNetwork
    state: GapaState

    def __post_init__(self) -> None:
        if self.state.layer.width != self.network.first_layer_width:
            raise ConfigurationError("GAPA layer width does not match the network's first layer")

    @property
    def layer(self) -> GapaLayerState:
        return self.state.layer

    @property
    def calibration(self) -> Calibration | None:
        return self.state.calibration


@dataclass(frozen=True)
class GapaFile:
    state: GapaState
    config_digest: str | None = None


def save_gapa(state: GapaState, path, *, config_digest: str | None = None) -> None:
    """Write the GAPA state as a versioned JSON document (17-digit reals)."""
    neurons = []
    for nrn in state.layer.neurons:
        record: dict = {
            "inducing": [float(v) for v in nrn.inducing],
            "lengthscale": float(nrn.kernel.lengthscale),
            "outputscale": float(nrn.kernel.outputscale),
            "noise": float(nrn.kernel.noise),
        }
        if nrn.variational_factor is not None:
            record["variational_factor"] = [float(v) for v in nrn.variational_factor.ravel()]
        neurons.append(record)
    if state.calibration is None:
        calibration = None
    elif isinstance(state.calibration, FreeCalibration):
        calibration = {
            "kind": "free",
            "theta1": float(state.calibration.theta1),
            "theta2": float(state.calibration.theta2),
        }
    else:
        calibration = {"kind": "variational"}
    doc: dict = {
        "version": GAPA_FORMAT_VERSION,
        "layer_index": state.layer.layer_index,
        "activation": state.layer.neurons[0].activation.value,
        "propagation_mode": state.propagation_mode,
        "neurons": neurons,
        "calibration": calibration,
    }
    if config_digest is not None:
        doc["config_digest"] = config_digest
    persist.save_document(doc, path)


def load_gapa(path) -> GapaFile:
    """Read a GAPA state document written by :func:`save_gapa`.

    The Gram Cholesky factors are rebuilt from the persisted inducing inputs
    and hyperparameters, so a save/load/save cycle is byte-identical.
    """
    doc = persist.load_document(path, GAPA_FORMAT_VERSION)
    try:
        activation = Activation(doc["activation"])
        neurons = []
        for record in doc["neurons"]:
            inducing = np.asarray(record["inducing"], dtype=float)
            params = RbfParams(
                lengthscale=float(record["lengthscale"]),
                outputscale=float(record["outputscale"]),
                noise=float(record["noise"]),
            )
            gram = rbf_matrix(params, inducing, inducing) + params.noise * np.eye(inducing.size)
            factor = linalg.cholesky(gram)
            variational = None
            if "variational_factor" in record:
                variational = np.asarray(record["variational_factor"], dtype=float).reshape(
                    inducing.size, inducing.size
                )
            neurons.append(
                NeuronGP(
                    inducing=inducing,
                    kernel=params,
                    gram_factor=factor,
                    activation=activation,
                    variational_factor=variational,
                )
            )
        raw = doc["calibration"]
        calibration: Calibration | None
        if raw is None:
            calibration = None
        elif raw["kind"] == "free":
            calibration = FreeCalibration(theta1=float(raw["theta1"]), theta2=float(raw["theta2"]))
        elif raw["kind"] == "variational":
            calibration = VariationalCalibration()
        else:
            raise PersistenceError(f"unknown calibration kind {raw['kind']!r}")
        state = GapaState(
            layer=GapaLayerState(neurons=tuple(neurons), layer_index=int(doc["layer_index"])),
            calibration=calibration,
            propagation_mode=str(doc.get("propagation_mode", "full")),
        )
        return GapaFile(state=state, config_digest=doc.get("config_digest"))
    except PersistenceError:
        raise
    except (KeyError, TypeError, ValueError, ConfigurationError) as exc:
        raise PersistenceError(f"malformed GAPA document {path}: {exc}") from exc
