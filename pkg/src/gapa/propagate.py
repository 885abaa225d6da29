"""Deterministic propagation of first-layer activation variance to the
network output.

The first hidden layer's activations are replaced by independent Gaussians
(mean = the original activation, variance from the per-neuron GPs); every
later layer transforms the Gaussian state with two closed-form rules:

* linear layers: mean ``W mu + b``, covariance ``W Sigma W^T``
* nonlinearities: the delta approximation, ``g(mu)`` and ``g'(mu)^2``
  scaling (``D Sigma D`` with ``D = diag(g'(mu))`` in full mode)

Both rules are linear in the covariance, so scaling every first-layer
variance by ``alpha`` scales the output variance by exactly ``alpha``.  A
Monte-Carlo oracle that samples the first-layer activations and pushes them
through the exact nonlinear tail is included for validation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .backbone import (
    Activation,
    BackboneNetwork,
    activation_apply,
    activation_derivative,
    forward,
)
from .dataio import Standardizer, invert_target
from .errors import ConfigurationError, NumericalConsistencyError, ShapeError
from .gpact import (
    VARIANCE_FLOOR,
    Calibration,
    FreeCalibration,
    GapaLayerState,
    VariationalCalibration,
    posterior_var,
    variational_var,
)

__all__ = [
    "GaussianState",
    "McEstimate",
    "PredictiveDistribution",
    "delta_push",
    "first_layer_variance_weights",
    "first_layer_variances",
    "gapa_forward",
    "linear_push",
    "mc_oracle",
    "predict_rows",
]

PROPAGATION_MODES = ("full", "diag")

SYMMETRY_TOL = 1e-9
NEGATIVE_DIAGONAL_TOL = 1e-10


def _check_mode(mode: str) -> None:
    if mode not in PROPAGATION_MODES:
        raise ConfigurationError(f"unknown propagation mode {mode!r}")


@dataclass(frozen=True)
class GaussianState:
    """Gaussian over one layer's units: full covariance or diagonal only.

    Tolerances are relative to the largest covariance entry (or 1 when all
    entries are smaller): asymmetry beyond 1e-9 or diagonal entries below
    -1e-10 raise; negatives inside the tolerance are clamped to zero.
    """

    mean: NDArray[np.float64]
    cov: NDArray[np.float64]
    mode: str

    def __post_init__(self) -> None:
        _check_mode(self.mode)
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1 or mean.size == 0:
            raise ShapeError(f"state mean must be a non-empty vector, got shape {mean.shape}")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise NumericalConsistencyError("state contains non-finite values")
        d = mean.size
        scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
        if self.mode == "full":
            if cov.shape != (d, d):
                raise ShapeError(f"full covariance must be {d}x{d}, got {cov.shape}")
            asym = float(np.max(np.abs(cov - cov.T)))
            if asym > SYMMETRY_TOL * scale:
                raise NumericalConsistencyError(f"covariance asymmetry {asym:.3e} too large")
            cov = 0.5 * (cov + cov.T)
            diag = np.diagonal(cov)
            if float(diag.min()) < -NEGATIVE_DIAGONAL_TOL * scale:
                raise NumericalConsistencyError(
                    f"negative covariance diagonal {float(diag.min()):.3e}"
                )
            if np.any(diag < 0.0):
                cov = cov.copy()
                np.fill_diagonal(cov, np.maximum(diag, 0.0))
        else:
            if cov.shape != (d,):
                raise ShapeError(f"diagonal covariance must have shape ({d},), got {cov.shape}")
            if float(cov.min()) < -NEGATIVE_DIAGONAL_TOL * scale:
                raise NumericalConsistencyError(f"negative variance entry {float(cov.min()):.3e}")
            cov = np.maximum(cov, 0.0)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def variances(self) -> NDArray[np.float64]:
        """Per-unit variances regardless of mode."""
        return np.diagonal(self.cov).copy() if self.mode == "full" else self.cov.copy()


def linear_push(w, b, state: GaussianState) -> GaussianState:
    """Affine map of a Gaussian state: mean W mu + b, covariance W Sigma W^T.

    Diagonal mode keeps only the output variances sum_j W_ij^2 v_j; any
    cross-covariance the full rule would produce is dropped by the declared
    mode, not approximated.
    """
    w = np.asarray(w, dtype=float)
    b = np.asarray(b, dtype=float)
    if w.ndim != 2 or w.shape[1] != state.dim:
        raise ShapeError(f"weight shape {w.shape} does not accept a state of dim {state.dim}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    mean = w @ state.mean + b
    if state.mode == "full":
        cov = (w @ state.cov) @ w.T
        cov = 0.5 * (cov + cov.T)
    else:
        cov = (w * w) @ state.cov
    return GaussianState(mean=mean, cov=cov, mode=state.mode)


def delta_push(g: Activation, state: GaussianState) -> GaussianState:
    """First-order Taylor transform through an elementwise nonlinearity.

    Mean g(mu); covariance D Sigma D with D = diag(g'(mu)) (diag mode:
    g'(mu_i)^2 v_i).  The relu derivative at exactly 0 is 0.
    """
    slope = activation_derivative(g, state.mean)
    mean = activation_apply(g, state.mean)
    if state.mode == "full":
        cov = state.cov * np.outer(slope, slope)
    else:
        cov = slope * slope * state.cov
    return GaussianState(mean=mean, cov=cov, mode=state.mode)


@dataclass(frozen=True)
class PredictiveDistribution:
    """Scalar predictive Gaussian in both standardized and original units."""

    mean: float
    variance: float
    standardized_mean: float
    standardized_variance: float

    def __post_init__(self) -> None:
        vals = (self.mean, self.variance, self.standardized_mean, self.standardized_variance)
        if not all(np.isfinite(v) for v in vals):
            raise NumericalConsistencyError(f"non-finite predictive distribution {self}")
        if self.variance < 0.0 or self.standardized_variance < 0.0:
            raise NumericalConsistencyError(f"negative predictive variance {self}")


def first_layer_variances(
    layer: GapaLayerState,
    pre_activations,
    calibration: Calibration | None = None,
) -> NDArray[np.float64]:
    """Per-neuron GP variance at the given first-layer pre-activations.

    Uses the learned variational covariances when variational calibration
    is active and the plain posterior otherwise.
    """
    z = np.asarray(pre_activations, dtype=float)
    if z.shape != (layer.width,):
        raise ShapeError(f"expected {layer.width} pre-activations, got shape {z.shape}")
    use_variational = isinstance(calibration, VariationalCalibration)
    out = np.empty(layer.width)
    for d, neuron in enumerate(layer.neurons):
        out[d] = variational_var(neuron, z[d]) if use_variational else posterior_var(neuron, z[d])
    return out


def gapa_forward(
    net: BackboneNetwork,
    layer: GapaLayerState,
    calibration: Calibration | None,
    x,
    mode: str = "full",
    *,
    standardizer: Standardizer | None = None,
    first_layer_variance_scale: float = 1.0,
) -> PredictiveDistribution:
    """Predictive mean and variance for one input row.

    The mean is taken from the backbone's own forward trace, so it is
    bit-identical to ``forward(net, x)``.  The variance starts as the
    per-neuron GP variance at the first layer (independent neurons, zero
    cross-covariance) and is pushed through the remaining layers with
    linear_push/delta_push.  Calibration, when given, acts on the
    standardized output variance before any unit inversion; uncalibrated
    variances are returned unfloored.

    With a standardizer, ``x`` is in original feature units and the
    original-unit output fields are filled by inverting the target
    transform; otherwise both unit systems coincide.
    """
    _check_mode(mode)
    if layer.width != net.first_layer_width:
        raise ShapeError(
            f"GAPA layer width {layer.width} does not match the network's "
            f"first layer ({net.first_layer_width})"
        )
    if not np.isfinite(first_layer_variance_scale) or first_layer_variance_scale < 0.0:
        raise ConfigurationError(
            f"first_layer_variance_scale must be finite and >= 0, got {first_layer_variance_scale}"
        )
    x = np.asarray(x, dtype=float)
    if standardizer is not None:
        x = (x - standardizer.feature_means) / standardizer.feature_stds
    trace = forward(net, x)

    v = first_layer_variances(layer, trace.pre_activations[0], calibration)
    v = first_layer_variance_scale * v
    if mode == "full":
        state = GaussianState(mean=trace.post_activations[0], cov=np.diag(v), mode="full")
    else:
        state = GaussianState(mean=trace.post_activations[0], cov=v, mode="diag")
    for l in range(1, len(net.layers)):
        state = linear_push(net.weights[l], net.biases[l], state)
        state = delta_push(net.layers[l].activation, state)

    std_mean = float(trace.post_activations[-1][0])
    std_var = float(state.cov[0, 0] if mode == "full" else state.cov[0])
    if isinstance(calibration, FreeCalibration):
        std_var = float(calibration.apply(std_var))
    elif isinstance(calibration, VariationalCalibration):
        std_var = max(std_var, VARIANCE_FLOOR)
    if standardizer is not None:
        mean, variance = invert_target(standardizer, std_mean, std_var)
    else:
        mean, variance = std_mean, std_var
    return PredictiveDistribution(
        mean=float(mean),
        variance=float(variance),
        standardized_mean=std_mean,
        standardized_variance=std_var,
    )


def first_layer_variance_weights(net: BackboneNetwork, x, mode: str = "full"):
    """Exact per-neuron weights w with output variance = w . v for input x.

    Both push rules are linear in the covariance, so for a fixed input the
    propagated output variance is a fixed linear functional of the
    first-layer variance vector.  Full mode accumulates the squared
    Jacobian of the tail network; diag mode accumulates the composed
    squared-weight/squared-slope chain.  Returns (pre_activations of the
    first layer, weights).
    """
    _check_mode(mode)
    x = np.asarray(x, dtype=float)
    trace = forward(net, x)
    n_layers = len(net.layers)
    if mode == "full":
        j = np.ones((1, 1))
        for l in range(n_layers - 1, 0, -1):
            slope = activation_derivative(net.layers[l].activation, trace.pre_activations[l])
            j = (j * slope[None, :]) @ net.weights[l]
        weights = j[0] ** 2
    else:
        u = np.ones(1)
        for l in range(n_layers - 1, 0, -1):
            slope = activation_derivative(net.layers[l].activation, trace.pre_activations[l])
            u = (net.weights[l] ** 2).T @ (slope * slope * u)
        weights = u
    return trace.pre_activations[0].copy(), weights


def predict_rows(
    net: BackboneNetwork,
    layer: GapaLayerState,
    calibration: Calibration | None,
    features,
    mode: str = "full",
    *,
    standardizer: Standardizer | None = None,
) -> list[PredictiveDistribution]:
    """gapa_forward applied to each row of a feature matrix."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ShapeError(f"feature matrix must be 2-D, got shape {features.shape}")
    return [
        gapa_forward(net, layer, calibration, row, mode, standardizer=standardizer)
        for row in features
    ]


@dataclass(frozen=True)
class McEstimate:
    variance_estimate: float
    standard_error: float


def mc_oracle(
    net: BackboneNetwork,
    layer: GapaLayerState,
    x,
    n_samples: int,
    seed: int,
    *,
    first_layer_variance_scale: float = 1.0,
    use_variational: bool = False,
) -> McEstimate:
    """Monte-Carlo estimate of the output variance, with jackknife SE.

    Samples first-layer activation vectors from Normal(a(X), diag(v)) and
    pushes each through the exact nonlinear tail of the network (no delta
    approximation).  The Philox counter-based generator makes the draws a
    pure function of the seed, independent of any execution schedule.  The
    standard error is the leave-one-out jackknife SE of the population
    variance, computed in closed form from the first two moments.
    """
    if n_samples < 2:
        raise ConfigurationError(f"mc_oracle needs at least 2 samples, got {n_samples}")
    if layer.width != net.first_layer_width:
        raise ShapeError(
            f"GAPA layer width {layer.width} does not match the network's "
            f"first layer ({net.first_layer_width})"
        )
    x = np.asarray(x, dtype=float)
    trace = forward(net, x)
    calibration = VariationalCalibration() if use_variational else None
    v = first_layer_variances(layer, trace.pre_activations[0], calibration)
    v = first_layer_variance_scale * v

    rng = np.random.Generator(np.random.Philox(seed))
    eps = rng.standard_normal((n_samples, layer.width))
    h = trace.post_activations[0][None, :] + eps * np.sqrt(v)[None, :]
    for l in range(1, len(net.layers)):
        z = h @ net.weights[l].T + net.biases[l][None, :]
        h = activation_apply(net.layers[l].activation, z)
    outputs = h[:, 0]

    n = float(n_samples)
    s1 = float(np.sum(outputs))
    s2 = float(np.sum(outputs * outputs))
    mean = s1 / n
    estimate = s2 / n - mean * mean
    # Leave-one-out population variances from the moment sums, O(n).
    loo_mean = (s1 - outputs) / (n - 1.0)
    loo_var = (s2 - outputs * outputs) / (n - 1.0) - loo_mean * loo_mean
    se = float(np.sqrt((n - 1.0) / n * np.sum((loo_var - np.mean(loo_var)) ** 2)))
    return McEstimate(variance_estimate=float(max(estimate, 0.0)), standard_error=se)
