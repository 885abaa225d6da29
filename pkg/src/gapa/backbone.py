"""Fixed feedforward regression networks: evaluation, training, persistence.

The network maps D_0 inputs to a scalar output through dense layers; layer l
applies ``W_l x + b_l`` followed by its activation, the final layer always
being identity.  Once trained the parameters are immutable; every other
module treats the network as a frozen function.  The relu derivative at
exactly zero is defined as 0, a convention shared with the variance
propagation rules.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .dataio import Dataset, Standardizer
from .errors import ConfigurationError, PersistenceError, ShapeError, TrainingError
from . import persist

__all__ = [
    "Activation",
    "BackboneNetwork",
    "ForwardTrace",
    "LayerSpec",
    "NetworkFile",
    "TrainConfig",
    "TrainResult",
    "activation_apply",
    "activation_derivative",
    "forward",
    "forward_batch",
    "load_network",
    "mse_loss_and_gradient",
    "save_network",
    "train_backbone",
]

NETWORK_FORMAT_VERSION = "gapa.network/1"


class Activation(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"


def activation_apply(kind: Activation, z: NDArray[np.float64]) -> NDArray[np.float64]:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.TANH:
        return np.tanh(z)
    return z


def activation_derivative(kind: Activation, z: NDArray[np.float64]) -> NDArray[np.float64]:
    """Elementwise derivative; relu'(0) = 0 by convention."""
    if kind is Activation.RELU:
        return np.where(z > 0.0, 1.0, 0.0)
    if kind is Activation.TANH:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation

    def __post_init__(self) -> None:
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigurationError(f"layer dimensions must be >= 1, got {self}")


@dataclass(frozen=True)
class BackboneNetwork:
    """Immutable dense network; weights[l] has shape (out_dim, in_dim)."""

    layers: tuple[LayerSpec, ...]
    weights: tuple[NDArray[np.float64], ...]
    biases: tuple[NDArray[np.float64], ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise ConfigurationError("network needs at least one layer")
        if len(self.weights) != len(self.layers) or len(self.biases) != len(self.layers):
            raise ConfigurationError("weights/biases must match the layer count")
        if self.layers[-1].activation is not Activation.IDENTITY:
            raise ConfigurationError("the final layer must use the identity activation")
        for i, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if w.shape != (spec.out_dim, spec.in_dim):
                raise ShapeError(f"layer {i}: weight shape {w.shape} != {(spec.out_dim, spec.in_dim)}")
            if b.shape != (spec.out_dim,):
                raise ShapeError(f"layer {i}: bias shape {b.shape} != {(spec.out_dim,)}")
            if i > 0 and spec.in_dim != self.layers[i - 1].out_dim:
                raise ConfigurationError(f"layer {i} input dim does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ShapeError(f"layer {i} has non-finite parameters")
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def first_layer_width(self) -> int:
        return self.layers[0].out_dim


@dataclass(frozen=True)
class ForwardTrace:
    """Per-layer pre/post activations; pre_activations[0] is the first
    layer's linear output."""

    pre_activations: tuple[NDArray[np.float64], ...]
    post_activations: tuple[NDArray[np.float64], ...]
    output: NDArray[np.float64]


def forward(net: BackboneNetwork, x) -> ForwardTrace:
    """Evaluate the network on one input, caching every layer."""
    h = np.asarray(x, dtype=float)
    if h.shape != (net.in_dim,):
        raise ShapeError(f"input shape {h.shape} does not match network input dim {net.in_dim}")
    pre: list[NDArray[np.float64]] = []
    post: list[NDArray[np.float64]] = []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = w @ h + b
        h = activation_apply(spec.activation, z)
        pre.append(z)
        post.append(h)
    return ForwardTrace(pre_activations=tuple(pre), post_activations=tuple(post), output=post[-1])


def forward_batch(net: BackboneNetwork, x: NDArray[np.float64]) -> tuple[
    list[NDArray[np.float64]], list[NDArray[np.float64]]
]:
    """Row-batched forward pass; returns per-layer (pre, post) lists."""
    h = np.asarray(x, dtype=float)
    if h.ndim != 2 or h.shape[1] != net.in_dim:
        raise ShapeError(f"batch shape {h.shape} does not match network input dim {net.in_dim}")
    pres: list[NDArray[np.float64]] = []
    posts: list[NDArray[np.float64]] = []
    for spec, w, b in zip(net.layers, net.weights, net.biases):
        z = h @ w.T + b
        h = activation_apply(spec.activation, z)
        pres.append(z)
        posts.append(h)
    return pres, posts


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 0.01
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate < 0.0:
            raise ConfigurationError(f"invalid training configuration {self}")


@dataclass
class TrainResult:
    network: BackboneNetwork
    final_mse: float
    epoch_mse: list[float] = field(default_factory=list)


def _init_parameters(specs: tuple[LayerSpec, ...], rng: np.random.Generator):
    weights, biases = [], []
    for spec in specs:
        bound = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
        weights.append(rng.uniform(-bound, bound, size=(spec.out_dim, spec.in_dim)))
        biases.append(np.zeros(spec.out_dim))
    return weights, biases


def mse_loss_and_gradient(
    weights: list[NDArray[np.float64]],
    biases: list[NDArray[np.float64]],
    specs: tuple[LayerSpec, ...],
    x: NDArray[np.float64],
    y: NDArray[np.float64],
):
    """Batch mean-squared error and its gradient w.r.t. every parameter.

    Standard dense backprop; exposed so the analytic gradients can be checked
    against finite differences.
    """
    h = x
    pres, posts = [], []
    for spec, w, b in zip(specs, weights, biases):
        z = h @ w.T + b
        h = activation_apply(spec.activation, z)
        pres.append(z)
        posts.append(h)
    out = posts[-1][:, 0]
    resid = out - y
    loss = float(np.mean(resid**2))

    n = x.shape[0]
    grad = (2.0 * resid / n)[:, None]
    grad_w: list[NDArray[np.float64]] = [None] * len(specs)  # type: ignore[list-item]
    grad_b: list[NDArray[np.float64]] = [None] * len(specs)  # type: ignore[list-item]
    for l in range(len(specs) - 1, -1, -1):
        dz = grad * activation_derivative(specs[l].activation, pres[l])
        h_prev = posts[l - 1] if l > 0 else x
        grad_w[l] = dz.T @ h_prev
        grad_b[l] = dz.sum(axis=0)
        if l > 0:
            grad = dz @ weights[l]
    return loss, grad_w, grad_b


def train_backbone(train: Dataset, specs, config: TrainConfig) -> TrainResult:
    """Fit the network to the dataset by mini-batch Adam on the MSE.

    Deterministic given the seed: Glorot-uniform initialization and the
    per-epoch batch order both come from one PCG64 stream.  Adam uses the
    fixed hyperparameters beta1=0.9, beta2=0.999, eps=1e-8.
    """
    specs = tuple(specs)
    if not specs or specs[0].in_dim != train.n_features:
        raise ConfigurationError(
            f"first layer input dim must match the {train.n_features}-column dataset"
        )
    if specs[-1].out_dim != 1:
        raise ConfigurationError("the output layer must have a single unit")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    weights, biases = _init_parameters(specs, rng)
    x, y = train.features, train.targets
    n = train.n_rows

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    step = 0

    epoch_mse: list[float] = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            _, grad_w, grad_b = mse_loss_and_gradient(weights, biases, specs, x[batch], y[batch])
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for l in range(len(specs)):
                for params, grads, mom, sec in (
                    (weights, grad_w, m_w, v_w),
                    (biases, grad_b, m_b, v_b),
                ):
                    mom[l] = beta1 * mom[l] + (1.0 - beta1) * grads[l]
                    sec[l] = beta2 * sec[l] + (1.0 - beta2) * grads[l] ** 2
                    params[l] = params[l] - config.learning_rate * (mom[l] / corr1) / (
                        np.sqrt(sec[l] / corr2) + eps
                    )
        loss, _, _ = mse_loss_and_gradient(weights, biases, specs, x, y)
        if not np.isfinite(loss) or any(
            not np.all(np.isfinite(w)) for w in weights
        ):
            raise TrainingError(f"training diverged to non-finite values at epoch {epoch}")
        epoch_mse.append(loss)

    if not epoch_mse:
        loss, _, _ = mse_loss_and_gradient(weights, biases, specs, x, y)
        epoch_mse.append(loss)
    net = BackboneNetwork(layers=specs, weights=tuple(weights), biases=tuple(biases))
    return TrainResult(network=net, final_mse=epoch_mse[-1], epoch_mse=epoch_mse)


@dataclass(frozen=True)
class NetworkFile:
    """A persisted network plus the training context the CLI needs."""

    network: BackboneNetwork
    standardizer: Standardizer | None = None
    feature_columns: tuple[str, ...] | None = None
    target_name: str | None = None
    config_digest: str | None = None


def save_network(
    net: BackboneNetwork,
    path,
    *,
    standardizer: Standardizer | None = None,
    feature_columns: tuple[str, ...] | None = None,
    target_name: str | None = None,
    config_digest: str | None = None,
) -> None:
    """Write the network as a versioned JSON document (17-digit reals).

    The optional standardizer and column names travel with the network so
    prediction commands can run without the original configuration.
    """
    doc: dict = {
        "version": NETWORK_FORMAT_VERSION,
        "layer_specs": [
            {"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation.value}
            for s in net.layers
        ],
        "weights": [[float(v) for v in w.ravel()] for w in net.weights],
        "biases": [[float(v) for v in b] for b in net.biases],
    }
    if standardizer is not None:
        doc["standardizer"] = {
            "feature_means": [float(v) for v in standardizer.feature_means],
            "feature_stds": [float(v) for v in standardizer.feature_stds],
            "target_mean": float(standardizer.target_mean),
            "target_std": float(standardizer.target_std),
        }
    if feature_columns is not None:
        doc["feature_columns"] = list(feature_columns)
    if target_name is not None:
        doc["target_name"] = target_name
    if config_digest is not None:
        doc["config_digest"] = config_digest
    persist.save_document(doc, path)


def load_network(path) -> NetworkFile:
    """Read a network document written by :func:`save_network`."""
    doc = persist.load_document(path, NETWORK_FORMAT_VERSION)
    try:
        specs = tuple(
            LayerSpec(int(s["in_dim"]), int(s["out_dim"]), Activation(s["activation"]))
            for s in doc["layer_specs"]
        )
        weights = tuple(
            np.asarray(w, dtype=float).reshape(s.out_dim, s.in_dim)
            for s, w in zip(specs, doc["weights"])
        )
        biases = tuple(np.asarray(b, dtype=float) for b in doc["biases"])
        net = BackboneNetwork(layers=specs, weights=weights, biases=biases)
        standardizer = None
        if "standardizer" in doc:
            s = doc["standardizer"]
            standardizer = Standardizer(
                feature_means=np.asarray(s["feature_means"], dtype=float),
                feature_stds=np.asarray(s["feature_stds"], dtype=float),
                target_mean=float(s["target_mean"]),
                target_std=float(s["target_std"]),
            )
        columns = tuple(doc["feature_columns"]) if "feature_columns" in doc else None
        return NetworkFile(
            network=net,
            standardizer=standardizer,
            feature_columns=columns,
            target_name=doc.get("target_name"),
            config_digest=doc.get("config_digest"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise PersistenceError(f"malformed network document {path}: {exc}") from exc
