"""Output-variance calibration.

Two routes share the Gaussian NLL objective
``sum_i 0.5*log(2*pi*sigma_i^2) + (y_i - mu_i)^2 / (2*sigma_i^2)``:

* GAPA-Free: an affine map ``theta1 * v + theta2`` of the propagated
  variance with two nonnegative scalars, fitted by a log-grid search plus
  backtracking gradient descent on softplus-parameterized values.
* GAPA-Variational: per-neuron variational covariance factors ``L_S`` and
  log kernel hyperparameters, trained by mini-batch Adam on the NLL of the
  propagated predictions, with gradients from reverse-mode differentiation
  of the exact computation graph.  Backbone weights, inducing inputs, and
  the GP prior mean stay frozen, so predictive means never move.

Everything here works in standardized target units; the variance floor
1e-8 applies to every calibrated variance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import autodiff, linalg
from .backbone import forward
from .dataio import Dataset, Standardizer, apply_standardizer
from .errors import (
    ConfigurationError,
    DomainError,
    GapaError,
    ShapeError,
    TrainingError,
)
from .gpact import (
    VARIANCE_FLOOR,
    FreeCalibration,
    GapaLayerState,
    GapaModel,
    NeuronGP,
    RbfParams,
    rbf_matrix,
)
from .propagate import first_layer_variance_weights, gapa_forward

__all__ = [
    "FreeFitResult",
    "NeuronVariationalParams",
    "NllValue",
    "TrainLog",
    "TrainLogEntry",
    "VariationalConfig",
    "VariationalFitResult",
    "VariationalParams",
    "VariationalProblem",
    "fit_free",
    "fit_free_from_arrays",
    "fit_variational",
    "gaussian_nll",
    "grad_check",
    "nll",
]

LOG_2PI = float(np.log(2.0 * np.pi))

FREE_GRID_SIZE = 20
FREE_GRID_LO = 1e-4
FREE_GRID_HI = 1e4
FREE_MAX_STEPS = 5000
FREE_GRAD_TOL = 1e-8

#: Unconstrained value whose softplus is subnormal-zero; stands in for
#: exactly-zero calibration parameters during optimization.
SOFTPLUS_ZERO = -745.0


@dataclass(frozen=True)
class NllValue:
    """Gaussian NLL as both the raw sum and the per-point mean."""

    total: float
    mean: float
    n_points: int


def gaussian_nll(means, variances, targets, *, floor: float = VARIANCE_FLOOR) -> NllValue:
    """Gaussian negative log-likelihood of targets under diagonal predictions.

    Rejects any variance strictly below ``floor``.  The per-point terms are
    sorted before summation, so the value is exactly invariant to the order
    of the points.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if not (means.shape == variances.shape == targets.shape) or means.ndim != 1:
        raise ShapeError(
            f"nll inputs must be equal-length vectors, got {means.shape}, "
            f"{variances.shape}, {targets.shape}"
        )
    if means.size == 0:
        raise ConfigurationError("nll of an empty prediction set")
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances)) and np.all(np.isfinite(targets))):
        raise DomainError("nll inputs contain non-finite values")
    worst = float(variances.min())
    if worst < floor:
        raise DomainError(f"variance {worst:.6e} below the floor {floor:.6e}")
    terms = 0.5 * np.log(2.0 * np.pi * variances) + (targets - means) ** 2 / (2.0 * variances)
    total = float(np.sum(np.sort(terms)))
    return NllValue(total=total, mean=total / means.size, n_points=means.size)


def nll(preds, targets, *, floor: float = VARIANCE_FLOOR) -> NllValue:
    """Gaussian NLL of a prediction sequence, in original target units."""
    preds = list(preds)
    means = np.array([p.mean for p in preds])
    variances = np.array([p.variance for p in preds])
    return gaussian_nll(means, variances, targets, floor=floor)


def _softplus(p):
    p = np.asarray(p, dtype=float)
    return np.log1p(np.exp(-np.abs(p))) + np.maximum(p, 0.0)


def _softplus_inverse(theta: float) -> float:
    if theta <= 0.0:
        return SOFTPLUS_ZERO
    if theta < 1.0:
        return float(np.log(np.expm1(theta)))
    return float(theta + np.log1p(-np.exp(-theta)))


@dataclass(frozen=True)
class FreeFitResult:
    calibration: FreeCalibration
    nll: NllValue
    warning: str | None = None


def _free_objective(theta1: float, theta2: float, v, r2) -> float:
    sigma2 = np.maximum(theta1 * v + theta2, VARIANCE_FLOOR)
    return float(np.sum(0.5 * np.log(2.0 * np.pi * sigma2) + r2 / (2.0 * sigma2)))


def _free_grad_theta(theta1: float, theta2: float, v, r2):
    a = theta1 * v + theta2
    sigma2 = np.maximum(a, VARIANCE_FLOOR)
    active = a > VARIANCE_FLOOR
    dfds = np.where(active, 0.5 / sigma2 - r2 / (2.0 * sigma2**2), 0.0)
    return float(np.sum(dfds * v)), float(np.sum(dfds))


def fit_free_from_arrays(variances, residuals) -> FreeFitResult:
    """Fit the affine calibration to uncalibrated variances and residuals.

    Minimizes the Gaussian NLL over softplus-parameterized (theta1, theta2):
    the best of a 20x20 log-grid over [1e-4, 1e4]^2 (plus the identity point
    (1, 0)) seeds a backtracking gradient descent with analytic gradients,
    run to gradient norm <= 1e-8 or 5000 steps.
    """
    v = np.asarray(variances, dtype=float)
    r = np.asarray(residuals, dtype=float)
    if v.shape != r.shape or v.ndim != 1 or v.size == 0:
        raise ShapeError("variances and residuals must be equal-length non-empty vectors")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(r))):
        raise DomainError("calibration inputs contain non-finite values")
    if np.any(v < 0.0):
        raise DomainError(f"negative uncalibrated variance {float(v.min()):.6e}")
    r2 = r * r

    if float(r2.max(initial=0.0)) == 0.0:
        calibration = FreeCalibration(theta1=0.0, theta2=0.0)
        sigma2 = calibration.apply(v)
        value = gaussian_nll(np.zeros_like(v), sigma2, r)
        return FreeFitResult(
            calibration=calibration,
            nll=value,
            warning="all residuals are zero; calibration hit the variance floor",
        )

    axis = np.logspace(np.log10(FREE_GRID_LO), np.log10(FREE_GRID_HI), FREE_GRID_SIZE)
    candidates = [(t1, t2) for t1 in axis for t2 in axis]
    candidates.append((1.0, 0.0))
    best_theta = min(candidates, key=lambda th: _free_objective(th[0], th[1], v, r2))
    p = np.array([_softplus_inverse(best_theta[0]), _softplus_inverse(best_theta[1])])

    def value_and_grad(p_vec):
        theta = _softplus(p_vec)
        val = _free_objective(theta[0], theta[1], v, r2)
        g1, g2 = _free_grad_theta(theta[0], theta[1], v, r2)
        sig = 1.0 / (1.0 + np.exp(-p_vec))
        return val, np.array([g1, g2]) * sig

    val, grad = value_and_grad(p)
    step = 1.0
    for _ in range(FREE_MAX_STEPS):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= FREE_GRAD_TOL:
            break
        while step > 1e-20:
            trial = p - step * grad
            trial_val = value_and_grad(trial)[0]
            if trial_val <= val - 1e-4 * step * gnorm**2:
                break
            step *= 0.5
        else:
            break
        p = p - step * grad
        val, grad = value_and_grad(p)
        step = min(step * 1.3, 1e6)

    theta = _softplus(p)
    calibration = FreeCalibration(theta1=float(theta[0]), theta2=float(theta[1]))
    sigma2 = calibration.apply(v)
    floored = int(np.count_nonzero(theta[0] * v + theta[1] < VARIANCE_FLOOR))
    warning = (
        f"{floored} calibrated variance(s) hit the variance floor" if floored else None
    )
    return FreeFitResult(
        calibration=calibration,
        nll=gaussian_nll(np.zeros_like(v), sigma2, r),
        warning=warning,
    )


def _standardized_rows(model: GapaModel, split: Dataset, standardizer: Standardizer | None):
    """(features, standardized targets) for the model's input space."""
    if standardizer is not None:
        std = apply_standardizer(standardizer, split)
        return std.features, std.targets
    return split.features, split.targets


def fit_free(
    model: GapaModel,
    calibration_split: Dataset,
    *,
    standardizer: Standardizer | None = None,
) -> FreeFitResult:
    """GAPA-Free calibration fitted on a held-out split.

    Collects the model's uncalibrated propagated variances and residuals in
    standardized units, then fits the two-parameter affine map by NLL
    minimization.  Predictive means are untouched.
    """
    if calibration_split.n_rows == 0:
        raise ConfigurationError("calibration split is empty")
    feats, targets = _standardized_rows(model, calibration_split, standardizer)
    mode = model.state.propagation_mode
    variances = np.empty(calibration_split.n_rows)
    residuals = np.empty(calibration_split.n_rows)
    for i, row in enumerate(feats):
        pred = gapa_forward(model.network, model.layer, None, row, mode)
        variances[i] = pred.standardized_variance
        residuals[i] = targets[i] - pred.standardized_mean
    return fit_free_from_arrays(variances, residuals)


@dataclass(frozen=True)
class VariationalConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(f"epochs and batch_size must be positive, got {self}")
        if not np.isfinite(self.learning_rate) or self.learning_rate < 0.0:
            raise ConfigurationError(f"learning_rate must be finite and >= 0, got {self}")


@dataclass(frozen=True)
class TrainLogEntry:
    epoch: int
    nll: float
    grad_norm: float
    seconds: float


@dataclass(frozen=True)
class TrainLog:
    """Per-epoch objective trace; entry 0 is the pre-training evaluation."""

    entries: tuple[TrainLogEntry, ...]

    def __post_init__(self) -> None:
        for e in self.entries:
            if not (np.isfinite(e.nll) and np.isfinite(e.grad_norm) and np.isfinite(e.seconds)):
                raise TrainingError(f"non-finite train-log entry at epoch {e.epoch}")

    @property
    def nll(self) -> tuple[float, ...]:
        return tuple(e.nll for e in self.entries)

    @property
    def grad_norms(self) -> tuple[float, ...]:
        return tuple(e.grad_norm for e in self.entries)

    def to_lines(self) -> list[str]:
        return [
            f"epoch={e.epoch} nll={e.nll!r} grad_norm={e.grad_norm!r} seconds={e.seconds:.3f}"
            for e in self.entries
        ]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_lines()) + "\n")


@dataclass(frozen=True)
class NeuronVariationalParams:
    """One neuron's learned state: L_S (lower, positive diagonal) and log hypers."""

    l_s: NDArray[np.float64]
    log_lengthscale: float
    log_outputscale: float


@dataclass(frozen=True)
class VariationalParams:
    neurons: tuple[NeuronVariationalParams, ...]


@dataclass(frozen=True)
class VariationalFitResult:
    params: VariationalParams
    layer: GapaLayerState
    log: TrainLog


@dataclass
class _NeuronGraphData:
    inducing: NDArray[np.float64]
    d2_zz: NDArray[np.float64]
    d2_zx: NDArray[np.float64]
    noise_eye: NDArray[np.float64]
    strict_mask: NDArray[np.float64]
    diag_mask: NDArray[np.float64]
    noise: float
    m: int


@dataclass
class VariationalProblem:
    """Frozen quantities of the variational objective for one train split.

    The backbone mean path never moves during training and both push rules
    are linear in the first-layer variances, so for every row i the
    propagated output variance is exactly ``sum_d weights[i, d] * v_d(i)``
    with precomputed weights; only the per-neuron GP variances v_d carry
    parameters.  The objective graph is therefore small: per neuron, kernel
    matrices -> positive-definite inverse -> quadratic forms -> weighted
    NLL.
    """

    neurons: list[_NeuronGraphData]
    weights: NDArray[np.float64]
    residual_sq: NDArray[np.float64]
    layer_sizes: list[tuple[int, int]] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return self.residual_sq.size

    @property
    def n_params(self) -> int:
        return sum(m * (m + 1) // 2 + 2 for m, _ in self.layer_sizes)

    def initial_params(self, layer: GapaLayerState) -> NDArray[np.float64]:
        """Pack the starting point: L_S = chol(K+noise*I), empirical log hypers.

        With this L_S the initial predictive variance is exactly the prior
        outputscale at every input.
        """
        parts = []
        for nrn in layer.neurons:
            lower = nrn.gram_factor.lower
            raw = lower.copy()
            np.fill_diagonal(raw, np.log(np.diagonal(lower)))
            idx = np.tril_indices(nrn.m)
            parts.append(raw[idx])
            parts.append([np.log(nrn.kernel.lengthscale), 0.5 * np.log(nrn.kernel.outputscale)])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def split_params(self, params: NDArray[np.float64]):
        """Per-neuron (raw tril vector, log lengthscale, log outputscale)."""
        out = []
        pos = 0
        for m, _ in self.layer_sizes:
            k = m * (m + 1) // 2
            out.append((params[pos : pos + k], params[pos + k], params[pos + k + 1]))
            pos += k + 2
        if pos != params.size:
            raise ShapeError(f"expected {pos} parameters, got {params.size}")
        return out

    def block_slices(self):
        """(label, slice) pairs naming each parameter block in the packed vector."""
        out = []
        pos = 0
        for d, (m, _) in enumerate(self.layer_sizes):
            k = m * (m + 1) // 2
            out.append((f"neuron {d} L_S", slice(pos, pos + k)))
            out.append((f"neuron {d} log_lengthscale", slice(pos + k, pos + k + 1)))
            out.append((f"neuron {d} log_outputscale", slice(pos + k + 1, pos + k + 2)))
            pos += k + 2
        return out

    def objective(self, params: NDArray[np.float64], rows=None):
        """NLL over the selected rows and its gradient in the packed vector."""
        if rows is None:
            rows = np.arange(self.n_rows)
        rows = np.asarray(rows, dtype=int)
        r2 = self.residual_sq[rows]
        per_neuron = self.split_params(np.asarray(params, dtype=float))

        sigma2 = None
        lraw_vars = []
        for d, (data, (tril_raw, log_l, log_sf)) in enumerate(zip(self.neurons, per_neuron)):
            raw = np.zeros((data.m, data.m))
            raw[np.tril_indices(data.m)] = tril_raw
            lraw = autodiff.Var(raw)
            ll = autodiff.Var(log_l)
            ls = autodiff.Var(log_sf)
            lraw_vars.append((lraw, ll, ls))

            inv_two_l2 = (ll * -2.0).exp() * 0.5
            sf2 = (ls * 2.0).exp()
            gram = sf2 * (-(autodiff.constant(data.d2_zz) * inv_two_l2)).exp() + data.noise_eye
            inv = autodiff.posdef_inverse(gram)
            kzx = sf2 * (-(autodiff.constant(data.d2_zx[:, rows]) * inv_two_l2)).exp()
            w1 = inv @ kzx
            q_post = (kzx * w1).sum(axis=0)
            l_s = lraw * data.strict_mask + lraw.exp() * data.diag_mask
            t = l_s.T @ w1
            q_s = (t * t).sum(axis=0)
            v_d = sf2 - q_post + q_s
            contrib = autodiff.constant(self.weights[rows, d]) * v_d
            sigma2 = contrib if sigma2 is None else sigma2 + contrib

        sigma2 = autodiff.maximum(sigma2, VARIANCE_FLOOR)
        loss = (sigma2.log() * 0.5 + autodiff.constant(r2) / (sigma2 * 2.0)).sum()
        loss = loss + 0.5 * LOG_2PI * rows.size
        autodiff.backward(loss)

        grads = []
        for data, (lraw, ll, ls) in zip(self.neurons, lraw_vars):
            grads.append(lraw.grad[np.tril_indices(data.m)])
            grads.append([float(ll.grad), float(ls.grad)])
        grad = np.concatenate([np.asarray(g, dtype=float) for g in grads])
        return float(loss.value), grad

    def rebuild_layer(self, layer: GapaLayerState, params: NDArray[np.float64]):
        """Learned params -> (VariationalParams, layer with new kernels and L_S)."""
        per_neuron = self.split_params(np.asarray(params, dtype=float))
        out_params = []
        out_neurons = []
        for nrn, data, (tril_raw, log_l, log_sf) in zip(layer.neurons, self.neurons, per_neuron):
            raw = np.zeros((data.m, data.m))
            raw[np.tril_indices(data.m)] = tril_raw
            l_s = raw * data.strict_mask + np.exp(raw) * data.diag_mask
            kernel = RbfParams(
                lengthscale=float(np.exp(log_l)),
                outputscale=float(np.exp(2.0 * log_sf)),
                noise=nrn.kernel.noise,
            )
            gram = rbf_matrix(kernel, nrn.inducing, nrn.inducing) + kernel.noise * np.eye(nrn.m)
            out_params.append(
                NeuronVariationalParams(
                    l_s=l_s,
                    log_lengthscale=float(log_l),
                    log_outputscale=float(log_sf),
                )
            )
            out_neurons.append(
                NeuronGP(
                    inducing=nrn.inducing,
                    kernel=kernel,
                    gram_factor=linalg.cholesky(gram),
                    activation=nrn.activation,
                    variational_factor=l_s,
                )
            )
        new_layer = GapaLayerState(neurons=tuple(out_neurons), layer_index=layer.layer_index)
        return VariationalParams(neurons=tuple(out_params)), new_layer


def build_variational_problem(
    model: GapaModel,
    train_split: Dataset,
    *,
    standardizer: Standardizer | None = None,
) -> VariationalProblem:
    """Precompute the frozen parts of the variational objective."""
    if train_split.n_rows == 0:
        raise ConfigurationError("training split is empty")
    feats, targets = _standardized_rows(model, train_split, standardizer)
    net = model.network
    layer = model.layer
    mode = model.state.propagation_mode

    n = feats.shape[0]
    weights = np.empty((n, layer.width))
    pre = np.empty((n, layer.width))
    residual_sq = np.empty(n)
    for i, row in enumerate(feats):
        z1, w = first_layer_variance_weights(net, row, mode)
        pre[i] = z1
        weights[i] = w
        residual_sq[i] = (targets[i] - forward(net, row).post_activations[-1][0]) ** 2

    neurons = []
    sizes = []
    for d, nrn in enumerate(layer.neurons):
        z = nrn.inducing
        m = z.size
        dz = z[:, None] - z[None, :]
        dx = z[:, None] - pre[:, d][None, :]
        neurons.append(
            _NeuronGraphData(
                inducing=z,
                d2_zz=dz * dz,
                d2_zx=dx * dx,
                noise_eye=nrn.kernel.noise * np.eye(m),
                strict_mask=np.tril(np.ones((m, m)), k=-1),
                diag_mask=np.eye(m),
                noise=nrn.kernel.noise,
                m=m,
            )
        )
        sizes.append((m, d))
    return VariationalProblem(
        neurons=neurons, weights=weights, residual_sq=residual_sq, layer_sizes=sizes
    )


def _check_finite_blocks(problem: VariationalProblem, vec, epoch: int, what: str) -> None:
    if np.all(np.isfinite(vec)):
        return
    for label, block in problem.block_slices():
        if not np.all(np.isfinite(vec[block])):
            raise TrainingError(f"non-finite {what} at epoch {epoch} in {label}")
    raise TrainingError(f"non-finite {what} at epoch {epoch}")


def fit_variational(
    model: GapaModel,
    train_split: Dataset,
    config: VariationalConfig = VariationalConfig(),
    *,
    standardizer: Standardizer | None = None,
) -> VariationalFitResult:
    """Train per-neuron variational covariances and kernel hyperparameters.

    Minimizes the propagated-prediction NLL on the training split with
    mini-batch Adam.  Initialization is prior-recovering (L_S equal to the
    Cholesky factor of K+noise*I, hyperparameters at their empirical
    values), so the epoch-0 log entry records the uncalibrated prior
    objective.  Deterministic for a fixed seed; backbone weights and
    inducing inputs are never touched.
    """
    problem = build_variational_problem(model, train_split, standardizer=standardizer)
    params = problem.initial_params(model.layer)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    t = 0
    start = time.perf_counter()

    entries = []
    value, grad = problem.objective(params)
    entries.append(
        TrainLogEntry(
            epoch=0,
            nll=value,
            grad_norm=float(np.linalg.norm(grad)),
            seconds=time.perf_counter() - start,
        )
    )
    n = problem.n_rows
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            rows = order[lo : lo + config.batch_size]
            try:
                value, grad = problem.objective(params, rows)
            except GapaError as exc:
                raise TrainingError(f"objective failed at epoch {epoch}: {exc}") from exc
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            _check_finite_blocks(problem, grad, epoch, "gradient")
            t += 1
            m1 = beta1 * m1 + (1.0 - beta1) * grad
            m2 = beta2 * m2 + (1.0 - beta2) * grad * grad
            hat1 = m1 / (1.0 - beta1**t)
            hat2 = m2 / (1.0 - beta2**t)
            params = params - config.learning_rate * hat1 / (np.sqrt(hat2) + eps)
            _check_finite_blocks(problem, params, epoch, "parameter")
        try:
            value, grad = problem.objective(params)
        except GapaError as exc:
            raise TrainingError(f"objective failed at epoch {epoch}: {exc}") from exc
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        entries.append(
            TrainLogEntry(
                epoch=epoch,
                nll=value,
                grad_norm=float(np.linalg.norm(grad)),
                seconds=time.perf_counter() - start,
            )
        )

    try:
        var_params, new_layer = problem.rebuild_layer(model.layer, params)
    except GapaError as exc:
        raise TrainingError(f"unusable parameters after epoch {config.epochs}: {exc}") from exc
    return VariationalFitResult(params=var_params, layer=new_layer, log=TrainLog(tuple(entries)))


def grad_check(loss, params, h: float) -> float:
    """Max relative error of an analytic gradient vs central differences.

    ``loss(p)`` must return ``(value, gradient)``.  The relative error per
    coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
    """
    if not (np.isfinite(h) and h > 0.0):
        raise ConfigurationError(f"finite-difference step must be positive, got {h}")
    params = np.asarray(params, dtype=float)
    _, grad = loss(params)
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match params {params.shape}")
    worst = 0.0
    for i in range(params.size):
        step = np.zeros_like(params)
        step[i] = h
        f_plus = float(loss(params + step)[0])
        f_minus = float(loss(params - step)[0])
        numeric = (f_plus - f_minus) / (2.0 * h)
        denom = max(abs(float(grad[i])), abs(numeric), 1e-8)
        worst = max(worst, abs(float(grad[i]) - numeric) / denom)
    return float(worst)
