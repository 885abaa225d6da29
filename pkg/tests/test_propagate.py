"""Variance propagation: push rules, forward pass, Monte-Carlo oracle."""

import numpy as np
import pytest

from gapa.backbone import Activation, BackboneNetwork, LayerSpec, activation_apply, forward
from gapa.dataio import fit_standardizer, make_toy_gap
from gapa.errors import ConfigurationError, NumericalConsistencyError, ShapeError
from gapa.gpact import (
    FreeCalibration,
    NeuronGP,
    VariationalCalibration,
    fit_gapa_layer,
    variational_var,
)
from gapa.propagate import (
    GaussianState,
    delta_push,
    first_layer_variance_weights,
    first_layer_variances,
    gapa_forward,
    linear_push,
    mc_oracle,
    predict_rows,
)
from test_gpact import toy_model, with_variational_factors


def test_linear_push_scalar_example():
    state = GaussianState(mean=np.array([1.0]), cov=np.array([[3.0]]), mode="full")
    out = linear_push(np.array([[2.0]]), np.array([0.5]), state)
    assert out.mean[0] == 2.5
    assert out.cov[0, 0] == 12.0


def test_linear_push_identity_preserves_state():
    state = GaussianState(mean=np.array([1.0, -2.0]), cov=np.array([[2.0, 0.5], [0.5, 1.0]]), mode="full")
    out = linear_push(np.eye(2), np.zeros(2), state)
    np.testing.assert_array_equal(out.mean, state.mean)
    np.testing.assert_array_equal(out.cov, state.cov)


def test_linear_push_mode_gap():
    # Sum of two unit-variance units: diag mode gives 2, full mode with
    # perfect correlation gives 4.
    w = np.array([[1.0, 1.0]])
    b = np.zeros(1)
    diag_state = GaussianState(mean=np.zeros(2), cov=np.ones(2), mode="diag")
    assert linear_push(w, b, diag_state).cov[0] == 2.0
    full_state = GaussianState(mean=np.zeros(2), cov=np.ones((2, 2)), mode="full")
    assert linear_push(w, b, full_state).cov[0, 0] == 4.0
    # independent units agree across modes
    indep = GaussianState(mean=np.zeros(2), cov=np.eye(2), mode="full")
    assert linear_push(w, b, indep).cov[0, 0] == 2.0


def test_linear_push_shape_errors():
    state = GaussianState(mean=np.zeros(2), cov=np.eye(2), mode="full")
    with pytest.raises(ShapeError):
        linear_push(np.ones((1, 3)), np.zeros(1), state)
    with pytest.raises(ShapeError):
        linear_push(np.ones((1, 2)), np.zeros(2), state)


def test_delta_push_tanh_value():
    state = GaussianState(mean=np.array([1.0]), cov=np.array([[2.0]]), mode="full")
    out = delta_push(Activation.TANH, state)
    t = np.tanh(1.0)
    slope = 1.0 - t * t
    assert out.mean[0] == t
    assert out.cov[0, 0] == pytest.approx(2.0 * slope * slope, rel=1e-15)
    assert out.cov[0, 0] == pytest.approx(0.35276, abs=1e-5)


def test_delta_push_relu_flat_and_kink():
    state = GaussianState(mean=np.array([-1.0, 0.0, 2.0]), cov=np.array([4.0, 4.0, 4.0]), mode="diag")
    out = delta_push(Activation.RELU, state)
    # derivative is 0 on the flat side and exactly at the kink
    np.testing.assert_array_equal(out.cov, [0.0, 0.0, 4.0])
    np.testing.assert_array_equal(out.mean, [0.0, 0.0, 2.0])


def test_delta_push_identity_is_noop():
    state = GaussianState(mean=np.array([0.3, -0.4]), cov=np.array([[1.0, 0.2], [0.2, 2.0]]), mode="full")
    out = delta_push(Activation.IDENTITY, state)
    np.testing.assert_array_equal(out.cov, state.cov)


def test_gaussian_state_validation():
    with pytest.raises(NumericalConsistencyError):
        GaussianState(mean=np.zeros(2), cov=np.array([[1.0, 0.5], [0.0, 1.0]]), mode="full")
    with pytest.raises(NumericalConsistencyError):
        GaussianState(mean=np.zeros(1), cov=np.array([[-1.0]]), mode="full")
    with pytest.raises(NumericalConsistencyError):
        GaussianState(mean=np.zeros(2), cov=np.array([1.0, -1.0]), mode="diag")
    with pytest.raises(ShapeError):
        GaussianState(mean=np.zeros(2), cov=np.eye(3), mode="full")
    with pytest.raises(ShapeError):
        GaussianState(mean=np.zeros(2), cov=np.ones(3), mode="diag")
    with pytest.raises(ConfigurationError):
        GaussianState(mean=np.zeros(1), cov=np.ones(1), mode="banded")


def test_gaussian_state_clamps_roundoff_negatives():
    state = GaussianState(mean=np.zeros(2), cov=np.array([1.0, -1e-16]), mode="diag")
    assert state.cov[1] == 0.0
    full = GaussianState(mean=np.zeros(1), cov=np.array([[-1e-16]]), mode="full")
    assert full.cov[0, 0] == 0.0


def test_gaussian_state_symmetrizes():
    cov = np.array([[1.0, 0.5 + 1e-12], [0.5, 1.0]])
    state = GaussianState(mean=np.zeros(2), cov=cov, mode="full")
    np.testing.assert_array_equal(state.cov, state.cov.T)


def test_gapa_forward_mean_is_bit_equal_to_backbone():
    net, data, layer = toy_model()
    rng = np.random.default_rng(5)
    for x in rng.uniform(-3.0, 3.0, size=(20, 1)):
        pred = gapa_forward(net, layer, None, x)
        assert pred.standardized_mean == forward(net, x).output[0]


def test_gapa_forward_zero_scale_gives_zero_variance():
    net, data, layer = toy_model()
    pred = gapa_forward(net, layer, None, np.array([1.3]), first_layer_variance_scale=0.0)
    assert pred.variance == 0.0
    assert pred.standardized_variance == 0.0


def test_gapa_forward_variance_scales_linearly():
    net, data, layer = toy_model()
    x = np.array([0.7])
    base = gapa_forward(net, layer, None, x).standardized_variance
    for alpha in (0.0, 0.5, 2.0):
        scaled = gapa_forward(net, layer, None, x, first_layer_variance_scale=alpha)
        assert abs(scaled.standardized_variance - alpha * base) <= 1e-10 * max(alpha * base, 1e-300)


def test_gapa_forward_uncalibrated_variance_is_not_floored():
    net, data, layer = toy_model()
    pred = gapa_forward(net, layer, None, np.array([0.4]), first_layer_variance_scale=1e-30)
    assert 0.0 < pred.standardized_variance < 1e-8


def test_gapa_forward_free_calibration_floors_variance():
    net, data, layer = toy_model()
    cal = FreeCalibration(0.0, 0.0)
    pred = gapa_forward(net, layer, cal, np.array([0.4]))
    assert pred.standardized_variance == 1e-8


def test_gapa_forward_variational_uses_learned_factors():
    net, data, layer = toy_model()
    vlayer = with_variational_factors(layer)
    x = np.array([0.9])
    pred = gapa_forward(net, vlayer, VariationalCalibration(), x)
    plain = gapa_forward(net, vlayer, None, x)
    assert pred.standardized_variance != plain.standardized_variance
    # replicate through the weight functional
    pre, weights = first_layer_variance_weights(net, x)
    v = np.array([variational_var(nrn, pre[d]) for d, nrn in enumerate(vlayer.neurons)])
    assert pred.standardized_variance == pytest.approx(max(float(weights @ v), 1e-8), rel=1e-12)


def test_gapa_forward_standardizer_converts_units():
    net, data, layer = toy_model()
    std = fit_standardizer(data)
    x_std = (np.array([1.5]) - std.feature_means) / std.feature_stds
    pred = gapa_forward(net, layer, None, np.array([1.5]), standardizer=std)
    raw = gapa_forward(net, layer, None, x_std)
    assert pred.standardized_mean == raw.standardized_mean
    assert pred.mean == pytest.approx(std.target_mean + std.target_std * raw.standardized_mean, rel=1e-15)
    assert pred.variance == std.target_std**2 * raw.standardized_variance


def test_gapa_forward_validation():
    net, data, layer = toy_model()
    with pytest.raises(ConfigurationError):
        gapa_forward(net, layer, None, np.array([0.0]), mode="banded")
    with pytest.raises(ConfigurationError):
        gapa_forward(net, layer, None, np.array([0.0]), first_layer_variance_scale=-1.0)
    with pytest.raises(ShapeError):
        gapa_forward(net, layer, None, np.array([0.0, 1.0]))


def manual_push_variance(net, x, v, mode):
    trace = forward(net, x)
    if mode == "full":
        state = GaussianState(mean=trace.post_activations[0], cov=np.diag(v), mode="full")
    else:
        state = GaussianState(mean=trace.post_activations[0], cov=v, mode="diag")
    for l in range(1, len(net.layers)):
        state = linear_push(net.weights[l], net.biases[l], state)
        state = delta_push(net.layers[l].activation, state)
    return float(state.cov[0, 0] if mode == "full" else state.cov[0])


def test_weight_functional_matches_unit_variance_pushes():
    net, data, layer = toy_model(width=6)
    x = np.array([-1.7])
    for mode in ("full", "diag"):
        pre, weights = first_layer_variance_weights(net, x, mode)
        for d in range(net.first_layer_width):
            unit = np.zeros(net.first_layer_width)
            unit[d] = 1.0
            assert manual_push_variance(net, x, unit, mode) == pytest.approx(weights[d], rel=1e-12)


def test_weight_functional_reproduces_gapa_forward():
    net, data, layer = toy_model(width=6)
    for x in (np.array([-2.2]), np.array([1.1])):
        pre, weights = first_layer_variance_weights(net, x)
        v = first_layer_variances(layer, pre)
        pred = gapa_forward(net, layer, None, x)
        assert pred.standardized_variance == pytest.approx(float(weights @ v), rel=1e-12)


def deep_diag_tail_net():
    # layers after the first use diagonal weight matrices, so full and diag
    # propagation agree exactly
    rng = np.random.default_rng(8)
    w1 = rng.standard_normal((4, 1))
    d2 = np.diag(rng.standard_normal(4))
    w3 = np.zeros((1, 4))
    w3[0, 1] = 1.3
    return BackboneNetwork(
        layers=(
            LayerSpec(1, 4, Activation.TANH),
            LayerSpec(4, 4, Activation.TANH),
            LayerSpec(4, 1, Activation.IDENTITY),
        ),
        weights=(w1, d2, w3),
        biases=(rng.standard_normal(4), rng.standard_normal(4), rng.standard_normal(1)),
    )


def test_full_and_diag_agree_on_diagonal_tail():
    net = deep_diag_tail_net()
    data = make_toy_gap(64, 0)
    layer = fit_gapa_layer(net, data, m=6, seed=0)
    for x in (np.array([-1.4]), np.array([2.6])):
        full = gapa_forward(net, layer, None, x, mode="full").standardized_variance
        diag = gapa_forward(net, layer, None, x, mode="diag").standardized_variance
        assert diag == pytest.approx(full, rel=1e-10)


def test_full_exceeds_diag_through_shared_linear_map():
    # A rank-1 tail mixes the neurons; with nonnegative weights the full
    # covariance keeps the positive cross terms that diag mode drops.
    net = BackboneNetwork(
        layers=(
            LayerSpec(1, 3, Activation.TANH),
            LayerSpec(3, 2, Activation.IDENTITY),
            LayerSpec(2, 1, Activation.IDENTITY),
        ),
        weights=(np.array([[1.0], [0.5], [-0.7]]), np.ones((2, 3)), np.ones((1, 2))),
        biases=(np.zeros(3), np.zeros(2), np.zeros(1)),
    )
    data = make_toy_gap(64, 1)
    layer = fit_gapa_layer(net, data, m=6, seed=0)
    x = np.array([1.9])
    full = gapa_forward(net, layer, None, x, mode="full").standardized_variance
    diag = gapa_forward(net, layer, None, x, mode="diag").standardized_variance
    assert full >= diag
    # after W2 = ones((2,3)) every covariance entry equals s = sum(v); the
    # rank-1 readout then gives 4s in full mode vs 2s in diag mode
    assert full == pytest.approx(2.0 * diag, rel=1e-10)


def test_predict_rows_matches_forward_loop():
    net, data, layer = toy_model()
    rows = data.features[:5]
    preds = predict_rows(net, layer, None, rows)
    assert len(preds) == 5
    for row, pred in zip(rows, preds):
        single = gapa_forward(net, layer, None, row)
        assert pred.standardized_variance == single.standardized_variance
    with pytest.raises(ShapeError):
        predict_rows(net, layer, None, rows[:, 0])


def test_mc_oracle_deterministic_and_seed_sensitive():
    net, data, layer = toy_model()
    x = np.array([0.8])
    a = mc_oracle(net, layer, x, 2000, seed=7)
    b = mc_oracle(net, layer, x, 2000, seed=7)
    assert a == b
    c = mc_oracle(net, layer, x, 2000, seed=8)
    assert c.variance_estimate != a.variance_estimate


def test_mc_oracle_zero_variance():
    net, data, layer = toy_model()
    est = mc_oracle(net, layer, np.array([0.8]), 500, seed=0, first_layer_variance_scale=0.0)
    # moment-form population variance leaves eps-level cancellation residue
    assert est.variance_estimate == pytest.approx(0.0, abs=1e-12)
    assert est.standard_error == pytest.approx(0.0, abs=1e-12)


def test_mc_oracle_needs_two_samples():
    net, data, layer = toy_model()
    with pytest.raises(ConfigurationError):
        mc_oracle(net, layer, np.array([0.0]), 1, seed=0)


def test_mc_oracle_jackknife_matches_direct_loo():
    # Replay the documented sampling contract, then compare the closed-form
    # jackknife SE against the O(n^2) leave-one-out definition.
    net, data, layer = toy_model()
    x = np.array([1.2])
    n = 300
    est = mc_oracle(net, layer, x, n, seed=3)

    trace = forward(net, x)
    v = first_layer_variances(layer, trace.pre_activations[0])
    rng = np.random.Generator(np.random.Philox(3))
    eps = rng.standard_normal((n, layer.width))
    h = trace.post_activations[0][None, :] + eps * np.sqrt(v)[None, :]
    for l in range(1, len(net.layers)):
        z = h @ net.weights[l].T + net.biases[l][None, :]
        h = activation_apply(net.layers[l].activation, z)
    outputs = h[:, 0]

    assert est.variance_estimate == pytest.approx(float(np.var(outputs)), rel=1e-10)
    loo = np.array([np.var(np.delete(outputs, i)) for i in range(n)])
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    assert est.standard_error == pytest.approx(float(se), rel=1e-8)


def test_mc_oracle_agrees_with_linear_tail_push():
    # With an identity tail the delta propagation is exact, so the MC
    # estimate must land within a few standard errors.
    rng = np.random.default_rng(12)
    net = BackboneNetwork(
        layers=(LayerSpec(1, 5, Activation.TANH), LayerSpec(5, 1, Activation.IDENTITY)),
        weights=(rng.standard_normal((5, 1)), rng.standard_normal((1, 5))),
        biases=(rng.standard_normal(5), rng.standard_normal(1)),
    )
    data = make_toy_gap(128, 2)
    layer = fit_gapa_layer(net, data, m=8, seed=0)
    x = np.array([1.6])
    exact = gapa_forward(net, layer, None, x).standardized_variance
    est = mc_oracle(net, layer, x, 50_000, seed=0)
    assert abs(est.variance_estimate - exact) <= 3.0 * est.standard_error


def test_mc_oracle_variational_flag():
    net, data, layer = toy_model()
    vlayer = with_variational_factors(layer)
    x = np.array([0.5])
    plain = mc_oracle(net, vlayer, x, 2000, seed=1)
    learned = mc_oracle(net, vlayer, x, 2000, seed=1, use_variational=True)
    assert plain.variance_estimate != learned.variance_estimate
