"""Numeric kernel: Adam, softmax family, MLP forward/backward, FD audit."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asyncrl.numerics import (
    AdamState,
    DimensionError,
    DomainError,
    NondeterministicLossError,
    NonFiniteError,
    ParamSet,
    adam_step,
    finite_diff_check,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    mlp_layer_count,
    softmax,
)

finite_floats = st.floats(min_value=-30.0, max_value=30.0,
                          allow_nan=False, allow_infinity=False)


# -- ParamSet ----------------------------------------------------------------


def test_paramset_flatten_roundtrip(rng: np.random.Generator) -> None:
    p = ParamSet({"a": rng.normal(size=(2, 3)), "b": rng.normal(size=4)}, version=5)
    q = p.with_flat(p.flatten())
    assert q.version == 5
    for name in p.names():
        np.testing.assert_array_equal(p[name], q[name])


def test_paramset_with_flat_size_mismatch() -> None:
    p = ParamSet({"a": np.zeros(3)})
    with pytest.raises(DimensionError):
        p.with_flat(np.zeros(4))


def test_paramset_check_finite_names_offender() -> None:
    p = ParamSet({"fine": np.ones(2), "broken": np.array([1.0, np.nan])})
    with pytest.raises(NonFiniteError, match="broken"):
        p.check_finite()


# -- Adam ---------------------------------------------------------------------

# [DERIVED] hand-unrolled scalar Adam: w0=1, grads (0.5, -0.25, 0.1),
# lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8.
ADAM_ORACLE_W = (0.900000002, 0.8733662987078463, 0.8418419430257161)


def test_adam_three_step_hand_oracle() -> None:
    params = ParamSet({"w": np.array([1.0])})
    state = AdamState.init(params, lr=0.1)
    for g, expected in zip((0.5, -0.25, 0.1), ADAM_ORACLE_W):
        params, state = adam_step(params, {"w": np.array([g])}, state)
        assert params["w"][0] == pytest.approx(expected, abs=1e-15)
    assert state.step == 3
    assert params.version == 3


def test_adam_is_pure() -> None:
    params = ParamSet({"w": np.array([2.0])})
    state = AdamState.init(params, lr=0.1)
    new_params, new_state = adam_step(params, {"w": np.array([1.0])}, state)
    assert params["w"][0] == 2.0
    assert state.step == 0
    assert np.all(state.m["w"] == 0.0)
    assert new_params is not params and new_state is not state


def test_adam_zero_gradient_advances_version_only() -> None:
    params = ParamSet({"w": np.array([1.5])})
    state = AdamState.init(params)
    new_params, new_state = adam_step(params, {"w": np.array([0.0])}, state)
    assert new_params["w"][0] == 1.5
    assert new_params.version == 1
    assert new_state.step == 1


def test_adam_rejects_name_mismatch() -> None:
    params = ParamSet({"w": np.zeros(1)})
    state = AdamState.init(params)
    with pytest.raises(DimensionError, match="names"):
        adam_step(params, {"other": np.zeros(1)}, state)


def test_adam_rejects_shape_mismatch() -> None:
    params = ParamSet({"w": np.zeros((2, 2))})
    state = AdamState.init(params)
    with pytest.raises(DimensionError, match="shape"):
        adam_step(params, {"w": np.zeros(3)}, state)


def test_adam_rejects_nonfinite_gradient() -> None:
    params = ParamSet({"w": np.zeros(2)})
    state = AdamState.init(params)
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([1.0, np.inf])}, state)


# -- softmax family ----------------------------------------------------------


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=finite_floats))
def test_softmax_is_a_distribution(z: np.ndarray) -> None:
    p = softmax(z)
    assert np.all(p >= 0)
    assert np.sum(p) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=finite_floats),
       finite_floats)
def test_softmax_shift_invariance(z: np.ndarray, c: float) -> None:
    np.testing.assert_allclose(softmax(z + c), softmax(z), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 16), elements=finite_floats))
def test_log_softmax_consistent_with_softmax(z: np.ndarray) -> None:
    np.testing.assert_allclose(np.exp(log_softmax(z)), softmax(z), atol=1e-12)


def test_softmax_handles_extreme_logits() -> None:
    p = softmax(np.array([1000.0, 0.0, -1000.0]))
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)


@pytest.mark.parametrize("fn", [softmax, log_softmax])
def test_softmax_rejects_empty_and_nonfinite(fn) -> None:
    with pytest.raises(DomainError):
        fn(np.array([]))
    with pytest.raises(DomainError):
        fn(np.array([1.0, np.nan]))


def test_softmax_batch_axis() -> None:
    z = np.arange(12, dtype=np.float64).reshape(3, 4)
    p = softmax(z, axis=-1)
    np.testing.assert_allclose(p.sum(axis=-1), np.ones(3), atol=1e-12)
    for i in range(3):
        np.testing.assert_allclose(p[i], softmax(z[i]), atol=0)


# -- MLP ------------------------------------------------------------------------


def test_mlp_forward_matches_hand_rolled_formula() -> None:
    # [DERIVED] explicit tiny net: out = w1 @ tanh(w0 x + b0) + b1
    params = ParamSet({
        "w0": np.array([[0.5, -1.0], [2.0, 0.25]]),
        "b0": np.array([0.1, -0.2]),
        "w1": np.array([[1.0, -0.5]]),
        "b1": np.array([0.3]),
    })
    x = np.array([0.4, -0.7])
    h_expect = np.tanh(params["w0"] @ x + params["b0"])
    out_expect = params["w1"] @ h_expect + params["b1"]
    out, hiddens = mlp_forward(params, x)
    np.testing.assert_allclose(out, out_expect, atol=1e-15)
    assert len(hiddens) == 1
    np.testing.assert_allclose(hiddens[0], h_expect, atol=1e-15)


def test_mlp_forward_batch_matches_loop(rng: np.random.Generator) -> None:
    params = init_mlp(rng, [3, 5, 2])
    xs = rng.normal(size=(7, 3))
    batch_out, _ = mlp_forward(params, xs)
    for i in range(7):
        single_out, _ = mlp_forward(params, xs[i])
        np.testing.assert_allclose(batch_out[i], single_out, atol=1e-14)


def test_mlp_forward_dim_mismatch(rng: np.random.Generator) -> None:
    params = init_mlp(rng, [3, 4, 2])
    with pytest.raises(DimensionError, match="w0"):
        mlp_forward(params, np.zeros(5))


def test_mlp_layer_count_requires_paired_tensors() -> None:
    with pytest.raises(DimensionError, match="b1"):
        mlp_layer_count(ParamSet({"w0": np.zeros((2, 2)), "b0": np.zeros(2),
                                  "w1": np.zeros((1, 2))}))
    with pytest.raises(DimensionError, match="no layers"):
        mlp_layer_count(ParamSet({"weird": np.zeros(3)}))


def test_init_mlp_needs_two_dims(rng: np.random.Generator) -> None:
    with pytest.raises(DimensionError):
        init_mlp(rng, [4])


def test_mlp_backward_passes_fd_audit(rng: np.random.Generator) -> None:
    params = init_mlp(rng, [3, 4, 2], scale=0.5)
    x = rng.normal(size=(5, 3))
    target = rng.normal(size=(5, 2))

    def loss(p: ParamSet) -> float:
        out, _ = mlp_forward(p, x)
        return float(np.mean((out - target) ** 2))

    out, hiddens = mlp_forward(params, x)
    grad_out = 2.0 * (out - target) / target.size
    grads, _ = mlp_backward(params, x, hiddens, grad_out)
    assert finite_diff_check(loss, params, grads) < 1e-4


def test_mlp_backward_input_gradient(rng: np.random.Generator) -> None:
    params = init_mlp(rng, [3, 4, 1], scale=0.5)
    x = rng.normal(size=3)
    _, hiddens = mlp_forward(params, x)
    _, grad_x = mlp_backward(params, x, hiddens, np.ones(1))
    # central differences through the input
    eps = 1e-6
    for i in range(3):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        fd = (mlp_forward(params, up)[0][0] - mlp_forward(params, down)[0][0]) / (2 * eps)
        assert grad_x[i] == pytest.approx(fd, abs=1e-6)


# -- finite-difference audit --------------------------------------------------


def _quadratic_case(rng: np.random.Generator):
    params = ParamSet({"w": rng.normal(size=(2, 2)), "b": rng.normal(size=2)})

    def loss(p: ParamSet) -> float:
        return float(np.sum(p["w"] ** 2) + 3.0 * np.sum(p["b"] ** 2))

    grads = {"w": 2.0 * params["w"], "b": 6.0 * params["b"]}
    return params, loss, grads


def test_fd_check_accepts_correct_gradient(rng: np.random.Generator) -> None:
    params, loss, grads = _quadratic_case(rng)
    assert finite_diff_check(loss, params, grads) < 1e-6


def test_fd_check_flags_scaled_gradients(rng: np.random.Generator) -> None:
    params, loss, grads = _quadratic_case(rng)
    doubled = {k: 2.0 * g for k, g in grads.items()}
    halved = {k: 0.5 * g for k, g in grads.items()}
    # relative error is |fd - analytic| / |analytic|: 0.5 for doubled, 1.0 for halved
    assert finite_diff_check(loss, params, doubled) == pytest.approx(0.5, abs=1e-3)
    assert finite_diff_check(loss, params, halved) == pytest.approx(1.0, abs=1e-3)


def test_fd_check_rejects_nondeterministic_loss(rng: np.random.Generator) -> None:
    params = ParamSet({"w": np.ones(1)})
    state = iter(range(100))

    def loss(p: ParamSet) -> float:
        return float(next(state))

    with pytest.raises(NondeterministicLossError):
        finite_diff_check(loss, params, {"w": np.zeros(1)})


def test_fd_check_shape_mismatch(rng: np.random.Generator) -> None:
    params = ParamSet({"w": np.ones(2)})
    with pytest.raises(DimensionError):
        finite_diff_check(lambda p: 0.0, params, {"w": np.zeros(3)})
