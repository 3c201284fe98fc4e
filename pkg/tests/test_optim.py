"""Adam update behavior."""

import numpy as np
import pytest

from kvgen.optim import AdamState, adam_step, init_adam, linear_decay
from kvgen.tensor import Tensor


def make_params(values):
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
            for k, v in values.items()}


def test_first_step_approaches_signed_lr():
    params = make_params({"w": [1.0, 1.0, 1.0]})
    g = np.array([0.3, -2.0, 5.0])
    state = init_adam(params, learning_rate=0.1, epsilon=1e-12)
    adam_step(params, {"w": g.copy()}, state)
    # bias correction gives m_hat = g, v_hat = g^2, so the step is -lr*sign(g)
    np.testing.assert_allclose(params["w"].data, 1.0 - 0.1 * np.sign(g), atol=1e-9)


def test_zero_gradient_leaves_parameters_unchanged():
    params = make_params({"w": [0.5, -0.25]})
    state = init_adam(params, learning_rate=0.1)
    adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"].data, [0.5, -0.25])


def test_equal_gradients_give_identical_updates():
    params = make_params({"a": [1.0, 2.0], "b": [1.0, 2.0]})
    g = np.array([0.7, -0.1])
    state = init_adam(params, learning_rate=0.05)
    adam_step(params, {"a": g.copy(), "b": g.copy()}, state)
    np.testing.assert_array_equal(params["a"].data, params["b"].data)


def test_nan_gradient_names_parameter():
    params = make_params({"w": [1.0], "bad": [1.0]})
    state = init_adam(params)
    with pytest.raises(FloatingPointError, match="'bad'"):
        adam_step(params, {"w": np.zeros(1), "bad": np.array([np.nan])}, state)


def test_step_count_increments_before_bias_correction():
    params = make_params({"w": [1.0]})
    state = init_adam(params)
    assert state.step_count == 0
    adam_step(params, {"w": np.array([1.0])}, state)
    assert state.step_count == 1


def test_linear_decay_schedule():
    total = 1000
    assert linear_decay(5, total, warmup_frac=0.01) == 0.5
    assert linear_decay(10, total, warmup_frac=0.01) == 1.0
    assert linear_decay(total, total, warmup_frac=0.01) == 0.0
    mid = linear_decay(505, total, warmup_frac=0.01)
    assert 0.49 < mid < 0.51
