"""Finite-difference validation of every registered kernel."""

import numpy as np

from kvgen import ops
from kvgen.gradcheck import GRADCHECK_TOLERANCE, grad_check, run_kernel_suite
from kvgen.tensor import Tensor


def test_every_kernel_passes_at_five_random_points():
    results = run_kernel_suite(seed=0, points=5)
    bad = {k: v for k, v in results.items() if v > GRADCHECK_TOLERANCE}
    assert not bad, f"kernels over tolerance: {bad}"


def test_linear_map_error_at_machine_epsilon_scale():
    w = np.random.default_rng(0).standard_normal((4, 3))
    err = grad_check(lambda t: ops.sum_(ops.matmul(t, Tensor(w))),
                     Tensor(np.random.default_rng(1).standard_normal((2, 4))))
    assert err < 1e-9  # exact linearity: only FD rounding remains


def test_layer_norm_composite():
    r = np.random.default_rng(2)
    gamma, beta = Tensor(r.standard_normal(6)), Tensor(r.standard_normal(6))
    w = Tensor(r.standard_normal((6, 6)))

    def f(t):
        return ops.sum_(ops.mul(ops.layer_norm(ops.matmul(t, w), gamma, beta),
                                ops.layer_norm(t, gamma, beta)))

    err = grad_check(f, Tensor(r.standard_normal((3, 6))))
    assert err <= 1e-6
