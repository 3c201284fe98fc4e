"""Finite-difference validation harness for the kernel set.

grad_check compares reverse-mode gradients against central differences; the
registered suite below covers every differentiable kernel and is what the
`gradcheck` CLI command runs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, backward, no_grad

GRADCHECK_TOLERANCE = 1e-5


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = Tensor(point.data.copy(), requires_grad=True)
    out = f(x)
    if out.data.shape != ():
        raise ValueError(f"grad_check: f must be scalar-valued, got shape {out.data.shape}")
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad
    flat = x.data.reshape(-1)
    aflat = analytic.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            worst = max(worst, err)
    return worst


def _sqsum(t: Tensor) -> Tensor:
    # squared sum makes every check's loss curved in each coordinate
    return ops.sum_(ops.mul(t, t))


def kernel_suite(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], Tensor]]:
    """One (name, f, point) case per registered kernel input."""

    def rt(*shape):
        return Tensor(rng.standard_normal(shape))

    a34, b43 = rt(3, 4), rt(4, 3)
    w_lin, b_lin = rt(4, 5), rt(5)
    x34 = rt(3, 4)
    table = rt(7, 4)
    ids = rng.integers(0, 7, size=6)
    mask = np.where(rng.random((3, 4)) < 0.25, -np.inf, 0.0)
    mask[:, 0] = 0.0  # keep every row attendable
    gamma, beta = rt(4), rt(4)
    ximg = rt(1, 2, 6, 6)
    wconv, bconv = rt(3, 2, 3, 3), rt(3)
    xpool = rt(1, 2, 4, 4)
    fmap = rt(2, 5, 6)
    rois = np.array([[0.7, 1.1, 4.3, 5.2], [2.0, 0.5, 5.9, 3.3]])
    logits = rt(5, 7)
    targets = rng.integers(0, 7, size=5)
    cat_other = rt(2, 4)

    cases = [
        ("matmul_lhs", lambda t: _sqsum(ops.matmul(t, b43)), a34),
        ("matmul_rhs", lambda t: _sqsum(ops.matmul(a34, t)), b43),
        ("add", lambda t: _sqsum(ops.add(t, x34)), rt(3, 4)),
        ("add_broadcast", lambda t: _sqsum(ops.add(x34, t)), rt(4)),
        ("mul", lambda t: _sqsum(ops.mul(t, x34)), rt(3, 4)),
        ("linear_x", lambda t: _sqsum(ops.linear(t, w_lin, b_lin)), rt(3, 4)),
        ("linear_w", lambda t: _sqsum(ops.linear(x34, t, b_lin)), rt(4, 5)),
        ("linear_b", lambda t: _sqsum(ops.linear(x34, w_lin, t)), rt(5)),
        ("embedding_lookup", lambda t: _sqsum(ops.embedding_lookup(t, ids)), table),
        ("softmax", lambda t: _sqsum(ops.softmax(t)), rt(3, 4)),
        ("softmax_masked", lambda t: _sqsum(ops.softmax(t, mask)), rt(3, 4)),
        ("layer_norm_x", lambda t: _sqsum(ops.layer_norm(t, gamma, beta)), rt(3, 4)),
        ("layer_norm_gamma", lambda t: _sqsum(ops.layer_norm(x34, t, beta)), rt(4)),
        ("layer_norm_beta", lambda t: _sqsum(ops.layer_norm(x34, gamma, t)), rt(4)),
        ("gelu", lambda t: _sqsum(ops.gelu(t)), rt(3, 4)),
        ("relu", lambda t: _sqsum(ops.relu(t)), Tensor(rng.standard_normal((3, 4)) + 0.05)),
        ("conv2d_x", lambda t: _sqsum(ops.conv2d(t, wconv, bconv, stride=2, padding=1)), ximg),
        ("conv2d_x_edge", lambda t: _sqsum(ops.conv2d(t, wconv, bconv, padding=1,
                                                      pad_mode="edge")), ximg),
        ("conv2d_w", lambda t: _sqsum(ops.conv2d(ximg, t, bconv, stride=1, padding=1)), wconv),
        ("conv2d_b", lambda t: _sqsum(ops.conv2d(ximg, wconv, t)), bconv),
        ("avg_pool2d", lambda t: _sqsum(ops.avg_pool2d(t, 2)), xpool),
        ("concatenate", lambda t: _sqsum(ops.concatenate([t, cat_other], axis=0)), rt(3, 4)),
        ("slice", lambda t: _sqsum(ops.slice_(t, (slice(1, 3), slice(0, 2)))), rt(4, 3)),
        ("take_rows", lambda t: _sqsum(ops.take_rows(t, np.array([0, 2, 2]))), rt(4, 3)),
        ("sum", lambda t: ops.sum_(ops.mul(t, t)), rt(3, 4)),
        ("mean", lambda t: ops.mean(ops.mul(t, t)), rt(3, 4)),
        ("cross_entropy", lambda t: ops.cross_entropy(t, targets), logits),
        ("bilinear_sample", lambda t: _sqsum(ops.bilinear_sample(t, 2.3, 3.7)), fmap),
        ("roi_align", lambda t: _sqsum(ops.roi_align(t, rois, 2)), fmap),
    ]
    return cases


def run_kernel_suite(seed: int = 0, points: int = 5,
                     tolerance: float = GRADCHECK_TOLERANCE) -> dict[str, float]:
    """grad_check every kernel at `points` random points; returns worst error per kernel."""
    results: dict[str, float] = {}
    for p in range(points):
        rng = np.random.default_rng(seed + p)
        for name, f, point in kernel_suite(rng):
            err = grad_check(f, point)
            results[name] = max(results.get(name, 0.0), err)
    return results
