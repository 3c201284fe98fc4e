"""Differentiable kernels: the dense linear algebra the model is built from.

Forward values follow the textbook definitions; every kernel registers a
reverse-mode rule via make_op.  Masking is additive -inf before softmax and
masked entries come out exactly 0, so mask-leak tests can assert bitwise
equality instead of tolerances.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import ShapeError, Tensor, as_tensor, make_op

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return make_op(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                 lambda g: _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return make_op(out, (a, b), (lambda g: _unbroadcast(g, a.shape),
                                 lambda g: _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    return make_op(out, (a, b), (lambda g: _unbroadcast(g * b.data, a.shape),
                                 lambda g: _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * c, (a,), (lambda g: g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data
    return make_op(out, (a, b), (lambda g: g @ b.data.T, lambda g: a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d tensor, got shape {a.shape}")
    return make_op(a.data.T.copy(), (a,), (lambda g: g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_op(out, (a,), (lambda g: g.reshape(a.shape),))


def linear(x, w, b=None) -> Tensor:
    """Affine map y = x @ w (+ b); x is (N, in), w is (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} x {w.shape}")
    out = x.data @ w.data
    if b is None:
        return make_op(out, (x, w), (lambda g: g @ w.data.T, lambda g: x.data.T @ g))
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")
    return make_op(out + b.data, (x, w, b),
                   (lambda g: g @ w.data.T, lambda g: x.data.T @ g, lambda g: g.sum(axis=0)))


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-d, got shape {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}")
    out = table.data[idx]

    def grad_table(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return gt

    return make_op(out, (table,), (grad_table,))


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis; `mask` is an additive constant (0 / -inf)."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        try:
            z = z + m
        except ValueError:
            raise ShapeError(f"softmax: mask shape {m.shape} does not broadcast to {x.shape}") from None
    mx = np.max(z, axis=-1, keepdims=True)
    if np.isneginf(mx).any():
        raise ValueError("softmax: a row is fully masked (-inf everywhere)")
    e = np.exp(z - mx)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_x(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (g - dot) * s

    return make_op(s, (x,), (grad_x,))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale + shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: scale/shift shapes {gamma.shape}/{beta.shape} "
                         f"do not match feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_x(g):
        gh = g * gamma.data
        return inv * (gh - gh.mean(axis=-1, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=-1, keepdims=True))

    def grad_gamma(g):
        return (g * xhat).reshape(-1, d).sum(axis=0)

    def grad_beta(g):
        return g.reshape(-1, d).sum(axis=0)

    return make_op(out, (x, gamma, beta), (grad_x, grad_gamma, grad_beta))


def gelu(x) -> Tensor:
    x = as_tensor(x)
    z = x.data
    phi = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    out = z * phi

    def grad_x(g):
        pdf = np.exp(-0.5 * z * z) * _INV_SQRT2PI
        return g * (phi + z * pdf)

    return make_op(out, (x,), (grad_x,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return make_op(out, (x,), (lambda g: g * (x.data > 0),))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0,
           pad_mode: str = "zero") -> Tensor:
    """2-d convolution via im2col; x is (B, Cin, H, W), w is (Cout, Cin, kh, kw).

    pad_mode "edge" replicates the border instead of zero-filling, so spatially
    constant inputs stay constant after convolution.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} x {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad_mode not in ("zero", "edge"):
        raise ValueError(f"conv2d: unknown pad_mode {pad_mode!r}")
    bsz, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = x.data
    if padding:
        mode = "constant" if pad_mode == "zero" else "edge"
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    mode=mode)
    hp, wp = xp.shape[2], xp.shape[3]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # (B, Cin, ho, wo, kh, kw) view, then flatten receptive fields
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(bsz * ho * wo, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} channels")
        out = out + b.data.reshape(1, cout, 1, 1)

    def grad_x(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, kh, kw)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if not padding:
            return gxp
        if pad_mode == "zero":
            return gxp[:, :, padding:padding + h, padding:padding + wd]
        # edge mode: fold each padded cell's gradient back onto its source cell
        hp_, wp_ = gxp.shape[2], gxp.shape[3]
        ii = np.clip(np.arange(hp_) - padding, 0, h - 1)
        jj = np.clip(np.arange(wp_) - padding, 0, wd - 1)
        gx = np.zeros((bsz, cin, h, wd), dtype=gxp.dtype)
        flat = gx.reshape(bsz * cin, h * wd).T
        idx = (ii[:, None] * wd + jj[None, :]).ravel()
        np.add.at(flat, idx, gxp.reshape(bsz * cin, hp_ * wp_).T)
        return gx

    def grad_w(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        return (gmat.T @ cols).reshape(w.shape)

    parents = [x, w]
    grads = [grad_x, grad_w]
    if b is not None:
        parents.append(b)
        grads.append(lambda g: g.sum(axis=(0, 2, 3)))
    return make_op(out, parents, grads)


def avg_pool2d(x, kernel: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by `kernel`."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected 4-d input, got shape {x.shape}")
    bsz, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"avg_pool2d: input {h}x{w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    out = x.data.reshape(bsz, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def grad_x(g):
        g = g / (kernel * kernel)
        return np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)

    return make_op(out, (x,), (grad_x,))


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concatenate: need at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: shapes {[t.shape for t in tensors]} do not align on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_grad(i):
        def grad_i(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return grad_i

    return make_op(out, tensors, [make_grad(i) for i in range(len(tensors))])


def slice_(x, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into place."""
    x = as_tensor(x)
    out = x.data[key]

    def grad_x(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return gx

    return make_op(np.ascontiguousarray(out), (x,), (grad_x,))


def take_rows(x, idx) -> Tensor:
    """Gather rows of a 2-d tensor by integer index (rows may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-d tensor, got shape {x.shape}")
    out = x.data[idx]

    def grad_x(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return gx

    return make_op(out, (x,), (grad_x,))


def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def grad_x(g):
        if axis is None:
            return np.full_like(x.data, g)
        return np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()

    return make_op(out, (x,), (grad_x,))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return make_op(x.data.mean(), (x,), (lambda g: np.full_like(x.data, g / n),))


def dropout(x, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or no rng is supplied (eval)."""
    x = as_tensor(x)
    if rng is None or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    out = x.data * keep
    return make_op(out, (x,), (lambda g: g * keep,))


def cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-softmax over positions whose target != ignore_index."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or t.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    n, v = logits.shape
    valid = t != ignore_index
    if valid.any():
        bad = t[valid]
        if bad.min() < 0 or bad.max() >= v:
            raise ValueError(f"cross_entropy: target out of range [0, {v})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        return make_op(np.asarray(0.0, dtype=logits.dtype), (logits,),
                       (lambda g: np.zeros_like(logits.data),))
    z = logits.data
    mx = z.max(axis=-1, keepdims=True)
    lse = mx + np.log(np.exp(z - mx).sum(axis=-1, keepdims=True))
    rows = np.arange(n)
    nll = lse[:, 0] - z[rows, np.where(valid, t, 0)]
    loss = np.asarray(nll[valid].mean(), dtype=logits.dtype)

    def grad_logits(g):
        p = np.exp(z - lse)
        p[rows[valid], t[valid]] -= 1.0
        p[~valid] = 0.0
        return (g / n_valid) * p

    return make_op(loss, (logits,), (grad_logits,))


def _bilinear_coeffs(h: int, w: int, xs: np.ndarray, ys: np.ndarray):
    """Corner indices and weights for samples at continuous (x, y).

    Cell centers sit at (col + 0.5, row + 0.5); out-of-range samples clamp to
    the border cells.
    """
    cx = np.clip(np.asarray(xs, dtype=np.float64) - 0.5, 0.0, w - 1.0)
    cy = np.clip(np.asarray(ys, dtype=np.float64) - 0.5, 0.0, h - 1.0)
    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    return (y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)


def bilinear_sample(feature_map, x: float, y: float) -> Tensor:
    """Sample a (C, H, W) map at one continuous point -> (C,) vector."""
    fm = as_tensor(feature_map)
    if fm.ndim != 3:
        raise ShapeError(f"bilinear_sample: expected (C, H, W) map, got shape {fm.shape}")
    _, h, w = fm.shape
    corners = _bilinear_coeffs(h, w, np.asarray([x]), np.asarray([y]))
    out = sum(float(wt[0]) * fm.data[:, int(yy[0]), int(xx[0])] for yy, xx, wt in corners)

    def grad_map(g):
        gm = np.zeros_like(fm.data)
        for yy, xx, wt in corners:
            gm[:, int(yy[0]), int(xx[0])] += float(wt[0]) * g
        return gm

    return make_op(out, (fm,), (grad_map,))


def roi_align(feature_map, rois, out_size: int) -> Tensor:
    """Pool each (x0, y0, x1, y1) region of a (C, H, W) map to out_size^2 bins.

    Each bin is sampled once at its center with bilinear interpolation, so the
    result is continuous in the RoI coordinates (no quantization snapping).
    Returns (R, C, out_size, out_size).
    """
    fm = as_tensor(feature_map)
    boxes = np.asarray(rois, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"roi_align: expected (C, H, W) map, got shape {fm.shape}")
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"roi_align: rois must be (R, 4), got shape {boxes.shape}")
    c, h, w = fm.shape
    r = boxes.shape[0]
    p = out_size
    centers = (np.arange(p) + 0.5) / p
    xs = boxes[:, 0:1] + centers[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])  # (R, P)
    ys = boxes[:, 1:2] + centers[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    gx = np.broadcast_to(xs[:, None, :], (r, p, p)).reshape(-1)
    gy = np.broadcast_to(ys[:, :, None], (r, p, p)).reshape(-1)
    corners = _bilinear_coeffs(h, w, gx, gy)
    flat = fm.data.reshape(c, -1)
    out = np.zeros((c, r * p * p), dtype=fm.data.dtype)
    for yy, xx, wt in corners:
        out += flat[:, yy * w + xx] * wt
    out = out.T.reshape(r, p, p, c).transpose(0, 3, 1, 2)

    def grad_map(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, c).T  # (C, R*P*P)
        gm = np.zeros_like(flat)
        for yy, xx, wt in corners:
            np.add.at(gm.T, yy * w + xx, (gflat * wt).T)
        return gm.reshape(fm.shape)

    return make_op(np.ascontiguousarray(out), (fm,), (grad_map,))
