"""Differentiable primitives.

All functions take and return :class:`~attnbof.tensor.Tensor`. Shapes are
checked strictly; the only implicit broadcasting is a 2-D operand of
:func:`matmul` being shared across a leading batch axis, and the explicit
bias/scalar helpers below.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ShapeError
from .tensor import Tensor, as_tensor, make_op


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} is invalid for rank {ndim}")
    return axis % ndim


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either operand may carry a leading batch axis; a 2-D operand is then
    shared by every batch element and its gradient is summed over the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch sizes differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        if A.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if B.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return make_op("matmul", out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return make_op("transpose", out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


# -- elementwise -----------------------------------------------------------

def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(kind, a, b)
    A, B = a.data, b.data
    if kind == "add":
        return make_op("add", A + B, (a, b), lambda g: (g, g))
    if kind == "sub":
        return make_op("sub", A - B, (a, b), lambda g: (g, -g))
    if kind == "mul":
        return make_op("mul", A * B, (a, b), lambda g: (g * B, g * A))
    raise ContractError(f"unknown elementwise kind {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a: Tensor, s) -> Tensor:
    """Multiply every entry of ``a`` by a scalar (float or one-element tensor)."""
    if not isinstance(s, Tensor):
        s = float(s)
        return make_op("scale", a.data * s, (a,), lambda g: (g * s,))
    if s.data.size != 1:
        raise ShapeError(f"scale factor must have one element, got {s.shape}")
    A, sv = a.data, float(s.data.reshape(()))
    sshape = s.shape

    def backward(g):
        return g * sv, np.full(sshape, np.sum(g * A))

    return make_op("scale", A * sv, (a, s), backward)


def add_bias(x: Tensor, b: Tensor, axis: int) -> Tensor:
    """Add a vector along ``axis`` of ``x`` (dense and conv biases)."""
    axis = _norm_axis(axis, x.ndim)
    if b.ndim != 1 or b.shape[0] != x.shape[axis]:
        raise ShapeError(f"bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    out = x.data + b.data.reshape(view)
    return make_op("add_bias", out, (x, b), lambda g: (g, g.sum(axis=other)))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", a.data * mask, (a,), lambda g: (g * mask,))


# -- normalisation and reductions -----------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction for stability."""
    axis = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_op("softmax", out, (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    """Softmax applied independently to every row (last axis)."""
    return softmax(a, axis=-1)


def reduce_mean_axis(a: Tensor, axis: int) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if a.ndim == 0:
        raise ShapeError("cannot reduce a scalar")
    n = a.shape[axis]
    out = a.data.mean(axis=axis)
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return make_op("mean", out, (a,), backward)


def reduce_sum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    shape = a.shape
    return make_op("sum", np.sum(a.data), (a,), lambda g: (np.full(shape, np.asarray(g).item()),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return make_op("mean_all", np.mean(a.data), (a,), lambda g: (np.full(shape, np.asarray(g).item() / n),))


# -- structural ------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    out = a.data.reshape(shape)
    return make_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim)
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        idx = [slice(None)] * ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return make_op("concat", out, tensors, backward)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if not 0 <= start < stop <= a.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {a.shape[axis]}")
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_op("slice", a.data[idx], (a,), backward)


def pin_diagonal(w: Tensor, value: float) -> Tensor:
    """Copy of square ``w`` whose diagonal is overwritten by ``value``.

    The diagonal of ``w`` never influences the output, so it receives a zero
    gradient.
    """
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"pin_diagonal needs a square matrix, got {w.shape}")
    out = w.data.copy()
    np.fill_diagonal(out, value)

    def backward(g):
        g = g.copy()
        np.fill_diagonal(g, 0.0)
        return (g,)

    return make_op("pin_diagonal", out, (w,), backward)


# -- fused layer kernels ---------------------------------------------------

def weighted_distance(x: Tensor, v: Tensor, log_w: Tensor) -> Tensor:
    """Euclidean norm of ``(x_n - v_k) * w_k`` for every codeword and column.

    ``x`` is ``(B, D, N)``, ``v`` and ``log_w`` are ``(K, D)`` with
    ``w = exp(log_w)``. Returns ``(B, K, N)``. The squared norm is expanded
    into matrix products, so no ``(B, K, D, N)`` intermediate is formed.
    """
    if x.ndim != 3:
        raise ShapeError(f"weighted_distance expects (B, D, N) input, got {x.shape}")
    if v.shape != log_w.shape or v.ndim != 2:
        raise ShapeError(f"codewords {v.shape} and widths {log_w.shape} must be matching (K, D)")
    if x.shape[1] != v.shape[1]:
        raise ShapeError(f"feature dimension {x.shape[1]} does not match codebook dimension {v.shape[1]}")
    X, V = x.data, v.data
    w2 = np.exp(2.0 * log_w.data)
    c = w2 * V
    c0 = np.sum(c * V, axis=1)
    X2 = X * X
    sq = w2 @ X2 - 2.0 * (c @ X) + c0[None, :, None]
    np.maximum(sq, 0.0, out=sq)
    dist = np.sqrt(sq)

    def backward(g):
        h = np.divide(g, 2.0 * dist, out=np.zeros_like(g), where=dist > 0)
        gx = 2.0 * X * (w2.T @ h) - 2.0 * (c.T @ h)
        gA = np.einsum("bkn,bdn->kd", h, X2)
        gC = -2.0 * np.einsum("bkn,bdn->kd", h, X)
        gc0 = h.sum(axis=(0, 2))
        gw2 = gA + gC * V + gc0[:, None] * V * V
        gv = gC * w2 + 2.0 * gc0[:, None] * w2 * V
        return gx, gv, gw2 * 2.0 * w2

    return make_op("weighted_distance", dist, (x, v, log_w), backward)


def _same_padding(n: int, k: int, stride: int):
    n_out = -(-n // stride)
    total = max((n_out - 1) * stride + k - n, 0)
    return n_out, total // 2, total - total // 2


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with 'same' zero padding.

    ``x`` is ``(B, C_in, N)``, ``w`` is ``(C_out, C_in, k)``, ``b`` is
    ``(C_out,)``. Output length is ``ceil(N / stride)``.
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects (B, C, N) input and (F, C, k) weights, got {x.shape}, {w.shape}")
    bsz, c_in, n = x.shape
    f, wc, k = w.shape
    if wc != c_in:
        raise ShapeError(f"conv1d: input has {c_in} channels, weights expect {wc}")
    if b.shape != (f,):
        raise ShapeError(f"conv1d: bias shape {b.shape}, expected ({f},)")
    if k > n:
        raise ShapeError(f"conv1d: kernel size {k} exceeds sequence length {n}")
    if stride < 1:
        raise ShapeError(f"conv1d: stride must be >= 1, got {stride}")
    n_out, left, right = _same_padding(n, k, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride][:, :, :n_out]  # (B, C, n_out, k)
    W = w.data
    out = np.einsum("bcnk,fck->bfn", win, W, optimize=True) + b.data[None, :, None]

    def backward(g):
        gw = np.einsum("bcnk,bfn->fck", win, g, optimize=True)
        gb = g.sum(axis=(0, 2))
        gxp = np.zeros_like(xp)
        span = stride * (n_out - 1) + 1
        for kk in range(k):
            gxp[:, :, kk:kk + span:stride] += np.einsum("bfn,fc->bcn", g, W[:, :, kk], optimize=True)
        return gxp[:, :, left:left + n], gw, gb

    return make_op("conv1d", out, (x, w, b), backward)


def maxpool1d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max over the last axis; trailing remainder is dropped.

    Ties send the gradient to the first maximal position.
    """
    n = x.shape[-1]
    if window < 1 or n < window:
        raise ShapeError(f"maxpool1d: window {window} does not fit length {n}")
    n_out = n // window
    blocks = x.data[..., :n_out * window].reshape(x.shape[:-1] + (n_out, window))
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    shape = x.shape

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        full = np.zeros(shape)
        full[..., :n_out * window] = gb.reshape(shape[:-1] + (n_out * window,))
        return (full,)

    return make_op("maxpool1d", out, (x,), backward)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Per-channel normalisation of ``(B, C, N)`` over batch and time.

    Returns ``(out, batch_mean, batch_var)``; the statistics are plain arrays
    (biased variance) for the caller's running-average update.
    """
    if x.ndim != 3:
        raise ShapeError(f"batchnorm expects (B, C, N), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm parameters must be ({c},)")
    m = x.shape[0] * x.shape[2]
    if m < 2:
        raise ContractError("batchnorm in train mode needs at least 2 values per channel")
    X = x.data
    mu = X.mean(axis=(0, 2))
    var = X.var(axis=(0, 2))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu[None, :, None]) * inv[None, :, None]
    G = gamma.data
    out = G[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        dxhat = g * G[None, :, None]
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        gx = inv[None, :, None] / m * (m * dxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return make_op("batchnorm", out, (x, gamma, beta), backward), mu, var


def batchnorm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                   eps: float = 1e-5) -> Tensor:
    """Normalisation with fixed statistics (inference mode)."""
    if x.ndim != 3:
        raise ShapeError(f"batchnorm expects (B, C, N), got {x.shape}")
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    xhat = (x.data - np.asarray(mean)[None, :, None]) * inv[None, :, None]
    G = gamma.data
    out = G[None, :, None] * xhat + beta.data[None, :, None]

    def backward(g):
        return g * (G * inv)[None, :, None], (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return make_op("batchnorm_eval", out, (x, gamma, beta), backward)


def weighted_cross_entropy(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean over samples of ``-weight[y] * log softmax(logits)[y]``.

    ``logits`` is ``(B, C)``; ``labels`` an integer array of length B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (B, C), got {logits.shape}")
    bsz, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != bsz:
        raise ShapeError(f"{labels.shape[0]} labels for {bsz} samples")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    wts = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if wts.shape != (c,) or np.any(wts <= 0):
        raise ContractError("class weights must be a positive vector with one entry per class")
    Z = logits.data
    zmax = Z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(Z - zmax).sum(axis=1))
    rows = np.arange(bsz)
    sample_w = wts[labels]
    loss = np.sum(sample_w * (lse - Z[rows, labels])) / bsz

    def backward(g):
        p = np.exp(Z - lse[:, None])
        p[rows, labels] -= 1.0
        return (np.asarray(g).item() * p * sample_w[:, None] / bsz,)

    return make_op("weighted_cross_entropy", loss, (logits,), backward)
