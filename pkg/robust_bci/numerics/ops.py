"""Differentiable primitives used by the convolutional classifier

Every primitive takes Tensors (or arrays, which are wrapped), computes its result
with numpy and, when a GradTape is active, records a closure that maps the output
adjoint to input adjoints. Statistics (sums, means, batch-norm moments) accumulate
in float64; results are returned in the inputs' storage precision.
"""
from __future__ import annotations

from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from robust_bci.errors import DimensionError, ValidationError
from robust_bci.numerics.tensor import Tensor, record


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    array = np.asarray(value)
    if array.dtype not in (np.float32, np.float64):
        array = array.astype(np.float32)
    return Tensor.wrap(array)


def _result_dtype(*tensors: Tensor) -> np.dtype:
    return np.result_type(*[t.dtype for t in tensors])


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- Dense algebra ---

def matmul(a, b) -> Tensor:
    """Matrix product of two 2-D tensors, accumulated in float64."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    dtype = _result_dtype(a, b)
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    out = (a64 @ b64).astype(dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return (g64 @ b64.T).astype(a.dtype), (a64.T @ g64).astype(b.dtype)

    return record("matmul", (a, b), out, backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.add(a.data, b.data, dtype=_result_dtype(a, b))
    except ValueError as e:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from e

    def backward(g):
        return _unbroadcast(g, a.shape).astype(a.dtype), _unbroadcast(g, b.shape).astype(b.dtype)

    return record("add", (a, b), out, backward)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.multiply(a.data, b.data, dtype=_result_dtype(a, b))
    except ValueError as e:
        raise DimensionError(f"multiply shape mismatch: {a.shape} * {b.shape}") from e

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape).astype(a.dtype),
                _unbroadcast(g * a.data, b.shape).astype(b.dtype))

    return record("multiply", (a, b), out, backward)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all elements as a 0-d tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return record("sum", (x,), out, backward)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} into {tuple(shape)}") from e

    def backward(g):
        return (g.reshape(x.shape),)

    return record("reshape", (x,), out, backward)


def affine(x, weight, bias) -> Tensor:
    """Dense layer ``x @ weight.T + bias`` for x of shape (batch, features)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine shape mismatch: x{x.shape}, W{weight.shape}, b{bias.shape}")
    out = (x.data @ weight.data.T + bias.data).astype(_result_dtype(x, weight, bias))

    def backward(g):
        return ((g @ weight.data).astype(x.dtype),
                (g.T @ x.data).astype(weight.dtype),
                g.sum(axis=0, dtype=np.float64).astype(bias.dtype))

    return record("affine", (x, weight, bias), out, backward)


# --- Convolutions along the time axis ('same' padding, cross-correlation) ---

def _same_padding(kernel_len: int) -> Tuple[int, int]:
    left = (kernel_len - 1) // 2
    return left, kernel_len - 1 - left


def _time_windows(x: np.ndarray, kernel_len: int) -> np.ndarray:
    left, right = _same_padding(kernel_len)
    padded = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(left, right)])
    return sliding_window_view(padded, kernel_len, axis=-1)


def _fold_windows(g_windows: np.ndarray, t: int, kernel_len: int) -> np.ndarray:
    left, _ = _same_padding(kernel_len)
    padded = np.zeros(g_windows.shape[:-2] + (t + kernel_len - 1,), dtype=g_windows.dtype)
    for lag in range(kernel_len):
        padded[..., lag:lag + t] += g_windows[..., lag]
    return padded[..., left:left + t]


def conv1d(x, weight) -> Tensor:
    """Temporal filter bank shared by all rows: (b, m, t) * (f, L) -> (b, f, m, t)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2:
        raise DimensionError(f"conv1d expects x (b, m, t) and weight (f, L); got {x.shape}, {weight.shape}")
    t, kernel_len = x.shape[-1], weight.shape[-1]
    dtype = _result_dtype(x, weight)
    windows = _time_windows(x.data, kernel_len)                      # (b, m, t, L)
    out = np.matmul(windows, weight.data.T).astype(dtype)             # (b, m, t, f)
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))               # (b, f, m, t)

    def backward(g):
        g_last = np.moveaxis(g, 1, -1)                                # (b, m, t, f)
        g_weight = np.tensordot(g_last, windows, axes=([0, 1, 2], [0, 1, 2]))
        g_windows = np.matmul(g_last, weight.data)                    # (b, m, t, L)
        return (_fold_windows(g_windows, t, kernel_len).astype(x.dtype),
                g_weight.astype(weight.dtype))

    return record("conv1d", (x, weight), out, backward)


def depthwise_conv1d(x, weight) -> Tensor:
    """One temporal kernel per row: (b, m, t) * (m, L) -> (b, m, t)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise_conv1d shape mismatch: x{x.shape}, W{weight.shape}")
    t, kernel_len = x.shape[-1], weight.shape[-1]
    windows = _time_windows(x.data, kernel_len)                      # (b, m, t, L)
    out = np.einsum("bmtl,ml->bmt", windows, weight.data).astype(_result_dtype(x, weight))

    def backward(g):
        g_weight = np.einsum("bmt,bmtl->ml", g, windows)
        g_windows = g[..., None] * weight.data[None, :, None, :]
        return (_fold_windows(g_windows, t, kernel_len).astype(x.dtype),
                g_weight.astype(weight.dtype))

    return record("depthwise_conv1d", (x, weight), out, backward)


def spatial_filter(x, weight) -> Tensor:
    """Depthwise spatial filters: (b, f, c, t) * (f, d, c) -> (b, f*d, t)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 3 or weight.shape[0] != x.shape[1] or weight.shape[2] != x.shape[2]:
        raise DimensionError(f"spatial_filter shape mismatch: x{x.shape}, W{weight.shape}")
    b, f, _, t = x.shape
    d = weight.shape[1]
    out = np.einsum("bfct,fdc->bfdt", x.data, weight.data).reshape(b, f * d, t)
    out = out.astype(_result_dtype(x, weight))

    def backward(g):
        g4 = g.reshape(b, f, d, t)
        return (np.einsum("bfdt,fdc->bfct", g4, weight.data).astype(x.dtype),
                np.einsum("bfdt,bfct->fdc", g4, x.data).astype(weight.dtype))

    return record("spatial_filter", (x, weight), out, backward)


def pointwise(x, weight) -> Tensor:
    """Mix feature maps at every time step: (b, m, t) * (n, m) -> (b, n, t)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"pointwise shape mismatch: x{x.shape}, W{weight.shape}")
    out = np.einsum("nm,bmt->bnt", weight.data, x.data).astype(_result_dtype(x, weight))

    def backward(g):
        return (np.einsum("nm,bnt->bmt", weight.data, g).astype(x.dtype),
                np.einsum("bnt,bmt->nm", g, x.data).astype(weight.dtype))

    return record("pointwise", (x, weight), out, backward)


# --- Normalisation, activations, pooling ---

class BatchNormOutput(NamedTuple):
    output: Tensor
    batch_mean: Optional[np.ndarray]
    batch_var: Optional[np.ndarray]


def batch_norm(x, gamma, beta, running: Optional[Tuple[np.ndarray, np.ndarray]] = None,
               eps: float = 1e-5) -> BatchNormOutput:
    """Normalise features along axis 1.

    With ``running=None`` the current batch's (biased) moments are used and the
    gradient flows through them; otherwise the given (mean, var) are constants.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm shape mismatch: x{x.shape}, gamma{gamma.shape}, beta{beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    x64 = x.data.astype(np.float64)
    if running is None:
        mean = x64.mean(axis=axes)
        var = x64.var(axis=axes)
    else:
        mean = np.asarray(running[0], dtype=np.float64)
        var = np.asarray(running[1], dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    x_hat = (x64 - mean.reshape(bshape)) * inv_std
    gamma64 = gamma.data.astype(np.float64).reshape(bshape)
    out = (gamma64 * x_hat + beta.data.astype(np.float64).reshape(bshape)).astype(_result_dtype(x, gamma, beta))

    def backward(g):
        g64 = g.astype(np.float64)
        g_beta = g64.sum(axis=axes)
        g_gamma = (g64 * x_hat).sum(axis=axes)
        g_hat = g64 * gamma64
        if running is None:
            g_x = inv_std * (g_hat - g_hat.mean(axis=axes, keepdims=True)
                             - x_hat * (g_hat * x_hat).mean(axis=axes, keepdims=True))
        else:
            g_x = g_hat * inv_std
        return g_x.astype(x.dtype), g_gamma.astype(gamma.dtype), g_beta.astype(beta.dtype)

    output = record("batch_norm", (x, gamma, beta), out, backward)
    if running is None:
        return BatchNormOutput(output, mean, var)
    return BatchNormOutput(output, None, None)


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out = np.where(positive, x.data, alpha * np.expm1(np.minimum(x.data, 0))).astype(x.dtype)

    def backward(g):
        return ((g * np.where(positive, 1.0, out + alpha)).astype(x.dtype),)

    return record("elu", (x,), out, backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    positive = x.data > 0
    out = np.where(positive, x.data, 0).astype(x.dtype)

    def backward(g):
        return ((g * positive).astype(x.dtype),)

    return record("relu", (x,), out, backward)


def avg_pool(x, pool: int) -> Tensor:
    """Non-overlapping average pooling along the last axis."""
    x = as_tensor(x)
    t = x.shape[-1]
    if pool < 1 or t % pool:
        raise DimensionError(f"avg_pool size {pool} does not divide length {t}")
    out = x.data.reshape(x.shape[:-1] + (t // pool, pool)).mean(axis=-1, dtype=np.float64).astype(x.dtype)

    def backward(g):
        return ((np.repeat(g, pool, axis=-1) / pool).astype(x.dtype),)

    return record("avg_pool", (x,), out, backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from ``rng``; identity at rate 0."""
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    out = x.data * mask

    def backward(g):
        return ((g * mask).astype(x.dtype),)

    return record("dropout", (x,), out, backward)


# --- Probabilities and losses ---

def _stable_softmax(z64: np.ndarray) -> np.ndarray:
    shifted = z64 - z64.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax expects (batch, classes), got {logits.shape}")
    s = _stable_softmax(logits.data.astype(np.float64))
    out = s.astype(logits.dtype)

    def backward(g):
        g64 = g.astype(np.float64)
        return ((s * (g64 - (g64 * s).sum(axis=1, keepdims=True))).astype(logits.dtype),)

    return record("softmax", (logits,), out, backward)


def _check_targets(targets: np.ndarray, batch: int, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets)
    if targets.shape != (batch,):
        raise DimensionError(f"expected {batch} targets, got shape {targets.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ValidationError("targets must be integers")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ValidationError(f"targets must lie in [0, {n_classes}), got range [{targets.min()}, {targets.max()}]")
    return targets.astype(np.int64)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of zero-based ``targets``, max-subtracted."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects (batch, classes), got {logits.shape}")
    b, k = logits.shape
    targets = _check_targets(targets, b, k)
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(log_norm - shifted[rows, targets])
    out = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        probs = _stable_softmax(z)
        probs[rows, targets] -= 1.0
        return ((float(g) * probs / b).astype(logits.dtype),)

    return record("softmax_cross_entropy", (logits,), out, backward)


def mean_of(tensors: Sequence) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValidationError("mean_of needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise DimensionError("mean_of inputs must share a shape")
    n = len(tensors)
    acc = np.zeros(shape, dtype=np.float64)
    for t in tensors:
        acc += t.data
    out = (acc / n).astype(_result_dtype(*tensors))

    def backward(g):
        return tuple((g / n).astype(t.dtype) for t in tensors)

    return record("mean_of", tuple(tensors), out, backward)


PROB_FLOOR = 1e-12


def nll_from_probs(probs, targets) -> Tensor:
    """Mean of -log p[target] for already-normalised probabilities."""
    probs = as_tensor(probs)
    if probs.ndim != 2:
        raise DimensionError(f"nll_from_probs expects (batch, classes), got {probs.shape}")
    b, k = probs.shape
    targets = _check_targets(targets, b, k)
    rows = np.arange(b)
    picked = probs.data[rows, targets].astype(np.float64)
    clipped = np.maximum(picked, PROB_FLOOR)
    out = np.asarray(-np.mean(np.log(clipped)), dtype=probs.dtype)

    def backward(g):
        g_probs = np.zeros(probs.shape, dtype=np.float64)
        g_probs[rows, targets] = np.where(picked > PROB_FLOOR, -float(g) / (b * clipped), 0.0)
        return (g_probs.astype(probs.dtype),)

    return record("nll_from_probs", (probs,), out, backward)
