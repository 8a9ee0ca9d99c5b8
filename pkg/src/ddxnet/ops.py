"""Differentiable kernels: forward computation plus vector-Jacobian products.

Every op takes :class:`~ddxnet.tensor.Tensor` inputs and an optional ``tape``.
Ops never mutate their inputs; batch normalization returns its updated running
statistics instead of writing them back.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .errors import InvalidArgumentError, ShapeError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def _expect_rank(t: Tensor, rank: int, what: str) -> None:
    if t.data.ndim != rank:
        raise ShapeError(f"{what}: expected rank {rank}, got shape {t.shape}")


def _record(tape, op, fn, inputs, kwargs, out, vjp):
    if tape is not None:
        tape.record(op, fn, inputs, kwargs, out, vjp)
    return out


# -- convolution ---------------------------------------------------------------


def _im2col_causal(x: np.ndarray, k: int, dilation: int) -> np.ndarray:
    """(N, Cin, T) -> (N, Cin*K, T); row cin*K + j holds x[., cin, t - j*dilation]."""
    n, c, t = x.shape
    cols = np.zeros((n, c, k, t), dtype=x.dtype)
    for j in range(k):
        shift = j * dilation
        if shift < t:
            cols[:, :, j, shift:] = x[:, :, : t - shift]
    return cols.reshape(n, c * k, t)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1, tape=None) -> Tensor:
    """Dilated causal convolution with output length equal to input length.

    ``y[n, o, t] = b[o] + sum_{c, j} w[o, c, j] * x[n, c, t - j*dilation]`` where
    samples before t=0 read as zero.
    """
    _expect_rank(x, 3, "conv1d_causal input")
    _expect_rank(w, 3, "conv1d_causal weight")
    _expect_rank(b, 1, "conv1d_causal bias")
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise InvalidArgumentError(f"dilation must be a positive integer, got {dilation!r}")
    n, cin, t = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d_causal: input has {cin} channels, weight expects {wcin}")
    if b.shape[0] != cout:
        raise ShapeError(f"conv1d_causal: bias has {b.shape[0]} entries, weight has {cout} outputs")
    w2 = w.data.reshape(cout, cin * k)
    if k == 1:
        cols = x.data
    else:
        cols = _im2col_causal(x.data, k, dilation)
    y = np.matmul(w2, cols)
    y += b.data[None, :, None]
    out = Tensor(y)

    def vjp(gy):
        gb = gy.sum(axis=(0, 2))
        gw = np.tensordot(gy, cols, axes=([0, 2], [0, 2])).reshape(cout, cin, k)
        gcols = np.matmul(w2.T, gy)
        if k == 1:
            gx = gcols
        else:
            gcols = gcols.reshape(n, cin, k, t)
            gx = gcols[:, :, 0, :].copy()
            for j in range(1, k):
                shift = j * dilation
                if shift < t:
                    gx[:, :, : t - shift] += gcols[:, :, j, shift:]
        return gx, gw, gb

    return _record(tape, "conv1d_causal", conv1d_causal, (x, w, b), {"dilation": dilation}, out, vjp)


# -- normalization / activation --------------------------------------------------


def batchnorm1d(x: Tensor, gamma: Tensor, beta: Tensor, running, mode=Mode.TRAIN, tape=None):
    """Per-channel normalization over (N, T).

    Returns ``(y, new_running)``.  In train mode batch statistics are used and the
    running (mean, var) pair is advanced with momentum 0.1 (variance term uses the
    unbiased batch estimate).  In eval mode ``new_running`` is ``running``.
    """
    _expect_rank(x, 3, "batchnorm1d input")
    n, c, t = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm1d: affine params must have shape ({c},)")
    run_mean, run_var = running
    if np.shape(run_mean) != (c,) or np.shape(run_var) != (c,):
        raise ShapeError(f"batchnorm1d: running stats must have shape ({c},)")
    mode = Mode(mode)
    xd = x.data
    g = gamma.data
    if mode is Mode.TRAIN:
        m = n * t
        mean = xd.mean(axis=(0, 2))
        xc = xd - mean[None, :, None]
        var = np.mean(xc * xc, axis=(0, 2))
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = xc * inv_std[None, :, None]
        unbiased = var * (m / (m - 1)) if m > 1 else var
        new_running = (
            ((1 - BN_MOMENTUM) * run_mean + BN_MOMENTUM * mean).astype(run_mean.dtype),
            ((1 - BN_MOMENTUM) * run_var + BN_MOMENTUM * unbiased).astype(run_var.dtype),
        )
    else:
        inv_std = (1.0 / np.sqrt(run_var + BN_EPS)).astype(xd.dtype)
        xhat = (xd - run_mean.astype(xd.dtype)[None, :, None]) * inv_std[None, :, None]
        new_running = running
    y = xhat * g[None, :, None] + beta.data[None, :, None]
    out = Tensor(y)

    def vjp(gy):
        gbeta = gy.sum(axis=(0, 2))
        ggamma = (gy * xhat).sum(axis=(0, 2))
        gxhat = gy * g[None, :, None]
        if mode is Mode.TRAIN:
            mean_g = gxhat.mean(axis=(0, 2))
            mean_gx = (gxhat * xhat).mean(axis=(0, 2))
            gx = (gxhat - mean_g[None, :, None] - xhat * mean_gx[None, :, None]) * inv_std[None, :, None]
        else:
            gx = gxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    _record(tape, "batchnorm1d", batchnorm1d, (x, gamma, beta), {"running": running, "mode": mode}, out, vjp)
    return out, new_running


def relu(x: Tensor, tape=None) -> Tensor:
    y = np.maximum(x.data, 0)
    out = Tensor(y)

    def vjp(gy):
        # y > 0 exactly where x > 0, so the gradient at x == 0 is 0
        return (gy * (y > 0),)

    return _record(tape, "relu", relu, (x,), {}, out, vjp)


# -- shape ops -------------------------------------------------------------------------


def concat_channels(parts, tape=None) -> Tensor:
    parts = list(parts)
    if not parts:
        raise InvalidArgumentError("concat_channels needs at least one part")
    for p in parts:
        _expect_rank(p, 3, "concat_channels part")
    n, _, t = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != n or p.shape[2] != t:
            raise ShapeError(f"concat_channels: part shape {p.shape} incompatible with N={n}, T={t}")
    extents = [p.shape[1] for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    bounds = np.cumsum(extents)[:-1]

    def vjp(gy):
        return tuple(np.ascontiguousarray(s) for s in np.split(gy, bounds, axis=1))

    return _record(tape, "concat_channels", _concat_replay, tuple(parts), {}, out, vjp)


def _concat_replay(*parts):
    return concat_channels(parts)


def split_channels(x: Tensor, extents) -> list[Tensor]:
    """Inverse of :func:`concat_channels` (not differentiable; used in tests and tools)."""
    if sum(extents) != x.shape[1]:
        raise ShapeError(f"extents {list(extents)} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum(extents)[:-1]
    return [Tensor(s) for s in np.split(x.data, bounds, axis=1)]


def avg_pool1d(x: Tensor, window: int, stride: int, tape=None) -> Tensor:
    _expect_rank(x, 3, "avg_pool1d input")
    n, c, t = x.shape
    if window < 1 or stride < 1:
        raise InvalidArgumentError("avg_pool1d window and stride must be >= 1")
    if window > t:
        raise InvalidArgumentError(f"avg_pool1d window {window} exceeds length {t}")
    t_out = (t - window) // stride + 1
    xd = x.data
    if window == stride:
        y = xd[:, :, : t_out * window].reshape(n, c, t_out, window).mean(axis=3)
    else:
        acc = np.zeros((n, c, t_out), dtype=xd.dtype)
        for j in range(window):
            acc += xd[:, :, j : j + stride * (t_out - 1) + 1 : stride]
        y = acc / window
    out = Tensor(y.astype(xd.dtype, copy=False))

    def vjp(gy):
        gx = np.zeros_like(xd)
        share = gy / window
        if window == stride:
            gx[:, :, : t_out * window] = np.repeat(share, window, axis=2)
        else:
            for j in range(window):
                gx[:, :, j : j + stride * (t_out - 1) + 1 : stride] += share
        return (gx,)

    return _record(tape, "avg_pool1d", avg_pool1d, (x,), {"window": window, "stride": stride}, out, vjp)


def global_avg_pool(x: Tensor, tape=None) -> Tensor:
    _expect_rank(x, 3, "global_avg_pool input")
    t = x.shape[2]
    out = Tensor(x.data.mean(axis=2))

    def vjp(gy):
        return (np.repeat(gy[:, :, None] / t, t, axis=2),)

    return _record(tape, "global_avg_pool", global_avg_pool, (x,), {}, out, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor, tape=None) -> Tensor:
    """``y = x @ w.T + b`` for x (N, F), w (O, F), b (O,)."""
    _expect_rank(x, 2, "linear input")
    _expect_rank(w, 2, "linear weight")
    _expect_rank(b, 1, "linear bias")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input has {x.shape[1]} features, weight expects {w.shape[1]}")
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"linear: bias has {b.shape[0]} entries, weight has {w.shape[0]} outputs")
    out = Tensor(x.data @ w.data.T + b.data)

    def vjp(gy):
        return gy @ w.data, gy.T @ x.data, gy.sum(axis=0)

    return _record(tape, "linear", linear, (x, w, b), {}, out, vjp)


# -- losses ------------------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_cross_entropy(logits: Tensor, labels, class_weights=None, tape=None):
    """Mean (optionally class-weighted) softmax cross entropy.

    Returns ``(loss, dlogits)`` where ``loss`` is a rank-0 tensor and ``dlogits``
    is the exact gradient of the loss with respect to ``logits``.  With weights the
    per-sample terms are weighted but still divided by N.
    """
    _expect_rank(logits, 2, "softmax_cross_entropy logits")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InvalidArgumentError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    if class_weights is None:
        sw = np.ones(n, dtype=z.dtype)
    else:
        cw = np.asarray(class_weights, dtype=z.dtype)
        if cw.shape != (k,):
            raise ShapeError(f"class_weights must have shape ({k},)")
        sw = cw[labels]
    loss = Tensor(np.asarray((sw * nll).sum() / n, dtype=z.dtype))
    p = np.exp(shifted - lse[:, None])
    p[np.arange(n), labels] -= 1
    dlogits = (p * (sw / n)[:, None]).astype(z.dtype, copy=False)

    def vjp(g):
        return (dlogits * g,)

    kwargs = {"labels": labels, "class_weights": class_weights}
    _record(tape, "softmax_cross_entropy", softmax_cross_entropy, (logits,), kwargs, loss, vjp)
    return loss, dlogits


def sigmoid_bce(logits: Tensor, targets, tape=None):
    """Mean over all N*K entries of the numerically stable binary cross entropy."""
    _expect_rank(logits, 2, "sigmoid_bce logits")
    t = np.asarray(targets)
    if t.shape != logits.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise InvalidArgumentError("sigmoid_bce targets must be 0 or 1")
    z = logits.data
    t = t.astype(z.dtype)
    elems = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size
    loss = Tensor(np.asarray(elems.sum() / count, dtype=z.dtype))
    dlogits = ((sigmoid(z) - t) / count).astype(z.dtype, copy=False)

    def vjp(g):
        return (dlogits * g,)

    _record(tape, "sigmoid_bce", sigmoid_bce, (logits,), {"targets": targets}, loss, vjp)
    return loss, dlogits
