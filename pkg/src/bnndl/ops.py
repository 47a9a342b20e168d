"""Network-level differentiable ops: convolution, batch norm, pooling, loss."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, as_tensor, make_node

# -- convolution ----------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape [B, C, Ho, Wo, kh, kw] over an already padded input."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[B,Ci,H,W]`` with ``w[Co,Ci,Kh,Kw]`` and zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    b, ci, h, wd = x.shape
    co, wci, kh, kw = w.shape
    if ci != wci:
        raise ConfigError(f"conv2d channel mismatch: input has {ci}, weight expects {wci}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d needs stride >= 1 and pad >= 0 (got {stride}, {pad})")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{wd} with pad {pad}")

    xv = x.values
    xp = np.pad(xv, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xv
    cols = _windows(xp, kh, kw, stride)[:, :, :ho, :wo]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, ci * kh * kw)
    wmat = w.values.reshape(co, ci * kh * kw)
    out = (cols @ wmat.T).reshape(b, ho, wo, co).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, co)
        gw = (gmat.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(b, ho, wo, ci, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xv.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw

    return make_node(np.ascontiguousarray(out), (x, w), backward)


# -- batch normalization ----------------------------------------------------


def bn_inference(x: np.ndarray, mean: np.ndarray, var: np.ndarray,
                 gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Eval-mode batch norm on raw arrays, channel axis 1.

    This exact expression is shared with the fusion compiler so both paths
    round identically.
    """
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return ((x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps)
            * gamma.reshape(shape) + beta.reshape(shape))


class BNState:
    """Moving statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        if eps <= 0:
            raise ConfigError("batch norm eps must be positive")
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.initialized = False

    def set(self, mean, var) -> None:
        self.mean = np.asarray(mean, dtype=self.mean.dtype).copy()
        self.var = np.asarray(var, dtype=self.var.dtype).copy()
        self.initialized = True


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel batch norm over every axis except 1.

    Train mode normalises with batch statistics and updates ``state`` by an
    exponential moving average (unbiased variance). Eval mode uses ``state``.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ConfigError(f"batchnorm channel mismatch: input has {c} channels, "
                          f"gamma {gamma.shape}, beta {beta.shape}, state {state.mean.shape}")
    if not training:
        if not state.initialized:
            raise ConfigError("batchnorm evaluated in eval mode before moving statistics exist")
        xv = x.values
        dtype = xv.dtype
        mean_ = state.mean.astype(dtype)
        var_ = state.var.astype(dtype)
        out = bn_inference(xv, mean_, var_, gamma.values, beta.values, state.eps)
        shape = (1, -1) + (1,) * (x.ndim - 2)
        inv = (1.0 / np.sqrt(var_ + state.eps)).reshape(shape)
        xhat = (xv - mean_.reshape(shape)) * inv
        axes = (0,) + tuple(range(2, x.ndim))

        def backward_eval(g):
            gg = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(dtype)
            gb = np.sum(g, axis=axes, dtype=np.float64).astype(dtype)
            return g * gamma.values.reshape(shape) * inv, gg, gb

        return make_node(out.astype(dtype), (x, gamma, beta), backward_eval)

    axes = (0,) + tuple(range(2, x.ndim))
    n = x.values.size // c
    if n < 2:
        raise ConfigError("batchnorm train mode needs at least 2 values per channel")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    xv = x.values
    dtype = xv.dtype
    mu = np.mean(xv, axis=axes, dtype=np.float64)
    centered = xv - mu.reshape(shape).astype(dtype)
    var = np.mean(np.square(centered, dtype=np.float64), axis=axes)
    inv = (1.0 / np.sqrt(var + state.eps)).astype(dtype)
    xhat = centered * inv.reshape(shape)
    out = xhat * gamma.values.reshape(shape) + beta.values.reshape(shape)

    m = state.momentum
    state.mean = ((1 - m) * state.mean + m * mu).astype(state.mean.dtype)
    state.var = ((1 - m) * state.var + m * var * n / (n - 1)).astype(state.var.dtype)
    state.initialized = True

    def backward(g):
        gg = np.sum(g * xhat, axis=axes, dtype=np.float64).astype(dtype)
        gb = np.sum(g, axis=axes, dtype=np.float64).astype(dtype)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.values.reshape(shape)
            mean_g = np.mean(gxhat, axis=axes, dtype=np.float64).astype(dtype).reshape(shape)
            mean_gx = np.mean(gxhat * xhat, axis=axes, dtype=np.float64).astype(dtype).reshape(shape)
            gx = (gxhat - mean_g - xhat * mean_gx) * inv.reshape(shape)
        return gx, gg, gb

    return make_node(out.astype(dtype), (x, gamma, beta), backward)


# -- pooling ----------------------------------------------------------------


def maxpool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling without padding; the gradient goes to the first maximum."""
    stride = stride or kernel
    b, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"maxpool window {kernel} larger than input {h}x{w}")
    win = _windows(x.values, kernel, kernel, stride)[:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.values)
        di, dj = np.divmod(arg, kernel)
        bi, ci, oi, oj = np.indices(arg.shape, sparse=True)
        np.add.at(gx, (bi, ci, oi * stride + di, oj * stride + dj), g)
        return (gx,)

    return make_node(np.ascontiguousarray(out), (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: ``[B,C,H,W] -> [B,C]``."""
    b, c, h, w = x.shape
    n = h * w
    out = np.mean(np.ascontiguousarray(x.values), axis=(2, 3), dtype=np.float64).astype(x.dtype)
    return make_node(out, (x,), lambda g: (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),))


# -- dense -------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[B,I] @ w[O,I]^T (+ bias[O])``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv.T
    parents = (x, w)
    if bias is not None:
        if bias.shape != (w.shape[0],):
            raise ConfigError(f"linear bias shape {bias.shape} != ({w.shape[0]},)")
        out = out + bias.values
        parents = (x, w, bias)

    def backward(g):
        grads = [g @ wv, g.T @ xv]
        if bias is not None:
            grads.append(np.sum(g, axis=0, dtype=np.float64).astype(g.dtype))
        return grads

    return make_node(out, parents, backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(f"cross entropy expects logits [B,K] and labels [B], got {logits.shape}, {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigError(f"label out of range for {k} classes")
    z = logits.values.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    nll = logsum - z[rows, labels]
    loss = np.asarray(nll.mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return ((p * (g / labels.size)).astype(logits.dtype),)

    return make_node(loss, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


__all__ = [
    "BNState",
    "as_tensor",
    "batchnorm",
    "bn_inference",
    "conv2d",
    "conv_output_size",
    "global_avg_pool",
    "linear",
    "maxpool2d",
    "softmax",
    "softmax_cross_entropy",
]
