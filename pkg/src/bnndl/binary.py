"""Binarization primitives and the conv / BN / pool / sign block.

``sign`` maps 0 to +1 everywhere in this package. That keeps it monotone
non-decreasing, so ``sign(maxpool(x)) == maxpool(sign(x))`` holds exactly and
the fused comparator can use an inclusive ``>=``.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .errors import ConfigError
from .ops import BNState, batchnorm, conv2d, maxpool2d
from .tensor import Tensor, make_node

STE_WINDOW = 1.0


def sign_values(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1, -1).astype(x.dtype if x.dtype.kind == "f" else np.int8)


def sign_ste(x: Tensor, window: float = STE_WINDOW) -> Tensor:
    """Sign activation with the HardTanh straight-through gradient.

    Backward passes the upstream gradient where ``|x| <= window`` and zero
    elsewhere; the window is closed at both ends.
    """
    pass_mask = np.abs(x.values) <= window
    return make_node(sign_values(x.values), (x,), lambda g: (g * pass_mask,))


def binarize_weights(latent: Tensor, windowed: bool = False) -> Tensor:
    """Binarize latent weights to +-1.

    The default backward is the identity; ``windowed=True`` applies the same
    ``|w| <= 1`` mask as the activation STE.
    """
    if windowed:
        return sign_ste(latent)
    return make_node(sign_values(latent.values), (latent,), lambda g: (g,))


# -- module plumbing ----------------------------------------------------------


class Parameter(Tensor):
    """Trainable leaf tensor.

    ``kind`` is ``"latent"`` for binarized weights (clipped to [-1, 1] after
    every optimizer step), ``"bn"`` for batch-norm affine terms, and
    ``"real"`` for anything else.
    """

    def __init__(self, values, kind: str = "real", dtype=None, name: str | None = None):
        super().__init__(values, requires_grad=True, dtype=dtype, name=name)
        self.kind = kind


class Module:
    training: bool = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BNState]]:
        for key, val in vars(self).items():
            if isinstance(val, BNState):
                yield prefix + key, val
        for key, child in self.children():
            yield from child.named_bn_states(prefix + key + ".")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        self.gamma = Parameter(np.ones(channels), kind="bn", dtype=dtype)
        self.beta = Parameter(np.zeros(channels), kind="bn", dtype=dtype)
        self.state = BNState(channels, momentum=momentum, eps=eps, dtype=dtype)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm(x, self.gamma, self.beta, self.state, self.training)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class BinConvLayer(Module):
    """Binary conv, batch norm, optional max pool, optional sign.

    ``binarize_input=False`` marks the first layer, which consumes real
    images. ``sign=False`` marks the logits layer whose BN output stays real.
    After :meth:`forward`, ``self.tap`` holds the tensor fed to the sign
    (post-pool by default, pre-pool with ``tap="pre_pool"``).
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int = 1,
                 pool: int = 0, binarize_input: bool = True, sign: bool = True,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1, tap: str = "post_pool",
                 windowed_weight_ste: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float64, name: str = ""):
        if tap not in ("post_pool", "pre_pool"):
            raise ConfigError(f"unknown tap position {tap!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = min(1.0, glorot_bound(c_in * kernel * kernel, c_out * kernel * kernel))
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)),
                                kind="latent", dtype=dtype)
        self.bn = BatchNorm2d(c_out, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.pad, self.pool = stride, pad, pool
        self.binarize_input = binarize_input
        self.sign = sign
        self.tap_position = tap
        self.windowed_weight_ste = windowed_weight_ste
        self.name = name
        self.tap: Tensor | None = None

    def binary_weight(self) -> Tensor:
        return binarize_weights(self.weight, windowed=self.windowed_weight_ste)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ConfigError(f"layer {self.name or '?'}: expected input [B,{self.c_in},H,W], got {x.shape}")
        if self.binarize_input and not np.all(np.abs(x.values) == 1):
            raise ConfigError(f"layer {self.name or '?'}: binarize_input layer received non +-1 input")
        a = conv2d(x, self.binary_weight(), self.stride, self.pad)
        a = self.bn(a)
        pre_pool = a
        if self.pool:
            a = maxpool2d(a, self.pool)
        if not self.sign:
            self.tap = None
            return a
        self.tap = pre_pool if self.tap_position == "pre_pool" else a
        return sign_ste(a)


def bnn_block_forward(x: Tensor, layer: BinConvLayer, training: bool) -> tuple[Tensor, Tensor | None]:
    """Run one block in the requested mode and return ``(output, tap)``."""
    layer.train(training)
    y = layer(x)
    return y, layer.tap


def clip_latent(params) -> None:
    """Clip every latent binarized weight into [-1, 1] in place."""
    for p in params:
        if getattr(p, "kind", None) == "latent":
            np.clip(p.values, -1.0, 1.0, out=p.values)
