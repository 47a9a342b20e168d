"""Network construction for the VGG-style and pre-activation ResNet BNN families.

A :class:`NetworkSpec` is the declarative description; it serialises to a
``key=value`` grammar string (``family=vgg,x=128,small=false,classes=10``)
that is echoed into checkpoints and accepted on the command line.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .binary import BatchNorm2d, BinConvLayer, Module, Parameter, binarize_weights, glorot_bound, sign_ste
from .errors import ConfigError
from .ops import conv2d, conv_output_size, global_avg_pool, linear
from .tensor import Tensor, add, reshape


@dataclass(frozen=True)
class NetworkSpec:
    family: str = "vgg"
    x: int = 128
    classes: int = 10
    small: bool = False
    in_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        if self.family not in ("vgg", "resnet"):
            raise ConfigError(f"unknown network family {self.family!r}")
        if self.x < 1 or self.classes < 1 or self.in_channels < 1 or self.input_size < 1:
            raise ConfigError(f"network spec values must be positive: {self}")

    def to_string(self) -> str:
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return ",".join(parts)

    @classmethod
    def parse(cls, text: str) -> "NetworkSpec":
        kwargs = {}
        known = {f.name: f.type for f in fields(cls)}
        for item in filter(None, (s.strip() for s in text.split(","))):
            if "=" not in item:
                raise ConfigError(f"network grammar item {item!r} is not key=value")
            key, val = (s.strip() for s in item.split("=", 1))
            if key == "num_classes":
                key = "classes"
            if key not in known:
                raise ConfigError(f"unknown network grammar key {key!r}")
            if key == "family":
                kwargs[key] = val
            elif key == "small":
                if val.lower() not in ("true", "false", "1", "0"):
                    raise ConfigError(f"small must be true/false, got {val!r}")
                kwargs[key] = val.lower() in ("true", "1")
            else:
                try:
                    kwargs[key] = int(val)
                except ValueError:
                    raise ConfigError(f"network grammar value for {key} must be an integer, got {val!r}") from None
        return cls(**kwargs)

    def topology(self) -> str:
        """Layer string in the ``xC-xC-MP-...`` notation."""
        x = self.x
        if self.family == "vgg":
            items = [f"{x}C", f"{x}C", "MP", f"{2*x}C", f"{2*x}C", "MP"]
            if not self.small:
                items += [f"{4*x}C", f"{4*x}C"]
            items += [f"{self.classes}C", "GP"]
        else:
            items = [f"{x}C"] + [f"{m*x}B" for m in (1, 1, 2, 2, 4, 4, 8, 8)] + ["GP", f"{self.classes}L"]
        return "-".join(items)


@dataclass(frozen=True)
class LayerDesc:
    """Static geometry of one weight layer (H, W are output sizes)."""

    name: str
    kind: str  # conv | linear
    c_in: int
    c_out: int
    kernel: int
    stride: int
    pad: int
    in_size: int
    out_size: int
    pool: int = 0
    binarize_input: bool = True
    sign: bool = True

    @property
    def post_size(self) -> int:
        return self.out_size // self.pool if self.pool else self.out_size


def vgg_layer_descs(spec: NetworkSpec) -> list[LayerDesc]:
    x = spec.x
    plan = [(x, 0), (x, 2), (2 * x, 0), (2 * x, 2)]
    if not spec.small:
        plan += [(4 * x, 0), (4 * x, 0)]
    descs = []
    c_in, size = spec.in_channels, spec.input_size
    for i, (c_out, pool) in enumerate(plan):
        out = conv_output_size(size, 3, 1, 1)
        descs.append(LayerDesc(f"layers.{i}", "conv", c_in, c_out, 3, 1, 1, size, out, pool,
                               binarize_input=i > 0, sign=True))
        c_in, size = c_out, (out // pool if pool else out)
    descs.append(LayerDesc(f"layers.{len(plan)}", "conv", c_in, spec.classes, 3, 1, 1, size,
                           conv_output_size(size, 3, 1, 1), 0, binarize_input=True, sign=False))
    return descs


def resnet_layer_descs(spec: NetworkSpec) -> list[LayerDesc]:
    x = spec.x
    size = spec.input_size
    descs = [LayerDesc("stem", "conv", spec.in_channels, x, 3, 1, 1, size, size, 0,
                       binarize_input=False, sign=False)]
    c_in = x
    for i, (c_out, stride) in enumerate(_resnet_plan(x)):
        out = conv_output_size(size, 3, stride, 1)
        descs.append(LayerDesc(f"blocks.{i}.conv1", "conv", c_in, c_out, 3, stride, 1, size, out))
        descs.append(LayerDesc(f"blocks.{i}.conv2", "conv", c_out, c_out, 3, 1, 1, out, out))
        if stride != 1 or c_in != c_out:
            descs.append(LayerDesc(f"blocks.{i}.proj", "conv", c_in, c_out, 1, stride, 0, size,
                                   conv_output_size(size, 1, stride, 0)))
        c_in, size = c_out, out
    descs.append(LayerDesc("fc", "linear", c_in, spec.classes, 1, 1, 0, 1, 1, 0,
                           binarize_input=False, sign=False))
    return descs


def _resnet_plan(x: int) -> list[tuple[int, int]]:
    plan = []
    prev = x
    for mult in (1, 1, 2, 2, 4, 4, 8, 8):
        c = mult * x
        plan.append((c, 2 if c != prev else 1))
        prev = c
    return plan


def layer_descs(spec: NetworkSpec) -> list[LayerDesc]:
    return vgg_layer_descs(spec) if spec.family == "vgg" else resnet_layer_descs(spec)


# -- networks -------------------------------------------------------------------


class Network(Module):
    spec: NetworkSpec

    def taps(self) -> list[Tensor]:
        raise NotImplementedError

    def sign_count(self) -> int:
        raise NotImplementedError

    @property
    def dtype(self):
        return self.parameters()[0].dtype


class VGGNet(Network):
    def __init__(self, spec: NetworkSpec, rng=None, dtype=np.float64, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1, tap: str = "post_pool", windowed_weight_ste: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        self.layers = [
            BinConvLayer(d.c_in, d.c_out, d.kernel, d.stride, d.pad, d.pool, d.binarize_input, d.sign,
                         bn_eps=bn_eps, bn_momentum=bn_momentum, tap=tap,
                         windowed_weight_ste=windowed_weight_ste, rng=rng, dtype=dtype, name=d.name)
            for d in vgg_layer_descs(spec)
        ]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return global_avg_pool(x)

    def taps(self) -> list[Tensor]:
        return [l.tap for l in self.layers if l.sign]

    def sign_count(self) -> int:
        return sum(1 for l in self.layers if l.sign)


class BinConv(Module):
    """Binarized-weight convolution with no BN or activation attached."""

    def __init__(self, c_in, c_out, kernel, stride, pad, rng, dtype, windowed=False):
        bound = min(1.0, glorot_bound(c_in * kernel * kernel, c_out * kernel * kernel))
        self.weight = Parameter(rng.uniform(-bound, bound, (c_out, c_in, kernel, kernel)),
                                kind="latent", dtype=dtype)
        self.stride, self.pad, self.windowed = stride, pad, windowed

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, binarize_weights(self.weight, self.windowed), self.stride, self.pad)


class ResBlock(Module):
    """Pre-activation binary residual block with BN on both summands.

    ``x -> BN1 -> sign -> conv1 -> BN2 -> sign -> conv2 -> BN3`` is added to
    ``BN4(shortcut)``. The shortcut is the identity, or a strided 1x1 binary
    conv of ``sign(BN1(x))`` when the shape changes.
    """

    def __init__(self, c_in, c_out, stride, rng, dtype, bn_eps=1e-5, bn_momentum=0.1, windowed=False):
        kw = dict(eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.bn1 = BatchNorm2d(c_in, **kw)
        self.conv1 = BinConv(c_in, c_out, 3, stride, 1, rng, dtype, windowed)
        self.bn2 = BatchNorm2d(c_out, **kw)
        self.conv2 = BinConv(c_out, c_out, 3, 1, 1, rng, dtype, windowed)
        self.bn3 = BatchNorm2d(c_out, **kw)
        self.bn4 = BatchNorm2d(c_out, **kw)
        self.proj = BinConv(c_in, c_out, 1, stride, 0, rng, dtype, windowed) if (stride != 1 or c_in != c_out) else None
        self.tap1: Tensor | None = None
        self.tap2: Tensor | None = None

    def forward(self, x: Tensor) -> Tensor:
        self.tap1 = self.bn1(x)
        s1 = sign_ste(self.tap1)
        self.tap2 = self.bn2(self.conv1(s1))
        main = self.bn3(self.conv2(sign_ste(self.tap2)))
        short = self.bn4(self.proj(s1) if self.proj is not None else x)
        return add(main, short)


class ResNetBNN(Network):
    def __init__(self, spec: NetworkSpec, rng=None, dtype=np.float64, bn_eps: float = 1e-5,
                 bn_momentum: float = 0.1, windowed_weight_ste: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        x = spec.x
        self.stem = BinConv(spec.in_channels, x, 3, 1, 1, rng, dtype, windowed_weight_ste)
        blocks = []
        c_in = x
        for c_out, stride in _resnet_plan(x):
            blocks.append(ResBlock(c_in, c_out, stride, rng, dtype, bn_eps, bn_momentum, windowed_weight_ste))
            c_in = c_out
        self.blocks = blocks
        self.bn_out = BatchNorm2d(c_in, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        bound = min(1.0, glorot_bound(c_in, spec.classes))
        self.fc = Parameter(rng.uniform(-bound, bound, (spec.classes, c_in)), kind="latent", dtype=dtype)
        self.bn_logits = BatchNorm2d(spec.classes, eps=bn_eps, momentum=bn_momentum, dtype=dtype)
        self.windowed = windowed_weight_ste

    def forward(self, x: Tensor) -> Tensor:
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        h = global_avg_pool(self.bn_out(h))
        logits = linear(h, binarize_weights(self.fc, self.windowed))
        b, k = logits.shape
        return reshape(self.bn_logits(reshape(logits, (b, k, 1, 1))), (b, k))

    def taps(self) -> list[Tensor]:
        out = []
        for block in self.blocks:
            out += [block.tap1, block.tap2]
        return out

    def sign_count(self) -> int:
        return 2 * len(self.blocks)


def build_vgg(x: int, num_classes: int = 10, small: bool = False, in_channels: int = 3,
              input_size: int = 32, **kwargs) -> VGGNet:
    if x < 1:
        raise ConfigError("width x must be >= 1")
    return VGGNet(NetworkSpec("vgg", x, num_classes, small, in_channels, input_size), **kwargs)


def build_resnet(x: int, num_classes: int = 100, in_channels: int = 3, input_size: int = 32,
                 **kwargs) -> ResNetBNN:
    if x < 1:
        raise ConfigError("width x must be >= 1")
    return ResNetBNN(NetworkSpec("resnet", x, num_classes, False, in_channels, input_size), **kwargs)


def build_network(spec: NetworkSpec, **kwargs) -> Network:
    if spec.family == "vgg":
        return VGGNet(spec, **kwargs)
    kwargs.pop("tap", None)
    return ResNetBNN(spec, **kwargs)


def conv_depth(spec: NetworkSpec) -> int:
    return sum(1 for d in layer_descs(spec) if d.kind == "conv")


def max_width(spec: NetworkSpec) -> int:
    return max(d.c_out for d in layer_descs(spec))


def weight_bits(spec: NetworkSpec) -> int:
    return sum(d.c_in * d.c_out * d.kernel * d.kernel for d in layer_descs(spec))


def bn_param_count(spec: NetworkSpec) -> int:
    """Number of BN gamma/beta scalars in the built network."""
    descs = layer_descs(spec)
    if spec.family == "vgg":
        return sum(2 * d.c_out for d in descs)
    total = 0
    c_in = spec.x
    for c_out, _ in _resnet_plan(spec.x):
        total += 2 * (c_in + 3 * c_out)
        c_in = c_out
    return total + 2 * c_in + 2 * spec.classes


def output_shape(spec: NetworkSpec, batch: int) -> tuple[int, int]:
    return (batch, spec.classes)
