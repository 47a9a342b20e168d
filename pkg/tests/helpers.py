"""Independent oracles shared by the test modules.

Nothing here calls into the package's own kernels: convolution is a direct
loop, gradients come from central differences, and loss formulas are
evaluated one scalar at a time.
"""

import math

import numpy as np

from bnndl.tensor import Tensor

FD_STEP = 1e-5
KINK_MARGIN = 1e-3


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, arrays, index, h=FD_STEP):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = fn(*arrays)
        flat[i] = old - h
        down = fn(*arrays)
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def check_gradients(build, arrays, tol=1e-5):
    """Compare autodiff gradients of ``build(*tensors)`` (a scalar Tensor) with finite differences.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def value(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(value, arrays, i)
        worst = max(worst, rel_error(t.grad, num))
    return worst


def weighted_sum(t: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce any tensor to a scalar with fixed random weights."""
    return (t * Tensor(weights)).sum()


def away_from_zero(x: np.ndarray, margin: float = KINK_MARGIN) -> np.ndarray:
    """Push values at least ``margin`` away from 0, keeping their sign."""
    s = np.where(x >= 0, 1.0, -1.0)
    return s * (np.abs(x) + 2 * margin)


def direct_conv(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation by explicit loops over every output element."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((b, c, h + 2 * pad, wd + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n in range(b):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[n, oc, i, j] = acc
    return out


def scalar_losses(mu: float, sigma: float, k_d: float, k_s: float, k_m: float):
    """Closed-form degeneration, saturation and mismatch penalties, one scalar at a time."""
    d = abs(mu) - k_d * sigma
    s = k_s * sigma - 1.0
    m = 1.0 - abs(mu) - k_m * sigma
    return (d * d if d > 0 else 0.0, s * s if s > 0 else 0.0, m * m if m > 0 else 0.0)


def population_std(values) -> float:
    vals = [float(v) for v in values]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def random_small_vgg(rng, dtype=np.float64, size=16, in_channels=3, classes=10, blocks=None):
    """VGG-style stack with 2-4 sign blocks (<= 16 channels) and random BN statistics.

    Some gammas are exactly zero or negative so every comparator flavour is exercised.
    """
    from bnndl.binary import BinConvLayer
    from bnndl.models import NetworkSpec, VGGNet

    blocks = blocks or int(rng.integers(2, 5))
    spec = NetworkSpec("vgg", 4, classes, True, in_channels, size)
    net = VGGNet(spec, rng=rng, dtype=dtype)
    layers, c_in, cur = [], in_channels, size
    for i in range(blocks):
        c_out = int(rng.integers(2, 17))
        pool = 2 if (cur >= 4 and rng.random() < 0.5) else 0
        layers.append(BinConvLayer(c_in, c_out, 3, 1, 1, pool, binarize_input=i > 0, rng=rng, dtype=dtype,
                                   name=f"layers.{i}"))
        c_in = c_out
        cur = cur // 2 if pool else cur
    layers.append(BinConvLayer(c_in, classes, 3, 1, 1, 0, True, sign=False, rng=rng, dtype=dtype,
                               name=f"layers.{blocks}"))
    net.layers = layers
    for i, layer in enumerate(net.layers):
        c = layer.c_out
        g = rng.normal(0, 1, c)
        g[rng.random(c) < 0.15] = 0.0
        layer.bn.gamma.values[...] = g
        layer.bn.beta.values[...] = rng.normal(0, 1, c)
        scale = 20.0 if i == 0 else 3.0 * math.sqrt(layer.c_in * 9)
        layer.bn.state.set(rng.normal(0, scale, c), rng.uniform(0.3, 3, c) * scale ** 2)
    return net.eval()


def float_sign_trace(net, x: np.ndarray):
    """Per-layer sign outputs (True for +1) and logits of the float eval pipeline."""
    from bnndl.ops import global_avg_pool

    net.eval()
    h = Tensor(x)
    signs = []
    for layer in net.layers:
        h = layer(h)
        if layer.sign:
            signs.append(h.values > 0)
    return signs, global_avg_pool(h).values
