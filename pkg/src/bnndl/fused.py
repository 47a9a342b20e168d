"""Pure-logical inference: bit-packed XNOR/popcount convolutions + comparators.

A trained VGG-family network is compiled into a :class:`FusedModel`:

* eval-mode BN followed by sign becomes a per-channel integer comparison on
  the convolution sum (``>=`` for gamma > 0, ``<=`` for gamma < 0, a constant
  when gamma == 0);
* max pooling moves after the sign and becomes an OR over the window;
* the real-input first layer runs on Q8 fixed-point pixels (add/subtract
  only, since its weights are +-1);
* the logits layer keeps a real-valued epilogue (BN affine + global mean).

Bits: +1 is stored as 1, -1 as 0. Activations are packed per pixel along the
channel axis into 64-bit words. Filter taps are stored in the order
channel-fastest, then kx, then ky; padding bits in the last word are zero
and masked out.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .ops import bn_inference, conv_output_size
from .train.data import FRAC_BITS, Normalizer, Q_MAX, Q_MIN

WORD = 64
MAGIC = b"BNNFUSE1"
VERSION = 1


# -- bit packing -------------------------------------------------------------------


def n_words(channels: int) -> int:
    return (channels + WORD - 1) // WORD


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into uint64 words (bit i = element i)."""
    bits = np.asarray(bits, dtype=bool)
    c = bits.shape[-1]
    nw = n_words(c)
    padded = np.zeros(bits.shape[:-1] + (nw * WORD,), dtype=bool)
    padded[..., :c] = bits
    packed = np.packbits(padded, axis=-1, bitorder="little")
    return packed.view("<u8").astype(np.uint64).reshape(bits.shape[:-1] + (nw,))


def unpack_bits(words: np.ndarray, channels: int) -> np.ndarray:
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = np.unpackbits(words.view(np.uint8), axis=-1, bitorder="little")
    return raw[..., :channels].astype(bool)


def channel_mask(channels: int) -> np.ndarray:
    return pack_bits(np.ones(channels, dtype=bool))


# -- layers ----------------------------------------------------------------------------


@dataclass
class Epilogue:
    """Real-valued BN affine applied to the logits layer's integer sums."""

    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    eps: float

    @property
    def dtype(self):
        return self.mean.dtype


@dataclass
class FusedLayer:
    kind: str  # "fixed" (Q8 real input) or "binary"
    c_in: int
    c_out: int
    kernel: int
    stride: int
    pad: int
    pool: int
    weights: np.ndarray  # uint64 [c_out, kernel*kernel, n_words(c_in)]
    threshold: np.ndarray | None = None  # int64 [c_out]
    direction: np.ndarray | None = None  # int8 [c_out], +1 ge / -1 le
    constant: np.ndarray | None = None  # int8 [c_out], 0 or +-1
    epilogue: Epilogue | None = None

    @property
    def sign(self) -> bool:
        return self.epilogue is None

    def max_abs_sum(self) -> int:
        taps = self.c_in * self.kernel * self.kernel
        return taps * max(-Q_MIN, Q_MAX) if self.kind == "fixed" else taps

    def weights_pm1(self) -> np.ndarray:
        """Unpacked weights as int8 +-1 of shape [c_out, c_in, K, K]."""
        k = self.kernel
        bits = unpack_bits(self.weights, self.c_in)  # [co, k*k, ci]
        pm1 = np.where(bits, 1, -1).astype(np.int8).reshape(self.c_out, k, k, self.c_in)
        return pm1.transpose(0, 3, 1, 2)


def pack_weights(w_pm1: np.ndarray) -> np.ndarray:
    """``[Co, Ci, K, K]`` +-1 weights into ``[Co, K*K, words]`` bit words."""
    co, ci, kh, kw = w_pm1.shape
    taps = np.transpose(w_pm1 > 0, (0, 2, 3, 1)).reshape(co, kh * kw, ci)
    return pack_bits(taps)


def _bn_sign(value: float, mean, var, gamma, beta, eps: float, c: int, dtype) -> bool:
    x = np.array([[value]], dtype=dtype)
    y = bn_inference(x, mean[c:c + 1], var[c:c + 1], gamma[c:c + 1], beta[c:c + 1], eps)
    return bool(y[0, 0] >= 0)


def fuse_block(w_pm1: np.ndarray, gamma, beta, mean, var, eps: float, dtype=np.float64,
               stride: int = 1, pad: int = 1, pool: int = 0, kind: str = "binary") -> FusedLayer:
    """Merge eval-mode BN and sign after a +-1 convolution into integer comparators.

    For gamma > 0 the output is +1 iff ``sum >= ceil(tau)`` with
    ``tau = mean - beta * sqrt(var + eps) / gamma`` (in sum units). The
    integer threshold is then checked against the exact floating-point
    evaluation of BN in ``dtype`` and nudged if rounding moves the boundary,
    so the comparator reproduces the float pipeline bit for bit.
    """
    w_pm1 = np.asarray(w_pm1)
    if not np.all(np.abs(w_pm1) == 1):
        raise ConfigError("fuse_block expects weights already binarized to +-1")
    dtype = np.dtype(dtype).type
    gamma, beta, mean, var = (np.asarray(a, dtype=dtype) for a in (gamma, beta, mean, var))
    eps = float(eps)
    co, ci, k, _ = w_pm1.shape
    layer = FusedLayer(kind, ci, co, k, stride, pad, pool, pack_weights(w_pm1))
    scale = 2.0 ** -FRAC_BITS if kind == "fixed" else 1.0
    n = layer.max_abs_sum()
    threshold = np.zeros(co, dtype=np.int64)
    direction = np.ones(co, dtype=np.int8)
    constant = np.zeros(co, dtype=np.int8)
    for c in range(co):
        g = float(gamma[c])
        if g == 0:
            constant[c] = 1 if float(beta[c]) >= 0 else -1
            continue

        def f(a: int) -> bool:
            return _bn_sign(a * scale, mean, var, gamma, beta, eps, c, dtype)

        tau = (float(mean[c]) - float(beta[c]) * math.sqrt(float(var[c]) + eps) / g) / scale
        if g > 0:
            t = int(min(max(math.ceil(tau), -n), n + 1)) if math.isfinite(tau) else (n + 1 if tau > 0 else -n)
            while t > -n and f(t - 1):
                t -= 1
            while t <= n and not f(t):
                t += 1
        else:
            direction[c] = -1
            t = int(min(max(math.floor(tau), -n - 1), n)) if math.isfinite(tau) else (n if tau > 0 else -n - 1)
            while t < n and f(t + 1):
                t += 1
            while t >= -n and not f(t):
                t -= 1
        threshold[c] = t
    layer.threshold, layer.direction, layer.constant = threshold, direction, constant
    return layer


def fuse_head(w_pm1: np.ndarray, gamma, beta, mean, var, eps: float, dtype=np.float64,
              stride: int = 1, pad: int = 1, kind: str = "binary") -> FusedLayer:
    """Logits layer: integer conv sums followed by a real BN epilogue."""
    w_pm1 = np.asarray(w_pm1)
    dtype = np.dtype(dtype).type
    co, ci, k, _ = w_pm1.shape
    ep = Epilogue(*(np.asarray(a, dtype=dtype).copy() for a in (mean, var, gamma, beta)), eps=float(eps))
    return FusedLayer(kind, ci, co, k, stride, pad, 0, pack_weights(w_pm1), epilogue=ep)


# -- kernels ---------------------------------------------------------------------------


def xnor_popcount_conv(act: np.ndarray, layer: FusedLayer) -> np.ndarray:
    """Integer conv sums from packed activations ``[B, H, W, words]``.

    Each valid tap contributes ``2 * popcount(XNOR(a, w) & mask) - c_in``;
    padded taps contribute nothing, matching zero padding of the float conv.
    Returns int64 ``[B, c_out, Ho, Wo]``.
    """
    if layer.kind != "binary":
        raise ConfigError("xnor_popcount_conv needs a binary layer")
    b, h, w, nw = act.shape
    if nw != n_words(layer.c_in) or layer.weights.shape[-1] != nw:
        raise ConfigError(f"packed input has {nw} words, layer expects {n_words(layer.c_in)}")
    k, s, p = layer.kernel, layer.stride, layer.pad
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    if ho < 1 or wo < 1:
        raise ConfigError("kernel does not fit the input")
    actp = np.zeros((b, h + 2 * p, w + 2 * p, nw), dtype=np.uint64)
    actp[:, p:p + h, p:p + w] = act
    valid = np.zeros((h + 2 * p, w + 2 * p), dtype=bool)
    valid[p:p + h, p:p + w] = True
    mask = channel_mask(layer.c_in)
    out = np.zeros((b, ho, wo, layer.c_out), dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            win = actp[:, ky:ky + s * ho:s, kx:kx + s * wo:s][:, :ho, :wo]  # [B,Ho,Wo,nw]
            vm = valid[ky:ky + s * ho:s, kx:kx + s * wo:s][:ho, :wo]
            wt = layer.weights[:, ky * k + kx]  # [Co, nw]
            xnor = ~(win[:, :, :, None, :] ^ wt[None, None, None]) & mask
            matches = np.bitwise_count(xnor).sum(axis=-1, dtype=np.int64)
            out += (2 * matches - layer.c_in) * vm[None, :, :, None]
    return out.transpose(0, 3, 1, 2)


def fixed_point_conv(q: np.ndarray, layer: FusedLayer) -> np.ndarray:
    """Q8 input codes ``[B, C, H, W]`` convolved with +-1 weights (adds/subtracts only)."""
    b, c, h, w = q.shape
    if c != layer.c_in:
        raise ConfigError(f"fixed-point layer expects {layer.c_in} channels, got {c}")
    k, s, p = layer.kernel, layer.stride, layer.pad
    ho, wo = conv_output_size(h, k, s, p), conv_output_size(w, k, s, p)
    qp = np.pad(q.astype(np.int32), ((0, 0), (0, 0), (p, p), (p, p)))
    wpm = layer.weights_pm1().astype(np.int32)
    out = np.zeros((b, layer.c_out, ho, wo), dtype=np.int64)
    for ky in range(k):
        for kx in range(k):
            win = qp[:, :, ky:ky + s * ho:s, kx:kx + s * wo:s][:, :, :ho, :wo]
            out += np.einsum("bchw,oc->bohw", win, wpm[:, :, ky, kx], dtype=np.int64)
    return out


def comparator(sums: np.ndarray, layer: FusedLayer) -> np.ndarray:
    thr = layer.threshold[None, :, None, None]
    dirn = layer.direction[None, :, None, None]
    const = layer.constant[None, :, None, None]
    cmp = np.where(dirn > 0, sums >= thr, sums <= thr)
    return np.where(const != 0, const > 0, cmp)


def or_pool(bits: np.ndarray, k: int) -> np.ndarray:
    """Max pool of +-1 values expressed as OR over non-overlapping windows."""
    b, c, h, w = bits.shape
    ho, wo = (h - k) // k + 1, (w - k) // k + 1
    v = bits[:, :, :ho * k, :wo * k].reshape(b, c, ho, k, wo, k)
    return v.any(axis=(3, 5))


def run_epilogue(sums: np.ndarray, ep: Epilogue) -> np.ndarray:
    x = sums.astype(ep.dtype)
    y = bn_inference(x, ep.mean, ep.var, ep.gamma, ep.beta, ep.eps).astype(ep.dtype)
    return np.mean(np.ascontiguousarray(y), axis=(2, 3), dtype=np.float64).astype(ep.dtype)


# -- model -----------------------------------------------------------------------------


@dataclass
class FusedModel:
    in_channels: int
    input_size: int
    lut: np.ndarray  # int16 [C, 256]
    layers: list[FusedLayer] = field(default_factory=list)

    @property
    def classes(self) -> int:
        return self.layers[-1].c_out

    def quantize(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.uint8)
        return np.stack([self.lut[c][images[:, c]] for c in range(images.shape[1])], axis=1)

    def forward(self, images: np.ndarray, trace: bool = False, chunk: int = 64):
        """Run raw uint8 images ``[B, C, H, W]``.

        Returns logits, plus the list of per-layer sign outputs (bool, +1 ==
        True, after pooling) when ``trace`` is set.
        """
        if images.ndim != 4 or images.shape[1:] != (self.in_channels, self.input_size, self.input_size):
            raise ConfigError(f"expected images [B,{self.in_channels},{self.input_size},{self.input_size}], "
                              f"got {images.shape}")
        logits, traces = [], []
        for start in range(0, len(images), chunk):
            lg, tr = self._forward_chunk(images[start:start + chunk])
            logits.append(lg)
            traces.append(tr)
        logits = np.concatenate(logits)
        if not trace:
            return logits
        merged = [np.concatenate([t[i] for t in traces]) for i in range(len(traces[0]))]
        return logits, merged

    def _forward_chunk(self, images):
        q = self.quantize(images)
        act = None
        signs = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "fixed":
                sums = fixed_point_conv(q, layer)
            else:
                sums = xnor_popcount_conv(act, layer)
            if not layer.sign:
                return run_epilogue(sums, layer.epilogue), signs
            bits = comparator(sums, layer)
            if layer.pool:
                bits = or_pool(bits, layer.pool)
            signs.append(bits)
            act = pack_bits(np.moveaxis(bits, 1, -1))
        raise ConfigError("fused model has no logits layer")

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.forward(images), axis=1)


def logical_forward(model: FusedModel, image: np.ndarray) -> int:
    """Class index for one raw image ``[C, H, W]`` (or a batch, returning an array)."""
    image = np.asarray(image)
    if image.ndim == 3:
        return int(model.predict(image[None])[0])
    return model.predict(image)


def compile_network(net, normalizer: Normalizer) -> FusedModel:
    """Compile an eval-mode VGG-family network into a :class:`FusedModel`."""
    from .models import VGGNet

    if not isinstance(net, VGGNet):
        raise ConfigError("fusion supports the VGG family only (residual adds are real-valued)")
    dtype = net.dtype.type
    spec = net.spec
    model = FusedModel(spec.in_channels, spec.input_size, normalizer.lut())
    for i, layer in enumerate(net.layers):
        st = layer.bn.state
        if not st.initialized:
            raise ConfigError(f"layer {i} has no BN moving statistics")
        w = np.where(layer.weight.values >= 0, 1, -1).astype(np.int8)
        args = (w, layer.bn.gamma.values, layer.bn.beta.values, st.mean.astype(dtype), st.var.astype(dtype),
                st.eps, dtype)
        kind = "binary" if layer.binarize_input else "fixed"
        if layer.sign:
            model.layers.append(fuse_block(*args, stride=layer.stride, pad=layer.pad, pool=layer.pool, kind=kind))
        else:
            if layer.pool:
                raise ConfigError("pooling on the logits layer is not supported")
            model.layers.append(fuse_head(*args, stride=layer.stride, pad=layer.pad, kind=kind))
    return model


def compile_checkpoint(ck, dtype=np.float32) -> FusedModel:
    net = ck.build(dtype)
    norm = Normalizer(np.asarray(ck.meta["norm_mean"]), np.asarray(ck.meta["norm_std"]))
    return compile_network(net, norm)


# -- serialisation -----------------------------------------------------------------------
#
#   magic "BNNFUSE1" | u32 version | u32 in_channels | u32 input_size | u32 n_layers
#   lut: in_channels * 256 * i16
#   per layer: u8 kind (0 fixed, 1 binary) | u8 has_sign |
#              u32 c_in, c_out, kernel, stride, pad, pool, words |
#              weights: c_out * kernel^2 * words * u64
#              has_sign: threshold c_out * i64 | direction c_out * i8 | constant c_out * i8
#              else:     u8 float width (4|8) | f64 eps | mean, var, gamma, beta (c_out each)
#   everything little-endian


def dumps(model: FusedModel) -> bytes:
    out = [MAGIC, struct.pack("<IIII", VERSION, model.in_channels, model.input_size, len(model.layers)),
           np.asarray(model.lut, dtype="<i2").tobytes()]
    for L in model.layers:
        nw = n_words(L.c_in)
        out.append(struct.pack("<BB7I", 0 if L.kind == "fixed" else 1, int(L.sign), L.c_in, L.c_out,
                               L.kernel, L.stride, L.pad, L.pool, nw))
        out.append(np.asarray(L.weights, dtype="<u8").tobytes())
        if L.sign:
            out += [np.asarray(L.threshold, "<i8").tobytes(), np.asarray(L.direction, "i1").tobytes(),
                    np.asarray(L.constant, "i1").tobytes()]
        else:
            ep = L.epilogue
            width = ep.dtype.itemsize
            fdt = f"<f{width}"
            out.append(struct.pack("<Bd", width, ep.eps))
            out += [np.asarray(a, fdt).tobytes() for a in (ep.mean, ep.var, ep.gamma, ep.beta)]
    return b"".join(out)


def loads(raw: bytes, src: str = "<bytes>") -> FusedModel:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{src}: truncated fused model at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8) != MAGIC:
        raise DataError(f"{src}: bad fused-model magic at byte offset 0")
    version, cin, size, nl = struct.unpack("<IIII", take(16))
    if version != VERSION:
        raise DataError(f"{src}: unsupported fused-model version {version}")
    lut = np.frombuffer(take(cin * 256 * 2), dtype="<i2").reshape(cin, 256).astype(np.int16)
    model = FusedModel(cin, size, lut)
    for _ in range(nl):
        kind, has_sign, ci, co, k, s, p, pool, nw = struct.unpack("<BB7I", take(2 + 7 * 4))
        weights = np.frombuffer(take(co * k * k * nw * 8), "<u8").reshape(co, k * k, nw).astype(np.uint64)
        layer = FusedLayer("fixed" if kind == 0 else "binary", ci, co, k, s, p, pool, weights)
        if has_sign:
            layer.threshold = np.frombuffer(take(8 * co), "<i8").astype(np.int64)
            layer.direction = np.frombuffer(take(co), "i1").astype(np.int8)
            layer.constant = np.frombuffer(take(co), "i1").astype(np.int8)
        else:
            width, eps = struct.unpack("<Bd", take(9))
            if width not in (4, 8):
                raise DataError(f"{src}: bad epilogue float width {width} at byte offset {pos - 9}")
            fdt = np.dtype(f"<f{width}")
            arrs = [np.frombuffer(take(width * co), fdt).astype(fdt.newbyteorder("=")) for _ in range(4)]
            layer.epilogue = Epilogue(*arrs, eps=eps)
        model.layers.append(layer)
    if pos != len(raw):
        raise DataError(f"{src}: {len(raw) - pos} trailing bytes at byte offset {pos}")
    return model


def save(path, model: FusedModel) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> FusedModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read fused model {path}: {exc}") from None
    return loads(raw, str(path))
