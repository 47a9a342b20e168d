"""Distribution loss on sign pre-activations and per-channel diagnostics.

For every channel the pre-activation tensor is summarised by its mean ``mu``
and population standard deviation ``sigma``. Assuming a Gaussian, the
``eps``/``1-eps`` quantiles sit at ``mu -/+ k*sigma`` which yields three
hinge penalties:

* degeneration  ``[(|mu| - k_D sigma)_+]^2``
* saturation    ``[(k_S sigma - 1)_+]^2``
* mismatch      ``[(1 - |mu| - k_M sigma)_+]^2``

The network loss is the plain sum of the three over all layers and channels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .tensor import Tensor, abs_, add, as_tensor, mean, mul, relu_pos, square, std_population, sum_


@dataclass
class DistLossConfig:
    k_d: float = 1.0
    k_s: float = 0.25
    k_m: float = 0.25
    lam: float = 2.0
    eps_std: float = 1e-8

    def __post_init__(self):
        if min(self.k_d, self.k_s, self.k_m) < 0:
            raise ConfigError("distribution-loss k coefficients must be >= 0")
        if self.lam < 0:
            raise ConfigError("distribution-loss lambda must be >= 0")
        if self.eps_std <= 0:
            raise ConfigError("eps_std must be positive")


# -- Gaussian quantile ---------------------------------------------------------

# Acklam's rational approximation to the standard normal inverse CDF
# (relative error below 1.2e-9 over the open unit interval).
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_ppf(p: float) -> float:
    """Standard normal quantile function for ``0 < p < 1``."""
    if not 0.0 < p < 1.0:
        raise ConfigError(f"normal_ppf needs 0 < p < 1, got {p}")
    if p < _P_LOW:
        q = math.sqrt(-2 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    if p > 1 - _P_LOW:
        return -normal_ppf(1 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)


def k_from_epsilon(epsilon: float) -> float:
    """Gaussian multiplier k such that ``mu - k*sigma`` is the eps-quantile."""
    if not 0.0 < epsilon < 0.5:
        raise ConfigError(f"epsilon must lie in (0, 0.5), got {epsilon}")
    return normal_ppf(1.0 - epsilon)


# -- differentiable statistics and penalties -----------------------------------


def channel_stats(a: Tensor, eps_std: float = 1e-8) -> tuple[Tensor, Tensor]:
    """Mean and population std (with ``eps_std`` under the root) of all elements."""
    if a.values.size < 2:
        raise ConfigError("channel_stats needs at least 2 elements")
    return mean(a), std_population(a, eps=eps_std)


def loss_degeneration(mu, sigma, k_d) -> Tensor:
    mu = as_tensor(mu)
    return square(relu_pos(add(abs_(mu), mul(sigma, -k_d))))


def loss_saturation(sigma, k_s) -> Tensor:
    sigma = as_tensor(sigma)
    return square(relu_pos(add(mul(sigma, k_s), -1.0)))


def loss_mismatch(mu, sigma, k_m) -> Tensor:
    mu = as_tensor(mu)
    inner = add(add(neg_abs(mu), mul(sigma, -k_m)), 1.0)
    return square(relu_pos(inner))


def neg_abs(x: Tensor) -> Tensor:
    return mul(abs_(x), -1.0)


def per_channel_stats(tap: Tensor, eps_std: float) -> tuple[Tensor, Tensor]:
    """Vectorised (mu, sigma) per channel of a ``[B, C, ...]`` tap."""
    if tap.ndim < 2:
        raise ConfigError(f"tap tensor needs a channel axis, got shape {tap.shape}")
    axes = (0,) + tuple(range(2, tap.ndim))
    n = tap.values.size // tap.shape[1]
    if n < 2:
        raise ConfigError("each tapped channel needs at least 2 elements")
    return mean(tap, axis=axes), std_population(tap, axis=axes, eps=eps_std)


def layer_terms(tap: Tensor, cfg: DistLossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Per-channel ``L_D, L_S, L_M`` vectors for one tap."""
    mu, sigma = per_channel_stats(tap, cfg.eps_std)
    return (loss_degeneration(mu, sigma, cfg.k_d),
            loss_saturation(sigma, cfg.k_s),
            loss_mismatch(mu, sigma, cfg.k_m))


def distribution_loss(taps: Sequence[Tensor], cfg: DistLossConfig) -> Tensor:
    """Sum of the three penalties over every tapped layer and channel."""
    if not taps:
        raise ConfigError("distribution_loss called with no taps registered")
    total = None
    for tap in taps:
        ld, ls, lm = layer_terms(tap, cfg)
        layer = sum_(add(add(ld, ls), lm))
        total = layer if total is None else add(total, layer)
    return total


def total_loss(ce: Tensor, dl: Tensor | None, lam: float) -> Tensor:
    if dl is None or lam == 0:
        return ce
    return add(ce, mul(dl, lam))


# -- diagnostics ------------------------------------------------------------------


def empirical_quantile(samples: np.ndarray, q: float) -> float:
    """Sorted-sample quantile with linear interpolation between order stats."""
    s = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    if s.size == 0:
        raise ConfigError("quantile of an empty sample")
    pos = q * (s.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, s.size - 1)
    frac = pos - lo
    return float(s[lo] + (s[hi] - s[lo]) * frac)


@dataclass
class ChannelStats:
    """Summary of one channel's recorded pre-activations."""

    samples: np.ndarray = field(repr=False)
    mu: float = 0.0
    sigma: float = 0.0
    positive_ratio: float = 0.0

    @classmethod
    def from_samples(cls, samples) -> "ChannelStats":
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size == 0:
            raise ConfigError("ChannelStats needs at least one sample")
        return cls(samples=np.sort(s), mu=float(s.mean()), sigma=float(s.std()),
                   positive_ratio=float(np.mean(s > 0)))

    def quantile(self, q: float) -> float:
        return empirical_quantile(self.samples, q)

    def abs_quantile(self, q: float) -> float:
        return empirical_quantile(np.abs(self.samples), q)


@dataclass(frozen=True)
class ChannelFlags:
    degenerate: bool
    saturated: bool
    mismatched: bool


def classify_channel(stats: ChannelStats, epsilon: float) -> ChannelFlags:
    """Flag the three pathologies using relaxed empirical quantiles."""
    return ChannelFlags(
        degenerate=stats.quantile(epsilon) >= 0 or stats.quantile(1 - epsilon) <= 0,
        saturated=stats.abs_quantile(epsilon) >= 1,
        mismatched=stats.abs_quantile(1 - epsilon) <= 1,
    )


def collect_channel_stats(values: np.ndarray) -> list[ChannelStats]:
    """Split a ``[N, C, ...]`` array of recorded pre-activations by channel."""
    values = np.asarray(values)
    c = values.shape[1]
    per = np.moveaxis(values, 1, 0).reshape(c, -1)
    return [ChannelStats.from_samples(row) for row in per]


DIAGNOSTIC_COLUMNS = ("layer", "channel", "mu", "sigma", "positive_ratio",
                      "degenerate", "saturated", "mismatched")


def export_diagnostics(layer: str | int, stats: Iterable[ChannelStats], epsilon: float = 0.05) -> list[dict]:
    rows = []
    for ch, st in enumerate(stats):
        flags = classify_channel(st, epsilon)
        rows.append({
            "layer": layer, "channel": ch, "mu": st.mu, "sigma": st.sigma,
            "positive_ratio": st.positive_ratio, "degenerate": int(flags.degenerate),
            "saturated": int(flags.saturated), "mismatched": int(flags.mismatched),
        })
    return rows


def diagnostics_csv(rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=DIAGNOSTIC_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def histogram_rows(values, bins: int = 50) -> list[tuple[float, float, int]]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
