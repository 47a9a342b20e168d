import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import norm

from bnndl.distloss import (ChannelStats, DIAGNOSTIC_COLUMNS, DistLossConfig, channel_stats, classify_channel,
                            collect_channel_stats, diagnostics_csv, distribution_loss, empirical_quantile,
                            export_diagnostics, histogram_rows, k_from_epsilon, loss_degeneration,
                            loss_mismatch, loss_saturation, normal_ppf, total_loss)
from bnndl.errors import ConfigError
from bnndl.tensor import Tensor

from helpers import population_std, scalar_losses

finite = dict(allow_nan=False, allow_infinity=False)


def test_channel_stats_examples():
    mu, sigma = channel_stats(Tensor([1.0, -1, 1, -1]))
    assert mu.item() == 0 and sigma.item() == pytest.approx(1.0, abs=1e-8)
    mu, sigma = channel_stats(Tensor([1.0, 2, 3, 4]))
    assert mu.item() == 2.5
    # oracle: population std by hand
    assert sigma.item() == pytest.approx(math.sqrt(population_std([1, 2, 3, 4]) ** 2 + 1e-8), abs=1e-14)
    assert sigma.item() == pytest.approx(1.11803, abs=1e-5)


def test_channel_stats_needs_two_elements():
    with pytest.raises(ConfigError):
        channel_stats(Tensor([1.0]))


@pytest.mark.parametrize("eps,k", [(0.499, 0.0025066), (0.158655253931457, 1.0), (0.025, 1.959963985)])
def test_k_from_epsilon_examples(eps, k):
    assert k_from_epsilon(eps) == pytest.approx(k, abs=1e-6)


def test_k_from_epsilon_matches_reference():
    # scipy is the independent reference for the inverse normal CDF
    for eps in np.linspace(1e-6, 0.4999, 2000):
        assert abs(k_from_epsilon(eps) - norm.ppf(1 - eps)) <= 1e-6
    for p in np.linspace(1e-9, 1 - 1e-9, 2001):
        assert abs(normal_ppf(p) - norm.ppf(p)) <= 1e-6


@pytest.mark.parametrize("eps", [0.0, 0.5, -0.1, 0.7])
def test_k_from_epsilon_range(eps):
    with pytest.raises(ConfigError):
        k_from_epsilon(eps)


def test_loss_examples():
    assert loss_degeneration(Tensor(0.0), Tensor(1.0), 1).item() == 0
    assert loss_degeneration(Tensor(0.5), Tensor(0.2), 1).item() == pytest.approx(0.09, abs=1e-15)
    assert loss_degeneration(Tensor(-0.5), Tensor(0.2), 1).item() == pytest.approx(0.09, abs=1e-15)
    assert loss_saturation(Tensor(1.0), 0.25).item() == 0
    assert loss_saturation(Tensor(8.0), 0.25).item() == 1
    assert loss_saturation(Tensor(4.0), 0.25).item() == 0
    assert loss_mismatch(Tensor(2.0), Tensor(0.1), 0.25).item() == 0
    assert loss_mismatch(Tensor(0.0), Tensor(0.0), 0.25).item() == 1
    assert loss_mismatch(Tensor(0.5), Tensor(2.0), 0.25).item() == 0


@settings(max_examples=300)
@given(st.floats(-5, 5, **finite), st.floats(0, 10, **finite), st.floats(0, 3, **finite),
       st.floats(0, 3, **finite), st.floats(0, 3, **finite))
def test_losses_match_scalar_oracle(mu, sigma, kd, ks, km):
    ld = loss_degeneration(Tensor(mu), Tensor(sigma), kd).item()
    ls = loss_saturation(Tensor(sigma), ks).item()
    lm = loss_mismatch(Tensor(mu), Tensor(sigma), km).item()
    od, os_, om = scalar_losses(mu, sigma, kd, ks, km)
    # a hinge argument below ~1e-154 squares to 0 in float64, which is not what the iff is about
    for h in (abs(mu) - kd * sigma, ks * sigma - 1, 1 - abs(mu) - km * sigma):
        assume(h <= 0 or h > 1e-150)
    assert abs(ld - od) <= 1e-12 and abs(ls - os_) <= 1e-12 and abs(lm - om) <= 1e-12
    assert (ld == 0) == (abs(mu) <= kd * sigma)
    assert (ls == 0) == (ks * sigma <= 1)
    assert (lm == 0) == (abs(mu) + km * sigma >= 1)
    # even in mu
    assert loss_degeneration(Tensor(-mu), Tensor(sigma), kd).item() == ld
    assert loss_mismatch(Tensor(-mu), Tensor(sigma), km).item() == lm


def test_distribution_loss_zero_point_and_additivity():
    cfg = DistLossConfig()
    # one channel with mean 0 and population std exactly 4
    tap = np.array([4.0, -4.0] * 8).reshape(4, 1, 2, 2)
    assert distribution_loss([Tensor(tap)], cfg).item() == pytest.approx(0, abs=1e-12)
    rng = np.random.default_rng(0)
    one = rng.normal(0.3, 0.5, size=(5, 1, 3, 3))
    single = distribution_loss([Tensor(one)], cfg).item()
    double = distribution_loss([Tensor(np.concatenate([one, one], axis=1))], cfg).item()
    assert double == pytest.approx(2 * single, rel=1e-14)
    two_layers = distribution_loss([Tensor(one), Tensor(one)], cfg).item()
    assert two_layers == pytest.approx(2 * single, rel=1e-14)


def test_distribution_loss_negation_invariant():
    tap = np.random.default_rng(1).normal(0.7, 0.4, size=(6, 3, 2, 2))
    cfg = DistLossConfig()
    assert distribution_loss([Tensor(tap)], cfg).item() == pytest.approx(
        distribution_loss([Tensor(-tap)], cfg).item(), rel=1e-14)


def test_distribution_loss_empty_raises():
    with pytest.raises(ConfigError):
        distribution_loss([], DistLossConfig())


def test_distribution_loss_constant_channel_finite_gradient():
    tap = Tensor(np.full((4, 2, 2, 2), 0.3), requires_grad=True)
    distribution_loss([tap], DistLossConfig()).backward()
    assert np.all(np.isfinite(tap.grad))


def test_total_loss_examples():
    assert total_loss(Tensor(1.0), Tensor(0.25), 2).item() == 1.5
    assert total_loss(Tensor(1.3), Tensor(9.0), 0).item() == 1.3
    assert total_loss(Tensor(1.0), Tensor(0.5), 2000).item() == 1001.0


@pytest.mark.parametrize("field,value", [("k_d", -1), ("lam", -0.1), ("eps_std", 0)])
def test_config_validation(field, value):
    with pytest.raises(ConfigError):
        DistLossConfig(**{field: value})


def test_empirical_quantile_oracle():
    s = np.array([3.0, 1.0, 2.0, 5.0])
    assert empirical_quantile(s, 0) == 1 and empirical_quantile(s, 1) == 5
    assert empirical_quantile(s, 0.5) == 2.5
    assert empirical_quantile(s, 1 / 3) == pytest.approx(2.0)


def test_classify_examples():
    assert classify_channel(ChannelStats.from_samples(np.linspace(0.1, 2, 100)), 0.05).degenerate
    u = ChannelStats.from_samples(np.linspace(-0.5, 0.5, 1001))
    assert classify_channel(u, 0.05) == classify_channel(u, 0.05).__class__(False, False, True)
    balanced = ChannelStats.from_samples(np.array([-3.0, 3.0] * 50))
    flags = classify_channel(balanced, 0.05)
    assert flags.saturated and not flags.degenerate and not flags.mismatched


@settings(max_examples=100)
@given(st.lists(st.floats(-10, 10, **finite), min_size=1, max_size=60))
def test_channel_stats_invariants(samples):
    s = ChannelStats.from_samples(samples)
    assert s.sigma >= 0 and 0 <= s.positive_ratio <= 1
    qs = [s.quantile(q) for q in np.linspace(0, 1, 11)]
    assert all(a <= b + 1e-12 for a, b in zip(qs, qs[1:]))


def test_diagnostics_export():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(50, 3, 2, 2))
    vals[:, 1] = np.abs(vals[:, 1]) + 0.1
    stats = collect_channel_stats(vals)
    rows = export_diagnostics("layers.2", stats)
    assert [r["channel"] for r in rows] == [0, 1, 2]
    assert rows[1]["degenerate"] == 1 and rows[1]["positive_ratio"] == 1.0
    text = diagnostics_csv(rows)
    assert text.splitlines()[0] == ",".join(DIAGNOSTIC_COLUMNS)
    assert len(text.splitlines()) == 4
    hist = histogram_rows(vals[:, 0].ravel(), 50)
    assert len(hist) == 50 and sum(h[2] for h in hist) == 200
