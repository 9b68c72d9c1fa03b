import math

import numpy as np
import pytest
import torch
from scipy import stats

from rdcodec.coding import TOTAL
from rdcodec.entropy_model import (
    P_MIN,
    FactorizedPrior,
    GaussianParams,
    HyperSynthesis,
    bitrate_estimate,
    gaussian_cdf_tables,
    integer_bin_likelihood,
)


def lik(v, mu, sigma):
    t = lambda a: torch.tensor(a, dtype=torch.float64)  # noqa: E731
    return integer_bin_likelihood(t(v), GaussianParams(t(mu), t(sigma)))


def test_central_bin_unit_sigma():
    # 2 * Phi(0.5) - 1 from the normal CDF table
    assert float(lik(0.0, 0.0, 1.0)) == pytest.approx(0.3829249225, abs=1e-9)


@pytest.mark.parametrize("sigma", [0.3, 5.0, 60.0])
def test_central_bin_symmetry(sigma):
    expected = 2 * stats.norm.cdf(0.5 / sigma) - 1
    assert float(lik(2.0, 2.0, sigma)) == pytest.approx(max(expected, P_MIN), rel=1e-9)


def test_bins_sum_to_one():
    v = np.arange(-20, 21, dtype=np.float64)
    t = torch.tensor(v)
    p = integer_bin_likelihood(t, GaussianParams(torch.zeros_like(t), torch.ones_like(t)), p_min=0.0)
    total = float(p.sum())
    assert 0.999 < total <= 1.0 + 1e-12


def test_far_tail_is_floored_not_zero():
    p = lik([1000.0], [0.0], [0.5])
    assert float(p) == P_MIN


def test_tail_precision_matches_scipy():
    # the |v - mu| form keeps precision on both tails
    for v in (-4.0, 4.0):
        expected = stats.norm.cdf(abs(v) + 0.5, scale=1.0) - stats.norm.cdf(abs(v) - 0.5, scale=1.0)
        assert float(lik(v, 0.0, 1.0)) == pytest.approx(expected, rel=1e-9)


def test_bitrate_trivial_cases():
    half = torch.full((100,), 0.5)
    assert float(bitrate_estimate(half, torch.ones(0), 100)) == pytest.approx(1.0)
    assert float(bitrate_estimate(torch.ones(50), torch.ones(10), 100)) == 0.0
    assert math.isfinite(float(bitrate_estimate(torch.zeros(5), torch.zeros(5), 10)))


def test_bitrate_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    v = torch.round(torch.randn(40, generator=g, dtype=torch.float64) * 3)
    mu = torch.randn(40, generator=g, dtype=torch.float64, requires_grad=True)
    sigma = (torch.rand(40, generator=g, dtype=torch.float64) * 3 + 0.2).requires_grad_(True)
    p_z = torch.rand(10, generator=g, dtype=torch.float64) * 0.5 + 0.1

    def f(m, s):
        return bitrate_estimate(integer_bin_likelihood(v, GaussianParams(m, s)), p_z, 64)

    f(mu, sigma).backward()
    h = 1e-6
    for tensor, grad in ((mu, mu.grad), (sigma, sigma.grad)):
        for i in range(0, 40, 7):
            with torch.no_grad():
                plus, minus = tensor.clone(), tensor.clone()
                plus[i] += h
                minus[i] -= h
                args_p = (plus, sigma) if tensor is mu else (mu, plus)
                args_m = (minus, sigma) if tensor is mu else (mu, minus)
                fd = (f(*args_p) - f(*args_m)) / (2 * h)
            assert float(grad[i]) == pytest.approx(float(fd), rel=1e-4, abs=1e-9)


def test_hyper_synthesis_ranges():
    torch.manual_seed(0)
    hs = HyperSynthesis(4, 6, stages=2)
    params = hs(torch.randn(2, 4, 3, 3) * 50)
    assert params.mu.shape == (2, 6, 12, 12)
    assert params.sigma.min() >= 0.01 and params.sigma.max() <= 64
    scale_only = HyperSynthesis(4, 6, stages=1, scale_only=True)(torch.randn(1, 4, 2, 2))
    assert torch.equal(scale_only.mu, torch.zeros_like(scale_only.mu))


def test_factorized_prior_cdf_is_monotone():
    torch.manual_seed(0)
    prior = FactorizedPrior(5)
    v = torch.linspace(-50, 50, 2001).reshape(1, 1, 1, -1).expand(1, 5, 1, -1).contiguous()
    c = prior.cdf(v)
    assert torch.all(c[..., 1:] >= c[..., :-1])


def test_factorized_prior_likelihoods_normalize():
    torch.manual_seed(0)
    prior = FactorizedPrior(3)
    k = torch.arange(-64, 65, dtype=torch.float32).reshape(1, 1, 1, -1).expand(1, 3, 1, -1).contiguous()
    p = prior.likelihood(k)
    sums = p.sum(dim=-1).flatten()
    assert torch.all(sums > 0.99) and torch.all(sums < 1.0 + 129 * P_MIN)


def test_factorized_tables_match_likelihoods():
    torch.manual_seed(3)
    prior = FactorizedPrior(2)
    tables = prior.cdf_tables()
    for ch, table in enumerate(tables):
        lo, hi = table.support
        k = torch.arange(lo, hi + 1, dtype=torch.float32)
        z = torch.zeros(1, 2, 1, len(k))
        z[0, ch, 0] = k
        p = prior.likelihood(z)[0, ch, 0].detach().double().numpy()
        q = table.probabilities()[:-1]
        big = p > 1e-3
        np.testing.assert_allclose(q[big], p[big], atol=2.0 / TOTAL + 1e-6)


def test_gaussian_tables_reproduce_likelihood():
    rng = np.random.default_rng(0)
    mu = rng.normal(0, 4, 200)
    sigma = rng.uniform(0.05, 20, 200)
    tables = gaussian_cdf_tables(mu, sigma)
    worst = 0.0
    for m, s, table in zip(mu, sigma, tables):
        lo, hi = table.support
        k = np.arange(lo, hi + 1, dtype=np.float64)
        p = integer_bin_likelihood(torch.tensor(k), GaussianParams(torch.tensor(m), torch.tensor(s)),
                                   p_min=0.0).numpy()
        q = table.probabilities()[:-1]
        # floor/ceil rounding, plus at most one count taken back after tiny bins are lifted to 1
        worst = max(worst, np.abs(q - p).max() * TOTAL)
        assert table.offset == int(np.floor(m + 0.5)) - min(64, max(1, math.ceil(8 * s)))
    assert worst < 2.0


def test_gaussian_table_support_is_clipped():
    (t,) = gaussian_cdf_tables([0.3], [100.0])
    assert t.support == (-64, 64)
