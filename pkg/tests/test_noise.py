import math

import numpy as np
import pytest
from scipy import stats

from nmf_forge.noise import (derive_seed, discrete_gaussian_array, discrete_gaussian_pmf, rho_to_variance,
                             sample_discrete_gaussian, sample_discrete_laplace, substream)


def pmf_oracle(variance, support=50):
    xs = range(-support, support + 1)
    w = {x: math.exp(-x * x / (2 * variance)) for x in xs}
    z = sum(w.values())
    return {x: v / z for x, v in w.items()}


def test_pmf_ratio_sigma2_one():
    pmf = pmf_oracle(1.0)
    assert pmf[1] / pmf[0] == pytest.approx(0.60653, abs=1e-5)
    xs, p = discrete_gaussian_pmf(1.0)
    assert p[xs == 1][0] / p[xs == 0][0] == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_tiny_variance_is_almost_surely_zero():
    pmf = pmf_oracle(1e-4)
    assert pmf[0] > 0.9999
    rng = np.random.default_rng(0)
    assert all(sample_discrete_gaussian(1e-4, rng) == 0 for _ in range(200))
    assert not discrete_gaussian_array(1e-4, 10_000, rng).any()


def test_nonpositive_variance_rejected():
    rng = np.random.default_rng(0)
    for v in (0, -1.0):
        with pytest.raises(ValueError):
            sample_discrete_gaussian(v, rng)
        with pytest.raises(ValueError):
            discrete_gaussian_array(v, 3, rng)


def test_vectorized_variance_sigma2_two():
    pmf = pmf_oracle(2.0)
    true_var = sum(x * x * p for x, p in pmf.items())
    draws = discrete_gaussian_array(2.0, 100_000, np.random.default_rng(1))
    assert abs(draws.var() - true_var) / true_var < 0.05


def test_exact_sampler_variance_sigma2_two():
    pmf = pmf_oracle(2.0)
    true_var = sum(x * x * p for x, p in pmf.items())
    rng = np.random.default_rng(2)
    draws = np.array([sample_discrete_gaussian(2.0, rng) for _ in range(20_000)])
    # 20k draws: sd of the variance estimate is ~1% of true_var
    assert abs(draws.var() - true_var) / true_var < 0.05


def test_discrete_laplace_goodness_of_fit():
    t = 3
    rng = np.random.default_rng(5)
    draws = np.array([sample_discrete_laplace(t, rng) for _ in range(20_000)])
    xs = np.arange(-15, 16)
    w = np.exp(-np.abs(xs) / t)
    expected = w / w.sum() * len(draws)
    observed = np.array([(draws == x).sum() for x in xs])
    inside = np.abs(draws) <= 15
    observed = np.append(observed, (~inside).sum())
    tail = len(draws) * (1 - w.sum() / (w.sum() + 2 * sum(math.exp(-k / t) for k in range(16, 200))))
    expected = np.append(expected * (len(draws) - tail) / len(draws), tail)
    assert stats.chisquare(observed, expected * observed.sum() / expected.sum()).pvalue > 0.001


def test_substreams_are_order_independent():
    a = substream(1, "g", "q").integers(0, 10**9, 5)
    substream(1, "other", "q").integers(0, 10**9, 5)
    b = substream(1, "g", "q").integers(0, 10**9, 5)
    assert (a == b).all()
    assert not (a == substream(2, "g", "q").integers(0, 10**9, 5)).all()
    assert derive_seed(1, "r", 0) != derive_seed(1, "r", 1)


def test_rho_to_variance():
    assert rho_to_variance(0.25) == 2.0
    with pytest.raises(ValueError):
        rho_to_variance(0)
