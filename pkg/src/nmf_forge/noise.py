"""Discrete Gaussian sampling.

``sample_discrete_gaussian`` is exact: rejection from a discrete Laplace
proposal, with every Bernoulli trial decided by integer comparisons over
rationals. ``discrete_gaussian_array`` is the vectorized workhorse used for
whole NMF rows; it runs the same rejection scheme but evaluates the
acceptance probability in double precision.
"""

from __future__ import annotations

import hashlib
import math
from fractions import Fraction

import numpy as np


def _as_fraction(variance) -> Fraction:
    sigma2 = Fraction(variance)
    if sigma2 <= 0:
        raise ValueError(f"variance must be positive, got {variance!r}")
    return sigma2


def _uniform(rng: np.random.Generator, m: int) -> int:
    """Uniform integer in [0, m)."""
    if m < 2**62:
        return int(rng.integers(0, m))
    nbits = m.bit_length()
    nbytes = (nbits + 7) // 8
    while True:
        x = int.from_bytes(rng.bytes(nbytes), "little") >> (8 * nbytes - nbits)
        if x < m:
            return x


def _bernoulli_exp_unit(rng, num: int, den: int) -> bool:
    # num/den in [0, 1]: the first k with Bernoulli(num/(den k)) == 0 is odd w.p. exp(-num/den)
    k = 1
    while _uniform(rng, den * k) < num:
        k += 1
    return k % 2 == 1


def _bernoulli_exp(rng, num: int, den: int) -> bool:
    """Bernoulli(exp(-num/den)) for integers num >= 0, den > 0."""
    while num > den:
        if not _bernoulli_exp_unit(rng, 1, 1):
            return False
        num -= den
    return _bernoulli_exp_unit(rng, num, den)


def sample_discrete_laplace(scale: int, rng: np.random.Generator) -> int:
    """Integer ``y`` with probability proportional to ``exp(-|y| / scale)``."""
    t = int(scale)
    if t < 1:
        raise ValueError("discrete Laplace scale must be a positive integer")
    while True:
        u = _uniform(rng, t)
        if not _bernoulli_exp(rng, u, t):
            continue
        v = 0
        while _bernoulli_exp_unit(rng, 1, 1):
            v += 1
        x = u + t * v
        negative = _uniform(rng, 2) == 1
        if negative and x == 0:
            continue
        return -x if negative else x


def sample_discrete_gaussian(variance, rng: np.random.Generator) -> int:
    """Exact draw from the discrete Gaussian N_Z(0, variance).

    ``variance`` is converted to an exact rational; floats are taken at their
    binary value.
    """
    sigma2 = _as_fraction(variance)
    a, b = sigma2.numerator, sigma2.denominator
    t = math.isqrt(a // b) + 1
    while True:
        y = sample_discrete_laplace(t, rng)
        # gamma = (|y| - sigma2/t)^2 / (2 sigma2) = (|y| t b - a)^2 / (2 a b t^2)
        diff = abs(y) * t * b - a
        if _bernoulli_exp(rng, diff * diff, 2 * a * b * t * t):
            return y


def discrete_gaussian_array(variance: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` i.i.d. discrete Gaussian draws as an int64 array."""
    if not variance > 0:
        raise ValueError(f"variance must be positive, got {variance!r}")
    t = math.floor(math.sqrt(variance)) + 1
    p = -math.expm1(-1.0 / t)
    shift = variance / t
    out = np.empty(size, dtype=np.int64)
    filled = 0
    while filled < size:
        n = int((size - filled) * 1.7) + 8
        y = (rng.geometric(p, n) - rng.geometric(p, n)).astype(np.int64)
        accept = rng.random(n) < np.exp(-((np.abs(y) - shift) ** 2) / (2.0 * variance))
        y = y[accept][: size - filled]
        out[filled : filled + y.size] = y
        filled += y.size
    return out


def discrete_gaussian_pmf(variance: float, support: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force PMF on ``[-support, support]`` by direct normalization."""
    xs = np.arange(-support, support + 1)
    w = np.array([math.exp(-(x * x) / (2.0 * variance)) for x in xs])
    return xs, w / w.sum()


def rho_to_variance(rho: float) -> float:
    """Noise variance giving rho-zCDP for a sensitivity-1 count: 1 / (2 rho)."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    return 1.0 / (2.0 * rho)


def substream(master_seed: int, *keys: object) -> np.random.Generator:
    """Counter-based generator keyed by ``(master_seed, *keys)``.

    Draws depend only on the key, never on the order substreams are created.
    """
    h = hashlib.sha256(repr((int(master_seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(h[:16], "little")))


def derive_seed(master_seed: int, *keys: object) -> int:
    h = hashlib.sha256(repr((int(master_seed),) + tuple(str(k) for k in keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1
