"""Small statistical helpers shared by the Monte Carlo estimators."""

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

Z95 = NormalDist().inv_cdf(0.975)


@dataclass(frozen=True)
class Interval:
    point: float
    low: float
    high: float

    @property
    def half_width(self):
        return 0.5 * (self.high - self.low)

    def covers(self, value):
        return self.low <= value <= self.high


def wilson_interval(successes, n, z=Z95):
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValueError("n must be positive")
    if not 0 <= successes <= n:
        raise ValueError(f"successes={successes} outside [0, {n}]")
    p = successes / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return Interval(p, max(0.0, centre - half), min(1.0, centre + half))


def mean_and_se(values, axis=0):
    """Sample mean and standard error (ddof=1) along ``axis``."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    if n < 2:
        raise ValueError("need at least two samples")
    mean = np.mean(values, axis=axis)
    se = np.std(values, axis=axis, ddof=1) / math.sqrt(n)
    return mean, se


def binomial_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def dispersion_diagnostic(samples, z=Z95):
    """var/mean^2 - 1 with a delta-method confidence interval.

    Zero for an exponential law. Written as m2/m1^2 - 2 in terms of the raw
    moments, whose joint sampling covariance gives the interval.
    """
    x = np.asarray(samples, dtype=float)
    n = x.shape[0]
    m1 = x.mean()
    m2 = np.mean(x * x)
    if m1 <= 0:
        raise ValueError("dispersion diagnostic needs a positive mean")
    value = m2 / m1**2 - 2.0
    grad = np.array([-2.0 * m2 / m1**3, 1.0 / m1**2])
    cov = np.cov(np.vstack([x, x * x]))
    se = math.sqrt(max(grad @ cov @ grad, 0.0) / n)
    return Interval(value, value - z * se, value + z * se), se
