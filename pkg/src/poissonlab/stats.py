"""Monte Carlo estimates with standard errors."""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np


class Estimate(NamedTuple):
    value: float
    se: float

    def within(self, target: float, k: float = 3.0, floor: float = 1e-12) -> bool:
        """|value - target| <= k * se (plus a float floor for zero-variance cases)."""
        return abs(self.value - target) <= k * self.se + floor * max(1.0, abs(target))

    def __sub__(self, other: "Estimate") -> "Estimate":
        """Difference of two independent estimates."""
        return Estimate(self.value - other.value, math.hypot(self.se, other.se))


def mean_se(x) -> Estimate:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Estimate(math.nan, math.inf)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
    return Estimate(float(np.mean(x)), se)


def agree(a: Estimate, b: Estimate, k: float = 3.0, floor: float = 1e-12) -> bool:
    """Two independent estimates agree within ``k`` joint standard errors."""
    return abs(a.value - b.value) <= k * math.hypot(a.se, b.se) + floor * max(1.0, abs(a.value))


def at_least(a: Estimate, b: Estimate, k: float = 3.0, floor: float = 1e-12) -> bool:
    """a >= b up to ``k`` joint standard errors (one-sided)."""
    return a.value - b.value >= -k * math.hypot(a.se, b.se) - floor * max(1.0, abs(b.value))


def neg_log_mean(x) -> Estimate:
    """-log of the sample mean of positive values, SE by the delta method.

    The mean is computed after factoring out the largest log so that
    ``x = exp(-F)`` with large F does not underflow.
    """
    x = np.asarray(x, dtype=float)
    m = mean_se(x)
    if not m.value > 0:
        return Estimate(math.inf, math.inf)
    return Estimate(-math.log(m.value), m.se / m.value)


def neg_log_mean_exp(f) -> Estimate:
    """-log mean(exp(-f)) computed stably, SE by the delta method."""
    f = np.asarray(f, dtype=float)
    shift = float(np.min(f))
    est = neg_log_mean(np.exp(-(f - shift)))
    return Estimate(est.value + shift, est.se)
