import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poissonlab.stats import Estimate, agree, at_least, mean_se, neg_log_mean, neg_log_mean_exp

finite = st.floats(-50, 50, allow_nan=False)


def test_mean_se():
    e = mean_se([1.0, 2.0, 3.0, 4.0])
    assert e.value == 2.5 and e.se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)


def test_within_and_difference():
    e = Estimate(1.0, 0.1)
    assert e.within(1.29) and not e.within(1.31)
    d = Estimate(3.0, 0.3) - Estimate(1.0, 0.4)
    assert d.value == 2.0 and d.se == pytest.approx(0.5)


def test_one_sided_and_agree():
    assert at_least(Estimate(0.9, 0.05), Estimate(1.0, 0.0))
    assert not at_least(Estimate(0.8, 0.01), Estimate(1.0, 0.01))
    assert at_least(Estimate(1.0 - 1e-16, 0.0), Estimate(1.0, 0.0))
    assert agree(Estimate(1.0, 0.1), Estimate(1.2, 0.1)) and not agree(Estimate(1.0, 0.01), Estimate(1.2, 0.01))


@given(st.lists(finite, min_size=2, max_size=50), finite)
def test_neg_log_mean_exp_shift(xs, c):
    """Adding a constant to F shifts -log E exp(-F) by that constant, SE unchanged."""
    a = neg_log_mean_exp(np.array(xs))
    b = neg_log_mean_exp(np.array(xs) + c)
    assert b.value == pytest.approx(a.value + c, abs=1e-9)
    assert b.se == pytest.approx(a.se, rel=1e-6, abs=1e-12)


@given(st.lists(finite, min_size=2, max_size=50))
def test_neg_log_mean_exp_jensen(xs):
    x = np.array(xs)
    assert neg_log_mean_exp(x).value <= x.mean() + 1e-9
    assert neg_log_mean_exp(x).value >= x.min() - 1e-9


def test_neg_log_mean_exp_large_values():
    e = neg_log_mean_exp(np.array([1000.0, 1001.0]))
    assert e.value == pytest.approx(1000 - math.log((1 + math.exp(-1)) / 2))


def test_neg_log_mean():
    e = neg_log_mean(np.array([1.0, 1.0, 1.0]))
    assert e.value == 0.0 and e.se == 0.0
