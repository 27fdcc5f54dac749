import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poissonlab.quadrature import axis_rule, cell_edges, gauss_legendre, integrate_box, refine_edges, tensor_rule


def test_gauss_legendre_exact_for_polynomials():
    x, w = gauss_legendre(8)
    for k in range(16):
        assert np.dot(w, x ** k) == pytest.approx(1.0 / (k + 1), rel=1e-13)


def test_cell_edges_respect_breaks_and_width():
    e = cell_edges(0.0, 3.0, [1.2, 5.0, -1.0], 0.5)
    assert e[0] == 0.0 and e[-1] == 3.0
    assert 1.2 in e
    assert np.all(np.diff(e) <= 0.5 + 1e-12)


def test_refine_edges_halves():
    e = refine_edges(np.array([0.0, 1.0, 3.0]), 2)
    assert np.allclose(e, [0, 0.5, 1, 2, 3])


def test_axis_and_tensor_rules_integrate_volume():
    x, w = axis_rule(np.array([0.0, 0.3, 2.0]), 4)
    assert w.sum() == pytest.approx(2.0)
    pts, wt = tensor_rule([np.array([0.0, 1.0]), np.array([0.0, 2.0])], 3)
    assert pts.shape[1] == 2 and wt.sum() == pytest.approx(2.0)


def test_integrate_box_kinked_integrand():
    val = integrate_box(lambda p: np.abs(p[:, 0] - 0.3), [0.0], [1.0], breaks=[[0.3]])
    assert val == pytest.approx(0.3 ** 2 / 2 + 0.7 ** 2 / 2, abs=1e-12)


def test_integrate_box_two_dimensional_gaussian():
    val = integrate_box(lambda p: np.exp(-(p ** 2).sum(axis=1)), [-6, -6], [6, 6], max_width=1.0)
    assert val == pytest.approx(math.pi, abs=1e-9)


@given(st.floats(-3, 3), st.floats(0.01, 3))
def test_integrate_box_matches_antiderivative(a, width):
    b = a + width
    val = integrate_box(lambda p: np.sin(p[:, 0]) ** 2, [a], [b])
    exact = (b - a) / 2 - (math.sin(2 * b) - math.sin(2 * a)) / 4
    assert val == pytest.approx(exact, abs=1e-9)
