import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from poissonlab.configuration import Configuration, MarkTimeFunction, add_mass, indicator, pair
from poissonlab.errors import ContractError
from poissonlab.functionals import (CylindricalFunctional, Functional, constant, count, difference,
                                    difference_cylindrical_closed_form, difference_grid, functional_from_spec, linear,
                                    product, quadratic, saturating)
from poissonlab.intensity import Window

f_ut = MarkTimeFunction(lambda m, t: m[:, 0], [0], [1])
f_sm = MarkTimeFunction(lambda m, t: np.cos(2 * m[:, 0]) * (1 + t), [-1], [2])
g_sm = MarkTimeFunction(lambda m, t: m[:, 0] ** 2 - t, [0], [3])

points = st.lists(st.tuples(st.floats(-2, 4), st.floats(0, 1)), max_size=10, unique=True)
fresh = st.tuples(st.floats(-2, 4), st.floats(0, 1))


def cfg(pts):
    if not pts:
        return Configuration.empty(1)
    return Configuration(np.array([[p[0]] for p in pts]), [p[1] for p in pts])


def as_point(p):
    return ([p[0]], p[1])


def test_evaluate_examples():
    c = cfg([(0.1, 0.2), (0.5, 0.3), (0.9, 0.9), (1.5, 0.5)])
    assert count([0], [1], 2.5).evaluate(c) == pytest.approx(7.5)
    assert constant(4.0, Window([0], [1])).evaluate(c) == 4.0
    assert quadratic(f_ut).evaluate(cfg([(0.5, 0.5)])) == pytest.approx(0.25)


def test_bound_violation_is_contract_error():
    F = Functional(lambda om: float(len(om)), Window([0], [1]), bound=1.0)
    with pytest.raises(ContractError):
        F.evaluate(cfg([(0.1, 0.1), (0.2, 0.2)]))


def test_difference_linear_examples():
    F = linear(f_sm)
    om = cfg([(0.3, 0.4)])
    assert difference(F, ([0.7], 0.2), om) == pytest.approx(float(f_sm(np.array([[0.7]]), np.array([0.2]))[0]))
    assert difference(F, ([0.3], 0.4), om) == 0.0


def test_difference_quadratic_expansion():
    F = quadratic(f_sm)
    om = cfg([(0.3, 0.4), (1.1, 0.8)])
    v = pair(f_sm, om)
    fu = float(f_sm(np.array([[0.7]]), np.array([0.2]))[0])
    assert difference(F, ([0.7], 0.2), om) == pytest.approx(2 * v * fu + fu ** 2, abs=1e-12)


def test_closed_form_examples():
    F = linear(f_ut)
    assert difference_cylindrical_closed_form(F, ([3.0], 0.5), [0.4]) == 0.0
    assert difference_cylindrical_closed_form(F, ([0.3], 0.5), [0.4]) == pytest.approx(0.3)
    f3 = MarkTimeFunction(lambda m, t: np.full(len(m), 0.3), [0], [1])
    assert difference_cylindrical_closed_form(quadratic(f3), ([0.5], 0.5), [1.0]) == pytest.approx(0.69)


def test_closed_form_agrees_with_generic_on_random_cases():
    g = np.random.default_rng(4)
    F = CylindricalFunctional(lambda v: np.tanh(v[..., 0]) * v[..., 1] ** 2, [f_sm, g_sm], name="mix")
    worst = 0.0
    for _ in range(1000):
        k = g.integers(0, 6)
        om = Configuration(g.uniform(-2, 4, (k, 1)), g.uniform(0, 1, k)) if k else Configuration.empty(1)
        p = ([g.uniform(-2, 4)], g.uniform(0, 1))
        worst = max(worst, abs(difference(F, p, om) - difference_cylindrical_closed_form(F, p, F.pairings(om))))
    assert worst <= 1e-12


@given(points, fresh)
def test_product_rule(pts, p):
    om = cfg(pts)
    F, G = saturating(f_sm, 0.7), quadratic(g_sm, clip=5.0)
    pt = as_point(p)
    dF, dG = difference(F, pt, om), difference(G, pt, om)
    lhs = difference(product(F, G), pt, om)
    rhs = F.evaluate(om) * dG + G.evaluate(om) * dF + dF * dG
    assert lhs == pytest.approx(rhs, abs=1e-12)


@given(points, st.floats(5, 9), st.floats(0, 1))
def test_locality_outside_supports(pts, u, t):
    F = CylindricalFunctional(lambda v: np.sin(v[..., 0] + v[..., 1]), [f_sm, g_sm], bound=1.0)
    assert difference(F, ([u], t), cfg(pts)) == 0.0


@given(points, st.floats(-10, 10), st.floats(0, 1))
def test_depends_only_through_pairings(pts, u, t):
    F = saturating(f_ut)
    om = cfg(pts)
    if Window([0], [1]).contains_marks([[u]])[0]:
        return
    assert F.evaluate(add_mass(om, ([u], t))) == F.evaluate(om)


@given(points)
def test_declared_bounds_hold(pts):
    om = cfg(pts)
    for F in (saturating(f_sm, 2.0), quadratic(g_sm, clip=3.0), constant(-2.0, Window([0], [1]))):
        assert abs(F.evaluate(om)) <= F.bound


def test_batch_evaluation_matches_loop():
    g = np.random.default_rng(9)
    configs = [Configuration(g.uniform(-2, 4, (k, 1)), g.uniform(0, 1, k)) if k else Configuration.empty(1)
               for k in g.integers(0, 5, 30)]
    from poissonlab.configuration import ConfigurationBatch
    b = ConfigurationBatch.from_configs(configs)
    F = quadratic(f_sm)
    assert np.allclose(F.evaluate_batch(b), [F.evaluate(c) for c in configs], atol=1e-12)


def test_difference_grid_shape_and_values():
    F = quadratic(f_ut)
    v = np.array([[0.0], [1.0]])
    fv = np.array([[0.5], [0.25]])
    assert np.allclose(difference_grid(F, v, fv), [[0.25, 0.0625], [1.25, 0.5625]])


def test_evaluator_failures_map_to_zero_with_warning(caplog):
    def fragile(om):
        if len(om) > 1:
            raise ZeroDivisionError("pathological")
        return float(len(om))
    F = Functional(fragile, Window([0], [1]), bound=10.0)
    with caplog.at_level(logging.WARNING):
        assert difference(F, ([0.5], 0.5), cfg([(0.2, 0.3)])) == 0.0
    assert "set to 0" in caplog.text


def test_sup_norm_falls_back_to_difference_bound():
    assert count([0], [1], -2.0).sup_norm() == 2.0
    assert saturating(f_ut).sup_norm() == 1.0


def test_from_spec():
    F = functional_from_spec({"name": "quadratic", "shape": "affine", "offset": 0.5, "slope": 0.04,
                              "lower": [0], "upper": [25]}, 1)
    assert F.evaluate(cfg([(10.0, 0.5)])) == pytest.approx(0.9 ** 2)
    assert functional_from_spec({"name": "count", "c": 2.0}, 1).evaluate(cfg([(0.5, 0.5)])) == 2.0
    with pytest.raises(ValueError):
        functional_from_spec({"name": "linear", "shape": "wiggly"}, 1)
