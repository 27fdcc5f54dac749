import numpy as np
import pytest
from hypothesis import given, strategies as st

from poissonlab.configuration import (Configuration, ConfigurationBatch, MarkTimeFunction, add_mass,
                                      compensated_integral, compensated_integral_batch, indicator, pair, remove_mass,
                                      simulate, simulate_replicates)
from poissonlab.errors import ContractError, DomainError
from poissonlab.intensity import Window, gaussian_bump, lebesgue

points = st.lists(st.tuples(st.floats(-5, 5), st.floats(0, 1)), max_size=12, unique=True)


def cfg(pts, d=1):
    if not pts:
        return Configuration.empty(d)
    marks = np.array([[p[0]] for p in pts])
    return Configuration(marks, [p[1] for p in pts])


def test_sorted_by_time_then_mark():
    c = Configuration([[2.0], [1.0], [0.5]], [0.5, 0.5, 0.1])
    assert list(c.times) == [0.1, 0.5, 0.5]
    assert list(c.marks[:, 0]) == [0.5, 1.0, 2.0]


def test_duplicates_rejected():
    with pytest.raises(ContractError):
        Configuration([[1.0], [1.0]], [0.3, 0.3])


def test_times_outside_unit_interval_rejected():
    with pytest.raises((ContractError, DomainError)):
        Configuration([[1.0]], [1.5])


def test_simulation_moments_and_independence():
    b = simulate_replicates(lebesgue(), Window([0], [2]), 100_000, 3)
    left = b.reduce((b.marks[:, 0] <= 1).astype(float))
    right = b.counts() - left
    assert abs(left.mean() - 1) <= 0.02
    assert abs(left.var() - 1) <= 0.05
    assert abs(np.corrcoef(left, right)[0, 1]) <= 0.02


@pytest.mark.parametrize("lo,hi,t", [(0.0, 1.0, 1.0), (-1.0, 0.5, 0.5), (1.0, 2.5, 0.25)])
def test_box_moment_identities(lo, hi, t):
    m = gaussian_bump(1.0)
    b = simulate_replicates(m, Window([-3], [3]), 100_000, 8)
    inside = (b.marks[:, 0] >= lo) & (b.marks[:, 0] <= hi) & (b.times <= t)
    n = b.reduce(inside.astype(float))
    from poissonlab.intensity import window_mass
    target = window_mass(m, Window([lo], [hi])) * t
    se_mean = n.std(ddof=1) / np.sqrt(n.size)
    assert abs(n.mean() - target) <= 4 * se_mean
    se_var = np.sqrt(np.mean((n - n.mean()) ** 4) - n.var() ** 2) / np.sqrt(n.size)
    assert abs(n.var(ddof=1) - target) <= 4 * se_var


def test_simulate_single_configuration_in_window():
    c = simulate(lebesgue(2), Window([0, 0], [3, 1], (0.2, 0.6)), np.random.default_rng(0))
    assert np.all(c.times > 0.2) and np.all(c.times <= 0.6)
    assert np.all(Window([0, 0], [3, 1]).contains_marks(c.marks))


def test_pair_examples():
    f = MarkTimeFunction(lambda m, t: m[:, 0] * t, [0], [1])
    assert pair(f, cfg([(0.5, 0.3)])) == pytest.approx(0.15)
    assert pair(f, Configuration.empty(1)) == 0.0
    assert pair(f, cfg([(0.5, 0.3), (2.0, 0.6)])) == pytest.approx(0.15)


@given(points, st.floats(-2, 2), st.floats(-2, 2))
def test_pair_linear_and_additive(pts, a, b):
    c = cfg(pts)
    f = MarkTimeFunction(lambda m, t: np.sin(m[:, 0]) + t, [-5], [5])
    g = MarkTimeFunction(lambda m, t: m[:, 0] ** 2, [-5], [5])
    fg = MarkTimeFunction(lambda m, t: a * (np.sin(m[:, 0]) + t) + b * m[:, 0] ** 2, [-5], [5])
    assert pair(fg, c) == pytest.approx(a * pair(f, c) + b * pair(g, c), abs=1e-9)
    left = MarkTimeFunction(lambda m, t: (np.sin(m[:, 0]) + t) * (m[:, 0] <= 0), [-5], [5])
    right = MarkTimeFunction(lambda m, t: (np.sin(m[:, 0]) + t) * (m[:, 0] > 0), [-5], [5])
    assert pair(left, c) + pair(right, c) == pytest.approx(pair(f, c), abs=1e-12)


@given(points, st.floats(-5, 5), st.floats(0, 1))
def test_add_remove_mass_definitions(pts, u, t):
    c = cfg(pts)
    p = ([u], t)
    added = add_mass(c, p)
    assert added.contains(*p)
    assert add_mass(added, p) == added
    assert remove_mass(added, p) == remove_mass(c, p)
    assert not remove_mass(c, p).contains(*p)
    assert remove_mass(remove_mass(c, p), p) == remove_mass(c, p)


def test_add_mass_to_empty():
    assert add_mass(Configuration.empty(1), ([0.2], 0.4)) == Configuration([[0.2]], [0.4])


def test_restrict_uses_closed_past():
    c = cfg([(0.1, 0.2), (0.3, 0.5), (0.4, 0.7)])
    assert len(c.restrict(0.5)) == 2
    assert len(c.restrict_before(0.5)) == 1


def test_compensated_integral_examples():
    psi = indicator([0], [1])
    c = cfg([(0.2, 0.1), (0.9, 0.5), (1.5, 0.6)])
    assert compensated_integral(psi, c, lebesgue(), Window([0], [2])) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        compensated_integral(indicator([0], [3]), c, lebesgue(), Window([0], [2]))


def test_compensated_integral_mean_and_isometry():
    m = gaussian_bump(1.0)
    w = Window([-3], [3])
    psi = MarkTimeFunction(lambda u, t: np.cos(u[:, 0]) * (1 + t), [-2], [2])
    b = simulate_replicates(m, w, 100_000, 11)
    vals = compensated_integral_batch(psi, b, m, w)
    se = vals.std(ddof=1) / np.sqrt(vals.size)
    assert abs(vals.mean()) <= 3 * se
    iso = psi.integral(m, power=2)
    sq = vals ** 2
    assert abs(sq.mean() - iso) <= 4 * sq.std(ddof=1) / np.sqrt(sq.size)


def test_mark_time_function_zero_outside_support(gen):
    f = MarkTimeFunction(lambda m, t: 1.0 + m[:, 0] ** 2, [0], [1], time=(0.2, 0.8))
    m = gen.uniform(-3, 3, (2000, 1))
    t = gen.uniform(0, 1, 2000)
    v = f(m, t)
    outside = (m[:, 0] < 0) | (m[:, 0] > 1) | (t <= 0.2) | (t > 0.8)
    assert np.all(v[outside] == 0.0) and np.all(v[~outside] > 0)


def test_batch_roundtrip_and_select():
    configs = [cfg([(0.1, 0.2)]), Configuration.empty(1), cfg([(0.3, 0.9), (0.2, 0.4)])]
    b = ConfigurationBatch.from_configs(configs)
    assert [len(c) for c in b] == [1, 0, 2]
    assert b.config(2) == configs[2]
    assert list(b.counts()) == [1, 0, 2]


def test_batch_rejects_duplicates_within_replicate():
    with pytest.raises(ContractError):
        ConfigurationBatch(np.array([[1.0], [1.0]]), np.array([0.5, 0.5]), np.array([0, 0]), 1)
    ok = ConfigurationBatch(np.array([[1.0], [1.0]]), np.array([0.5, 0.5]), np.array([0, 1]), 2)
    assert list(ok.counts()) == [1, 1]
