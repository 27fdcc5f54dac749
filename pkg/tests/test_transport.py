import numpy as np
import pytest
from hypothesis import given, strategies as st

from poissonlab.configuration import Configuration, simulate, simulate_replicates
from poissonlab.errors import BufferOverflowError, ConfigurationError, ContractError
from poissonlab.girsanov import Control, constant_control, threshold_control, zero_control
from poissonlab.intensity import (ConstantFunction, MarkFunction, StepFunction, Window, exp_decay, gaussian_bump,
                                  lebesgue)
from poissonlab.transport import (build_map_1d, build_map_multid, displacement_bound, gamma_transform,
                                  gamma_transform_batch, h2_stability_check, hat_control, hat_fixed_point_error,
                                  interval_mass_check, plan_buffer, pushforward_residual, tilde_control,
                                  tilde_fixed_point_error, transport_map)

UNIT = Window([0], [1])


def doubling_map():
    return build_map_1d(lebesgue(), ConstantFunction(1.0, [0], [1]), support=UNIT)


def step_phi(model_dim=1):
    pieces = [StepFunction([(0.0, 1.0, 2.0)], [0.8, -0.6]), StepFunction([(0.0, 0.5, 2.0)], [-0.3, 1.5])]
    return Control((0.0, 0.5, 1.0), pieces, Window([0], [2]), -0.9, 2.0, name="step")


def test_identity_map():
    tm = build_map_1d(lebesgue(), ConstantFunction(0.0, [0], [1]), support=UNIT)
    x = np.array([[-3.0], [0.2], [7.5]])
    assert np.array_equal(tm.forward(x), x) and np.array_equal(tm.inverse(x), x)


def test_doubling_step_values():
    tm = doubling_map()
    got = tm.forward(np.array([[1.0], [3.0], [0.0], [-2.0]]))[:, 0]
    assert got == pytest.approx([0.5, 2.0, 0.0, -2.0], abs=1e-9)
    assert tm.inverse(np.array([[0.5], [2.0]]))[:, 0] == pytest.approx([1.0, 3.0], abs=1e-9)


def test_interval_mass_example():
    assert interval_mass_check(doubling_map(), 0.0, 1.0) <= 1e-9


def test_pushforward_indicator_example():
    f = ConstantFunction(1.0, [0.0], [0.5])
    assert pushforward_residual(doubling_map(), f) <= 1e-6


def test_multid_matches_1d():
    tm = build_map_multid(lebesgue(2), ConstantFunction(1.0, [0, 0], [1, 1]), support=Window([0, 0], [1, 1]))
    pts = np.array([[1.0, 0.3], [1.0, 0.9], [3.0, 0.5], [1.0, 1.5]])
    out = tm.forward(pts)
    assert np.array_equal(out[:, 1], pts[:, 1])
    assert out[:3, 0] == pytest.approx([0.5, 0.5, 2.0], abs=1e-9)
    assert out[3, 0] == 1.0  # the line misses the support


def test_divergence_none_refused():
    model = exp_decay()
    assert model.divergence == "none"
    with pytest.raises(ConfigurationError):
        transport_map(model, ConstantFunction(1.0, [0], [1]), UNIT, (-1, 2))


def random_weights(k, rng):
    out = []
    for _ in range(k):
        edges = np.sort(rng.uniform(-1, 2, 4))
        vals = rng.uniform(-0.8, 1.5, 3)
        out.append(StepFunction([edges], vals))
    return out


def random_smooth(rng):
    a, b, c = rng.uniform(-2, 2, 3)
    lo, hi = np.sort(rng.uniform(-2, 3, 2))
    return MarkFunction(lambda m: np.sin(a * m[:, 0] + b) + c * m[:, 0] ** 2, [lo], [hi + 0.1])


@pytest.mark.parametrize("model", [lebesgue(), gaussian_bump(0.8)], ids=["lebesgue", "bump"])
def test_pushforward_random(model):
    rng = np.random.default_rng(2)
    for g in random_weights(20, rng):
        sup = g.support_window()
        tm = build_map_1d(model, g, support=sup, domain=(-6.0, 8.0))
        assert pushforward_residual(tm, random_smooth(rng)) <= 1e-6


def test_pushforward_2d():
    g = StepFunction([(0.0, 0.5, 1.0), (0.0, 1.0)], [[0.7], [-0.4]])
    tm = build_map_multid(lebesgue(2), g, support=g.support_window())
    f = MarkFunction(lambda m: np.cos(m[:, 0]) * (1 + m[:, 1]), [-0.5, 0.0], [1.5, 1.0])
    assert pushforward_residual(tm, f) <= 1e-6


@given(st.lists(st.floats(-0.8, 1.5), min_size=3, max_size=3), st.lists(st.floats(-4, 6), min_size=2, max_size=30))
def test_monotone_and_invertible(vals, xs):
    g = StepFunction([(0.0, 0.7, 1.3, 2.0)], vals)
    tm = build_map_1d(gaussian_bump(0.9), g, support=g.support_window(), domain=(-8.0, 10.0))
    x = np.unique(np.asarray(xs))[:, None]
    y = tm.forward(x)[:, 0]
    assert np.all(np.diff(y) > -1e-10)
    assert np.max(np.abs(tm.inverse(y[:, None])[:, 0] - x[:, 0])) <= 1e-9
    r = displacement_bound(Control((0.0, 1.0), [g], g.support_window(), -0.8, 1.5), gaussian_bump(0.9))
    assert np.max(np.abs(y - x[:, 0])) <= r + 1e-9


def test_displacement_examples():
    assert displacement_bound(zero_control([0], [1]), lebesgue()) == 0.0
    assert displacement_bound(constant_control(1.0, [0], [1]), lebesgue()) == pytest.approx(1.0, abs=1e-12)
    assert displacement_bound(constant_control(-0.5, [0], [2]), lebesgue()) == pytest.approx(1.0, abs=1e-12)


def test_gamma_zero_is_identity_and_round_trip():
    model = lebesgue()
    phi = step_phi()
    plan = plan_buffer(Window([0], [2]), [phi], model)
    omega = simulate(model, plan.padded, np.random.default_rng(3))
    assert gamma_transform(zero_control([0], [2]), omega, "-", model, plan) == omega
    moved = gamma_transform(phi, omega, "-", model, plan)
    assert len(moved) == len(omega) and np.array_equal(moved.times, omega.times)
    back = gamma_transform(phi, moved, "+", model, plan)
    assert np.max(np.abs(back.marks - omega.marks)) <= 1e-9


def test_plan_rejects_short_padding():
    with pytest.raises(ContractError):
        plan_buffer(UNIT, [constant_control(1.0, [0], [1])], lebesgue(), padding=0.5)


@pytest.mark.parametrize("model,n", [(lebesgue(), 100_000), (gaussian_bump(0.8), 10_000)], ids=["lebesgue", "bump"])
def test_buffer_soundness(model, n):
    phi = step_phi()
    plan = plan_buffer(Window([0], [2]), [phi], model)
    batch = simulate_replicates(model, plan.padded, n, 4, workers=4)
    for direction in "-+":
        out = gamma_transform_batch(phi, batch, direction, model, plan)
        assert out.times.size == batch.times.size
    # too small a domain overflows
    tight = plan_buffer(Window([0], [2]), [phi], model)
    object.__setattr__(tight, "domain", (-0.1, 2.1))
    from poissonlab import transport
    transport._CACHE.clear()
    with pytest.raises(BufferOverflowError):
        gamma_transform_batch(phi, batch, "-", model, tight)
    transport._CACHE.clear()


def test_conjugates_of_deterministic_controls():
    phi = step_phi()
    plan = plan_buffer(Window([0], [2]), [phi], lebesgue())
    assert tilde_control(phi, lebesgue(), plan) is phi
    assert hat_control(phi, lebesgue(), plan) is phi


@pytest.mark.parametrize("first", [0.0, -0.4])
def test_fixed_point_identities(first):
    model = lebesgue()
    phi = threshold_control(first, 0.8, [0], [1])
    plan = plan_buffer(UNIT, [phi], model)
    tilde, hat = tilde_control(phi, model, plan), hat_control(phi, model, plan)
    marks = np.linspace(-0.5, 1.5, 9)[:, None]
    rng = np.random.default_rng(5)
    for _ in range(100):
        omega = simulate(model, plan.padded, rng)
        assert tilde_fixed_point_error(phi, tilde, omega, marks, model, plan) <= 1e-9
        assert hat_fixed_point_error(phi, hat, omega, marks, model, plan) <= 1e-9


def test_h2_identity_sequence():
    phi = step_phi()
    plan = plan_buffer(Window([0], [2]), [phi], lebesgue())
    rep = h2_stability_check(phi, lebesgue(), np.linspace(-1, 3, 21), plan, sequence=lambda n: phi)
    assert np.all(rep.forward == 0) and np.all(rep.inverse == 0)


def test_h2_scaled_sequence():
    phi = step_phi()
    model = gaussian_bump(0.8)
    plan = plan_buffer(Window([0], [2]), [phi], model)
    rep = h2_stability_check(phi, model, np.linspace(-1, 3, 41), plan)
    assert rep.monotone
    k = rep.fitted_k
    assert np.all(rep.forward <= k / np.array(rep.ns) + 1e-12)
    assert rep.forward[-1] < rep.forward[0] / 4 and rep.inverse[-1] < rep.inverse[0] / 4


def test_past_dependent_h2():
    phi = threshold_control(-0.4, 0.8, [0], [1])
    plan = plan_buffer(UNIT, [phi], lebesgue())
    pasts = [Configuration.empty(1), Configuration([[0.5]], [0.2])]
    rep = h2_stability_check(phi, lebesgue(), np.linspace(-1, 2, 13), plan, pasts=pasts)
    assert rep.monotone
