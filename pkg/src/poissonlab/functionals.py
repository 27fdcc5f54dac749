"""Functionals of configurations and the difference operator D."""

from __future__ import annotations

import logging
import math
from typing import Callable, Sequence

import numpy as np

from .configuration import Configuration, ConfigurationBatch, MarkTimeFunction, add_mass, indicator, pair
from .errors import ContractError
from .intensity import Window

log = logging.getLogger(__name__)


class Functional:
    """F: configurations -> R with a declared sup-norm bound and dependence window.

    ``bound`` may be ``inf`` for functionals that are only bounded above
    (counts); ``diff_bound`` is a bound on |D F| and defaults to ``2 * bound``.
    """

    def __init__(self, fn: Callable[[Configuration], float], window: Window, bound: float = math.inf,
                 diff_bound: float | None = None, name: str = "F"):
        self.fn = fn
        self.window = window
        self.bound = float(bound)
        self.diff_bound = float(diff_bound) if diff_bound is not None else 2.0 * self.bound
        self.name = name
        self.kind = "custom"
        self.scale = 1.0

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"

    @property
    def dimension(self) -> int:
        return self.window.dimension

    def _check(self, value: float) -> float:
        if not abs(value) <= self.bound * (1 + 1e-12):
            raise ContractError(f"{self.name}: |F| = {abs(value):g} exceeds declared bound {self.bound:g}")
        return value

    def evaluate(self, omega: Configuration) -> float:
        return self._check(float(self.fn(omega)))

    __call__ = evaluate

    def evaluate_batch(self, batch: ConfigurationBatch) -> np.ndarray:
        return np.array([self.evaluate(c) for c in batch])

    def sup_norm(self) -> float:
        """Bound for the control box: ||F||_inf, else sup|DF|."""
        return self.bound if math.isfinite(self.bound) else self.diff_bound

    def is_constant(self) -> bool:
        return False


class CylindricalFunctional(Functional):
    """F(omega) = h(<f_1, mu>, ..., <f_n, mu>).

    ``h`` acts on the last axis of an array of pairings, so it can be applied
    to a single vector, an (N, n) batch, or an (N, M, n) grid of shifts.
    """

    def __init__(self, h: Callable[[np.ndarray], np.ndarray], fs: Sequence[MarkTimeFunction],
                 bound: float = math.inf, diff_bound: float | None = None, name: str = "h(<f,mu>)",
                 constant: bool = False):
        fs = list(fs)
        if not fs:
            raise ValueError("a cylindrical functional needs at least one test function")
        window = fs[0].support
        for f in fs[1:]:
            window = window.hull(f.support)
        super().__init__(self._from_config, window, bound, diff_bound, name)
        self.h = h
        self.fs = fs
        self._constant = constant

    def is_constant(self) -> bool:
        return self._constant

    def pairings(self, omega: Configuration) -> np.ndarray:
        return np.array([pair(f, omega) for f in self.fs])

    def pairings_batch(self, batch: ConfigurationBatch) -> np.ndarray:
        return np.stack([batch.pair(f) for f in self.fs], axis=-1)

    def point_values(self, marks: np.ndarray, times) -> np.ndarray:
        """(M, n) array of f_i evaluated at M points."""
        return np.stack([f(marks, times) for f in self.fs], axis=-1)

    def apply_h(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(self.h(np.asarray(v, dtype=float)), dtype=float)

    def _from_config(self, omega: Configuration) -> float:
        return float(self.apply_h(self.pairings(omega)))

    def evaluate_batch(self, batch: ConfigurationBatch) -> np.ndarray:
        vals = self.apply_h(self.pairings_batch(batch))
        if math.isfinite(self.bound) and np.any(np.abs(vals) > self.bound * (1 + 1e-12)):
            raise ContractError(f"{self.name}: value exceeds declared bound {self.bound:g}")
        return vals


def difference(F: Functional, p, omega: Configuration) -> float:
    """D_p F(omega) = F(eps^+_p omega) - F(omega).

    Evaluation failures are treated as a null set and mapped to 0.
    """
    try:
        return F.evaluate(add_mass(omega, p)) - F.evaluate(omega)
    except (ArithmeticError, ValueError) as exc:
        if isinstance(exc, ContractError):
            raise
        log.warning("difference of %s at %r set to 0: %s", F.name, p, exc)
        return 0.0


def difference_cylindrical_closed_form(F: CylindricalFunctional, p, v) -> float:
    """h(v + (f_1(p), ..., f_n(p))) - h(v) for pairings ``v``."""
    mark, t = p
    fv = F.point_values(np.atleast_2d(np.asarray(mark, dtype=float)).reshape(1, -1), np.array([float(t)]))[0]
    v = np.asarray(v, dtype=float)
    return float(F.apply_h(v + fv) - F.apply_h(v))


def difference_grid(F: CylindricalFunctional, v: np.ndarray, fvals: np.ndarray) -> np.ndarray:
    """Closed-form differences for every pairing row of ``v`` (N, n) and every
    added-point row of ``fvals`` (M, n); returns (N, M)."""
    v = np.asarray(v, dtype=float)
    base = F.apply_h(v)
    return F.apply_h(v[:, None, :] + fvals[None, :, :]) - base[:, None]


# ------------------------------------------------------------ built-in family


def linear(f: MarkTimeFunction, diff_bound: float | None = None) -> CylindricalFunctional:
    """<f, mu>."""
    return CylindricalFunctional(lambda v: v[..., 0], [f], diff_bound=diff_bound, name=f"<{f.name},mu>")


def count(lower, upper, c: float = 1.0, time: tuple[float, float] = (0.0, 1.0)) -> CylindricalFunctional:
    """c * N_A with A = [lower, upper] x time."""
    f = indicator(lower, upper, time)
    F = CylindricalFunctional(lambda v: c * v[..., 0], [f], diff_bound=abs(c), name=f"{c:g}*N_A")
    F.kind, F.scale = "count", float(c)
    return F


def quadratic(f: MarkTimeFunction, clip: float | None = None, diff_bound: float | None = None) -> CylindricalFunctional:
    """<f, mu>^2, or the smoothly clipped clip * tanh(<f, mu>^2 / clip)."""
    if clip is None:
        return CylindricalFunctional(lambda v: v[..., 0] ** 2, [f], diff_bound=diff_bound, name=f"<{f.name},mu>^2")
    c = float(clip)
    return CylindricalFunctional(lambda v: c * np.tanh(v[..., 0] ** 2 / c), [f], bound=c,
                                 name=f"clip{c:g}(<{f.name},mu>^2)")


def saturating(f: MarkTimeFunction, scale: float = 1.0) -> CylindricalFunctional:
    """tanh(scale * <f, mu>), bounded by 1."""
    s = float(scale)
    return CylindricalFunctional(lambda v: np.tanh(s * v[..., 0]), [f], bound=1.0, name=f"tanh({s:g}<{f.name},mu>)")


def constant(c: float, window: Window) -> CylindricalFunctional:
    f = indicator(window.lower, window.upper, window.time, scale=0.0)
    return CylindricalFunctional(lambda v: np.full(np.shape(v)[:-1], float(c)), [f], bound=abs(c), diff_bound=0.0,
                                 name=f"const({c:g})", constant=True)


def product(F: Functional, G: Functional) -> Functional:
    return Functional(lambda om: F.evaluate(om) * G.evaluate(om), F.window.hull(G.window), F.bound * G.bound,
                      name=f"{F.name}*{G.name}")


def functional_from_spec(spec: dict, dimension: int) -> CylindricalFunctional:
    """Build a built-in functional from a parsed config entry.

    The test function is ``weight * 1_A`` on the box A (``lower``, ``upper``),
    or ``weight * (offset + slope * u_0)`` on A with ``"shape": "affine"``.
    """
    kind = spec["name"]
    lower = spec.get("lower", [0.0] * dimension)
    upper = spec.get("upper", [1.0] * dimension)
    if kind == "count":
        return count(lower, upper, spec.get("c", 1.0))
    if kind == "constant":
        return constant(spec.get("c", 0.0), Window(lower, upper))
    weight = float(spec.get("weight", 1.0))
    shape = spec.get("shape", "flat")
    if shape == "affine":
        a, b = float(spec.get("offset", 0.0)), float(spec.get("slope", 1.0))
        f = MarkTimeFunction(lambda m, t: weight * (a + b * m[:, 0]), lower, upper, name=f"{weight:g}({a:g}+{b:g}u)")
    elif shape != "flat":
        raise ValueError(f"unknown test-function shape {shape!r}")
    else:
        f = indicator(lower, upper, scale=weight)
    if kind == "linear":
        return linear(f)
    if kind == "quadratic":
        return quadratic(f, spec.get("clip"))
    if kind == "saturating":
        return saturating(f, spec.get("scale", 1.0))
    raise ValueError(f"unknown functional {kind!r}")
