"""Controls, the Doleans exponential, entropy cost and tilted measures.

Under the tilted measure the point process has compensator (1 + phi) nu x dt.
Expectations under it are computed two ways: importance sampling with the
Doleans density, and direct simulation of the tilted process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .configuration import (Configuration, ConfigurationBatch, MarkTimeFunction, sample_points,
                            simulate_replicates)
from .errors import ContractError, DomainError
from .functionals import Functional
from .intensity import (ConstantFunction, IntensityModel, MarkFunction, StepFunction, Window, _rejection,
                        integrate_nu, window_mass)
from .rng import RandomStreams, as_streams, map_blocks
from .stats import Estimate, agree, mean_se

BOUND_TOL = 1e-12
_WEIGHT_CACHE = 50_000


def entropy_density(x) -> np.ndarray:
    """(1 + x) log(1 + x) - x, with the value 1 at x = -1."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(x > -1, (1 + x) * np.log1p(np.maximum(x, -1 + 1e-300)) - x, 1.0)
    return out


class PastRule:
    """A piece that depends on the configuration strictly up to its left endpoint.

    ``fn(past)`` must return a :class:`MarkFunction`; the control hands it
    ``omega`` restricted to time <= t_i, so it cannot see the future.
    """

    def __init__(self, fn: Callable[[Configuration], MarkFunction], name: str = "rule"):
        self.fn = fn
        self.name = name

    def __call__(self, past: Configuration) -> MarkFunction:
        return self.fn(past)

    def __repr__(self):
        return f"PastRule({self.name})"


def _bounds_of(g: MarkFunction) -> tuple[float, float] | None:
    if isinstance(g, StepFunction):
        return float(g.values.min()), float(g.values.max())
    if isinstance(g, ConstantFunction):
        return g.value, g.value
    return None


class Control:
    """phi(u, t, omega) = sum_i 1_{(t_i, t_{i+1}]}(t) g_i(u, omega|[0, t_i]).

    Pieces are mark functions (deterministic), :class:`PastRule` objects, or
    numbers (constants on the support ``U0``).  Values are forced to zero
    outside ``U0`` and checked against ``[c0, c1]`` whenever evaluated.
    """

    def __init__(self, edges: Sequence[float], pieces: Sequence, support: Window, c0: float | None = None,
                 c1: float | None = None, name: str = "phi"):
        edges = tuple(float(e) for e in edges)
        if len(edges) < 2 or edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
            raise ContractError("control time grid must increase strictly from 0 to 1")
        if len(pieces) != len(edges) - 1:
            raise ContractError("one piece per time cell is required")
        self.edges = edges
        self.support = Window(support.lower, support.upper)
        self.name = name
        self.pieces = [self._normalize(p) for p in pieces]
        lo, hi = 0.0, 0.0
        for p in self.pieces:
            b = _bounds_of(p) if isinstance(p, MarkFunction) else None
            if b is not None:
                lo, hi = min(lo, b[0]), max(hi, b[1])
            elif c0 is None or c1 is None:
                raise ContractError("bounds c0, c1 must be declared for pieces without known range")
        self.c0 = lo if c0 is None else float(c0)
        self.c1 = hi if c1 is None else float(c1)
        if not (-1.0 < self.c0 <= 0.0 <= self.c1):
            raise ContractError(f"bounds must satisfy -1 < c0 <= 0 <= c1, got c0={self.c0}, c1={self.c1}")
        if lo < self.c0 - BOUND_TOL or hi > self.c1 + BOUND_TOL:
            raise ContractError(f"piece values [{lo}, {hi}] escape declared bounds [{self.c0}, {self.c1}]")

    # -------------------------------------------------------------- structure

    def _normalize(self, p):
        if p is None:
            p = 0.0
        if isinstance(p, (int, float, np.floating)):
            return ConstantFunction(float(p), self.support.lower, self.support.upper)
        if isinstance(p, PastRule):
            return p
        if isinstance(p, ConstantFunction) and p.lower is None:
            return ConstantFunction(p.value, self.support.lower, self.support.upper)
        if isinstance(p, MarkFunction):
            return self._mask(p)
        raise TypeError(f"cannot use {p!r} as a control piece")

    def _mask(self, g: MarkFunction) -> MarkFunction:
        if g.has_support and self.support.contains_window(g.support_window()):
            return g
        d = self.support.dimension
        return MarkFunction(g, self.support.lower, self.support.upper,
                            breaks=[g.breaks(a) for a in range(d)], name=g.name)

    @property
    def m(self) -> int:
        return len(self.pieces)

    @property
    def dimension(self) -> int:
        return self.support.dimension

    @property
    def deterministic(self) -> bool:
        return not any(isinstance(p, PastRule) for p in self.pieces)

    def width(self, i: int) -> float:
        return self.edges[i + 1] - self.edges[i]

    def piece_of(self, t) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.edges), np.asarray(t, dtype=float), side="left") - 1
        return np.clip(idx, 0, self.m - 1)

    def weight(self, i: int, omega: Configuration | None = None) -> MarkFunction:
        """g_i as a mark function (masked to U0), using omega up to t_i if needed."""
        p = self.pieces[i]
        if isinstance(p, PastRule):
            if omega is None:
                raise ContractError(f"piece {i} of {self.name} depends on the past; a configuration is required")
            g = self._mask(p(omega.restrict(self.edges[i])))
            b = _bounds_of(g)
            if b is not None and (b[0] < self.c0 - BOUND_TOL or b[1] > self.c1 + BOUND_TOL):
                raise ContractError(f"{self.name}: piece {i} value range {b} escapes [{self.c0}, {self.c1}]")
            return g
        return p

    def _checked(self, vals: np.ndarray) -> np.ndarray:
        if vals.size and (vals.min() < self.c0 - BOUND_TOL or vals.max() > self.c1 + BOUND_TOL):
            raise ContractError(f"{self.name}: value outside [{self.c0}, {self.c1}]")
        return vals

    def __call__(self, u, t, omega: Configuration | None = None) -> np.ndarray:
        """phi at marks ``u`` and times ``t`` (broadcast)."""
        marks = np.atleast_2d(np.asarray(u, dtype=float)).reshape(-1, self.dimension)
        t = np.broadcast_to(np.asarray(t, dtype=float), (marks.shape[0],))
        out = np.zeros(marks.shape[0])
        pieces = self.piece_of(t)
        for i in np.unique(pieces):
            sel = pieces == i
            out[sel] = self.weight(int(i), omega)(marks[sel])
        return self._checked(out)

    def at_points(self, omega: Configuration) -> np.ndarray:
        """phi(u, t, omega) at every point (u, t) of omega."""
        return self(omega.marks, omega.times, omega) if len(omega) else np.zeros(0)

    def weights(self, omega: Configuration | None = None) -> list[MarkFunction]:
        return [self.weight(i, omega) for i in range(self.m)]

    # -------------------------------------------------------------- integrals

    def integral(self, model: IntensityModel, transform: Callable[[np.ndarray], np.ndarray],
                 omega: Configuration | None = None) -> float:
        """sum_i (t_{i+1} - t_i) * integral of transform(g_i) against nu."""
        return sum(self.width(i) * weight_integral(model, self.weight(i, omega), self.support, transform)
                   for i in range(self.m))

    def compensator(self, model: IntensityModel, omega: Configuration | None = None) -> float:
        return self.integral(model, _identity, omega)

    def entropy(self, model: IntensityModel, omega: Configuration | None = None) -> float:
        return self.integral(model, entropy_density, omega)

    def square_integral(self, model: IntensityModel, omega: Configuration | None = None) -> float:
        return self.integral(model, np.square, omega)

    # ----------------------------------------------------------- derivations

    def with_pieces(self, pieces: Sequence, name: str | None = None) -> "Control":
        return Control(self.edges, pieces, self.support, self.c0, self.c1, name or self.name)

    def scaled(self, s: float) -> "Control":
        """s * phi for 0 <= s <= 1 (stays within the same bounds)."""
        if not 0.0 <= s <= 1.0:
            raise ContractError("scale must lie in [0, 1]")

        def scale_piece(p):
            if isinstance(p, PastRule):
                return PastRule(lambda past, p=p: _scale_mark(p(past), s), f"{s:g}*{p.name}")
            return _scale_mark(p, s)

        return self.with_pieces([scale_piece(p) for p in self.pieces], f"{s:g}*{self.name}")

    def prefix(self, k: int) -> "Control":
        """The first ``k`` pieces, zero afterwards."""
        return self.with_pieces(list(self.pieces[:k]) + [0.0] * (self.m - k), f"{self.name}[:{k}]")

    def __repr__(self):
        return f"Control({self.name}, m={self.m}, c0={self.c0:g}, c1={self.c1:g})"


def _identity(x):
    return x


def _scale_mark(g: MarkFunction, s: float) -> MarkFunction:
    if isinstance(g, StepFunction):
        return g.map_values(lambda v: s * v)
    if isinstance(g, ConstantFunction):
        return ConstantFunction(s * g.value, g.lower, g.upper)
    return MarkFunction(lambda m: s * g(m), g.lower, g.upper,
                        breaks=[g.breaks(a) for a in range(len(g.lower))] if g.has_support else None,
                        name=f"{s:g}*{g.name}")


def constant_control(value: float, lower, upper, edges: Sequence[float] = (0.0, 1.0),
                     name: str | None = None) -> Control:
    """phi = value on the box [lower, upper], all times."""
    support = Window(lower, upper)
    return Control(edges, [float(value)] * (len(edges) - 1), support, name=name or f"{value:g}*1_A")


def threshold_control(first: float, then: float, lower, upper, edges: Sequence[float] = (0.0, 0.5, 1.0),
                      threshold: int = 1) -> Control:
    """first on A during the first piece; afterwards ``then`` on A if the past has
    at least ``threshold`` points in A, else 0."""
    support = Window(lower, upper)
    on = ConstantFunction(float(then), support.lower, support.upper)
    off = ConstantFunction(0.0, support.lower, support.upper)
    rule = PastRule(lambda past: on if past.count(support.lower, support.upper) >= threshold else off,
                    name=f"{then:g} if N_A>={threshold}")
    pieces = [float(first)] + [rule] * (len(edges) - 2)
    return Control(edges, pieces, support, min(first, then, 0.0), max(first, then, 0.0),
                   name=f"threshold({first:g},{then:g})")


def zero_control(lower, upper) -> Control:
    return constant_control(0.0, lower, upper, name="0")


def weight_integral(model: IntensityModel, g: MarkFunction, support: Window,
                    transform: Callable[[np.ndarray], np.ndarray]) -> float:
    """Integral of transform(g) against nu over ``support`` (transform(0) must be 0)."""
    if isinstance(g, (ConstantFunction, StepFunction)):
        cache = model._mass_cache
        key = ("weight", g.key, support.lower, support.upper, transform)
        hit = cache.get(key)
        if hit is None:
            if len(cache) > _WEIGHT_CACHE:
                cache.clear()
            hit = cache[key] = _keyed_weight_integral(model, g, support, transform)
        return hit
    d = support.dimension
    fn = MarkFunction(lambda m: transform(g(m)), support.lower, support.upper,
                      breaks=[g.breaks(a) for a in range(d)])
    return integrate_nu(model, fn, support)


def _keyed_weight_integral(model: IntensityModel, g: MarkFunction, support: Window,
                           transform: Callable[[np.ndarray], np.ndarray]) -> float:
    if isinstance(g, ConstantFunction):
        box = Window(g.lower, g.upper) if g.has_support else support
        return float(transform(np.array([g.value]))[0]) * window_mass(model, box)
    vals = transform(g.values)
    total = 0.0
    for idx, lo, hi in g.cells():
        if vals[idx] != 0.0:
            total += float(vals[idx]) * window_mass(model, Window(lo, hi))
    return total


def entropy_cost(phi: Control, omega: Configuration | None, model: IntensityModel) -> float:
    """L(phi) = integral of (1 + phi) log(1 + phi) - phi against nu x dt."""
    return phi.entropy(model, omega)


def quadratic_bound_constant(c0: float, c1: float, n: int = 2001) -> float:
    """max over x in [c0, c1] of ((1 + x) log(1 + x) - x) / x^2 (limit 1/2 at 0)."""
    x = np.linspace(c0, c1, n)
    x = np.append(x, [c0, c1])
    x = x[np.abs(x) > 1e-8]
    ratio = entropy_density(x) / x ** 2 if x.size else np.array([])
    return float(max(0.5, ratio.max() if ratio.size else 0.5))


# ------------------------------------------------------------ Doleans density


def _check_in_window(phi: Control, w: Window):
    if not Window(w.lower, w.upper).contains_window(phi.support):
        raise DomainError(f"support of {phi.name} is not inside the simulation window")


def doleans(phi: Control, omega: Configuration, model: IntensityModel, w: Window) -> float:
    """exp(sum over points of log(1 + phi) - integral of phi against pi)."""
    _check_in_window(phi, w)
    if len(omega) and not np.all(w.contains_marks(omega.marks)):
        raise DomainError("configuration has points outside the window")
    vals = phi.at_points(omega)
    if np.any(vals <= -1):
        raise ContractError("1 + phi <= 0 at a point of the configuration")
    return math.exp(float(np.sum(np.log1p(vals))) - phi.compensator(model, omega))


def doleans_batch(phi: Control, batch: ConfigurationBatch, model: IntensityModel, w: Window) -> np.ndarray:
    _check_in_window(phi, w)
    if not phi.deterministic:
        return np.array([doleans(phi, c, model, w) for c in batch])
    vals = phi(batch.marks, batch.times) if batch.times.size else np.zeros(0)
    if np.any(vals <= -1):
        raise ContractError("1 + phi <= 0 at a point of the configuration")
    return np.exp(batch.reduce(np.log1p(vals)) - phi.compensator(model))


def _phi_functional(phi: Control, model: IntensityModel) -> Callable[[ConfigurationBatch], np.ndarray]:
    """Per-replicate L(phi)(omega)."""
    if phi.deterministic:
        value = phi.entropy(model)
        return lambda batch: np.full(batch.n, value)
    return lambda batch: np.array([phi.entropy(model, c) for c in batch])


def tilted_expectation_is(F: Functional | Callable[[ConfigurationBatch], np.ndarray], phi: Control,
                          model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
                          workers: int = 1) -> Estimate:
    """E[doleans(phi) F] under the base measure."""
    streams = as_streams(rng)
    evaluate = F.evaluate_batch if isinstance(F, Functional) else F
    batch = simulate_replicates(model, w, n, streams.child("is"), workers)
    dens = doleans_batch(phi, batch, model, w)
    return mean_se(dens * evaluate(batch))


# ----------------------------------------------------------- direct simulation


def _tilt_piece(g: MarkFunction, c1: float, model: IntensityModel, support: Window, t0: float, t1: float,
                marks: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Thinning mask for given base marks, plus extra points of intensity g^+ theta."""
    vals = g(marks) if marks.shape[0] else np.zeros(0)
    keep = rng.random(marks.shape[0]) < 1.0 + np.minimum(vals, 0.0)
    if c1 <= 0:
        return keep, np.empty((0, marks.shape[1])), np.empty(0), np.empty(0, dtype=np.int64)
    cand = Window(support.lower, support.upper, (t0, t1))
    counts = rng.poisson(c1 * window_mass(model, cand), size=n)
    total = int(counts.sum())
    em = _rejection(model, cand, rng, total)
    et = t0 + (t1 - t0) * rng.random(total)
    eo = np.repeat(np.arange(n), counts)
    accept = rng.random(total) * c1 < np.maximum(g(em), 0.0) if total else np.zeros(0, dtype=bool)
    return keep, em[accept], et[accept], eo[accept]


def _tilted_block(phi: Control, model: IntensityModel, w: Window, n: int, rng: np.random.Generator) -> ConfigurationBatch:
    if phi.deterministic:
        marks, times, owner = sample_points(model, w, n, rng)
        pieces = phi.piece_of(times)
        keep = np.ones(times.size, dtype=bool)
        parts_m, parts_t, parts_o = [marks], [times], [owner]
        for i in range(phi.m):
            sel = np.flatnonzero(pieces == i)
            k, em, et, eo = _tilt_piece(phi.weight(i), phi.c1, model, phi.support, phi.edges[i], phi.edges[i + 1],
                                        marks[sel], n, rng)
            keep[sel] = k
            parts_m.append(em)
            parts_t.append(et)
            parts_o.append(eo)
        parts_m[0], parts_t[0], parts_o[0] = marks[keep], times[keep], owner[keep]
        return ConfigurationBatch(np.vstack(parts_m), np.concatenate(parts_t), np.concatenate(parts_o), n)
    # Past-dependent: generate piece by piece so each piece sees its own past.
    configs = []
    for _ in range(n):
        omega = Configuration.empty(model.dimension)
        for i in range(phi.m):
            t0, t1 = phi.edges[i], phi.edges[i + 1]
            g = phi.weight(i, omega)
            bm, bt, _ = sample_points(model, w.with_time(t0, t1), 1, rng)
            k, em, et, _ = _tilt_piece(g, phi.c1, model, phi.support, t0, t1, bm, 1, rng)
            new = Configuration(np.vstack([bm[k], em]), np.concatenate([bt[k], et]), model.dimension)
            omega = omega.union(new)
        configs.append(omega)
    return ConfigurationBatch.from_configs(configs, model.dimension)


def tilted_sample(phi: Control, model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
                  workers: int = 1) -> ConfigurationBatch:
    """Configurations of the process with compensator (1 + phi) nu x dt on ``w``.

    Base points of intensity theta are thinned with survival 1 + phi where
    phi < 0; points of intensity phi theta are superposed where phi > 0.
    """
    _check_in_window(phi, w)
    streams = as_streams(rng)
    parts = map_blocks(lambda b, size, g: _tilted_block(phi, model, w, size, g), n, streams, workers)
    return ConfigurationBatch.concat(parts)


def tilted_expectation_direct(F: Functional | Callable[[ConfigurationBatch], np.ndarray], phi: Control,
                              model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
                              workers: int = 1) -> Estimate:
    """Plain average of F over directly simulated tilted configurations."""
    streams = as_streams(rng)
    evaluate = F.evaluate_batch if isinstance(F, Functional) else F
    batch = tilted_sample(phi, model, w, n, streams.child("direct"), workers)
    return mean_se(evaluate(batch))


class TiltedSampler:
    """The tilted process for a deterministic control."""

    def __init__(self, phi: Control, model: IntensityModel):
        if not phi.deterministic:
            raise ContractError("TiltedSampler needs a deterministic control")
        self.phi, self.model = phi, model

    def intensity(self, u, t) -> np.ndarray:
        return (1.0 + self.phi(u, t)) * self.model.theta(u)

    def sample(self, w: Window, n: int, rng: RandomStreams | int, workers: int = 1) -> ConfigurationBatch:
        return tilted_sample(self.phi, self.model, w, n, rng, workers)


def relative_entropy(phi: Control, model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
                     workers: int = 1) -> Estimate:
    """R(P_phi || P) = E^{P_phi} L(phi); exact for deterministic controls."""
    if phi.deterministic:
        return Estimate(phi.entropy(model), 0.0)
    return tilted_expectation_is(_phi_functional(phi, model), phi, model, w, n, rng, workers)


# ------------------------------------------------------------ compensator shift


@dataclass
class ShiftReport:
    importance: Estimate
    direct: Estimate
    shift: float

    @property
    def passed(self) -> bool:
        return (self.importance.within(0.0) and self.direct.within(0.0)
                and agree(self.importance, self.direct))


def shifted_compensator(psi: MarkTimeFunction, phi: Control, model: IntensityModel) -> float:
    """Integral of psi (1 + phi) against pi for deterministic psi and phi."""
    if not phi.deterministic:
        raise ContractError("the shift check needs a deterministic control")
    d = psi.dimension
    breaks = [tuple(phi.support.lower[a:a + 1]) + tuple(phi.support.upper[a:a + 1])
              + tuple(b for g in phi.pieces for b in g.breaks(a)) for a in range(d)]
    breaks.append(phi.edges)
    prod = MarkTimeFunction(lambda m, t: psi(m, t) * (1.0 + phi(m, t)), psi.support.lower, psi.support.upper,
                            psi.support.time, breaks=breaks, name=f"{psi.name}*(1+{phi.name})")
    return prod.integral(model)


def martingale_shift_check(psi: MarkTimeFunction, phi: Control, model: IntensityModel, w: Window, n: int,
                           rng: RandomStreams | int, workers: int = 1) -> ShiftReport:
    """E^{P_phi}[<psi, mu> - integral of psi (1 + phi) dpi] = 0, by both tilted estimators."""
    if not w.contains_window(psi.support):
        raise DomainError(f"support of {psi.name} escapes the window")
    streams = as_streams(rng)
    shift = shifted_compensator(psi, phi, model)

    def centred(batch: ConfigurationBatch) -> np.ndarray:
        return batch.pair(psi) - shift

    imp = tilted_expectation_is(centred, phi, model, w, n, streams.child("is"), workers)
    direct = tilted_expectation_direct(centred, phi, model, w, n, streams.child("direct"), workers)
    return ShiftReport(imp, direct, shift)
