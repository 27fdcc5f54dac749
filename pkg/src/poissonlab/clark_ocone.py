"""Predictable projection of D F by nested forward resimulation, and the
martingale representation F = E F + sum over points of pD F - compensator.

Conditioning on the past of a Poisson measure is exact by resimulating the
future: increments after ``t_i`` are independent of everything up to ``t_i``.
The projection is evaluated at each cell's left endpoint and held constant on
the cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .configuration import Configuration, add_mass, sample_points, simulate_batch, simulate_replicates
from .errors import DomainError, ParameterError
from .functionals import CylindricalFunctional, Functional, difference_grid
from .intensity import IntensityModel, Window
from .quadrature import axis_rule, cell_edges
from .rng import RandomStreams, as_streams, parallel_map

MARK_NODES = 16


@dataclass(frozen=True)
class TimeGrid:
    edges: tuple[float, ...]

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=float)
        if e.size < 2 or e[0] != 0.0 or e[-1] != 1.0 or np.any(np.diff(e) <= 0):
            raise ParameterError("time grid must be strictly increasing from 0 to 1")

    @classmethod
    def uniform(cls, m: int) -> "TimeGrid":
        if m < 1:
            raise ParameterError("grid needs at least one cell")
        return cls(tuple(float(x) for x in np.linspace(0.0, 1.0, m + 1)))

    @property
    def m(self) -> int:
        return len(self.edges) - 1

    def left(self, i: int) -> float:
        return self.edges[i]

    def width(self, i: int) -> float:
        return self.edges[i + 1] - self.edges[i]

    def cell_of(self, t) -> np.ndarray:
        """Index i with t in (t_i, t_{i+1}]; t = 0 goes to cell 0."""
        idx = np.searchsorted(np.asarray(self.edges), np.asarray(t, dtype=float), side="left") - 1
        return np.clip(idx, 0, self.m - 1)


@dataclass
class ProjectionEstimate:
    """Projection values on one cell at a set of marks."""

    cell: int
    t: float
    marks: np.ndarray
    values: np.ndarray
    se: np.ndarray
    n_inner: int


def mark_quadrature(F: Functional, model: IntensityModel, nodes_per_axis: int = MARK_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes over F's mark window and weights including theta."""
    w = F.window
    model.check_window(Window(w.lower, w.upper))
    axes = []
    for a in range(model.dimension):
        brk = list(model.breaks(a))
        if isinstance(F, CylindricalFunctional):
            for f in F.fs:
                brk.extend(f.breaks(a))
        edges = cell_edges(w.lower[a], w.upper[a], brk, model.length_scale)
        axes.append(axis_rule(edges, nodes_per_axis))
    grids = np.meshgrid(*[r[0] for r in axes], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in axes], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return nodes, weights * model.theta(nodes)


def _differences(F: Functional, past: Configuration, marks: np.ndarray, t: float, model: IntensityModel,
                 w: Window, n_inner: int, gen: np.random.Generator) -> np.ndarray:
    """(n_inner, M) samples of D_{(u, t)} F(past + future) for each mark u."""
    future_window = w.with_time(t, 1.0)
    if isinstance(F, CylindricalFunctional):
        fm, ft, owner = sample_points(model, future_window, n_inner, gen)
        fut = np.stack([np.bincount(owner, weights=f(fm, ft), minlength=n_inner) for f in F.fs], axis=-1)
        v = F.pairings(past)[None, :] + fut
        fvals = F.point_values(marks, np.full(marks.shape[0], t))
        return difference_grid(F, v, fvals)
    futures = simulate_batch(model, future_window, n_inner, gen)
    out = np.empty((n_inner, marks.shape[0]))
    for j, fut in enumerate(futures):
        base = past.union(fut)
        f0 = F.evaluate(base)
        for k, m in enumerate(marks):
            out[j, k] = F.evaluate(add_mass(base, (m, t))) - f0
    return out


def _check_setup(F: Functional, w: Window, n_inner: int):
    if n_inner < 2:
        raise ParameterError("n_inner must be at least 2")
    if not w.contains_window(F.window):
        raise DomainError(f"dependence window of {F.name} escapes the simulation window")


def projection_field(F: Functional, marks, grid: TimeGrid, cell: int, past: Configuration, model: IntensityModel,
                     w: Window, n_inner: int, rng: np.random.Generator) -> ProjectionEstimate:
    """Estimate pD_{(u, t_i)} F at several marks from one shared set of futures."""
    _check_setup(F, w, n_inner)
    t = grid.left(cell)
    if len(past) and past.times[-1] > t:
        raise ParameterError("past contains points after the cell's left endpoint")
    marks = np.atleast_2d(np.asarray(marks, dtype=float)).reshape(-1, model.dimension)
    d = _differences(F, past, marks, t, model, w, n_inner, rng)
    return ProjectionEstimate(cell, t, marks, d.mean(axis=0), d.std(axis=0, ddof=1) / math.sqrt(n_inner), n_inner)


def predictable_projection(F: Functional, u, grid: TimeGrid, cell: int, past: Configuration, model: IntensityModel,
                           w: Window, n_inner: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of E(D_{(u,t)} F | past) on cell ``cell``."""
    return float(projection_field(F, u, grid, cell, past, model, w, n_inner, rng).values[0])


@dataclass
class StochasticIntegral:
    """The pieces of the estimated integral of pD F against the compensated measure."""

    point_sum: float
    compensator: float
    energy: float  # integral of (pD F)^2 against pi

    @property
    def value(self) -> float:
        return self.point_sum - self.compensator


class _Integrator:
    def __init__(self, F: Functional, model: IntensityModel, w: Window, grid: TimeGrid, n_inner: int,
                 streams: RandomStreams, nodes_per_axis: int = MARK_NODES):
        _check_setup(F, w, n_inner)
        self.F, self.model, self.w, self.grid, self.n_inner, self.streams = F, model, w, grid, n_inner, streams
        self.nodes, self.weights = mark_quadrature(F, model, nodes_per_axis)

    def __call__(self, omega: Configuration, replicate: int) -> StochasticIntegral:
        grid, F = self.grid, self.F
        inside = F.window.contains_marks(omega.marks)
        cells = grid.cell_of(omega.times)
        n_nodes = self.nodes.shape[0]
        point_sum = comp = energy = 0.0
        for i in range(grid.m):
            t = grid.left(i)
            if t > F.window.time[1]:
                break
            sel = inside & (cells == i)
            marks = np.vstack([self.nodes, omega.marks[sel]])
            d = _differences(F, omega.restrict(t), marks, t, self.model, self.w, self.n_inner,
                             self.streams.generator(replicate=replicate, cell=i))
            vals = d.mean(axis=0)
            dt = grid.width(i)
            comp += dt * float(np.dot(self.weights, vals[:n_nodes]))
            energy += dt * float(np.dot(self.weights, vals[:n_nodes] ** 2))
            point_sum += float(vals[n_nodes:].sum())
        return StochasticIntegral(point_sum, comp, energy)


@dataclass
class Expectation:
    value: float
    se: float
    method: str


def estimate_expectation(F: Functional, model: IntensityModel, w: Window, n_outer: int, rng: RandomStreams | int,
                         method: str = "plain", grid: TimeGrid | None = None, n_inner: int = 200,
                         workers: int = 1) -> Expectation:
    """E F from an outer run of its own.

    ``"plain"`` averages F.  ``"martingale"`` averages F minus the estimated
    stochastic integral, which has mean zero exactly, so it acts as a control
    variate with no bias.
    """
    streams = as_streams(rng)
    batch = simulate_replicates(model, w, n_outer, streams.child("outer"), workers)
    fv = F.evaluate_batch(batch)
    if method == "plain":
        vals = fv
    elif method == "martingale":
        if grid is None:
            raise ParameterError("martingale expectation needs a time grid")
        integ = _Integrator(F, model, w, grid, n_inner, streams.child("inner"))
        ints = parallel_map(lambda r: integ(batch.config(r), r).value, range(n_outer), workers)
        vals = fv - np.asarray(ints)
    else:
        raise ParameterError(f"unknown expectation method {method!r}")
    se = float(np.std(vals, ddof=1) / math.sqrt(n_outer)) if n_outer > 1 else math.inf
    return Expectation(float(np.mean(vals)), se, method)


def reconstruct(F: Functional, omega: Configuration, model: IntensityModel, w: Window, grid: TimeGrid, n_inner: int,
                rng: RandomStreams | int, e_hat: Expectation | float | None = None, n_outer: int = 500,
                replicate: int = 0) -> float:
    """E_hat F + estimated stochastic integral of pD F along omega."""
    streams = as_streams(rng)
    if e_hat is None:
        e_hat = estimate_expectation(F, model, w, n_outer, streams.child("expectation"))
    base = e_hat.value if isinstance(e_hat, Expectation) else float(e_hat)
    integ = _Integrator(F, model, w, grid, n_inner, streams.child("inner"))
    return base + integ(omega, replicate).value


@dataclass
class ResidualReport:
    m: int
    n_inner: int
    n_outer: int
    residual: float
    se: float
    sd_F: float
    expectation: Expectation
    errors: np.ndarray = field(repr=False)
    integrals: np.ndarray = field(repr=False)
    energies: np.ndarray = field(repr=False)

    @property
    def relative(self) -> float:
        return self.residual / self.sd_F if self.sd_F > 0 else math.inf

    def martingale_mean(self) -> tuple[float, float]:
        n = self.integrals.size
        return float(self.integrals.mean()), float(self.integrals.std(ddof=1) / math.sqrt(n))


def residual(F: Functional, model: IntensityModel, w: Window, grid: TimeGrid, n_outer: int, n_inner: int,
             rng: RandomStreams | int, expectation: str = "plain", workers: int = 1,
             n_boot: int = 1000) -> ResidualReport:
    """Root-mean-square of F - reconstruct(F) over outer configurations, with bootstrap SE."""
    streams = as_streams(rng)
    outer = simulate_replicates(model, w, n_outer, streams.child("outer"), workers)
    integ = _Integrator(F, model, w, grid, n_inner, streams.child("inner"))
    parts = parallel_map(lambda r: integ(outer.config(r), r), range(n_outer), workers)
    ints = np.array([p.value for p in parts])
    energies = np.array([p.energy for p in parts])
    fv = F.evaluate_batch(outer)
    e_hat = estimate_expectation(F, model, w, n_outer, streams.child("expectation"), expectation, grid, n_inner,
                                 workers)
    err = fv - (e_hat.value + ints)
    res = float(np.sqrt(np.mean(err ** 2)))
    boot = streams.child("bootstrap").generator()
    idx = boot.integers(0, n_outer, size=(n_boot, n_outer))
    se = float(np.std(np.sqrt(np.mean(err[idx] ** 2, axis=1)), ddof=1))
    sd = float(np.std(fv, ddof=1))
    return ResidualReport(grid.m, n_inner, n_outer, res, se, sd, e_hat, err, ints, energies)

