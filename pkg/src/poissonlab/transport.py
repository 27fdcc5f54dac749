"""Monotone mass-transport maps along the first mark axis.

For a weight psi = 1 + g (g a control piece, zero outside its support U0) the
forward map gamma pushes nu to psi * nu:

    integral_a^{gamma(x)} psi dnu = integral_a^x dnu   along each line,

where the anchor ``a`` is 0 when both half-lines carry infinite mass, and a
point on the finite side of U0 otherwise (the map is the identity beyond it).
In d >= 2 the other coordinates are held fixed, so each line is transported
separately.

Configuration transforms: the minus transform applies ``gamma`` and pushes the
base law to the tilted one; the plus transform applies the inverse.
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .configuration import Configuration, ConfigurationBatch
from .errors import BufferOverflowError, ConfigurationError, ContractError
from .girsanov import Control, PastRule, weight_integral
from .intensity import ConstantFunction, IntensityModel, MarkFunction, StepFunction, Window, integrate_nu
from .quadrature import cell_edges, gauss_legendre, integrate_box

ROOT_TOL = 1e-10
NODES = 16
MAX_CELL = 0.5
_MAX_NEWTON = 80


def _is_zero(g: MarkFunction) -> bool:
    if isinstance(g, ConstantFunction):
        return g.value == 0.0
    if isinstance(g, StepFunction):
        return not np.any(g.values)
    return False


class _LineTables:
    """Cumulative tables of theta and psi * theta along axis 0 for a set of lines.

    Every line shares the cell edges; ``rest`` holds the fixed coordinates.
    """

    def __init__(self, model: IntensityModel, g: MarkFunction, edges: np.ndarray, rest: np.ndarray):
        self.model, self.g, self.edges, self.rest = model, g, edges, rest
        x, w = gauss_legendre(NODES)
        width = np.diff(edges)
        nodes = edges[:-1, None] + width[:, None] * x[None, :]  # (K, q)
        base = self.density(np.arange(rest.shape[0])[:, None], nodes.ravel()[None, :], weighted=False)
        weighted = base * self._psi(np.arange(rest.shape[0])[:, None], nodes.ravel()[None, :])
        k, q = nodes.shape
        wts = (width[:, None] * w[None, :])
        # Cells where the integrand is constant are inverted in closed form.
        self.level = {}
        self.flat = {}
        for flag, vals in ((False, base), (True, weighted)):
            v = vals.reshape(-1, k, q)
            self.level[flag] = v[:, :, 0]
            self.flat[flag] = np.ptp(v, axis=2) <= 1e-15 * np.max(np.abs(v), axis=2)
        self.prefix = {
            False: np.concatenate([np.zeros((rest.shape[0], 1)),
                                   np.cumsum((base.reshape(-1, k, q) * wts).sum(axis=2), axis=1)], axis=1),
            True: np.concatenate([np.zeros((rest.shape[0], 1)),
                                  np.cumsum((weighted.reshape(-1, k, q) * wts).sum(axis=2), axis=1)], axis=1),
        }

    def _points(self, lines: np.ndarray, xs: np.ndarray) -> np.ndarray:
        xs, lines = np.broadcast_arrays(xs, lines)
        pts = np.empty(xs.shape + (self.model.dimension,))
        pts[..., 0] = xs
        if self.rest.shape[1]:
            pts[..., 1:] = self.rest[lines]
        return pts.reshape(-1, self.model.dimension), xs.shape

    def _psi(self, lines, xs) -> np.ndarray:
        pts, shape = self._points(lines, xs)
        return (1.0 + self.g(pts)).reshape(shape)

    def density(self, lines, xs, weighted: bool) -> np.ndarray:
        pts, shape = self._points(lines, xs)
        th = self.model.theta(pts).reshape(shape)
        if weighted:
            th = th * (1.0 + self.g(pts)).reshape(shape)
        return th

    def partial(self, lines: np.ndarray, a: np.ndarray, b: np.ndarray, weighted: bool) -> np.ndarray:
        """Integral from a to b (inside one cell) along each line."""
        x, w = gauss_legendre(NODES)
        nodes = a[:, None] + (b - a)[:, None] * x[None, :]
        vals = self.density(lines[:, None], nodes, weighted)
        return (b - a) * (vals @ w)

    def cumulative(self, lines: np.ndarray, xs: np.ndarray, weighted: bool) -> np.ndarray:
        k = np.clip(np.searchsorted(self.edges, xs, side="right") - 1, 0, self.edges.size - 2)
        start = self.edges[k]
        out = self.prefix[weighted][lines, k] + (xs - start) * self.level[weighted][lines, k]
        curved = ~self.flat[weighted][lines, k]
        if curved.any():
            out[curved] = (self.prefix[weighted][lines[curved], k[curved]]
                           + self.partial(lines[curved], start[curved], xs[curved], weighted))
        return out

    def solve(self, lines: np.ndarray, target: np.ndarray, weighted: bool, tol: float) -> np.ndarray:
        """x with cumulative(x) = target along each line (safeguarded Newton)."""
        table = self.prefix[weighted]
        rows = lines if table.shape[0] > 1 else np.zeros(lines.size, dtype=np.int64)
        if np.any(target < table[rows, 0] - tol) or np.any(target > table[rows, -1] + tol):
            raise BufferOverflowError("transport root lies outside the map's table domain; increase padding")
        if table.shape[0] == 1:
            k = np.searchsorted(table[0], target, side="right") - 1
        else:
            k = (table[rows] <= target[:, None]).sum(axis=1) - 1
        k = np.clip(k, 0, self.edges.size - 2)
        need = target - table[rows, k]
        out = self.edges[k] + need / self.level[weighted][lines, k]
        curved = ~self.flat[weighted][lines, k]
        if curved.any():
            out[curved] = self._newton(lines[curved], k[curved], need[curved], weighted, tol)
        return out

    def _newton(self, lines: np.ndarray, k: np.ndarray, need: np.ndarray, weighted: bool, tol: float) -> np.ndarray:
        prefix = self.prefix[weighted]
        a = self.edges[k].copy()
        b = self.edges[k + 1].copy()
        cell = prefix[lines, k + 1] - prefix[lines, k]
        lo_edge = a.copy()
        y = a + (b - a) * np.clip(need / np.where(cell > 0, cell, 1.0), 0.0, 1.0)
        live = np.arange(y.size)
        for _ in range(_MAX_NEWTON):
            ln, lo, yl = lines[live], lo_edge[live], y[live]
            val = self.partial(ln, lo, yl, weighted) - need[live]
            a[live] = np.where(val < 0, yl, a[live])
            b[live] = np.where(val > 0, yl, b[live])
            step = yl - val / self.density(ln, yl, weighted)
            ok = (step >= a[live]) & (step <= b[live])
            y_new = np.where(ok, step, 0.5 * (a[live] + b[live]))
            y_new = np.where(val == 0, yl, y_new)
            y[live] = y_new
            still = ((np.abs(y_new - yl) > 4 * np.finfo(float).eps * np.maximum(1.0, np.abs(y_new)))
                     & (np.abs(val) > 1e-4 * tol))
            live = live[still]
            if live.size == 0:
                break
        val = self.partial(lines, lo_edge, y, weighted) - need
        if np.any(np.abs(val) > tol):
            raise ArithmeticError(f"transport root finding did not reach tolerance {tol:g}")
        return y


class TransportMap:
    """gamma for the weight psi = 1 + g on one time piece (and one past)."""

    def __init__(self, model: IntensityModel, g: MarkFunction, support: Window, domain: tuple[float, float],
                 tol: float = ROOT_TOL):
        if model.divergence == "none":
            raise ConfigurationError(f"{model.name} has finite mass on both half-lines; no transport map exists")
        self.model, self.g, self.support, self.tol = model, g, Window(support.lower, support.upper), tol
        self.identity = _is_zero(g)
        lo0, hi0 = self.support.lower[0], self.support.upper[0]
        if model.divergence == "both":
            self.anchor = 0.0
        elif model.divergence == "right":
            self.anchor = lo0
        else:
            self.anchor = hi0
        lo = min(domain[0], lo0, self.anchor)
        hi = max(domain[1], hi0, self.anchor)
        self.domain = (float(lo), float(hi))
        rest_lo, rest_hi = self.support.lower[1:], self.support.upper[1:]
        model.check_window(Window((lo,) + rest_lo, (hi,) + rest_hi))
        brk = list(model.breaks(0)) + list(g.breaks(0)) + [lo0, hi0, self.anchor]
        width = min(MAX_CELL, model.length_scale or MAX_CELL)
        self.edges = cell_edges(lo, hi, brk, width)
        self._single = None
        if model.dimension == 1 and not self.identity:
            self._single = _LineTables(model, g, self.edges, np.empty((1, 0)))

    def __repr__(self):
        return f"TransportMap(psi=1+{self.g.name}, domain={self.domain})"

    def _active(self, marks: np.ndarray) -> np.ndarray:
        """Points whose line crosses U0 (others are fixed by the map)."""
        if marks.shape[1] == 1:
            return np.ones(marks.shape[0], dtype=bool)
        rest = marks[:, 1:]
        return np.all((rest >= np.asarray(self.support.lower[1:])) & (rest <= np.asarray(self.support.upper[1:])),
                      axis=1)

    def _apply(self, marks, forward: bool) -> np.ndarray:
        marks = np.atleast_2d(np.asarray(marks, dtype=float)).reshape(-1, self.model.dimension)
        out = marks.copy()
        if self.identity or marks.shape[0] == 0:
            return out
        act = self._active(marks)
        x = marks[:, 0]
        if self.model.divergence == "right":
            act &= x > self.anchor
        elif self.model.divergence == "left":
            act &= x < self.anchor
        if not act.any():
            return out
        xs = x[act]
        if np.any(xs < self.domain[0]) or np.any(xs > self.domain[1]):
            raise BufferOverflowError("point lies outside the map's table domain; increase padding")
        if self._single is not None:
            tables = self._single
            lines = np.zeros(xs.size, dtype=np.int64)
        else:
            tables = _LineTables(self.model, self.g, self.edges, marks[act, 1:])
            lines = np.arange(xs.size)
        anchor = np.full(xs.size, self.anchor)
        src, dst = (False, True) if forward else (True, False)
        mass = tables.cumulative(lines, xs, src) - tables.cumulative(lines, anchor, src)
        target = mass + tables.cumulative(lines, anchor, dst)
        out[act, 0] = tables.solve(lines, target, dst, self.tol)
        return out

    def forward(self, marks) -> np.ndarray:
        """gamma: pushes nu to (1 + g) nu."""
        return self._apply(marks, True)

    def inverse(self, marks) -> np.ndarray:
        return self._apply(marks, False)

    __call__ = forward

    def psi(self, marks) -> np.ndarray:
        return 1.0 + self.g(marks)


# ------------------------------------------------------------------ building


_CACHE: OrderedDict = OrderedDict()
_CACHE_LOCK = threading.Lock()
_CACHE_SIZE = 4096


def _model_key(model: IntensityModel):
    return (model.name, tuple(sorted(model.params.items())))


def _cacheable(g: MarkFunction) -> bool:
    return isinstance(g, (ConstantFunction, StepFunction))


def transport_map(model: IntensityModel, g: MarkFunction, support: Window, domain: tuple[float, float],
                  tol: float = ROOT_TOL) -> TransportMap:
    """Build (or fetch from cache) the map for weight 1 + g."""
    if not _cacheable(g):
        return TransportMap(model, g, support, domain, tol)
    key = (_model_key(model), g.key, support.lower, support.upper, tuple(domain), tol)
    with _CACHE_LOCK:
        hit = _CACHE.get(key)
        if hit is not None:
            _CACHE.move_to_end(key)
            return hit
    tm = TransportMap(model, g, support, domain, tol)
    with _CACHE_LOCK:
        _CACHE[key] = tm
        while len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    return tm


def _resolve(phi, piece: int, past: Configuration | None, support: Window | None) -> tuple[MarkFunction, Window]:
    if isinstance(phi, Control):
        return phi.weight(piece, past), phi.support
    if support is None:
        support = phi.support_window()
    return phi, support


def _default_domain(model: IntensityModel, g: MarkFunction, support: Window) -> tuple[float, float]:
    r = line_displacement(model, g, support)
    return support.lower[0] - r - 1.0, support.upper[0] + r + 1.0


def build_map_1d(model: IntensityModel, phi, piece: int = 0, past: Configuration | None = None,
                 domain: tuple[float, float] | None = None, support: Window | None = None) -> TransportMap:
    """The map for a control piece (or a bare mark function g) in dimension 1."""
    if model.dimension != 1:
        raise ConfigurationError("build_map_1d needs a one-dimensional model")
    g, sup = _resolve(phi, piece, past, support)
    return transport_map(model, g, sup, domain or _default_domain(model, g, sup))


def build_map_multid(model: IntensityModel, phi, piece: int = 0, past: Configuration | None = None,
                     domain: tuple[float, float] | None = None, support: Window | None = None) -> TransportMap:
    """The map moving the first coordinate of each line; other coordinates stay put."""
    if model.dimension < 2:
        raise ConfigurationError("build_map_multid needs d >= 2")
    g, sup = _resolve(phi, piece, past, support)
    return transport_map(model, g, sup, domain or _default_domain(model, g, sup))


# ------------------------------------------------------------------- checks


def pushforward_residual(tmap: TransportMap, f: MarkFunction, tol: float = 1e-10) -> float:
    """|integral of f(gamma(u)) dnu - integral of f psi dnu| by quadrature.

    The left side is integrated in the original coordinates, with cell edges
    at the preimages of f's and psi's breaks so the integrand is smooth on
    every cell.
    """
    model, d = tmap.model, tmap.model.dimension
    fw = f.support_window()
    rhs = integrate_nu(model, MarkFunction(lambda m: f(m) * tmap.psi(m), fw.lower, fw.upper,
                                           breaks=[tuple(f.breaks(a)) + tuple(tmap.g.breaks(a)) for a in range(d)]),
                       fw, tol=tol)
    brk0 = np.unique(np.concatenate([f.breaks(0), tmap.g.breaks(0), model.breaks(0)]))

    def line_integral(rest: np.ndarray) -> float:
        ends = np.array([[fw.lower[0]], [fw.upper[0]]])
        pts = np.hstack([ends, np.tile(rest, (2, 1))]) if d > 1 else ends
        lo, hi = tmap.inverse(pts)[:, 0]
        inner = brk0[(brk0 > fw.lower[0]) & (brk0 < fw.upper[0])]
        if inner.size:
            pin = np.hstack([inner[:, None], np.tile(rest, (inner.size, 1))]) if d > 1 else inner[:, None]
            pulled = tmap.inverse(pin)[:, 0]
        else:
            pulled = np.empty(0)

        def integrand(p):
            full = np.hstack([p, np.tile(rest, (p.shape[0], 1))]) if d > 1 else p
            return f(tmap.forward(full)) * model.theta(full)

        return integrate_box(integrand, [lo], [hi], breaks=[tuple(pulled) + tuple(model.breaks(0))], tol=tol,
                             max_width=model.length_scale)

    if d == 1:
        lhs = line_integral(np.empty(0))
    else:
        # Outer Gauss-Legendre over the fixed coordinates, cells split at all breaks.
        axes = []
        for a in range(1, d):
            brk = list(f.breaks(a)) + list(tmap.g.breaks(a)) + list(model.breaks(a))
            e = cell_edges(fw.lower[a], fw.upper[a], brk, model.length_scale or MAX_CELL)
            x, w = gauss_legendre(NODES)
            width = np.diff(e)
            axes.append(((e[:-1, None] + width[:, None] * x).ravel(), (width[:, None] * w).ravel()))
        grids = np.meshgrid(*[r[0] for r in axes], indexing="ij")
        wgrids = np.meshgrid(*[r[1] for r in axes], indexing="ij")
        rests = np.stack([gr.ravel() for gr in grids], axis=1)
        wts = np.prod(np.stack([gr.ravel() for gr in wgrids], axis=1), axis=1)
        lhs = float(sum(wq * line_integral(r) for r, wq in zip(rests, wts)))
    return abs(lhs - rhs)


def interval_mass_check(tmap: TransportMap, a: float, b: float, tol: float = 1e-12) -> float:
    """|nu([a, b]) - integral over [gamma(a), gamma(b)] of psi dnu| (d = 1)."""
    if tmap.model.dimension != 1:
        raise ConfigurationError("interval check is one-dimensional")
    ga, gb = tmap.forward(np.array([[a], [b]]))[:, 0]
    left = integrate_nu(tmap.model, ConstantFunction(1.0), Window([a], [b]), tol=tol)
    psi = MarkFunction(lambda m: tmap.psi(m), breaks=[tmap.g.breaks(0)])
    right = integrate_nu(tmap.model, psi, Window([ga], [gb]), tol=tol)
    return abs(left - right)


# ------------------------------------------------------------- displacement


def line_displacement(model: IntensityModel, g: MarkFunction, support: Window) -> float:
    """Bound on |gamma(x) - x| for one weight: line mass of |g| over the floor."""
    if _is_zero(g):
        return 0.0
    if model.dimension == 1:
        return weight_integral(model, g, support, np.abs) / model.density_floor
    sup_g = _sup_abs(g)
    width = support.upper[0] - support.lower[0]
    return sup_g * model.sup_density(support) * width / model.density_floor


def _sup_abs(g: MarkFunction) -> float:
    if isinstance(g, StepFunction):
        return float(np.abs(g.values).max())
    if isinstance(g, ConstantFunction):
        return abs(g.value)
    raise ContractError("displacement of a general mark function needs declared control bounds")


def displacement_bound(phi: Control, model: IntensityModel) -> float:
    """Max over pieces of the transport displacement along axis 0."""
    r = 0.0
    for i, p in enumerate(phi.pieces):
        if isinstance(p, PastRule) or not isinstance(p, (ConstantFunction, StepFunction)):
            c = max(abs(phi.c0), phi.c1)
            if model.dimension == 1:
                from .intensity import window_mass
                r = max(r, c * window_mass(model, phi.support) / model.density_floor)
            else:
                width = phi.support.upper[0] - phi.support.lower[0]
                r = max(r, c * model.sup_density(phi.support) * width / model.density_floor)
        else:
            r = max(r, line_displacement(model, p, phi.support))
    return r


@dataclass(frozen=True)
class BufferPlan:
    """Where F lives, how far transported points can travel, and where to simulate."""

    inner: Window
    padding: tuple[float, ...]
    padded: Window
    domain: tuple[float, float]

    def contains(self, phi: Control, model: IntensityModel) -> bool:
        return displacement_bound(phi, model) <= self.padding[0] + 1e-12


def plan_buffer(inner: Window, controls: Sequence[Control], model: IntensityModel, bracket: float = 0.5,
                padding: float | None = None) -> BufferPlan:
    """Pad ``inner`` along axis 0 by the largest displacement plus one bracket width.

    The simulation window also covers every control's support, so the tilt
    and transport act on the same points.
    """
    r = max([displacement_bound(c, model) for c in controls] + [0.0])
    need = r + bracket
    if padding is not None:
        if padding < r:
            raise ContractError(f"padding {padding:g} is below the displacement bound {r:g}")
        need = float(padding)
    pad = (need,) + (0.0,) * (inner.dimension - 1)
    padded = inner.padded(pad)
    for c in controls:
        padded = padded.hull(Window(c.support.lower, c.support.upper, padded.time))
    domain = (padded.lower[0] - need - bracket, padded.upper[0] + need + bracket)
    return BufferPlan(inner, pad, padded, domain)


# ------------------------------------------------------- configuration maps


def piece_map(phi: Control, i: int, omega: Configuration | None, model: IntensityModel,
              plan: BufferPlan) -> TransportMap:
    return transport_map(model, phi.weight(i, omega), phi.support, plan.domain)


def _transform_marks(phi: Control, marks: np.ndarray, times: np.ndarray, direction: str,
                     control_omega: Configuration | None, model: IntensityModel, plan: BufferPlan) -> np.ndarray:
    if direction not in ("+", "-"):
        raise ValueError("direction must be '+' or '-'")
    out = marks.copy()
    pieces = phi.piece_of(times)
    for i in np.unique(pieces):
        sel = pieces == i
        tm = piece_map(phi, int(i), control_omega, model, plan)
        out[sel] = tm.forward(marks[sel]) if direction == "-" else tm.inverse(marks[sel])
    return out


def gamma_transform(phi: Control, omega: Configuration, direction: str, model: IntensityModel, plan: BufferPlan,
                    control_omega: Configuration | None = None) -> Configuration:
    """Move every point of piece i by the map of 1 + g_i(., omega|[0, t_i]).

    ``direction='-'`` applies gamma, ``'+'`` its inverse.  The control is
    evaluated on ``control_omega`` (default: ``omega`` itself).
    """
    if len(omega) == 0:
        return omega
    src = omega if control_omega is None else control_omega
    marks = _transform_marks(phi, omega.marks, omega.times, direction, src, model, plan)
    return Configuration(marks, omega.times, omega.dimension)


def gamma_transform_batch(phi: Control, batch: ConfigurationBatch, direction: str, model: IntensityModel,
                          plan: BufferPlan) -> ConfigurationBatch:
    if batch.times.size == 0:
        return batch
    if phi.deterministic:
        return batch.with_marks(_transform_marks(phi, batch.marks, batch.times, direction, None, model, plan))
    return ConfigurationBatch.from_configs([gamma_transform(phi, c, direction, model, plan) for c in batch],
                                           model.dimension)


# ------------------------------------------------------------ conjugations


class _Conjugate(PastRule):
    """g_i evaluated on the past moved by the already built control."""

    def __init__(self, phi: Control, i: int, built: "list[Control]", direction: str, model: IntensityModel,
                 plan: BufferPlan, label: str):
        self.phi, self.i, self.built, self.direction, self.model, self.plan = phi, i, built, direction, model, plan
        self._memo: dict = {}
        super().__init__(self._rule, f"{label}{i}")

    def _rule(self, past: Configuration) -> MarkFunction:
        key = past.key()
        hit = self._memo.get(key)
        if hit is None:
            moved = gamma_transform(self.built[0], past, self.direction, self.model, self.plan)
            hit = self.phi.weight(self.i, moved)
            if len(self._memo) < 100_000:
                self._memo[key] = hit
        return hit


def _conjugate(phi: Control, model: IntensityModel, plan: BufferPlan, direction: str, label: str) -> Control:
    if phi.deterministic:
        return phi
    holder: list[Control] = []
    pieces = [phi.pieces[0]] + [_Conjugate(phi, i, holder, direction, model, plan, label) for i in range(1, phi.m)]
    out = phi.with_pieces(pieces, f"{label}({phi.name})")
    holder.append(out)
    return out


def tilde_control(phi: Control, model: IntensityModel, plan: BufferPlan) -> Control:
    """phi~ with phi~(u, t, omega) = phi(u, t, Gamma^+_{phi~}(omega))."""
    return _conjugate(phi, model, plan, "+", "tilde")


def hat_control(phi: Control, model: IntensityModel, plan: BufferPlan) -> Control:
    """phi^ with phi^(u, t, omega) = phi(u, t, Gamma^-_{phi^}(omega))."""
    return _conjugate(phi, model, plan, "-", "hat")


def tilde_fixed_point_error(phi: Control, tilde: Control, omega: Configuration, marks, model: IntensityModel,
                            plan: BufferPlan) -> float:
    """max |phi~(u, t_i, omega) - phi(u, t_i, Gamma^+_{phi~}(omega))| over pieces and marks."""
    moved = gamma_transform(tilde, omega, "+", model, plan)
    return max(float(np.max(np.abs(tilde.weight(i, omega)(marks) - phi.weight(i, moved)(marks))))
               for i in range(phi.m))


def hat_fixed_point_error(phi: Control, hat: Control, omega: Configuration, marks, model: IntensityModel,
                          plan: BufferPlan) -> float:
    """max |phi(u, t_i, omega) - phi^(u, t_i, Gamma^+_{phi}(omega))| over pieces and marks."""
    moved = gamma_transform(phi, omega, "+", model, plan)
    return max(float(np.max(np.abs(phi.weight(i, omega)(marks) - hat.weight(i, moved)(marks))))
               for i in range(phi.m))


# ------------------------------------------------------------ stability (H2)


@dataclass
class StabilityReport:
    ns: tuple[int, ...]
    forward: np.ndarray
    inverse: np.ndarray

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.forward) < 0) and np.all(np.diff(self.inverse) < 0))

    @property
    def fitted_k(self) -> float:
        """Smallest K with discrepancy <= K / n at every n."""
        n = np.asarray(self.ns, dtype=float)
        return float(max(np.max(self.forward * n), np.max(self.inverse * n)))

    def converged(self, tol: float) -> bool:
        return bool(self.forward[-1] <= tol and self.inverse[-1] <= tol)


def h2_stability_check(phi: Control, model: IntensityModel, points, plan: BufferPlan,
                       ns: Sequence[int] = (2, 4, 8, 16), pasts: Sequence[Configuration] | None = None,
                       sequence=None) -> StabilityReport:
    """Max displacement between the maps of phi_n and phi at sampled points.

    ``sequence(n)`` defaults to the scaled controls (1 - 1/n) phi.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float)).reshape(-1, model.dimension)
    pasts = list(pasts) if pasts is not None else [None]
    seq = sequence or (lambda n: phi.scaled(1.0 - 1.0 / n))
    fwd, inv = [], []
    for n in ns:
        phin = seq(n)
        df = di = 0.0
        for past in pasts:
            for i in range(phi.m):
                a = piece_map(phin, i, past, model, plan)
                b = piece_map(phi, i, past, model, plan)
                df = max(df, float(np.max(np.abs(a.forward(points) - b.forward(points)))))
                di = max(di, float(np.max(np.abs(a.inverse(points) - b.inverse(points)))))
        fwd.append(df)
        inv.append(di)
    return StabilityReport(tuple(ns), np.array(fwd), np.array(inv))
