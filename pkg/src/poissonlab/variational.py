"""Both sides of -log E exp(-F) = inf over controls of a dual objective.

Tilt form:      E^{P_phi}(F + L(phi))
Transport form: E(F o Gamma^-_phi + L(phi))
"""

from __future__ import annotations

import hashlib
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .clark_ocone import TimeGrid
from .configuration import Configuration, ConfigurationBatch, sample_points, simulate_replicates
from .errors import ContractError, DomainError, ParameterError
from .functionals import CylindricalFunctional, Functional, difference_grid
from .girsanov import Control, PastRule, tilted_sample, doleans_batch
from .intensity import IntensityModel, StepFunction, Window
from .quadrature import axis_rule, cell_edges
from .rng import RandomStreams, StreamKey, as_streams, block_sizes, map_blocks, stream
from .stats import Estimate, agree, at_least, mean_se, neg_log_mean_exp
from .transport import BufferPlan, displacement_bound, gamma_transform_batch, hat_control, tilde_control


def eq31_bounds(F: Functional) -> tuple[float, float]:
    """alpha = exp(-2B) - 1, beta = 1 + exp(2B) with B = ||F||_inf (sup|DF| if F is unbounded)."""
    b = F.sup_norm()
    if not math.isfinite(b):
        raise ContractError(f"{F.name} declares neither a sup-norm nor a difference bound")
    return math.expm1(-2.0 * b), 1.0 + math.exp(2.0 * b)


# --------------------------------------------------------------------- lhs


def lhs(F: Functional, model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
        workers: int = 1) -> Estimate:
    """-log of the Monte Carlo mean of exp(-F), delta-method SE."""
    if not w.contains_window(F.window):
        raise DomainError(f"dependence window of {F.name} escapes the simulation window")
    batch = simulate_replicates(model, w, n, as_streams(rng).child("lhs"), workers)
    return neg_log_mean_exp(F.evaluate_batch(batch))


# ------------------------------------------------------------------ tilt form


def _entropy_per_config(phi: Control, model: IntensityModel, batch: ConfigurationBatch) -> np.ndarray:
    if phi.deterministic:
        return np.full(batch.n, phi.entropy(model))
    return np.array([phi.entropy(model, c) for c in batch])


def dual_tilt(F: Functional, phi: Control, model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
              method: str = "direct", workers: int = 1) -> Estimate:
    """E^{P_phi}(F + L(phi)) by direct tilted simulation or importance sampling."""
    if not w.contains_window(F.window):
        raise DomainError(f"dependence window of {F.name} escapes the simulation window")
    streams = as_streams(rng)
    if method == "direct":
        batch = tilted_sample(phi, model, w, n, streams.child("tilt-direct"), workers)
        return mean_se(F.evaluate_batch(batch) + _entropy_per_config(phi, model, batch))
    if method == "is":
        batch = simulate_replicates(model, w, n, streams.child("tilt-is"), workers)
        dens = doleans_batch(phi, batch, model, w)
        return mean_se(dens * (F.evaluate_batch(batch) + _entropy_per_config(phi, model, batch)))
    raise ParameterError(f"unknown tilt estimator {method!r}")


# ------------------------------------------------------------- transport form


class SlabField:
    """Common random configurations on a window, generated slab by slab along axis 0.

    Each slab has its own keyed streams, so asking for a sub-range of slabs
    gives exactly the restriction of the full realization.  This lets a
    candidate control simulate only the slabs it can move into F's window.
    """

    def __init__(self, model: IntensityModel, window: Window, n: int, rng: RandomStreams | int,
                 slab_width: float = 1.0, workers: int = 1, breaks: Sequence[float] = (), cache_slabs: int = 16):
        self.model, self.window, self.n, self.workers = model, window, int(n), workers
        self.streams = as_streams(rng)
        self.edges = cell_edges(window.lower[0], window.upper[0], list(breaks), slab_width)
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._cache_slabs = cache_slabs
        self._batches: dict = {}

    def _slab(self, s: int):
        with self._lock:
            hit = self._cache.get(s)
            if hit is not None:
                self._cache.move_to_end(s)
                return hit
        w = self.window
        sw = Window((self.edges[s],) + w.lower[1:], (self.edges[s + 1],) + w.upper[1:], w.time)
        parts = map_blocks(lambda b, size, g: sample_points(self.model, sw, size, g), self.n,
                           self.streams.child(f"slab{s}"), self.workers)
        shift = np.cumsum([0] + list(block_sizes(self.n))[:-1])
        out = (np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
               np.concatenate([p[2] + s0 for p, s0 in zip(parts, shift)]))
        with self._lock:
            self._cache[s] = out
            while len(self._cache) > self._cache_slabs:
                self._cache.popitem(last=False)
        return out

    def slabs_for(self, lo: float, hi: float) -> list[int]:
        e = self.edges
        return [s for s in range(e.size - 1) if e[s + 1] > lo and e[s] < hi]

    def batch(self, lo: float | None = None, hi: float | None = None) -> ConfigurationBatch:
        """All points in the slabs meeting [lo, hi] along axis 0 (default: everything)."""
        lo = self.window.lower[0] if lo is None else lo
        hi = self.window.upper[0] if hi is None else hi
        slabs = tuple(self.slabs_for(lo, hi))
        with self._lock:
            hit = self._batches.get(slabs)
        if hit is not None:
            return hit
        parts = [self._slab(s) for s in slabs]
        if not parts:
            d = self.model.dimension
            return ConfigurationBatch(np.empty((0, d)), np.empty(0), np.empty(0, dtype=np.int64), self.n, True)
        out = ConfigurationBatch(np.vstack([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                                 np.concatenate([p[2] for p in parts]), self.n)
        with self._lock:
            if len(self._batches) >= 4:
                self._batches.pop(next(iter(self._batches)))
            self._batches[slabs] = out
        return out


def _check_plan(F: Functional, phi: Control, model: IntensityModel, plan: BufferPlan):
    if not plan.inner.contains_window(F.window):
        raise DomainError(f"dependence window of {F.name} escapes the buffer plan's inner window")
    if not plan.contains(phi, model):
        raise ContractError(f"buffer padding {plan.padding[0]:g} is below the displacement bound of {phi.name}")


def dual_transport(F: Functional, phi: Control, model: IntensityModel, plan: BufferPlan, n: int,
                   rng: RandomStreams | int, workers: int = 1, field: SlabField | None = None) -> Estimate:
    """E(F(Gamma^-_phi omega) + L(phi)(omega)) with omega simulated on the padded window.

    For deterministic controls only the slabs within the displacement bound
    of F's window are simulated; the omitted points cannot reach the window.
    """
    _check_plan(F, phi, model, plan)
    if field is None:
        field = SlabField(model, plan.padded, n, as_streams(rng).child("transport"), workers=workers,
                          breaks=plan.inner.lower[:1] + plan.inner.upper[:1])
    if field.n != n:
        raise ParameterError("field size does not match n")
    if phi.deterministic:
        r = displacement_bound(phi, model)
        batch = field.batch(F.window.lower[0] - r, F.window.upper[0] + r)
    else:
        batch = field.batch()
    moved = gamma_transform_batch(phi, batch, "-", model, plan)
    return mean_se(F.evaluate_batch(moved) + _entropy_per_config(phi, model, batch))


# ------------------------------------------------------------ optimal control


def _past_tag(piece: int, key: bytes) -> str:
    digest = hashlib.blake2b(key, digest_size=16).hexdigest()
    return f"piece{piece}/{digest}"


class _RatioRule(PastRule):
    def __init__(self, owner: "OptimalControl", piece: int):
        self.owner, self.piece = owner, piece
        super().__init__(self._rule, f"ratio{piece}")

    def _rule(self, past: Configuration) -> StepFunction:
        return self.owner.cell_estimates(self.piece, past)[2]


class OptimalControl(Control):
    """Cellwise nested-MC estimate of pD exp(-F) / E(exp(-F) | past), clipped to [alpha, beta]."""

    def __init__(self, F: Functional, model: IntensityModel, w: Window, edges: Sequence[float],
                 partition: Sequence[Sequence[float]], n_inner: int, rng: RandomStreams | int,
                 bounds: tuple[float, float] | None = None, nodes_per_axis: int = 4):
        if n_inner < 2:
            raise ParameterError("n_inner must be at least 2")
        if not w.contains_window(F.window):
            raise DomainError(f"dependence window of {F.name} escapes the simulation window")
        self.F, self.model, self.w, self.n_inner = F, model, w, n_inner
        self.streams = as_streams(rng).child("optimal")
        self.partition = tuple(np.asarray(e, dtype=float) for e in partition)
        self.alpha, self.beta = bounds if bounds is not None else eq31_bounds(F)
        shape = tuple(e.size - 1 for e in self.partition)
        # theta-weighted quadrature nodes for each partition cell
        axes = [axis_rule(e, nodes_per_axis) for e in self.partition]
        grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
        wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
        self._nodes = np.stack([g.ravel() for g in grids], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1) * model.theta(self._nodes)
        cell_idx = [np.repeat(np.arange(s), nodes_per_axis) for s in shape]
        cgrid = np.meshgrid(*cell_idx, indexing="ij")
        self._cell_of_node = np.ravel_multi_index(tuple(g.ravel() for g in cgrid), shape)
        self._shape = shape
        self._ncell = int(np.prod(shape))
        mat = np.zeros((self._ncell, self._nodes.shape[0]))
        mat[self._cell_of_node, np.arange(self._nodes.shape[0])] = wts
        self._avg = mat / mat.sum(axis=1, keepdims=True)
        self._memo: dict = {}
        self._memo_lock = threading.Lock()
        support = Window([e[0] for e in self.partition], [e[-1] for e in self.partition])
        super().__init__(edges, [_RatioRule(self, i) for i in range(len(edges) - 1)], support,
                         c0=self.alpha, c1=self.beta, name=f"phi*({F.name})")

    def _past_key(self, past: Configuration) -> bytes:
        """What the conditional law depends on: the pairings for cylindrical F, else the whole past."""
        if isinstance(self.F, CylindricalFunctional):
            return b"v" + np.asarray(self.F.pairings(past), dtype=float).tobytes()
        return past.key()

    def _samples(self, piece: int, past: Configuration, key: bytes) -> tuple[np.ndarray, np.ndarray]:
        """(numerator, denominator) samples, numerator per cell: (n_inner, ncell), (n_inner,)."""
        t = self.edges[piece]
        gen = stream(StreamKey(self.streams.seed, f"{self.streams.purpose}/{_past_tag(piece, key)}"))
        F, model = self.F, self.model
        fw = self.w.with_time(t, 1.0)
        if isinstance(F, CylindricalFunctional):
            fm, ft, owner = sample_points(model, fw, self.n_inner, gen)
            fut = np.stack([np.bincount(owner, weights=f(fm, ft), minlength=self.n_inner) for f in F.fs], axis=-1)
            v = F.pairings(past)[None, :] + fut
            hv = F.apply_h(v)
            shift = float(hv.min())
            den = np.exp(-(hv - shift))
            fvals = F.point_values(self._nodes, np.full(self._nodes.shape[0], t))
            diff = difference_grid(F, v, fvals)  # (n_inner, nodes)
            num_nodes = den[:, None] * np.expm1(-diff)
        else:
            from .configuration import add_mass, simulate_batch
            futures = simulate_batch(model, fw, self.n_inner, gen)
            vals, num_nodes = [], []
            for fut in futures:
                base = past.union(fut)
                f0 = F.evaluate(base)
                vals.append(f0)
                num_nodes.append([F.evaluate(add_mass(base, (m, t))) - f0 for m in self._nodes])
            hv = np.asarray(vals)
            shift = float(hv.min())
            den = np.exp(-(hv - shift))
            num_nodes = den[:, None] * np.expm1(-np.asarray(num_nodes))
        return num_nodes @ self._avg.T, den

    def cell_estimates(self, piece: int, past: Configuration) -> tuple[np.ndarray, np.ndarray, StepFunction]:
        """Raw ratio estimates per cell, their delta-method SEs, and the clipped step function."""
        past = past.restrict(self.edges[piece])
        pkey = self._past_key(past)
        key = (piece, pkey)
        with self._memo_lock:
            hit = self._memo.get(key)
        if hit is not None:
            return hit
        num, den = self._samples(piece, past, pkey)
        dbar = den.mean()
        ratio = num.mean(axis=0) / dbar
        resid = num - ratio[None, :] * den[:, None]
        se = resid.std(axis=0, ddof=1) / (math.sqrt(self.n_inner) * dbar)
        clipped = np.clip(ratio, self.alpha, self.beta)
        out = (ratio.reshape(self._shape), se.reshape(self._shape),
               StepFunction(self.partition, clipped.reshape(self._shape), name="phi*"))
        with self._memo_lock:
            if len(self._memo) < 200_000:
                self._memo[key] = out
        return out


def optimal_control(F: Functional, model: IntensityModel, w: Window, grid: TimeGrid | Sequence[float],
                    partition: Sequence[Sequence[float]], n_inner: int, rng: RandomStreams | int,
                    bounds: tuple[float, float] | None = None) -> OptimalControl:
    edges = grid.edges if isinstance(grid, TimeGrid) else tuple(grid)
    return OptimalControl(F, model, w, edges, partition, n_inner, rng, bounds)


# ------------------------------------------------------------ control family


class ControlFamily:
    """Step controls: one value per (time piece, mark cell), boxed in [lower, upper]."""

    def __init__(self, edges: Sequence[float], partition: Sequence[Sequence[float]], lower: float, upper: float,
                 name: str = "family"):
        if not (-1.0 < lower <= 0.0 <= upper):
            raise ContractError(f"family bounds must satisfy -1 < lower <= 0 <= upper, got [{lower}, {upper}]")
        self.edges = tuple(float(e) for e in edges)
        self.partition = tuple(np.asarray(e, dtype=float) for e in partition)
        self.lower, self.upper = float(lower), float(upper)
        self.shape = tuple(e.size - 1 for e in self.partition)
        self.name = name

    @classmethod
    def for_functional(cls, F: Functional, edges: Sequence[float], partition: Sequence[Sequence[float]],
                       name: str = "family") -> "ControlFamily":
        a, b = eq31_bounds(F)
        return cls(edges, partition, a, b, name)

    @property
    def m(self) -> int:
        return len(self.edges) - 1

    @property
    def n_params(self) -> int:
        return self.m * int(np.prod(self.shape))

    @property
    def support(self) -> Window:
        return Window([e[0] for e in self.partition], [e[-1] for e in self.partition])

    def bounds(self) -> list[tuple[float, float]]:
        return [(self.lower, self.upper)] * self.n_params

    def control(self, params) -> Control:
        p = np.asarray(params, dtype=float).reshape((self.m,) + self.shape)
        if np.any(p < self.lower - 1e-12) or np.any(p > self.upper + 1e-12):
            raise ContractError("parameters outside the family box")
        pieces = [StepFunction(self.partition, p[i], name=f"{self.name}[{i}]") for i in range(self.m)]
        label = ",".join(f"{x:.4g}" for x in p.ravel())
        return Control(self.edges, pieces, self.support, self.lower, self.upper, name=f"{self.name}({label})")

    def extremes(self) -> list[Control]:
        """The controls with the largest transport displacement in the family."""
        return [self.control(np.full(self.n_params, v)) for v in (self.lower, self.upper)]

    def sample(self, k: int, rng: np.random.Generator) -> list[np.ndarray]:
        return [rng.uniform(self.lower, self.upper, self.n_params) for _ in range(k)]


# --------------------------------------------------------------- minimizer


@dataclass
class Budget:
    n: int = 20_000
    restarts: int = 3
    maxfev: int = 60
    n_final: int | None = None
    xatol: float = 1e-3
    fatol: float = 1e-4
    step: float = 0.25
    n_inner: int = 200
    n_check: int = 5_000
    n_random: int = 20


@dataclass
class MinimizeResult:
    params: np.ndarray
    value: Estimate
    converged: bool
    traces: list[list[float]]
    nfev: int
    restart_params: list[np.ndarray] = field(default_factory=list)


def minimize_dual(F: Functional, family: ControlFamily, model: IntensityModel, plan: BufferPlan, budget: Budget,
                  rng: RandomStreams | int, workers: int = 1, x0=None) -> MinimizeResult:
    """Nelder-Mead over the family on the transport-form objective.

    Every candidate within a restart is scored on the same simulated
    configurations; each restart draws fresh ones and starts from the
    previous best.  The returned value is re-estimated on an independent run.
    """
    streams = as_streams(rng)
    for c in family.extremes():
        _check_plan(F, c, model, plan)
    x = np.zeros(family.n_params) if x0 is None else np.asarray(x0, dtype=float)
    x = np.clip(x, family.lower, family.upper)
    traces, rparams, nfev, converged = [], [], 0, False
    breaks = plan.inner.lower[:1] + plan.inner.upper[:1]
    for k in range(budget.restarts):
        fieldk = SlabField(model, plan.padded, budget.n, streams.child(f"restart{k}"), workers=workers, breaks=breaks)
        trace: list[float] = []

        def objective(p, fieldk=fieldk, trace=trace):
            p = np.clip(p, family.lower, family.upper)
            val = dual_transport(F, family.control(p), model, plan, budget.n, streams, field=fieldk).value
            trace.append(min(val, trace[-1]) if trace else val)
            return val

        step = budget.step / (2 ** k)
        simplex = [x.copy()]
        for j in range(family.n_params):
            y = x.copy()
            y[j] = y[j] + step if y[j] + step <= family.upper else y[j] - step
            simplex.append(y)
        res = minimize(objective, x, method="Nelder-Mead", bounds=family.bounds(),
                       options={"initial_simplex": np.array(simplex), "maxfev": budget.maxfev,
                                "xatol": budget.xatol, "fatol": budget.fatol})
        x = np.clip(res.x, family.lower, family.upper)
        nfev += res.nfev
        converged = bool(res.success)
        traces.append(trace)
        rparams.append(x.copy())
    value = dual_transport(F, family.control(x), model, plan, budget.n_final or budget.n, streams.child("final"),
                           workers)
    return MinimizeResult(x, value, converged, traces, nfev, rparams)


def weak_duality(F: Functional, family: ControlFamily, model: IntensityModel, plan: BufferPlan, k: int, n: int,
                 rng: RandomStreams | int, reference: Estimate, workers: int = 1) -> list[tuple[np.ndarray, Estimate, bool]]:
    """Transport-form objective at ``k`` random family members, each checked against dual >= lhs - 3 SE."""
    streams = as_streams(rng)
    draws = family.sample(k, streams.child("params").generator())
    out = []
    for j, p in enumerate(draws):
        est = dual_transport(F, family.control(p), model, plan, n, streams.child(f"control{j}"), workers)
        out.append((p, est, at_least(est, reference)))
    return out


# ------------------------------------------------------------------ report


@dataclass
class ReportRow:
    quantity: str
    estimate: float
    se: float
    target: float
    passed: bool


@dataclass
class DualReport:
    lhs: Estimate
    minimum: Estimate
    params: np.ndarray
    gap: Estimate
    cross_check: Estimate
    converged: bool
    rows: list[ReportRow]
    traces: list[list[float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self) -> str:
        head = f"{'quantity':<46}{'estimate':>14}{'SE':>12}{'target':>14}  result"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.quantity:<46}{r.estimate:>14.6f}{r.se:>12.6f}{r.target:>14.6f}  "
                         f"{'pass' if r.passed else 'FAIL'}")
        if not self.converged:
            lines.append("note: optimizer budget exhausted before convergence")
        return "\n".join(lines)


def duality_report(F: Functional, family: ControlFamily, model: IntensityModel, plan: BufferPlan, budget: Budget,
                   rng: RandomStreams | int, grid: TimeGrid | Sequence[float] | None = None,
                   targets: dict | None = None, workers: int = 1) -> DualReport:
    """lhs, minimized transport dual, tilt dual at the estimated optimal control,
    the conjugation cross-check, and the gap, each with a pass flag."""
    streams = as_streams(rng)
    targets = targets or {}
    rows: list[ReportRow] = []
    # F and L(phi) only see F's window and the family support; the padding is for transport alone
    w = plan.inner.hull(Window(family.support.lower, family.support.upper, plan.inner.time))
    left = lhs(F, model, w, budget.n_final or budget.n, streams.child("lhs"), workers)
    t_lhs = targets.get("lhs")
    rows.append(ReportRow("lhs -log E exp(-F)", left.value, left.se, t_lhs if t_lhs is not None else math.nan,
                          left.within(t_lhs) if t_lhs is not None else True))

    res = minimize_dual(F, family, model, plan, budget, streams.child("minimize"), workers)
    gap = res.value - left
    rows.append(ReportRow("transport dual minimum", res.value.value, res.value.se, left.value, agree(res.value, left)))
    t_min = targets.get("minimum")
    if t_min is not None:
        rows.append(ReportRow("minimum vs closed form (+-0.01)", res.value.value, res.value.se, t_min,
                              abs(res.value.value - t_min) <= 0.01))
    t_par = targets.get("params")
    if t_par is not None:
        t_par = np.broadcast_to(np.asarray(t_par, dtype=float), res.params.shape)
        for j, (p, tp) in enumerate(zip(res.params, t_par)):
            rows.append(ReportRow(f"minimizer[{j}] (+-0.02)", float(p), math.nan, float(tp), abs(p - tp) <= 0.02))
    rows.append(ReportRow("gap (weak duality, >= -3 SE)", gap.value, gap.se, 0.0, at_least(res.value, left)))
    rows.append(ReportRow("gap (attainment, |gap| <= 3 SE)", gap.value, gap.se, 0.0, gap.within(0.0)))

    best = family.control(res.params)
    n_check = budget.n_check
    tilt_best = dual_tilt(F, tilde_control(best, model, plan), model, w, n_check, streams.child("tilt-best"), workers=workers)
    trans_best = dual_transport(F, best, model, plan, n_check, streams.child("transport-best"), workers)
    cross = trans_best - tilt_best
    if budget.n_random:
        checks = weak_duality(F, family, model, plan, budget.n_random, n_check, streams.child("weak"), left, workers)
        scale = 1e-12 * max(1.0, abs(left.value))
        worst = min(((e.value - left.value) / max(math.hypot(e.se, left.se), scale) for _, e, _ in checks))
        rows.append(ReportRow(f"weak duality, {len(checks)} random controls (min z)", worst, math.nan, -3.0,
                              all(ok for *_, ok in checks)))
    rows.append(ReportRow("conjugation cross-check", cross.value, cross.se, 0.0, cross.within(0.0)))

    edges = (grid.edges if isinstance(grid, TimeGrid) else tuple(grid)) if grid is not None else family.edges
    phi_star = optimal_control(F, model, w, edges, family.partition, budget.n_inner, streams.child("optimal"),
                               bounds=(family.lower, family.upper))
    tilt_star = dual_tilt(F, phi_star, model, w, n_check, streams.child("tilt-star"), workers=workers)
    rows.append(ReportRow("tilt dual at optimal control", tilt_star.value, tilt_star.se, left.value,
                          agree(tilt_star, left)))
    hat_star = dual_transport(F, hat_control(phi_star, model, plan), model, plan, max(2, n_check // 5),
                              streams.child("transport-hat"), workers)
    rows.append(ReportRow("transport dual at hat(optimal)", hat_star.value, hat_star.se, left.value,
                          at_least(hat_star, left)))
    return DualReport(left, res.value, res.params, gap, cross, res.converged, rows, res.traces)
