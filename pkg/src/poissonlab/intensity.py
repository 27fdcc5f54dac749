"""Intensity measures on R^d given by a density, restricted to declared windows."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError
from .quadrature import integrate_box

QUAD_TOL = 1e-9


def as_marks(u, dimension: int | None = None) -> np.ndarray:
    """Coerce marks to an (n, d) float array."""
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1) if dimension in (None, 1) else arr.reshape(1, -1)
    if dimension is not None and arr.shape[1] != dimension:
        raise DomainError(f"marks have dimension {arr.shape[1]}, expected {dimension}")
    return arr


@dataclass(frozen=True)
class Window:
    """Axis-aligned spatial box times a time interval inside [0, 1]."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    time: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo = tuple(float(x) for x in np.atleast_1d(self.lower))
        hi = tuple(float(x) for x in np.atleast_1d(self.upper))
        t = (float(self.time[0]), float(self.time[1]))
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "time", t)
        if len(lo) != len(hi) or not lo:
            raise DomainError("window bounds must have equal, positive length")
        if not all(math.isfinite(a) and math.isfinite(b) and a < b for a, b in zip(lo, hi)):
            raise DomainError(f"window must be a nonempty finite box, got {lo}..{hi}")
        if not (0.0 <= t[0] < t[1] <= 1.0):
            raise DomainError(f"time interval {t} must be a nonempty subinterval of [0, 1]")

    @property
    def dimension(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def duration(self) -> float:
        return self.time[1] - self.time[0]

    @property
    def spatial_volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    def contains_marks(self, marks, atol: float = 0.0) -> np.ndarray:
        m = as_marks(marks, self.dimension)
        return np.all((m >= self.lo - atol) & (m <= self.hi + atol), axis=1)

    def contains_window(self, other: "Window", atol: float = 1e-12) -> bool:
        return (other.dimension == self.dimension
                and all(a >= b - atol for a, b in zip(other.lower, self.lower))
                and all(a <= b + atol for a, b in zip(other.upper, self.upper))
                and other.time[0] >= self.time[0] - atol and other.time[1] <= self.time[1] + atol)

    def with_time(self, t0: float, t1: float) -> "Window":
        return Window(self.lower, self.upper, (t0, t1))

    def padded(self, radius) -> "Window":
        r = np.broadcast_to(np.asarray(radius, dtype=float), (self.dimension,))
        return Window(tuple(self.lo - r), tuple(self.hi + r), self.time)

    def hull(self, other: "Window") -> "Window":
        return Window(tuple(np.minimum(self.lo, other.lo)), tuple(np.maximum(self.hi, other.hi)),
                      (min(self.time[0], other.time[0]), max(self.time[1], other.time[1])))

    def split(self, axis: int, at: float) -> tuple["Window", "Window"]:
        lo, hi = list(self.lower), list(self.upper)
        left = Window(tuple(lo), tuple(hi[:axis] + [at] + hi[axis + 1:]), self.time)
        right = Window(tuple(lo[:axis] + [at] + lo[axis + 1:]), tuple(hi), self.time)
        return left, right


class MarkFunction:
    """A vectorized function of marks, optionally supported on a box.

    ``breaks`` lists coordinates (per axis) where the function may be
    discontinuous; quadrature places cell edges there.  Outside the support
    box the value is forced to zero.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], lower=None, upper=None,
                 breaks: Sequence[Sequence[float]] | None = None, name: str = ""):
        self.fn = fn
        self.lower = None if lower is None else tuple(float(x) for x in np.atleast_1d(lower))
        self.upper = None if upper is None else tuple(float(x) for x in np.atleast_1d(upper))
        self._breaks = None if breaks is None else tuple(tuple(float(b) for b in ax) for ax in breaks)
        self.name = name or getattr(fn, "__name__", "f")

    @property
    def key(self):
        return ("fn", id(self))

    @property
    def has_support(self) -> bool:
        return self.lower is not None

    def support_window(self) -> Window:
        if not self.has_support:
            raise DomainError(f"{self.name} has no compact support")
        return Window(self.lower, self.upper)

    def breaks(self, axis: int) -> tuple[float, ...]:
        out = ()
        if self._breaks is not None and axis < len(self._breaks):
            out = self._breaks[axis]
        if self.has_support:
            out = out + (self.lower[axis], self.upper[axis])
        return out

    def __call__(self, u) -> np.ndarray:
        m = as_marks(u, None if self.lower is None else len(self.lower))
        vals = np.asarray(self.fn(m), dtype=float)
        vals = np.broadcast_to(vals, (m.shape[0],)).astype(float, copy=True)
        if self.has_support:
            inside = np.all((m >= np.asarray(self.lower)) & (m <= np.asarray(self.upper)), axis=1)
            vals[~inside] = 0.0
        return vals

    def __repr__(self):
        return f"MarkFunction({self.name})"


class ConstantFunction(MarkFunction):
    """A constant on all of R^d (``value`` everywhere) or on a box."""

    def __init__(self, value: float, lower=None, upper=None):
        self.value = float(value)
        super().__init__(lambda m: np.full(m.shape[0], self.value), lower, upper, name=f"const({value:g})")

    @property
    def key(self):
        return ("const", self.value, self.lower, self.upper)


class StepFunction(MarkFunction):
    """Piecewise constant on a tensor partition of a box, zero outside.

    ``edges[a]`` are the partition edges along axis ``a`` and ``values`` has
    shape ``(len(edges[0]) - 1, len(edges[1]) - 1, ...)``.
    """

    def __init__(self, edges: Sequence[Sequence[float]], values, name: str = "step"):
        self.edges = tuple(np.asarray(e, dtype=float) for e in edges)
        for e in self.edges:
            if e.ndim != 1 or e.size < 2 or np.any(np.diff(e) <= 0):
                raise ValueError("step edges must be strictly increasing with at least two entries")
        shape = tuple(e.size - 1 for e in self.edges)
        self.values = np.array(values, dtype=float).reshape(shape)
        self.values.setflags(write=False)
        lower = [e[0] for e in self.edges]
        upper = [e[-1] for e in self.edges]
        super().__init__(self._eval, lower, upper, breaks=[tuple(e) for e in self.edges], name=name)
        self._key = ("step", tuple(e.tobytes() for e in self.edges), self.values.tobytes())

    @property
    def key(self):
        return self._key

    def _eval(self, m: np.ndarray) -> np.ndarray:
        idx = []
        for a, e in enumerate(self.edges):
            k = np.searchsorted(e, m[:, a], side="right") - 1
            idx.append(np.clip(k, 0, e.size - 2))
        return self.values[tuple(idx)]

    def map_values(self, fn: Callable[[np.ndarray], np.ndarray]) -> "StepFunction":
        return StepFunction(self.edges, fn(self.values), name=self.name)

    def cells(self):
        """Iterate ``(index, lower, upper)`` over partition cells."""
        for idx in itertools.product(*[range(e.size - 1) for e in self.edges]):
            lo = tuple(self.edges[a][i] for a, i in enumerate(idx))
            hi = tuple(self.edges[a][i + 1] for a, i in enumerate(idx))
            yield idx, lo, hi

    def __eq__(self, other):
        return isinstance(other, StepFunction) and self.key == other.key

    def __hash__(self):
        return hash(self.key)


def ensure_mark_function(f) -> MarkFunction:
    if isinstance(f, MarkFunction):
        return f
    if isinstance(f, (int, float)):
        return ConstantFunction(f)
    if callable(f):
        return MarkFunction(lambda m: f(m[:, 0] if m.shape[1] == 1 else m))
    raise TypeError(f"cannot interpret {f!r} as a mark function")


class IntensityModel:
    """Density-defined intensity measure nu(du) = theta(u) du on R^d.

    ``divergence`` records which half-lines along the first axis carry
    infinite mass: ``"both"``, ``"right"``, ``"left"`` or ``"none"``.  It is a
    claim made by the model author; :func:`check_divergence` spot-checks it.
    """

    def __init__(self, name: str, dimension: int, density: Callable[[np.ndarray], np.ndarray],
                 density_floor: float, declared_windows: Sequence[Window],
                 sup_density: Callable[[Window], float], divergence: str = "both",
                 length_scale: float | None = None, breaks: Sequence[Sequence[float]] | None = None,
                 params: dict | None = None):
        if dimension not in (1, 2, 3):
            raise DomainError("only dimensions 1, 2 and 3 are supported")
        if not density_floor > 0:
            raise ConfigurationError("density_floor must be positive")
        if divergence not in ("both", "right", "left", "none"):
            raise ConfigurationError(f"unknown divergence claim {divergence!r}")
        self.name = name
        self.dimension = dimension
        self._density = density
        self.density_floor = float(density_floor)
        self.declared_windows = tuple(declared_windows)
        for w in self.declared_windows:
            if w.dimension != dimension:
                raise ConfigurationError("declared window dimension mismatch")
        self._sup_density = sup_density
        self.divergence = divergence
        self.length_scale = length_scale
        self._breaks = tuple(tuple(b) for b in breaks) if breaks else tuple(() for _ in range(dimension))
        self.params = dict(params or {})
        self._mass_cache: dict = {}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"IntensityModel({self.name}({args}), d={self.dimension})"

    @property
    def claim(self) -> str:
        """Case label of the half-line divergence condition being claimed."""
        if self.dimension == 1:
            return {"both": "(1)", "right": "(2)", "left": "(3)", "none": "none"}[self.divergence]
        return {"right": "(1')", "left": "(2')", "both": "(3')", "none": "none"}[self.divergence]

    def breaks(self, axis: int) -> tuple[float, ...]:
        return self._breaks[axis]

    def theta(self, u) -> np.ndarray:
        m = as_marks(u, self.dimension)
        return np.asarray(self._density(m), dtype=float).reshape(m.shape[0])

    __call__ = theta

    def sup_density(self, w: Window) -> float:
        return float(self._sup_density(w))

    def check_window(self, w: Window) -> None:
        """Raise :class:`DomainError` unless ``w`` lies in a declared window."""
        if w.dimension != self.dimension:
            raise DomainError(f"window dimension {w.dimension} != model dimension {self.dimension}")
        spatial = Window(w.lower, w.upper)
        if not any(d.contains_window(spatial) for d in self.declared_windows):
            raise DomainError(f"window {w.lower}..{w.upper} is outside the declared region of {self.name}")

    def _quad(self, fn, lower, upper, extra_breaks=None, tol=QUAD_TOL) -> float:
        k = len(lower)
        brk = [tuple(self.breaks(a)) + (tuple(extra_breaks[a]) if extra_breaks else ()) for a in range(k)]
        return integrate_box(fn, lower, upper, breaks=brk, tol=tol, max_width=self.length_scale)


def _box_distance(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Per-axis distance from the origin to the interval [lo, hi]."""
    return np.where(lo > 0, lo, np.where(hi < 0, -hi, 0.0))


def _declared(dimension: int, extent: float) -> tuple[Window, ...]:
    return (Window((-extent,) * dimension, (extent,) * dimension),)


def lebesgue(dimension: int = 1, scale: float = 1.0, extent: float = 1024.0) -> IntensityModel:
    """Constant density ``scale`` on R^d."""
    scale = float(scale)
    return IntensityModel(
        "lebesgue", dimension, lambda m: np.full(m.shape[0], scale), scale, _declared(dimension, extent),
        lambda w: scale, divergence="both", params={"scale": scale, "dimension": dimension, "extent": extent})


def exp_decay(rate: float = 1.0, dimension: int = 1, extent: float = 16.0) -> IntensityModel:
    """theta(x) = exp(-rate * sum_i |x_i|): full support but finite total mass."""
    rate = float(rate)
    if rate <= 0:
        raise ConfigurationError("exp_decay rate must be positive")
    floor = math.exp(-rate * extent * dimension)

    def sup(w: Window) -> float:
        return math.exp(-rate * float(np.sum(_box_distance(w.lo, w.hi))))

    return IntensityModel(
        "exp_decay", dimension, lambda m: np.exp(-rate * np.sum(np.abs(m), axis=1)), floor,
        _declared(dimension, extent), sup, divergence="none", length_scale=max(0.25, 0.5 / rate),
        breaks=[(0.0,)] * dimension, params={"rate": rate, "dimension": dimension, "extent": extent})


def gaussian_bump(sigma: float = 1.0, dimension: int = 1, height: float = 1.0, extent: float = 1024.0) -> IntensityModel:
    """theta(x) = 1 + height * exp(-|x|^2 / (2 sigma^2)): Lebesgue background plus a bump."""
    sigma, height = float(sigma), float(height)
    if sigma <= 0 or height < 0:
        raise ConfigurationError("gaussian_bump needs sigma > 0 and height >= 0")

    def dens(m):
        return 1.0 + height * np.exp(-np.sum(m * m, axis=1) / (2 * sigma ** 2))

    def sup(w: Window) -> float:
        r2 = float(np.sum(_box_distance(w.lo, w.hi) ** 2))
        return 1.0 + height * math.exp(-r2 / (2 * sigma ** 2))

    return IntensityModel(
        "gaussian_bump", dimension, dens, 1.0, _declared(dimension, extent), sup, divergence="both",
        length_scale=sigma / 2, params={"sigma": sigma, "height": height, "dimension": dimension, "extent": extent})


CATALOG = {"lebesgue": lebesgue, "exp_decay": exp_decay, "gaussian_bump": gaussian_bump}


def model_from_spec(spec: dict) -> IntensityModel:
    """Build a catalog model from ``{"name": ..., **params}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name not in CATALOG:
        raise ConfigurationError(f"unknown intensity model {name!r}; choose from {sorted(CATALOG)}")
    return CATALOG[name](**spec)


# ---------------------------------------------------------------- operations


def window_mass(model: IntensityModel, w: Window, tol: float = QUAD_TOL) -> float:
    """nu(spatial part of w) times the length of w's time interval."""
    model.check_window(w)
    key = ("mass", w.lower, w.upper, tol)
    if key not in model._mass_cache:
        model._mass_cache[key] = model._quad(model.theta, w.lower, w.upper, tol=tol)
    return model._mass_cache[key] * w.duration


def integrate_nu(model: IntensityModel, f, w: Window, tol: float = QUAD_TOL) -> float:
    """Integral of the mark function ``f`` against nu over the spatial part of ``w``."""
    model.check_window(w)
    f = ensure_mark_function(f)
    brk = [f.breaks(a) for a in range(model.dimension)]
    return model._quad(lambda m: f(m) * model.theta(m), w.lower, w.upper, extra_breaks=brk, tol=tol)


def marginal_cumulative(model: IntensityModel, weight, axis: int, fixed: Sequence, x: float,
                        tol: float = QUAD_TOL) -> float:
    """Signed integral of ``weight * theta`` from 0 to ``x`` along ``axis``.

    ``fixed`` gives the other coordinates in axis order (skipping ``axis``):
    a float pins that coordinate (a line integral), a pair ``(a, b)``
    integrates over [min(a,b), max(a,b)].  A pair ``(0, x2)`` reproduces the
    strip cross-section [x2^-, x2^+].
    """
    weight = ensure_mark_function(weight)
    d = model.dimension
    if not 0 <= axis < d:
        raise DomainError(f"axis {axis} out of range")
    fixed = list(fixed)
    if len(fixed) != d - 1:
        raise DomainError(f"need {d - 1} fixed coordinates, got {len(fixed)}")
    if x == 0:
        return 0.0
    a, b = (0.0, float(x)) if x > 0 else (float(x), 0.0)
    sign = 1.0 if x > 0 else -1.0

    free_axes = [axis]
    lo_full, hi_full = [0.0] * d, [0.0] * d
    lo_full[axis], hi_full[axis] = a, b
    pinned = {}
    others = [k for k in range(d) if k != axis]
    for k, spec in zip(others, fixed):
        if np.ndim(spec) == 0:
            pinned[k] = float(spec)
            lo_full[k] = hi_full[k] = float(spec)
        else:
            s0, s1 = sorted(float(s) for s in spec)
            if s0 == s1:
                return 0.0
            lo_full[k], hi_full[k] = s0, s1
            free_axes.append(k)
    check = Window(tuple(lo_full[k] - (1e-9 if k in pinned else 0) for k in range(d)),
                   tuple(hi_full[k] + (1e-9 if k in pinned else 0) for k in range(d)))
    model.check_window(check)

    free_axes.sort()

    def integrand(pts: np.ndarray) -> np.ndarray:
        full = np.empty((pts.shape[0], d))
        for j, k in enumerate(free_axes):
            full[:, k] = pts[:, j]
        for k, v in pinned.items():
            full[:, k] = v
        return weight(full) * model.theta(full)

    lo = [lo_full[k] for k in free_axes]
    hi = [hi_full[k] for k in free_axes]
    brk = [tuple(model.breaks(k)) + tuple(weight.breaks(k)) for k in free_axes]
    ls = model.length_scale
    return sign * integrate_box(integrand, lo, hi, breaks=brk, tol=tol, max_width=ls)


def sample_mark(model: IntensityModel, w: Window, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Draw marks with density proportional to theta on the spatial part of ``w``.

    Rejection against the constant envelope ``sup_density(w)``.  Returns a
    length-d vector when ``size`` is None, else an ``(size, d)`` array.
    """
    model.check_window(w)
    n = 1 if size is None else int(size)
    out = _rejection(model, w, rng, n)
    return out[0] if size is None else out


def _rejection(model: IntensityModel, w: Window, rng: np.random.Generator, n: int) -> np.ndarray:
    d = model.dimension
    if n == 0:
        return np.empty((0, d))
    env = model.sup_density(w)
    lo, span = w.lo, w.hi - w.lo
    if env <= model.density_floor:
        return lo + span * rng.random((n, d))
    accept = max(window_mass(model, Window(w.lower, w.upper)) / (env * w.spatial_volume), 1e-3)
    chunks, have = [], 0
    while have < n:
        want = max(16, int(1.2 * (n - have) / accept) + 1)
        want = min(want, 1 << 22)
        cand = lo + span * rng.random((want, d))
        th = model.theta(cand)
        if np.any(th > env * (1 + 1e-12)):
            raise ConfigurationError(f"density exceeds sampling envelope {env:g} on window {w.lower}..{w.upper}")
        keep = cand[rng.random(want) * env < th]
        chunks.append(keep)
        have += keep.shape[0]
    return np.concatenate(chunks)[:n]


def check_divergence(model: IntensityModel, axis: int = 0, threshold: float = 1e3, x_start: float = 1.0,
                     x_max: float = 2.0 ** 24, slab: Sequence | None = None) -> dict:
    """Heuristic certificate for the half-line divergence claim.

    Accumulates slab mass over [0, x], [x, 2x], ... on each half-line until it
    exceeds ``threshold`` or ``x`` exceeds ``x_max``.  The density is
    evaluated outside the declared windows here on purpose.
    """
    d = model.dimension
    if slab is None:
        slab = [(0.0, 1.0)] * (d - 1)
    others = [k for k in range(d) if k != axis]

    def slab_mass(a: float, b: float) -> float:
        lo = [0.0] * d
        hi = [0.0] * d
        lo[axis], hi[axis] = a, b
        for k, (s0, s1) in zip(others, slab):
            lo[k], hi[k] = s0, s1
        brk = [model.breaks(k) for k in range(d)]
        return integrate_box(model.theta, lo, hi, breaks=brk, tol=1e-6 * max(1.0, b - a))

    result = {}
    for side, sgn in (("right", 1.0), ("left", -1.0)):
        total, x, trace = slab_mass(*sorted((0.0, sgn * x_start))), x_start, []
        trace.append((x, total))
        while total < threshold and x < x_max:
            a, b = sorted((sgn * x, sgn * 2 * x))
            total += slab_mass(a, b)
            x *= 2
            trace.append((x, total))
        result[side] = {"diverges": total >= threshold, "mass": total, "reach": x, "trace": trace}
    observed = {(True, True): "both", (True, False): "right", (False, True): "left", (False, False): "none"}[
        (result["right"]["diverges"], result["left"]["diverges"])]
    result["observed"] = observed
    result["claimed"] = model.divergence
    result["consistent"] = observed == model.divergence
    return result
