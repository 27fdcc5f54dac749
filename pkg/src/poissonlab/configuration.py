"""Finite point configurations on R^d x [0, 1] and their simulation."""

from __future__ import annotations

import math
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError
from .intensity import IntensityModel, Window, _rejection, as_marks, window_mass
from .quadrature import integrate_box
from .rng import RandomStreams, as_streams, map_blocks


def _time_ties(times: np.ndarray, owner: np.ndarray | None = None) -> bool:
    """True if two consecutive (already sorted) points share a time within one replicate."""
    same = times[1:] == times[:-1]
    if owner is not None:
        same &= owner[1:] == owner[:-1]
    return bool(np.any(same))


def _order(marks: np.ndarray, times: np.ndarray, owner: np.ndarray | None = None) -> np.ndarray:
    # times are almost surely distinct, so two stable sorts usually settle it
    idx = np.argsort(times, kind="stable")
    if owner is not None:
        idx = idx[np.argsort(owner[idx], kind="stable")]
    if not _time_ties(times[idx], None if owner is None else owner[idx]):
        return idx
    keys = [marks[:, k] for k in range(marks.shape[1] - 1, -1, -1)] + [times]
    if owner is not None:
        keys.append(owner)
    return np.lexsort(keys)


def _duplicate_rows(marks: np.ndarray, times: np.ndarray, owner: np.ndarray | None = None) -> bool:
    """True if two consecutive (already sorted) rows are identical."""
    if times.size < 2:
        return False
    same = (times[1:] == times[:-1]) & np.all(marks[1:] == marks[:-1], axis=1)
    if owner is not None:
        same &= owner[1:] == owner[:-1]
    return bool(np.any(same))


class Configuration:
    """An immutable simple point configuration, sorted by time then mark."""

    __slots__ = ("marks", "times", "_key")

    def __init__(self, marks, times, dimension: int | None = None, *, presorted: bool = False):
        times = np.asarray(times, dtype=float).reshape(-1)
        if times.size == 0:
            d = dimension or (np.asarray(marks).shape[-1] if np.asarray(marks).ndim == 2 else 1)
            marks = np.empty((0, d))
        else:
            marks = as_marks(marks, dimension)
            if dimension is None and marks.shape[0] != times.size and marks.shape[0] == 1:
                marks = marks.reshape(times.size, -1)
        if marks.shape[0] != times.size:
            raise ValueError("marks and times have different lengths")
        if np.any((times < 0) | (times > 1)):
            raise DomainError("point times must lie in [0, 1]")
        if not presorted:
            idx = _order(marks, times)
            marks, times = marks[idx], times[idx]
        if _duplicate_rows(marks, times):
            raise ContractError("configuration is not simple: a (mark, time) pair appears twice")
        marks = np.ascontiguousarray(marks)
        times = np.ascontiguousarray(times)
        marks.setflags(write=False)
        times.setflags(write=False)
        self.marks = marks
        self.times = times
        self._key = None

    @classmethod
    def empty(cls, dimension: int = 1) -> "Configuration":
        return cls(np.empty((0, dimension)), np.empty(0), dimension)

    @classmethod
    def from_points(cls, points: Sequence[tuple], dimension: int | None = None) -> "Configuration":
        """Build from ``[(mark, t), ...]`` where a mark is a float or a tuple."""
        if not points:
            return cls.empty(dimension or 1)
        marks = np.array([np.atleast_1d(np.asarray(p[0], dtype=float)) for p in points])
        times = np.array([float(p[1]) for p in points])
        return cls(marks, times, marks.shape[1])

    @property
    def dimension(self) -> int:
        return self.marks.shape[1]

    def __len__(self) -> int:
        return self.times.size

    def __iter__(self) -> Iterator[tuple[np.ndarray, float]]:
        for m, t in zip(self.marks, self.times):
            yield m, float(t)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Configuration) and self.marks.shape == other.marks.shape
                and np.array_equal(self.marks, other.marks) and np.array_equal(self.times, other.times))

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        pts = ", ".join(f"({tuple(np.round(m, 4)) if m.size > 1 else round(float(m[0]), 4)}, {t:.4f})"
                        for m, t in self)
        return f"Configuration([{pts}])"

    def key(self) -> bytes:
        """Exact identity of the point multiset (used as a cache key)."""
        if self._key is None:
            self._key = self.marks.tobytes() + b"|" + self.times.tobytes()
        return self._key

    def contains(self, mark, t: float) -> bool:
        mark = np.atleast_1d(np.asarray(mark, dtype=float))
        return bool(np.any((self.times == t) & np.all(self.marks == mark, axis=1)))

    def restrict(self, s: float) -> "Configuration":
        """Points with time <= s (the information available at time s)."""
        k = int(np.searchsorted(self.times, s, side="right"))
        return self._slice(0, k)

    def restrict_before(self, s: float) -> "Configuration":
        """Points with time < s (strict past)."""
        k = int(np.searchsorted(self.times, s, side="left"))
        return self._slice(0, k)

    def after(self, s: float) -> "Configuration":
        k = int(np.searchsorted(self.times, s, side="right"))
        return self._slice(k, len(self))

    def _slice(self, a: int, b: int) -> "Configuration":
        if a == 0 and b == len(self):
            return self
        return Configuration(self.marks[a:b], self.times[a:b], self.dimension, presorted=True)

    def within(self, w: Window) -> "Configuration":
        keep = w.contains_marks(self.marks) & (self.times >= w.time[0]) & (self.times <= w.time[1])
        return Configuration(self.marks[keep], self.times[keep], self.dimension, presorted=True)

    def union(self, other: "Configuration") -> "Configuration":
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return Configuration(np.vstack([self.marks, other.marks]), np.concatenate([self.times, other.times]),
                             self.dimension)

    def with_marks(self, marks: np.ndarray) -> "Configuration":
        """Same times, replaced marks (re-sorted)."""
        return Configuration(marks, self.times, self.dimension)

    def count(self, lower, upper, time: tuple[float, float] = (0.0, 1.0)) -> int:
        w = Window(lower, upper, time)
        keep = w.contains_marks(self.marks) & (self.times > time[0]) & (self.times <= time[1])
        return int(keep.sum())


class MarkTimeFunction:
    """A vectorized f(u, t) with a declared compact support box (zero outside)."""

    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], lower, upper,
                 time: tuple[float, float] = (0.0, 1.0), breaks: Sequence[Sequence[float]] | None = None,
                 name: str = ""):
        self.fn = fn
        self.support = Window(lower, upper, time)
        self._breaks = tuple(tuple(b) for b in breaks) if breaks is not None else None
        self.name = name or getattr(fn, "__name__", "f")

    @property
    def dimension(self) -> int:
        return self.support.dimension

    def breaks(self, axis: int) -> tuple[float, ...]:
        """Cell edges along a spatial axis, or along time when ``axis == d``."""
        own = self._breaks[axis] if self._breaks is not None and axis < len(self._breaks) else ()
        if axis == self.dimension:
            return tuple(own) + self.support.time
        return tuple(own) + (self.support.lower[axis], self.support.upper[axis])

    def __call__(self, u, t) -> np.ndarray:
        m = as_marks(u, self.dimension)
        t = np.broadcast_to(np.asarray(t, dtype=float), (m.shape[0],))
        vals = np.broadcast_to(np.asarray(self.fn(m, t), dtype=float), (m.shape[0],)).astype(float, copy=True)
        inside = self.support.contains_marks(m) & (t >= self.support.time[0]) & (t <= self.support.time[1])
        vals[~inside] = 0.0
        return vals

    def integral(self, model: IntensityModel, w: Window | None = None, power: int = 1, tol: float = 1e-9) -> float:
        """Integral of f**power against pi = nu x dt over ``w`` (default: the support)."""
        w = self.support if w is None else w
        model.check_window(w)
        d = self.dimension
        lo = list(w.lower) + [w.time[0]]
        hi = list(w.upper) + [w.time[1]]
        brk = [tuple(model.breaks(a)) + self.breaks(a) for a in range(d)] + [self.breaks(d)]

        def integrand(p):
            return self(p[:, :d], p[:, d]) ** power * model.theta(p[:, :d])

        widths = [model.length_scale] * d + [None]
        return integrate_box(integrand, lo, hi, breaks=brk, tol=tol, max_width=widths)

    def __repr__(self):
        return f"MarkTimeFunction({self.name})"


def indicator(lower, upper, time: tuple[float, float] = (0.0, 1.0), scale: float = 1.0) -> MarkTimeFunction:
    """scale * 1_A(u) 1_{time}(t) for the box A = [lower, upper]."""
    return MarkTimeFunction(lambda m, t: np.full(m.shape[0], float(scale)), lower, upper, time,
                            name=f"{scale:g}*1_A")


class ConfigurationBatch:
    """Many configurations stored as flat arrays.

    Points are grouped by ``owner`` (replicate index) and sorted by time then
    mark inside each replicate.
    """

    def __init__(self, marks: np.ndarray, times: np.ndarray, owner: np.ndarray, n: int, presorted: bool = False):
        marks = np.asarray(marks, dtype=float).reshape(len(times), -1) if len(times) else np.asarray(marks).reshape(0, np.asarray(marks).shape[-1] if np.asarray(marks).ndim == 2 else 1)
        times = np.asarray(times, dtype=float)
        owner = np.asarray(owner, dtype=np.int64)
        if not presorted:
            idx = _order(marks, times, owner)
            marks, times, owner = marks[idx], times[idx], owner[idx]
        if _duplicate_rows(marks, times, owner):
            raise ContractError("a configuration in the batch is not simple")
        self.marks, self.times, self.owner, self.n = marks, times, owner, int(n)
        self._offsets = None

    @property
    def dimension(self) -> int:
        return self.marks.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        if self._offsets is None:
            self._offsets = np.searchsorted(self.owner, np.arange(self.n + 1), side="left")
        return self._offsets

    def counts(self) -> np.ndarray:
        return np.bincount(self.owner, minlength=self.n)

    def reduce(self, values: np.ndarray) -> np.ndarray:
        """Per-replicate sums of per-point values."""
        return np.bincount(self.owner, weights=values, minlength=self.n)

    def pair(self, f: MarkTimeFunction) -> np.ndarray:
        if self.times.size == 0:
            return np.zeros(self.n)
        return self.reduce(f(self.marks, self.times))

    def __len__(self) -> int:
        return self.n

    def config(self, i: int) -> Configuration:
        a, b = self.offsets[i], self.offsets[i + 1]
        return Configuration(self.marks[a:b], self.times[a:b], self.dimension, presorted=True)

    def __iter__(self) -> Iterator[Configuration]:
        for i in range(self.n):
            yield self.config(i)

    def with_marks(self, marks: np.ndarray) -> "ConfigurationBatch":
        # order within a replicate depends on marks only through time ties
        keep = self.times.size < 2 or not _time_ties(self.times, self.owner)
        return ConfigurationBatch(marks, self.times, self.owner, self.n, presorted=keep)

    @classmethod
    def from_configs(cls, configs: Sequence[Configuration], dimension: int | None = None) -> "ConfigurationBatch":
        configs = list(configs)
        d = dimension or (configs[0].dimension if configs else 1)
        if not configs:
            return cls(np.empty((0, d)), np.empty(0), np.empty(0, dtype=np.int64), 0, presorted=True)
        marks = np.vstack([c.marks for c in configs]) if configs else np.empty((0, d))
        times = np.concatenate([c.times for c in configs])
        owner = np.repeat(np.arange(len(configs)), [len(c) for c in configs])
        return cls(marks.reshape(-1, d), times, owner, len(configs))

    @classmethod
    def concat(cls, batches: Sequence["ConfigurationBatch"]) -> "ConfigurationBatch":
        batches = list(batches)
        shift = np.cumsum([0] + [b.n for b in batches[:-1]])
        marks = np.vstack([b.marks for b in batches])
        times = np.concatenate([b.times for b in batches])
        owner = np.concatenate([b.owner + s for b, s in zip(batches, shift)])
        return cls(marks, times, owner, sum(b.n for b in batches), presorted=True)

    def union(self, other: "ConfigurationBatch") -> "ConfigurationBatch":
        if other.n != self.n:
            raise ValueError("batches must have the same number of replicates")
        return ConfigurationBatch(np.vstack([self.marks, other.marks]), np.concatenate([self.times, other.times]),
                                  np.concatenate([self.owner, other.owner]), self.n)

    def select(self, keep: np.ndarray) -> "ConfigurationBatch":
        return ConfigurationBatch(self.marks[keep], self.times[keep], self.owner[keep], self.n, presorted=True)


# ---------------------------------------------------------------- operations


def sample_points(model: IntensityModel, w: Window, n: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Unsorted points of ``n`` Poisson configurations: (marks, times, owner)."""
    mass = window_mass(model, w)
    counts = rng.poisson(mass, size=n)
    total = int(counts.sum())
    marks = _rejection(model, w, rng, total) if total else np.empty((0, model.dimension))
    times = w.time[0] + w.duration * rng.random(total)
    owner = np.repeat(np.arange(n), counts)
    return marks, times, owner


def simulate_batch(model: IntensityModel, w: Window, n: int, rng: np.random.Generator) -> ConfigurationBatch:
    """``n`` independent Poisson configurations on ``w`` from one generator."""
    marks, times, owner = sample_points(model, w, n, rng)
    return ConfigurationBatch(marks, times, owner, n)


def simulate(model: IntensityModel, w: Window, rng: np.random.Generator) -> Configuration:
    """One Poisson configuration on ``w``: Poisson count, marks ~ theta, uniform times."""
    return simulate_batch(model, w, 1, rng).config(0)


def simulate_replicates(model: IntensityModel, w: Window, n: int, rng: RandomStreams | int,
                        workers: int = 1) -> ConfigurationBatch:
    """``n`` replicates generated block-wise from keyed streams (worker-count invariant)."""
    streams = as_streams(rng)
    parts = map_blocks(lambda i, size, g: simulate_batch(model, w, size, g), n, streams, workers)
    if not parts:
        return ConfigurationBatch(np.empty((0, model.dimension)), np.empty(0), np.empty(0, dtype=np.int64), 0)
    return ConfigurationBatch.concat(parts)


def pair(f: MarkTimeFunction, omega: Configuration) -> float:
    """<f, mu_omega>: the sum of f over the points of omega."""
    if len(omega) == 0:
        return 0.0
    # fsum is correctly rounded, so inserting zero-valued points cannot perturb it
    return math.fsum(f(omega.marks, omega.times))


def _point(p, dimension: int) -> tuple[np.ndarray, float]:
    mark, t = p
    mark = np.atleast_1d(np.asarray(mark, dtype=float)).reshape(dimension)
    return mark, float(t)


def remove_mass(omega: Configuration, p) -> Configuration:
    """epsilon^-_p omega: omega with the point p removed if present."""
    mark, t = _point(p, omega.dimension)
    hit = (omega.times == t) & np.all(omega.marks == mark, axis=1)
    if not hit.any():
        return omega
    return Configuration(omega.marks[~hit], omega.times[~hit], omega.dimension, presorted=True)


def add_mass(omega: Configuration, p) -> Configuration:
    """epsilon^+_p omega: omega with the point p present exactly once."""
    mark, t = _point(p, omega.dimension)
    if omega.contains(mark, t):
        return omega
    return Configuration(np.vstack([omega.marks, mark[None, :]]), np.append(omega.times, t), omega.dimension)


def compensated_integral(psi: MarkTimeFunction, omega: Configuration, model: IntensityModel, w: Window) -> float:
    """<psi, mu_omega> minus the integral of psi against pi over ``w``."""
    if not w.contains_window(psi.support):
        raise DomainError(f"support of {psi.name} escapes the window")
    return pair(psi, omega) - psi.integral(model, w)


def compensated_integral_batch(psi: MarkTimeFunction, batch: ConfigurationBatch, model: IntensityModel,
                               w: Window) -> np.ndarray:
    if not w.contains_window(psi.support):
        raise DomainError(f"support of {psi.name} escapes the window")
    return batch.pair(psi) - psi.integral(model, w)
