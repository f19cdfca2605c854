"""Level-2 geometric rough paths sampled on finite time grids.

A :class:`GridRoughPath` stores, for every elementary interval
``[t_k, t_{k+1}]`` of its grid, the level-1 increment ``inc[k]`` (shape ``(d,)``)
and the level-2 iterated integral ``area[k]`` (shape ``(d, d)``) with the
convention ``area[k][i, j] = int int_{s<r} d eta^i_s d eta^j_r``.  Increments over
longer intervals are assembled with Chen's relation

    A_{s,u} = A_{s,t} + A_{t,u} + delta_{s,t} (x) delta_{t,u}.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError

DEFAULT_ALPHA = 0.4


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing instants ``t_0 < ... < t_n`` with ``n >= 1``."""

    times: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times)
        if times.ndim != 1 or times.size < 2:
            raise InvalidArgumentError("a time grid needs at least two instants")
        if not np.all(np.isfinite(times)) or np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("grid times must be finite and strictly increasing")
        object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return self.times.size - 1

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @cached_property
    def dt(self) -> np.ndarray:
        return _frozen(np.diff(self.times))

    def index_of(self, t: float, tol: float = 1e-12) -> int:
        """Index k with ``times[k] == t`` (up to ``tol``); raises if ``t`` is off-grid."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > tol * max(1.0, abs(t)):
            raise InvalidArgumentError(f"time {t!r} is not a grid time")
        return k

    def same_as(self, other: "TimeGrid") -> bool:
        return self is other or (
            self.times.shape == other.times.shape and np.array_equal(self.times, other.times)
        )

    def subgrid(self, step: int) -> "TimeGrid":
        """Every ``step``-th instant; ``step`` must divide ``n``."""
        if step < 1 or self.n % step:
            raise InvalidArgumentError(f"step {step} does not divide n={self.n}")
        return TimeGrid(self.times[::step])

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and self.same_as(other)

    __hash__ = object.__hash__


def make_uniform_grid(T: float, n: int, t0: float = 0.0) -> TimeGrid:
    """Uniform grid ``t_k = t0 + k (T - t0) / n``."""
    if not (np.isfinite(T) and T > t0):
        raise InvalidArgumentError(f"horizon must exceed the start time, got T={T!r}")
    if int(n) != n or n < 1:
        raise InvalidArgumentError(f"step count must be a positive integer, got {n!r}")
    n = int(n)
    return TimeGrid(t0 + (T - t0) * np.arange(n + 1) / n)


@dataclass(frozen=True, eq=False)
class GridRoughPath:
    """Level-1 increments and level-2 areas per elementary interval of ``grid``."""

    grid: TimeGrid
    inc: np.ndarray
    area: np.ndarray

    def __post_init__(self):
        inc = _frozen(self.inc)
        if inc.ndim == 1:
            inc = _frozen(inc[:, None])
        area = _frozen(self.area)
        if area.ndim == 1:
            area = _frozen(area[:, None, None])
        n, d = inc.shape
        if n != self.grid.n:
            raise InvalidArgumentError(f"{n} increments for a grid with {self.grid.n} intervals")
        if area.shape != (n, d, d):
            raise InvalidArgumentError(f"area has shape {area.shape}, expected {(n, d, d)}")
        object.__setattr__(self, "inc", inc)
        object.__setattr__(self, "area", area)

    @property
    def dim(self) -> int:
        return self.inc.shape[1]

    @property
    def n(self) -> int:
        return self.grid.n

    @cached_property
    def values(self) -> np.ndarray:
        """Level-1 path started at zero, shape ``(n + 1, d)``."""
        out = np.zeros((self.n + 1, self.dim))
        np.cumsum(self.inc, axis=0, out=out[1:])
        out.flags.writeable = False
        return out

    @cached_property
    def cumulative_area(self) -> np.ndarray:
        """``A_{t_0, t_k}`` for every k, built by folding Chen's relation left to right."""
        out = np.zeros((self.n + 1, self.dim, self.dim))
        steps = self.area + np.einsum("ki,kj->kij", self.values[:-1], self.inc)
        np.cumsum(steps, axis=0, out=out[1:])
        out.flags.writeable = False
        return out

    def increment(self, a: int, b: int):
        """``(delta, A)`` over ``[t_a, t_b]`` for grid indices ``a <= b``."""
        if not 0 <= a <= b <= self.n:
            raise InvalidArgumentError(f"bad index pair ({a}, {b})")
        x, big = self.values, self.cumulative_area
        delta = x[b] - x[a]
        return delta, big[b] - big[a] - np.outer(x[a], delta)

    def coarsen(self, step: int) -> "GridRoughPath":
        """Combine every ``step`` consecutive intervals with Chen's relation."""
        sub = self.grid.subgrid(step)
        idx = np.arange(0, self.n + 1, step)
        x, big = self.values, self.cumulative_area
        delta = x[idx[1:]] - x[idx[:-1]]
        area = big[idx[1:]] - big[idx[:-1]] - np.einsum("ki,kj->kij", x[idx[:-1]], delta)
        return GridRoughPath(sub, delta, area)

    def from_index(self, k0: int) -> "GridRoughPath":
        """The path restricted to ``[t_{k0}, T]``."""
        if not 0 <= k0 < self.n:
            raise InvalidArgumentError(f"cannot restrict to start index {k0}")
        return GridRoughPath(TimeGrid(self.grid.times[k0:]), self.inc[k0:], self.area[k0:])

    def zero_like(self) -> "GridRoughPath":
        return GridRoughPath(self.grid, np.zeros_like(self.inc), np.zeros_like(self.area))


def lift_piecewise_linear(values, grid: TimeGrid) -> GridRoughPath:
    """Canonical lift of the chord path through ``values`` (one point per grid time).

    On each elementary interval the chord has purely symmetric area
    ``1/2 inc (x) inc``; longer intervals acquire Levy area through Chen's relation.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != grid.n + 1:
        raise InvalidArgumentError(
            f"{values.shape[0]} values supplied for a grid with {grid.n + 1} instants"
        )
    inc = np.diff(values, axis=0)
    return GridRoughPath(grid, inc, 0.5 * np.einsum("ki,kj->kij", inc, inc))


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def brownian_values(seed, grid: TimeGrid, d: int = 1) -> np.ndarray:
    """Standard Brownian motion started at 0 sampled at the grid instants, shape ``(n+1, d)``."""
    if d < 1:
        raise InvalidArgumentError("dimension must be positive")
    rng = _rng(seed)
    w = rng.standard_normal((grid.n, d)) * np.sqrt(grid.dt)[:, None]
    out = np.zeros((grid.n + 1, d))
    np.cumsum(w, axis=0, out=out[1:])
    return out


def sample_brownian_lift(seed, grid: TimeGrid, substeps: int = 4, d: int = 1) -> GridRoughPath:
    """Wong-Zakai approximation of the Stratonovich Brownian rough path.

    Brownian increments are drawn on the ``substeps``-fold refined grid, lifted
    piecewise linearly there and folded back onto ``grid`` with Chen's relation.
    Level-1 increments are exactly ``N(0, dt I)``; the Levy area carries an
    O(dt / substeps) variance deficit.
    """
    if int(substeps) != substeps or substeps < 1:
        raise InvalidArgumentError(f"substeps must be a positive integer, got {substeps!r}")
    if d < 1:
        raise InvalidArgumentError("dimension must be positive")
    rng = _rng(seed)
    m = int(substeps)
    w = rng.standard_normal((grid.n, m, d)) * np.sqrt(grid.dt / m)[:, None, None]
    before = np.cumsum(w, axis=1) - w
    area = np.einsum("kmi,kmj->kij", before, w) + 0.5 * np.einsum("kmi,kmj->kij", w, w)
    return GridRoughPath(grid, w.sum(axis=1), area)


def chen_combine(left, right):
    """Compose ``(delta, A)`` over ``[s,t]`` with ``(delta, A)`` over ``[t,u]``."""
    d1, a1 = (np.asarray(v, dtype=float) for v in left)
    d2, a2 = (np.asarray(v, dtype=float) for v in right)
    return d1 + d2, a1 + a2 + np.multiply.outer(d1, d2)


@dataclass(frozen=True)
class HoelderReport:
    """Grid-restricted alpha-Hoelder quantities.

    For a single path ``level1_norm``/``level2_norm`` are its seminorms and
    ``distance`` their maximum; when two paths are compared they refer to the
    difference and ``distance`` is the inhomogeneous distance.
    """

    alpha: float
    level1_norm: float
    level2_norm: float
    distance: float


def _pairs_dyadic(n):
    out = []
    span = 1
    while span <= n:
        for a in range(0, n - span + 1, span):
            out.append((a, a + span))
        span *= 2
    return out


def hoelder_distance(p: GridRoughPath, q: GridRoughPath | None = None, alpha: float = DEFAULT_ALPHA,
                     dyadic: bool = False) -> HoelderReport:
    """Inhomogeneous alpha-Hoelder distance restricted to grid pairs ``s < t``.

    ``max( |d_p - d_q| / (t-s)^alpha ,  |A_p - A_q|^(1/2) / (t-s)^alpha )`` with
    Euclidean/Frobenius norms.  ``q=None`` measures ``p`` against the zero path.
    ``dyadic=True`` only visits dyadically aligned pairs (O(n log n)).
    """
    if not 1.0 / 3.0 < alpha <= 0.5:
        raise InvalidArgumentError(f"alpha must lie in (1/3, 1/2], got {alpha!r}")
    if q is None:
        q = p.zero_like()
    if not p.grid.same_as(q.grid) or p.dim != q.dim:
        raise InvalidArgumentError("paths must share grid and dimension")
    t = p.grid.times
    xp, xq = p.values, q.values
    bp, bq = p.cumulative_area, q.cumulative_area
    lvl1 = lvl2 = 0.0
    if dyadic:
        pairs = np.array(_pairs_dyadic(p.n))
        a, b = pairs[:, 0], pairs[:, 1]
        rows = [(a, b)]
    else:
        rows = [(np.full(p.n - a, a), np.arange(a + 1, p.n + 1)) for a in range(p.n)]
    for a, b in rows:
        h = (t[b] - t[a]) ** alpha
        dp_, dq_ = xp[b] - xp[a], xq[b] - xq[a]
        ap = bp[b] - bp[a] - np.einsum("ki,kj->kij", xp[a], dp_)
        aq = bq[b] - bq[a] - np.einsum("ki,kj->kij", xq[a], dq_)
        lvl1 = max(lvl1, float(np.max(np.linalg.norm(dp_ - dq_, axis=1) / h)))
        lvl2 = max(lvl2, float(np.max(np.sqrt(np.linalg.norm(ap - aq, axis=(1, 2))) / h)))
    return HoelderReport(alpha, lvl1, lvl2, max(lvl1, lvl2))


def hoelder_norm(p: GridRoughPath, alpha: float = DEFAULT_ALPHA, dyadic: bool = False) -> HoelderReport:
    return hoelder_distance(p, None, alpha, dyadic)
