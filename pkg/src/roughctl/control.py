"""Deterministic optimal control along a fixed rough path.

Everything here treats the driver ``eta`` as a known deterministic signal: the
payoff of a control path, the value function by backward dynamic programming
on a state mesh, the HJB equation along smooth (piecewise-linear) drivers, and
first-order optimality diagnostics (adjoint/Hamiltonian residual and spike
variations).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .columnar import read_columnar, write_columnar
from .errors import InvalidArgumentError, ResolutionError
from .rde import (
    DAVIE_SCHEME,
    ControlPath,
    RdeSolution,
    VectorFieldSet,
    central_jacobian,
    davie_jacobian,
    solve_adjoint_backward,
    solve_controlled_rde,
)
from .rough_path import GridRoughPath, TimeGrid, hoelder_distance, lift_piecewise_linear

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Maximise ``sum f(t, X, u) dt + g(X_T)`` over controls with values in ``controls``.

    ``f(t, x, u)`` and ``g(x)`` must broadcast over leading dimensions of
    ``x[..., e]`` and ``u[..., m]`` (``t`` is a scalar).  ``controls`` is the
    finite set U_h, shape ``(K, m)``; ``u_lower``/``u_upper`` describe the box U.
    """

    vf: VectorFieldSet
    f: Callable
    g: Callable
    controls: np.ndarray
    T: float
    t0: float = 0.0
    dg: Callable | None = None
    df: Callable | None = None
    u_lower: np.ndarray | None = None
    u_upper: np.ndarray | None = None

    def __post_init__(self):
        c = np.array(self.controls, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.size == 0 or c.shape[1] != self.vf.m:
            raise InvalidArgumentError(f"control set must be a non-empty (K, {self.vf.m}) array")
        lo = c.min(axis=0) if self.u_lower is None else np.atleast_1d(np.asarray(self.u_lower, float))
        hi = c.max(axis=0) if self.u_upper is None else np.atleast_1d(np.asarray(self.u_upper, float))
        if np.any(c < lo - 1e-12) or np.any(c > hi + 1e-12):
            raise InvalidArgumentError("control points must lie inside the control box")
        if not self.T > self.t0:
            raise InvalidArgumentError("horizon must exceed the start time")
        c.flags.writeable = False
        object.__setattr__(self, "controls", c)
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)

    def grad_g(self, x):
        if self.dg is not None:
            return np.asarray(self.dg(x), dtype=float)
        return central_jacobian(lambda z: self.g(z)[..., None], x)[..., 0, :]

    def grad_f(self, t, x, u):
        if self.df is not None:
            return np.asarray(self.df(t, x, u), dtype=float)
        return central_jacobian(lambda z: np.asarray(self.f(t, z, u))[..., None], x)[..., 0, :]

    def with_controls(self, controls) -> "ControlProblem":
        return ControlProblem(self.vf, self.f, self.g, controls, self.T, self.t0, self.dg, self.df,
                              self.u_lower, self.u_upper)


def uniform_controls(lower, upper, points: int = 21) -> np.ndarray:
    """Tensor grid with ``points`` equispaced values per control dimension."""
    lower = np.atleast_1d(np.asarray(lower, float))
    upper = np.atleast_1d(np.asarray(upper, float))
    axes = [np.linspace(a, b, points) for a, b in zip(lower, upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lower.size)


def _running_sum(problem, times, states, controls):
    total = 0.0
    for k in range(controls.shape[0]):
        total += float(problem.f(times[k], states[k], controls[k])) * (times[k + 1] - times[k])
    return total


def payoff(problem: ControlProblem, mu: ControlPath, eta: GridRoughPath, t0=None, x0=None):
    """Left-endpoint payoff ``sum_k f(t_k, X_k, mu_k) dt_k + g(X_T)``."""
    t0 = problem.t0 if t0 is None else t0
    traj = solve_controlled_rde(x0, t0, problem.vf, mu, eta)
    k0 = eta.grid.index_of(t0)
    run = _running_sum(problem, eta.grid.times[k0:], traj.states, mu.values[k0:])
    return run + float(problem.g(traj.terminal))


# ---------------------------------------------------------------------------
# state meshes


@dataclass(frozen=True, eq=False)
class StateMesh:
    """Uniform tensor mesh in dimension 1 or 2."""

    lower: np.ndarray
    upper: np.ndarray
    nodes: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, float))
        hi = np.atleast_1d(np.asarray(self.upper, float))
        nodes = tuple(int(n) for n in np.atleast_1d(self.nodes))
        if lo.shape != hi.shape or len(nodes) != lo.size or lo.size not in (1, 2):
            raise InvalidArgumentError("mesh must be 1- or 2-dimensional with matching bounds")
        if np.any(hi <= lo) or min(nodes) < 2:
            raise InvalidArgumentError("mesh needs upper > lower and at least two nodes per axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def around(cls, center, half_width, nodes=401) -> "StateMesh":
        center = np.atleast_1d(np.asarray(center, float))
        hw = np.broadcast_to(np.asarray(half_width, float), center.shape)
        return cls(center - hw, center + hw, (nodes,) * center.size)

    @property
    def e(self) -> int:
        return self.lower.size

    @property
    def shape(self) -> tuple:
        return self.nodes

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.nodes) - 1)

    @cached_property
    def _axis0(self):
        return self.axes[0]

    @property
    def axes(self):
        return [np.linspace(a, b, n) for a, b, n in zip(self.lower, self.upper, self.nodes)]

    @property
    def points(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, self.e)

    def interpolate(self, values, y):
        """Multilinear interpolation of flat node ``values`` at ``y[..., e]``.

        Points outside the box are clamped to it; returns ``(result, hits)``
        where ``hits`` counts clamped evaluations.
        """
        y = np.asarray(y, dtype=float)
        if self.e == 1:
            z = y[..., 0]
            hits = int(np.count_nonzero(z < self.lower[0])) + int(np.count_nonzero(z > self.upper[0]))
            return np.interp(z, self._axis0, values), hits
        pos = (y - self.lower) / self.spacing
        top = np.array(self.nodes) - 1
        hits = int(np.count_nonzero(np.any((pos < 0) | (pos > top), axis=-1)))
        np.clip(pos, 0, top, out=pos)
        idx = np.minimum(pos.astype(np.intp), top - 1)
        w = pos - idx
        n1 = self.nodes[1]
        i, j = idx[..., 0], idx[..., 1]
        wi, wj = w[..., 0], w[..., 1]
        base = i * n1 + j
        v00, v01 = values[base], values[base + 1]
        v10, v11 = values[base + n1], values[base + n1 + 1]
        return ((1 - wi) * ((1 - wj) * v00 + wj * v01) + wi * ((1 - wj) * v10 + wj * v11)), hits


@dataclass(frozen=True, eq=False)
class ValueGrid:
    """Value slices ``values[k]`` (flat over mesh nodes) at ``times[k]``."""

    times: np.ndarray
    mesh: StateMesh
    values: np.ndarray
    argmax: np.ndarray | None = None

    def at(self, k: int, x):
        return self.mesh.interpolate(self.values[k], np.atleast_1d(np.asarray(x, float)))[0]

    def save(self, path):
        cols = ["t"] + [f"v_{j}" for j in range(self.values.shape[1])]
        header = {"kind": "value_grid", "lower": self.mesh.lower.tolist(),
                  "upper": self.mesh.upper.tolist(), "nodes": list(self.mesh.nodes)}
        return write_columnar(path, header, cols, np.column_stack([self.times, self.values]))

    @classmethod
    def load(cls, path) -> "ValueGrid":
        header, _, rows = read_columnar(path)
        if header.get("kind") != "value_grid":
            raise InvalidArgumentError(f"{path}: not a value grid file")
        mesh = StateMesh(header["lower"], header["upper"], tuple(header["nodes"]))
        return cls(rows[:, 0], mesh, rows[:, 1:])


@dataclass(frozen=True, eq=False)
class PathwiseResult:
    """Outcome of the pathwise maximisation for one driver."""

    value: float
    control: ControlPath
    trajectory: RdeSolution
    realized: float
    boundary_hits: int = 0
    boundary_fraction: float = 0.0
    out_of_domain: bool = False
    value_grid: ValueGrid | None = field(default=None, repr=False)

    def save(self, path):
        xs = self.trajectory.states
        us = np.vstack([self.control.values[-xs.shape[0] + 1:], np.full(self.control.values.shape[1], np.nan)])
        cols = ["t"] + [f"u_{i}" for i in range(us.shape[1])] + [f"x_{i}" for i in range(xs.shape[1])]
        header = {"kind": "pathwise_result", "value": self.value, "realized": self.realized,
                  "boundary_hits": self.boundary_hits, "out_of_domain": self.out_of_domain}
        return write_columnar(path, header, cols, np.column_stack([self.trajectory.grid.times, us, xs]))


def _dp_backward(problem, eta, mesh, k0, running=None, want_argmax=False):
    """Backward sweep; ``running(k, X, U)`` adds extra running gain (rate) per step."""
    vf = problem.vf
    X = mesh.points
    U = problem.controls
    times = eta.grid.times
    n = eta.n
    Xb, Ub = X[None, :, :], U[:, None, :]
    drift = np.asarray(vf.b(Xb, Ub), dtype=float)
    drift = np.broadcast_to(drift, (U.shape[0], X.shape[0], vf.e))
    values = np.empty((n - k0 + 1, X.shape[0]))
    argmax = np.empty((n - k0, X.shape[0]), dtype=np.int32) if want_argmax else None
    values[-1] = np.broadcast_to(problem.g(X), (X.shape[0],))
    hits = 0
    cols = np.arange(X.shape[0])
    for k in range(n - 1, k0 - 1, -1):
        dt = times[k + 1] - times[k]
        nxt = X + vf.noise_term(X, eta.inc[k], eta.area[k])
        nxt = nxt[None] + drift * dt
        cont, h = mesh.interpolate(values[k + 1 - k0], nxt)
        hits += h
        rate = problem.f(times[k], Xb, Ub)
        if running is not None:
            rate = rate + running(k, Xb, Ub)
        q = cont + np.broadcast_to(rate, cont.shape) * dt
        if want_argmax:
            best = np.argmax(q, axis=0)
            argmax[k - k0] = best
            values[k - k0] = q[best, cols]
        else:
            np.max(q, axis=0, out=values[k - k0])
    return values, argmax, hits


def shared_dp_values(problem: ControlProblem, etas, mesh: StateMesh, x0, t0=None) -> list:
    """Pathwise values at ``(t0, x0)`` for several drivers on one grid.

    The running gain does not depend on the driver, so it is evaluated once
    per step and shared; per driver the arithmetic is that of
    :func:`_dp_backward`, so each value is bit-identical to a single sweep.
    """
    t0 = problem.t0 if t0 is None else t0
    times = etas[0].grid.times
    if any(not np.array_equal(eta.grid.times, times) for eta in etas):
        raise InvalidArgumentError("drivers must share one grid")
    k0 = etas[0].grid.index_of(t0)
    vf = problem.vf
    X = mesh.points
    U = problem.controls
    Xb, Ub = X[None, :, :], U[:, None, :]
    drift = np.broadcast_to(np.asarray(vf.b(Xb, Ub), dtype=float), (U.shape[0], X.shape[0], vf.e))
    terminal = np.broadcast_to(problem.g(X), (X.shape[0],)).astype(float)
    slices = [terminal.copy() for _ in etas]
    for k in range(etas[0].n - 1, k0 - 1, -1):
        dt = times[k + 1] - times[k]
        step_drift = drift * dt
        gain = np.broadcast_to(problem.f(times[k], Xb, Ub), (U.shape[0], X.shape[0])) * dt
        for j, eta in enumerate(etas):
            nxt = (X + vf.noise_term(X, eta.inc[k], eta.area[k]))[None] + step_drift
            cont, _ = mesh.interpolate(slices[j], nxt)
            slices[j] = np.max(cont + gain, axis=0)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return [float(mesh.interpolate(v, x0)[0]) for v in slices]


def inner_sup_dp(problem: ControlProblem, eta: GridRoughPath, mesh: StateMesh, x0, t0=None,
                 running=None, boundary_threshold: float = 0.01, keep_grid: bool = False) -> PathwiseResult:
    """Pathwise value ``sup_mu { sum f dt + g(X_T) }`` by backward dynamic programming.

    Each step applies one Davie step per (mesh node, control point), adds the
    running gain and interpolates the next slice multilinearly.  The forward
    pass re-maximises at the actual state to extract an argmax control.
    ``running(k, x, u)`` is an optional extra running gain (used for
    control-linear penalties).
    """
    t0 = problem.t0 if t0 is None else t0
    if mesh.e != problem.vf.e:
        raise InvalidArgumentError("mesh dimension differs from state dimension")
    k0 = eta.grid.index_of(t0)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    values, argmax, hits = _dp_backward(problem, eta, mesh, k0, running, want_argmax=keep_grid)
    vf, U, times = problem.vf, problem.controls, eta.grid.times
    n_eval = U.shape[0] * mesh.points.shape[0] * (eta.n - k0)
    fraction = hits / max(n_eval, 1)
    if fraction > boundary_threshold:
        logger.warning("inner_sup_dp: %.2f%% of DP evaluations clamped to the mesh", 100 * fraction)

    xs = [x0]
    chosen = []
    x = x0
    realized = 0.0
    for k in range(k0, eta.n):
        dt = times[k + 1] - times[k]
        noise = vf.noise_term(x, eta.inc[k], eta.area[k])
        nxt = x + noise + vf.b(x[None], U) * dt
        rate = problem.f(times[k], x[None], U)
        if running is not None:
            rate = rate + running(k, x[None], U)
        q = mesh.interpolate(values[k + 1 - k0], nxt)[0] + np.broadcast_to(rate, (U.shape[0],)) * dt
        j = int(np.argmax(q))
        chosen.append(U[j])
        realized += float(np.broadcast_to(rate, (U.shape[0],))[j]) * dt
        x = nxt[j]
        xs.append(x)
    realized += float(problem.g(x))
    ctrl = np.vstack([np.repeat(U[:1], k0, axis=0), np.array(chosen)]) if k0 else np.array(chosen)
    value = float(mesh.interpolate(values[0], x0)[0])
    grid = ValueGrid(times[k0:], mesh, values, argmax) if keep_grid else None
    return PathwiseResult(value, ControlPath(eta.grid, ctrl),
                          RdeSolution(TimeGrid(times[k0:]), np.array(xs), dict(DAVIE_SCHEME)),
                          realized, hits, fraction, fraction > boundary_threshold, grid)


def _probe_points(e, n=7, scale=2.0, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(n, e))


def is_additive_form(problem: ControlProblem, tol: float = 1e-10) -> bool:
    """Probe ``sigma == Id``, ``b = b(u)`` and ``f = f(u)`` at random states."""
    vf = problem.vf
    if vf.e != vf.d:
        return False
    pts = _probe_points(vf.e)
    u = problem.controls
    if not np.allclose(vf.sigma(pts), np.eye(vf.e), atol=tol, rtol=0):
        return False
    b0 = vf.b(np.zeros((1, 1, vf.e)), u[:, None])
    bx = vf.b(pts[None], u[:, None])
    f0 = problem.f(problem.t0, np.zeros((1, 1, vf.e)), u[:, None])
    fx = problem.f(problem.t0, pts[None], u[:, None])
    ft = problem.f(0.5 * (problem.t0 + problem.T), pts[None], u[:, None])
    return (np.allclose(bx, b0, atol=tol, rtol=0) and np.allclose(fx, f0, atol=tol, rtol=0)
            and np.allclose(ft, fx, atol=tol, rtol=0))


def additive_closed_form_value(problem: ControlProblem, eta: GridRoughPath, t0=None, x0=0.0) -> float:
    """Additive-noise value ``v0(t, x + eta_T - eta_t)`` with ``v0`` from constant controls.

    ``v0(t, y) = max_u { (T-t) f(u) + g(y + (T-t) b(u)) }`` over U_h, refined by a
    bounded scalar search on the bracketing control cell when U is an interval.
    This is exact for ``f == 0``, ``b(u) = u`` and convex U.
    """
    if not is_additive_form(problem):
        raise InvalidArgumentError("problem is not in additive form (sigma = Id, b = b(u), f = f(u))")
    t0 = problem.t0 if t0 is None else t0
    k0 = eta.grid.index_of(t0)
    x0 = np.atleast_1d(np.asarray(x0, float))
    y = x0 + eta.values[-1] - eta.values[k0]
    tau = problem.T - t0
    vf = problem.vf

    def phi(u):
        u = np.atleast_2d(u)
        return (tau * np.asarray(problem.f(t0, y[None], u), float)
                + np.asarray(problem.g(y[None] + tau * vf.b(y[None], u)), float))

    U = problem.controls
    vals = np.broadcast_to(phi(U), (U.shape[0],))
    j = int(np.argmax(vals))
    best = float(vals[j])
    if vf.m == 1 and U.shape[0] > 1:
        grid = np.sort(U[:, 0])
        pos = int(np.searchsorted(grid, U[j, 0]))
        lo = grid[max(pos - 1, 0)]
        hi = grid[min(pos + 1, grid.size - 1)]
        res = minimize_scalar(lambda v: -float(phi(np.array([[v]]))[0]), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-12})
        best = max(best, -float(res.fun))
    return best


# ---------------------------------------------------------------------------
# HJB along piecewise-linear drivers


@dataclass(frozen=True)
class ConvergenceRecord:
    level: int
    sup_diff: float | None
    driver_distance: float | None
    substeps: int


def _nested_times(coarse: np.ndarray, fine: np.ndarray) -> bool:
    idx = np.searchsorted(fine, coarse)
    return bool(np.all(idx < fine.size) and np.allclose(fine[np.minimum(idx, fine.size - 1)], coarse,
                                                        rtol=0, atol=1e-12))


def _hjb_single(problem, times, eta_vals, mesh_x, cfl, max_substeps):
    vf = problem.vf
    U = problem.controls
    X = mesh_x[:, None]
    h = mesh_x[1] - mesh_x[0]
    drift = np.broadcast_to(np.asarray(vf.b(X[None], U[:, None]), float)[..., 0], (U.shape[0], X.shape[0]))
    sig = np.asarray(vf.sigma(X), float)[:, 0, :]  # (N, d)
    v = np.asarray(np.broadcast_to(problem.g(X), (X.shape[0],)), float).copy()
    out = np.empty((times.size, v.size))
    out[-1] = v
    total = 0
    for j in range(times.size - 2, -1, -1):
        dtau = times[j + 1] - times[j]
        etadot = (eta_vals[j + 1] - eta_vals[j]) / dtau
        a = drift + (sig @ etadot)[None, :]
        amax = float(np.max(np.abs(a)))
        s = max(1, int(np.ceil(dtau * amax / (cfl * h))))
        if s > max_substeps:
            raise ResolutionError(f"interval {j} needs {s} substeps (cap {max_substeps})")
        total += s
        ap, am = np.maximum(a, 0.0), np.minimum(a, 0.0)
        ds = dtau / s
        for i in range(s):
            t = times[j + 1] - i * ds
            dv = np.diff(v) / h
            fwd = np.append(dv, dv[-1])
            bwd = np.insert(dv, 0, dv[0])
            cand = ap * fwd + am * bwd + problem.f(t, X[None], U[:, None])
            v = v + ds * cand.max(axis=0)
        out[j] = v
    return out, total


def rough_hjb_solve(problem: ControlProblem, eta_sequence, mesh: StateMesh, cfl: float = 0.9,
                    max_substeps: int = 10_000, interior: float = 0.25, alpha: float = 0.4):
    """Solve ``-v_t - H(x, v_x) - <sigma, v_x> eta_dot = 0`` for each piecewise-linear driver.

    Monotone explicit upwind scheme (scalar state).  All value grids are
    reported on the finest driver's time grid, to which coarser drivers are
    linearly interpolated; each report interval is sub-stepped under the CFL
    bound.  The convergence report lists sup-norm differences (over interior
    mesh nodes and all report times) and Hoelder distances between successive
    drivers.
    """
    if problem.vf.e != 1 or mesh.e != 1:
        raise InvalidArgumentError("rough_hjb_solve handles scalar states only")
    if not eta_sequence:
        raise InvalidArgumentError("need at least one driver")
    finest = max(eta_sequence, key=lambda p: p.n)
    times = finest.grid.times
    mesh_x = mesh.axes[0]
    width = mesh.upper[0] - mesh.lower[0]
    inner = (mesh_x >= mesh.lower[0] + interior * width) & (mesh_x <= mesh.upper[0] - interior * width)
    grids, report = [], []
    prev_vals = prev_lift = None
    for eta in sorted(eta_sequence, key=lambda p: p.n):
        if not _nested_times(eta.grid.times, times):
            raise InvalidArgumentError("driver grids must be nested in the finest grid")
        vals = np.column_stack([np.interp(times, eta.grid.times, eta.values[:, i]) for i in range(eta.dim)])
        out, total = _hjb_single(problem, times, vals, mesh_x, cfl, max_substeps)
        lift = lift_piecewise_linear(vals, finest.grid)
        if prev_vals is None:
            rec = ConvergenceRecord(eta.n, None, None, total)
        else:
            diff = float(np.max(np.abs(out[:, inner] - prev_vals[:, inner])))
            dist = hoelder_distance(lift, prev_lift, alpha).distance
            rec = ConvergenceRecord(eta.n, diff, dist, total)
        report.append(rec)
        grids.append(ValueGrid(times, mesh, out))
        prev_vals, prev_lift = out, lift
    return grids, report


# ---------------------------------------------------------------------------
# first-order optimality diagnostics


def _left_df(problem, traj, mu, k0=0):
    times = traj.grid.times
    return np.array([problem.grad_f(times[k], traj.states[k], mu.values[k0 + k])
                     for k in range(traj.grid.n)])


def pmp_hamiltonian_residual(problem: ControlProblem, candidate: PathwiseResult, eta: GridRoughPath):
    """Hamiltonian gap ``r_k = sup_u H(X_k, u, p_k) - H(X_k, mu_k, p_k) >= 0``.

    ``H(x, u, p) = <b(x,u), p> + f(t,x,u)``; ``p`` solves the backward adjoint
    with ``p_T = Dg(X_T)``.  The supremum runs over U_h together with the
    candidate's own control, so the residual is never negative.
    Returns ``(residual, adjoint)``.
    """
    traj, mu = candidate.trajectory, candidate.control
    if not traj.grid.same_as(eta.grid):
        raise InvalidArgumentError("candidate must live on the driver's full grid")
    vf = problem.vf
    p = solve_adjoint_backward(problem.grad_g(traj.terminal), traj, mu, vf, _left_df(problem, traj, mu), eta)
    times = eta.grid.times
    res = np.empty(eta.n)
    for k in range(eta.n):
        x = traj.states[k]
        cand = np.vstack([problem.controls, mu.values[k]])
        ham = vf.b(x[None], cand) @ p[k] + np.broadcast_to(problem.f(times[k], x[None], cand), (cand.shape[0],))
        res[k] = ham.max() - ham[-1]
    return res, p


@dataclass(frozen=True)
class SpikeTable:
    eps: np.ndarray
    deviation: np.ndarray
    linearization_error: np.ndarray
    payoff_error: np.ndarray

    @property
    def deviation_ratio(self):
        return self.deviation / self.eps

    @property
    def linearization_ratio(self):
        return self.linearization_error / self.eps

    @property
    def payoff_ratio(self):
        return self.payoff_error / self.eps


def spike_variation_check(problem: ControlProblem, candidate: PathwiseResult, eta: GridRoughPath, alt_u,
                          t_spike: float, eps_list) -> SpikeTable:
    """Spike perturbations ``mu^eps = alt_u on [t_spike, t_spike + eps)``.

    For each eps reports ``sup|X^eps - X|``, ``sup|X^eps - X - Y^eps|`` with
    ``Y^eps`` the linearised (tangent Davie) response, and the remainder of the
    first-order payoff expansion.  Spike intervals must consist of whole grid
    intervals.
    """
    traj, mu = candidate.trajectory, candidate.control
    if not traj.grid.same_as(eta.grid):
        raise InvalidArgumentError("candidate must live on the driver's full grid")
    vf = problem.vf
    times = eta.grid.times
    dt = eta.grid.dt
    xbar = traj.states
    alt = np.atleast_1d(np.asarray(alt_u, float))
    jac = davie_jacobian(xbar[:-1], vf, mu.values, eta.inc, eta.area, dt[:, None, None])
    dfs = _left_df(problem, traj, mu)
    base = payoff(problem, mu, eta, times[0], xbar[0])
    dg = problem.grad_g(xbar[-1])
    k_start = eta.grid.index_of(t_spike)
    rows = []
    for eps in eps_list:
        k_end = eta.grid.index_of(t_spike + eps)
        if k_end <= k_start:
            raise InvalidArgumentError(f"spike of length {eps} is shorter than one grid interval")
        spike = np.zeros(eta.n, dtype=bool)
        spike[k_start:k_end] = True
        vals = np.array(mu.values)
        vals[spike] = alt
        mu_eps = ControlPath(eta.grid, vals)
        xe = solve_controlled_rde(xbar[0], times[0], vf, mu_eps, eta).states
        y = np.zeros_like(xbar)
        first = 0.0
        for k in range(eta.n):
            forcing = 0.0
            gain = 0.0
            if spike[k]:
                forcing = (vf.b(xbar[k], vals[k]) - vf.b(xbar[k], mu.values[k])) * dt[k]
                gain = float(problem.f(times[k], xbar[k], vals[k]) - problem.f(times[k], xbar[k], mu.values[k]))
            first += (float(dfs[k] @ y[k]) + gain) * dt[k]
            y[k + 1] = jac[k] @ y[k] + forcing
        first += float(dg @ y[-1])
        actual = payoff(problem, mu_eps, eta, times[0], xbar[0]) - base
        dev = np.linalg.norm(xe - xbar, axis=1).max()
        lin = np.linalg.norm(xe - xbar - y, axis=1).max()
        rows.append((eps, dev, lin, abs(actual - first)))
    a = np.array(rows, dtype=float)
    return SpikeTable(a[:, 0], a[:, 1], a[:, 2], a[:, 3])
