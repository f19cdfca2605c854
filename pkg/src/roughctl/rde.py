"""Controlled rough differential equations

    dY = b(Y, u) dt + sigma(Y) d eta

solved with the explicit second-order (Davie) step, plus the backward adjoint
equation and a flow-decomposition solver used for validation.

Vector-field callables are vectorised: ``b(x, u)`` takes ``x[..., e]`` and
``u[..., m]`` (broadcastable) and returns ``[..., e]``; ``sigma(x)`` returns
``[..., e, d]``; ``d_sigma(x)`` returns ``[..., d, e, e]`` where entry ``i`` is
the Jacobian of column ``sigma_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .columnar import read_columnar, write_columnar
from .errors import InvalidArgumentError, NumericalOverflowError, OutOfDomainError
from .rough_path import GridRoughPath, TimeGrid, lift_piecewise_linear

_FD_SCALE = np.finfo(float).eps ** (1.0 / 3.0)


def fd_step(x):
    """Central-difference step ``eps^(1/3) (|x| + 1)``."""
    return _FD_SCALE * (np.abs(x) + 1.0)


def central_jacobian(fn, x):
    """Jacobian of ``fn`` at ``x[..., e]``: returns ``[..., *out_shape, e]``."""
    x = np.asarray(x, dtype=float)
    h = fd_step(x)
    cols = []
    for c in range(x.shape[-1]):
        dx = np.zeros_like(x)
        dx[..., c] = h[..., c]
        hc = h[..., c]
        diff = fn(x + dx) - fn(x - dx)
        cols.append(diff / (2.0 * hc.reshape(hc.shape + (1,) * (diff.ndim - hc.ndim))))
    return np.stack(cols, axis=-1)


@dataclass(frozen=True)
class VectorFieldSet:
    """Drift ``b``, diffusion ``sigma`` and (optional) derivatives.

    Missing derivatives fall back to central finite differences.
    """

    b: Callable
    sigma: Callable
    e: int
    d: int
    m: int = 1
    d_sigma: Callable | None = None
    d_b: Callable | None = None
    d_b_u: Callable | None = None
    d2_sigma: Callable | None = None

    def jac_sigma(self, x):
        """``[..., d, e, e]`` with ``out[..., i, a, c] = d sigma_i^a / d x_c``."""
        if self.d_sigma is not None:
            return np.asarray(self.d_sigma(x), dtype=float)
        j = central_jacobian(self.sigma, x)  # [..., e, d, e]
        return np.moveaxis(j, -2, -3)

    def jac_b(self, x, u):
        if self.d_b is not None:
            return np.asarray(self.d_b(x, u), dtype=float)
        return central_jacobian(lambda z: self.b(z, u), x)

    def jac_b_u(self, x, u):
        """``[..., e, m]`` derivative of the drift in the control."""
        if self.d_b_u is not None:
            return np.asarray(self.d_b_u(x, u), dtype=float)
        x = np.asarray(x, dtype=float)
        u = np.broadcast_to(np.asarray(u, dtype=float), x.shape[:-1] + (self.m,))
        return central_jacobian(lambda v: self.b(x, v), u)

    def levy_term(self, x, area):
        """``sum_{i,j} (D sigma_j sigma_i)(x) A^{ij}``."""
        s = self.sigma(x)
        ds = self.jac_sigma(x)
        return np.einsum("...jab,...bi,...ij->...a", ds, s, area)

    def noise_term(self, x, delta, area):
        """Control-free part of the Davie step."""
        return np.einsum("...ai,...i->...a", self.sigma(x), delta) + self.levy_term(x, area)

    def stratonovich_correction(self, x):
        """``1/2 sum_i (D sigma_i sigma_i)(x)``: Ito drift minus Stratonovich drift."""
        return 0.5 * np.einsum("...iab,...bi->...a", self.jac_sigma(x), self.sigma(x))


@dataclass(frozen=True, eq=False)
class ControlPath:
    """Piecewise-constant control: ``values[k]`` acts on ``[t_k, t_{k+1})``."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != self.grid.n:
            raise InvalidArgumentError(f"{v.shape[0]} control values for {self.grid.n} intervals")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, grid: TimeGrid, u) -> "ControlPath":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return cls(grid, np.tile(u, (grid.n, 1)))


@dataclass(frozen=True, eq=False)
class RdeSolution:
    grid: TimeGrid
    states: np.ndarray
    scheme: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != self.grid.n + 1:
            raise InvalidArgumentError("one state per grid time required")
        s.flags.writeable = False
        object.__setattr__(self, "states", s)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]

    def save(self, path):
        e = self.states.shape[1]
        header = {"kind": "rde_solution", "e": e, "n": self.grid.n, "scheme": self.scheme}
        cols = ["t"] + [f"y_{i}" for i in range(e)]
        return write_columnar(path, header, cols, np.column_stack([self.grid.times, self.states]))

    @classmethod
    def load(cls, path) -> "RdeSolution":
        header, _, rows = read_columnar(path)
        if header.get("kind") != "rde_solution":
            raise InvalidArgumentError(f"{path}: not an RDE solution file")
        return cls(TimeGrid(rows[:, 0]), rows[:, 1:], header.get("scheme", {}))


DAVIE_SCHEME = {
    "step": "davie",
    "order": 2,
    "omitted": "drift-noise cross terms of order dt*|delta|",
}


def _check_finite(y, step):
    if not np.all(np.isfinite(y)):
        raise NumericalOverflowError("non-finite RDE state", step=step)
    return y


def davie_step(y, vf: VectorFieldSet, u, delta, area, dt, step=None):
    """``y + b(y,u) dt + sigma(y) delta + sum_ij (D sigma_j sigma_i)(y) A^{ij}``."""
    if not dt > 0:
        raise InvalidArgumentError(f"step length must be positive, got {dt!r}")
    y = np.asarray(y, dtype=float)
    out = y + vf.b(y, u) * dt + vf.noise_term(y, np.asarray(delta, float), np.asarray(area, float))
    return _check_finite(out, step)


def davie_jacobian(y, vf: VectorFieldSet, u, delta, area, dt):
    """Jacobian ``[..., e, e]`` of the Davie step map ``y -> davie_step(y, ...)``."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    area = np.asarray(area, dtype=float)
    eye = np.broadcast_to(np.eye(vf.e), y.shape[:-1] + (vf.e, vf.e))
    ds = vf.jac_sigma(y)
    out = eye + vf.jac_b(y, u) * dt + np.einsum("...iac,...i->...ac", ds, delta)
    if vf.d2_sigma is not None:
        d2 = np.asarray(vf.d2_sigma(y), dtype=float)  # [..., d, e, e, e]
        s = vf.sigma(y)
        second = np.einsum("...jabc,...bi,...ij->...ac", d2, s, area)
        second = second + np.einsum("...jab,...ibc,...ij->...ac", ds, ds, area)
    else:
        second = central_jacobian(lambda z: vf.levy_term(z, area), y)
    return out + second


def integrate(x0, vf: VectorFieldSet, inc, area, times, controls=None, feedback=None, drift=None,
              start=0):
    """Davie-scheme integration with optional leading batch dimensions.

    ``inc`` has shape ``(n, ..., d)`` and ``area`` ``(n, ..., d, d)``; steps
    ``start..n-1`` are taken.  The control on step k is ``controls[k]`` or
    ``feedback(t_k, x_k)``; ``drift(t, x, u)`` overrides ``vf.b``.

    Returns ``(states, used_controls)`` with shapes ``(n-start+1, ..., e)`` and
    ``(n-start, ..., m)``.
    """
    times = np.asarray(times, dtype=float)
    x = np.array(x0, dtype=float)
    n = inc.shape[0]
    states = np.empty((n - start + 1,) + x.shape)
    states[0] = x
    used = None
    for k in range(start, n):
        dt = times[k + 1] - times[k]
        if controls is not None:
            u = controls[k]
        elif feedback is not None:
            u = np.asarray(feedback(times[k], x), dtype=float)
        else:
            u = np.zeros(x.shape[:-1] + (vf.m,))
        if used is None:
            used = np.empty((n - start,) + np.broadcast_shapes(np.shape(u), x.shape[:-1] + (vf.m,)))
        used[k - start] = u
        b = vf.b(x, u) if drift is None else drift(times[k], x, u)
        x = _check_finite(x + b * dt + vf.noise_term(x, inc[k], area[k]), k)
        states[k - start + 1] = x
    if used is None:
        used = np.empty((0,) + x.shape[:-1] + (vf.m,))
    return states, used


def solve_controlled_rde(x0, t0, vf: VectorFieldSet, mu: ControlPath, eta: GridRoughPath) -> RdeSolution:
    """Solve the controlled RDE from ``(t0, x0)`` to the horizon of ``eta``."""
    if not mu.grid.same_as(eta.grid):
        raise InvalidArgumentError("control and driver must share a grid")
    if eta.dim != vf.d:
        raise InvalidArgumentError(f"driver dimension {eta.dim} != vector field dimension {vf.d}")
    k0 = eta.grid.index_of(t0)
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    states, _ = integrate(x0, vf, eta.inc, eta.area, eta.grid.times, controls=mu.values, start=k0)
    return RdeSolution(TimeGrid(eta.grid.times[k0:]), states, dict(DAVIE_SCHEME))


def solve_adjoint_backward(pT, traj: RdeSolution, mu: ControlPath, vf: VectorFieldSet, df,
                           eta: GridRoughPath) -> np.ndarray:
    """Backward adjoint ``-dp = Db^T p dt + Dsigma^T p d eta + Df dt``, ``p_T = pT``.

    Discretised as the exact transpose of the forward Davie step linearised at
    the frozen left-endpoint state, so ``<p_k, Y_k>`` pairs consistently with
    the tangent of the forward scheme.  ``df`` is either an array ``(n, e)`` of
    ``D_x f(t_k, X_k, u_k)`` or a callable ``df(t, x, u)``.
    """
    if not (traj.grid.same_as(mu.grid) and traj.grid.same_as(eta.grid)):
        raise InvalidArgumentError("trajectory, control and driver must share a grid")
    n = eta.n
    times = eta.grid.times
    xs = traj.states
    p = np.empty_like(xs)
    p[-1] = np.asarray(pT, dtype=float)
    if not np.all(np.isfinite(p[-1])):
        raise NumericalOverflowError("non-finite terminal adjoint", step=n)
    if callable(df):
        dfs = np.array([df(times[k], xs[k], mu.values[k]) for k in range(n)], dtype=float)
    else:
        dfs = np.asarray(df, dtype=float).reshape(n, -1)
    dt = eta.grid.dt
    jac = davie_jacobian(xs[:-1], vf, mu.values, eta.inc, eta.area, dt[:, None, None])
    for k in range(n - 1, -1, -1):
        p[k] = _check_finite(jac[k].T @ p[k + 1] + dfs[k] * dt[k], k)
    return p


def flow_decomposition_solve(x0, t0, vf: VectorFieldSet, mu: ControlPath, eta: GridRoughPath,
                             state_grid) -> RdeSolution:
    """Scalar-state solve via ``Y_t = phi(t, Ytilde_t)``.

    ``phi`` is the driftless flow ``d phi = sigma(phi) d eta`` from ``t0``,
    tabulated on ``state_grid``; ``Ytilde`` solves the ODE with drift
    ``b(phi, u) / d_x phi`` (Heun steps).  Validation tool only.
    """
    if vf.e != 1:
        raise InvalidArgumentError("flow decomposition is implemented for scalar states only")
    if not mu.grid.same_as(eta.grid):
        raise InvalidArgumentError("control and driver must share a grid")
    mesh = np.asarray(state_grid, dtype=float)
    k0 = eta.grid.index_of(t0)
    times = eta.grid.times[k0:]
    zero = lambda t, x, u: np.zeros_like(x)  # noqa: E731
    phi, _ = integrate(mesh[:, None], vf, eta.inc, eta.area, eta.grid.times, drift=zero, start=k0)
    phi = phi[..., 0]  # (n_steps + 1, mesh)
    dphi = np.gradient(phi, mesh, axis=1)
    ctrl = mu.values[k0:]

    def btilde(k, y, u):
        if not mesh[0] <= y <= mesh[-1]:
            raise OutOfDomainError(f"transformed state {y:.6g} left the mesh at step {k + k0}")
        f = np.interp(y, mesh, phi[k])
        g = np.interp(y, mesh, dphi[k])
        return float(vf.b(np.array([f]), u)[0]) / g

    y = float(np.atleast_1d(x0)[0])
    ys = [y]
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        k1 = btilde(k, y, ctrl[k])
        k2 = btilde(k + 1, y + dt * k1, ctrl[k])
        y = y + 0.5 * dt * (k1 + k2)
        ys.append(y)
    ys = np.array(ys)
    for k in range(len(times)):
        if not mesh[0] <= ys[k] <= mesh[-1]:
            raise OutOfDomainError(f"transformed state left the mesh at step {k + k0}")
    states = np.array([np.interp(ys[k], mesh, phi[k]) for k in range(len(times))])
    return RdeSolution(TimeGrid(times), states[:, None], {"step": "flow-decomposition", "mesh": mesh.size})


@dataclass(frozen=True)
class LadderReport:
    """Successive sup-norm differences of solutions driven by dyadic approximations.

    ``per_path[b, j]`` is the sup-norm difference between levels ``j`` and
    ``j + 1`` for sample ``b``; ``differences`` is its mean over samples.
    """

    levels: tuple
    differences: np.ndarray
    per_path: np.ndarray
    order: float

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.differences) < 0))


def wong_zakai_ladder(x0, vf: VectorFieldSet, values, grid: TimeGrid, levels) -> LadderReport:
    """Solve along piecewise-linear interpolations of ``values`` through ``levels`` pieces.

    ``values`` holds driver samples at the instants of ``grid``, shape
    ``(n + 1, d)`` or ``(B, n + 1, d)`` for B independent samples.  Every
    approximation is solved on ``grid`` with its chord lift, so differences
    between consecutive levels measure only the driver approximation.
    ``order`` is the least-squares slope of ``-log2(difference)`` against
    ``log2(level)``.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim == 2:
        values = values[None]
    if values.shape[1] != grid.n + 1:
        raise InvalidArgumentError("driver samples must match the grid")
    levels = tuple(sorted(int(v) for v in levels))
    if len(levels) < 2:
        raise InvalidArgumentError("need at least two levels")
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    x0 = np.broadcast_to(x0, (values.shape[0], x0.size))
    sols = []
    for lev in levels:
        if lev < 1 or grid.n % lev:
            raise InvalidArgumentError(f"level {lev} does not divide n={grid.n}")
        step = grid.n // lev
        left = np.minimum((np.arange(grid.n + 1) // step) * step, grid.n - step)
        frac = (grid.times - grid.times[left]) / (grid.times[left + step] - grid.times[left])
        approx = values[:, left] + frac[None, :, None] * (values[:, left + step] - values[:, left])
        inc = np.moveaxis(np.diff(approx, axis=1), 1, 0)          # (n, B, d)
        area = 0.5 * np.einsum("nbi,nbj->nbij", inc, inc)
        states, _ = integrate(x0, vf, inc, area, grid.times)
        sols.append(states)
    per_path = np.stack([np.max(np.abs(b - a), axis=(0, 2)) for a, b in zip(sols[:-1], sols[1:])], axis=1)
    diffs = per_path.mean(axis=0)
    slope = -np.polyfit(np.log2(levels[1:]), np.log2(diffs), 1)[0]
    return LadderReport(levels, diffs, per_path, float(slope))
