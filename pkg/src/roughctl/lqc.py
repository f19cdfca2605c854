"""Linear-quadratic fixtures with closed-form solutions.

Two families are covered, both posed as maximisation problems with
negative-definite weights so that the pathwise problems are concave:

* additive noise ``dX = (M X + N u) dt + dB`` with gain ``1/2 (x'Qx + u'Ru)``
  and terminal gain ``1/2 x'Gx``;
* scalar multiplicative noise ``dX = (M X + N u) dt + C X o dB`` (Stratonovich),
  same gains.

Besides Riccati solutions, value functions and feedbacks, this module provides
the explicit optimal penalties: the additive ``lambda^1`` and ``gamma^R`` and the
multiplicative propagator ``Gamma``, its weighted integral ``Theta`` and the
penalties ``z^1`` and ``z^2``.  Integrals against the driver are compensated
grid sums (increment plus area correction), matching the Davie scheme, so
discrete identities between the penalties hold exactly where the continuous
ones do.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .control import ControlProblem, PathwiseResult
from .duality import DavisBursteinPenalty, RogersPenalty
from .errors import FiniteEscapeError, InvalidArgumentError, NumericalOverflowError
from .rde import ControlPath, VectorFieldSet, solve_controlled_rde
from .rough_path import GridRoughPath, TimeGrid, make_uniform_grid

RICCATI_CAP = 1e8


def _mat(a, name):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a matrix")
    return a


@dataclass(frozen=True, eq=False)
class AdditiveLqcSpec:
    M: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    G: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        M, N, Q, R, G = (_mat(getattr(self, k), k) for k in "MNQRG")
        e, m = N.shape
        if M.shape != (e, e) or Q.shape != (e, e) or G.shape != (e, e) or R.shape != (m, m):
            raise InvalidArgumentError("LQC matrices have non-conforming shapes")
        if np.linalg.cond(R) > 1e12:
            raise InvalidArgumentError("R is (numerically) singular")
        if not self.T > 0:
            raise InvalidArgumentError("horizon must be positive")
        for k, v in zip("MNQRG", (M, N, Q, R, G)):
            object.__setattr__(self, k, v)

    @property
    def e(self) -> int:
        return self.M.shape[0]

    @property
    def m(self) -> int:
        return self.N.shape[1]


@dataclass(frozen=True)
class MultiplicativeLqcSpec:
    M: float
    N: float
    C: float
    Q: float
    R: float
    G: float
    T: float = 1.0

    def __post_init__(self):
        if self.R == 0:
            raise InvalidArgumentError("R must be non-zero")
        if not self.T > 0:
            raise InvalidArgumentError("horizon must be positive")


ADDITIVE_FIXTURE = dict(M=0.1, N=1.0, Q=-1.0, R=-1.0, G=-1.0, T=1.0)
MULTIPLICATIVE_FIXTURE = dict(M=0.1, N=1.0, C=0.3, Q=-1.0, R=-1.0, G=-1.0, T=1.0)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """``P`` at the instants of ``grid`` plus ``int_t^T Tr P`` and the Riccati vector field."""

    grid: TimeGrid
    P: np.ndarray
    trace_integral: np.ndarray
    rhs: object

    @cached_property
    def _times(self):
        return self.grid.times.tolist()

    def _locate(self, t):
        times = self._times
        if not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
            raise InvalidArgumentError(f"time {t!r} outside [{times[0]}, {times[-1]}]")
        k = min(max(bisect_right(times, t) - 1, 0), self.grid.n - 1)
        w = (t - times[k]) / (times[k + 1] - times[k])
        return k, min(max(w, 0.0), 1.0)

    def P_at(self, t):
        k, w = self._locate(t)
        if w == 0.0:
            return self.P[k]
        if w == 1.0:
            return self.P[k + 1]
        return (1 - w) * self.P[k] + w * self.P[k + 1]

    def Pdot_at(self, t):
        return self.rhs(self.P_at(t))

    def trace_at(self, t) -> float:
        k, w = self._locate(t)
        return float((1 - w) * self.trace_integral[k] + w * self.trace_integral[k + 1])


def _rk4_backward(rhs, terminal, grid, cap):
    """Classical RK4 from ``T`` to ``t0`` for ``(P, int Tr P)``; symmetrises each step."""
    n = grid.n
    P = np.empty((n + 1,) + np.shape(terminal))
    phi = np.zeros(n + 1)
    P[-1] = terminal
    tr = (lambda p: float(np.trace(p))) if np.ndim(terminal) == 2 else float
    for k in range(n - 1, -1, -1):
        h = -(grid.times[k + 1] - grid.times[k])
        p = P[k + 1]
        k1 = rhs(p)
        k2 = rhs(p + 0.5 * h * k1)
        k3 = rhs(p + 0.5 * h * k2)
        k4 = rhs(p + h * k3)
        new = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        c1 = -tr(p)
        c2 = -tr(p + 0.5 * h * k1)
        c3 = -tr(p + 0.5 * h * k2)
        c4 = -tr(p + h * k3)
        phi[k] = phi[k + 1] + h / 6.0 * (c1 + 2 * c2 + 2 * c3 + c4)
        if np.ndim(new) == 2:
            new = 0.5 * (new + new.T)
        if not np.all(np.isfinite(new)) or np.max(np.abs(new)) > cap:
            raise FiniteEscapeError(f"Riccati solution exceeded {cap:g} at t={grid.times[k]:.6g}", step=k)
        P[k] = new
    return P, phi


def riccati_solve_additive(spec: AdditiveLqcSpec, n_steps: int = 4096, cap: float = RICCATI_CAP) -> RiccatiSolution:
    """``P' = -PM - M'P + P N R^{-1} N' P - Q``, ``P(T) = G``."""
    if n_steps < 1:
        raise InvalidArgumentError("n_steps must be positive")
    M, N, Q, G = spec.M, spec.N, spec.Q, spec.G
    NRN = N @ np.linalg.solve(spec.R, N.T)

    def rhs(P):
        return -P @ M - M.T @ P + P @ NRN @ P - Q

    grid = make_uniform_grid(spec.T, n_steps)
    P, phi = _rk4_backward(rhs, 0.5 * (G + G.T), grid, cap)
    P[-1] = G
    return RiccatiSolution(grid, P, phi, rhs)


def riccati_solve_multiplicative(spec: MultiplicativeLqcSpec, n_steps: int = 4096,
                                 cap: float = RICCATI_CAP) -> RiccatiSolution:
    """``P' + 2PM + 2PC^2 + Q - N^2 P^2 / R = 0``, ``P(T) = G`` (scalar)."""
    if n_steps < 1:
        raise InvalidArgumentError("n_steps must be positive")
    M, N, C, Q, R = spec.M, spec.N, spec.C, spec.Q, spec.R

    def rhs(P):
        return -2 * P * M - 2 * P * C * C - Q + N * N * P * P / R

    grid = make_uniform_grid(spec.T, n_steps)
    P, phi = _rk4_backward(rhs, float(spec.G), grid, cap)
    return RiccatiSolution(grid, P, phi, rhs)


# ---------------------------------------------------------------------------
# additive case


def lqc_additive_value(sol: RiccatiSolution, t, x) -> float:
    """``1/2 <P(t) x, x> + 1/2 int_t^T Tr P``."""
    x = np.atleast_1d(np.asarray(x, float))
    P = sol.P_at(t)
    return 0.5 * float(x @ P @ x) + 0.5 * sol.trace_at(t)


def lqc_additive_feedback(sol: RiccatiSolution, spec: AdditiveLqcSpec, t, x) -> np.ndarray:
    """``-R^{-1} N' P(t) x`` (broadcast over leading dimensions of ``x``)."""
    x = np.asarray(x, float)
    gain = -np.linalg.solve(spec.R, spec.N.T @ sol.P_at(t))
    return x @ gain.T


def additive_vector_fields(spec: AdditiveLqcSpec) -> VectorFieldSet:
    M, N, e = spec.M, spec.N, spec.e
    eye = np.eye(e)
    return VectorFieldSet(
        b=lambda x, u: np.asarray(x) @ M.T + np.asarray(u) @ N.T,
        sigma=lambda x: np.broadcast_to(eye, np.shape(x)[:-1] + (e, e)),
        e=e, d=e, m=spec.m,
        d_sigma=lambda x: np.zeros(np.shape(x)[:-1] + (e, e, e)),
        d_b=lambda x, u: np.broadcast_to(M, np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (e, e)),
        d_b_u=lambda x, u: np.broadcast_to(N, np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + N.shape),
        d2_sigma=lambda x: np.zeros(np.shape(x)[:-1] + (e, e, e, e)),
    )


def _quad_gain(Q, R):
    def f(t, x, u):
        x = np.asarray(x)
        u = np.asarray(u)
        return 0.5 * (np.einsum("...a,ab,...b->...", x, Q, x) + np.einsum("...a,ab,...b->...", u, R, u))
    return f


def additive_problem(spec: AdditiveLqcSpec, controls, t0: float = 0.0) -> ControlProblem:
    Q, G = spec.Q, spec.G
    return ControlProblem(
        additive_vector_fields(spec), _quad_gain(Q, spec.R),
        lambda x: 0.5 * np.einsum("...a,ab,...b->...", np.asarray(x), G, np.asarray(x)),
        controls, spec.T, t0,
        dg=lambda x: np.asarray(x) @ G.T,
        df=lambda t, x, u: np.asarray(x) @ Q.T,
    )


def additive_value_penalty(sol: RiccatiSolution) -> RogersPenalty:
    """Rogers data for ``h = V`` in the additive case."""
    return RogersPenalty(
        h=lambda t, x: 0.5 * np.einsum("...a,ab,...b->...", np.asarray(x), sol.P_at(t), np.asarray(x))
        + 0.5 * sol.trace_at(t),
        h_t=lambda t, x: 0.5 * np.einsum("...a,ab,...b->...", np.asarray(x), sol.Pdot_at(t), np.asarray(x))
        - 0.5 * float(np.trace(sol.P_at(t))),
        dh=lambda t, x: np.asarray(x) @ sol.P_at(t).T,
        d2h=lambda t, x: np.broadcast_to(sol.P_at(t), np.shape(x)[:-1] + sol.P.shape[1:]),
        name="value-function",
    )


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values on the instants of a grid; evaluation between instants uses the left node."""

    grid: TimeGrid
    values: np.ndarray

    def index(self, t) -> int:
        times = self.grid.times
        if not times[0] - 1e-12 <= t <= times[-1] + 1e-12:
            raise InvalidArgumentError(f"time {t!r} outside the grid")
        return int(np.clip(np.searchsorted(times, t + 1e-12 * max(1.0, abs(t)), side="right") - 1, 0, self.grid.n))

    def __call__(self, t):
        return self.values[self.index(t)]


def lambda1_additive(sol: RiccatiSolution, spec: AdditiveLqcSpec, eta: GridRoughPath, t: float = None) -> GridFunction:
    """``lambda^1(t_k) = -N' sum_{j>=k} exp(M'(t_j - t_k)) P(t_j) delta_j`` for ``t_k >= t``."""
    times = eta.grid.times
    k0 = 0 if t is None else eta.grid.index_of(t)
    e = spec.e
    S = np.zeros(e)
    out = np.zeros((eta.n + 1 - k0, spec.m))
    cache = {}
    for k in range(eta.n - 1, k0 - 1, -1):
        dt = times[k + 1] - times[k]
        key = round(dt, 15)
        if key not in cache:
            cache[key] = expm(spec.M.T * dt)
        S = sol.P_at(times[k]) @ eta.inc[k] + cache[key] @ S
        out[k - k0] = -spec.N.T @ S
    return GridFunction(TimeGrid(times[k0:]), out)


def additive_lambda_fn(sol: RiccatiSolution, spec: AdditiveLqcSpec):
    """Closed-form ``lambda* = -lambda^1`` as a :class:`DavisBursteinPenalty` ``lambda_fn``."""

    def make(eta):
        lam = lambda1_additive(sol, spec, eta).values

        def at(k, x):
            return np.broadcast_to(-lam[k], np.shape(x)[:-1] + (spec.m,))
        return at
    return make


def additive_db_penalty(sol: RiccatiSolution, spec: AdditiveLqcSpec, closed_form: bool = True) -> DavisBursteinPenalty:
    fb = lambda t, x: lqc_additive_feedback(sol, spec, t, x)  # noqa: E731
    return DavisBursteinPenalty(fb, additive_lambda_fn(sol, spec) if closed_form else None)


def gammaR_additive(sol: RiccatiSolution, spec: AdditiveLqcSpec, eta: GridRoughPath, t: float, x) -> float:
    """``int <P X^0, d eta> - 1/2 int Tr P`` along the uncontrolled ``X^0`` from ``(t, x)``.

    The rough integral uses the compensated sum ``<P X^0, delta> + Tr(P A)`` and
    the trace integral the matching left-point sum, so the Brownian mean is
    exactly zero.
    """
    vf = additive_vector_fields(spec)
    k0 = eta.grid.index_of(t)
    mu = ControlPath.constant(eta.grid, np.zeros(spec.m))
    xs = solve_controlled_rde(x, t, vf, mu, eta).states
    times = eta.grid.times
    terms = []
    for j in range(k0, eta.n):
        P = sol.P_at(times[j])
        terms.append(float((P @ xs[j - k0]) @ eta.inc[j]) + float(np.sum(P * eta.area[j].T))
                     - 0.5 * float(np.trace(P)) * (times[j + 1] - times[j]))
    return math.fsum(terms)


def pathwise_additive_optimum(spec: AdditiveLqcSpec, eta: GridRoughPath, x0, t0: float = 0.0,
                              sol: RiccatiSolution | None = None) -> PathwiseResult:
    """Exact maximiser of the discretised pathwise problem (controls unconstrained).

    Discrete dynamic programming with quadratic value ``1/2 x'S_k x + s_k'x + c``:
    the known driver enters the affine part only.  Returns the optimal control,
    its trajectory and payoff.
    """
    times = eta.grid.times
    k0 = eta.grid.index_of(t0)
    e = spec.e
    M, N, Q, R = spec.M, spec.N, spec.Q, spec.R
    S = spec.G.copy()
    s = np.zeros(e)
    gains = [None] * eta.n
    for k in range(eta.n - 1, k0 - 1, -1):
        dt = times[k + 1] - times[k]
        A = np.eye(e) + M * dt
        B = N * dt
        H = R * dt + B.T @ S @ B
        if np.any(np.linalg.eigvalsh(0.5 * (H + H.T)) >= 0):
            raise InvalidArgumentError("pathwise problem is not strictly concave in the control")
        K = np.linalg.solve(H, B.T)
        L = -K @ S @ A
        l = -K @ (S @ eta.inc[k] + s)
        gains[k] = (L, l)
        s = A.T @ (S @ (B @ l + eta.inc[k]) + s)
        S = Q * dt + A.T @ S @ (A + B @ L)
        S = 0.5 * (S + S.T)
    x = np.atleast_1d(np.asarray(x0, float))
    ctrl = np.zeros((eta.n, spec.m))
    for k in range(k0, eta.n):
        L, l = gains[k]
        ctrl[k] = L @ x + l
        dt = times[k + 1] - times[k]
        x = x + (M @ x + N @ ctrl[k]) * dt + eta.inc[k]
    mu = ControlPath(eta.grid, ctrl)
    problem = additive_problem(spec, np.zeros((1, spec.m)), t0)
    traj = solve_controlled_rde(x0, t0, additive_vector_fields(spec), mu, eta)
    f = problem.f
    run = math.fsum(float(f(times[k], traj.states[k - k0], ctrl[k])) * (times[k + 1] - times[k])
                    for k in range(k0, eta.n))
    total = run + float(problem.g(traj.terminal))
    return PathwiseResult(total, mu, traj, total)


# ---------------------------------------------------------------------------
# multiplicative case


def multiplicative_vector_fields(spec: MultiplicativeLqcSpec) -> VectorFieldSet:
    M, N, C = spec.M, spec.N, spec.C
    return VectorFieldSet(
        b=lambda x, u: M * np.asarray(x) + N * np.asarray(u),
        sigma=lambda x: C * np.asarray(x)[..., None],
        e=1, d=1, m=1,
        d_sigma=lambda x: np.full(np.shape(x)[:-1] + (1, 1, 1), C),
        d_b=lambda x, u: np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (1, 1), M),
        d_b_u=lambda x, u: np.full(np.broadcast_shapes(np.shape(x)[:-1], np.shape(u)[:-1]) + (1, 1), N),
        d2_sigma=lambda x: np.zeros(np.shape(x)[:-1] + (1, 1, 1, 1)),
    )


def multiplicative_problem(spec: MultiplicativeLqcSpec, controls, t0: float = 0.0) -> ControlProblem:
    Q, R, G = spec.Q, spec.R, spec.G
    return ControlProblem(
        multiplicative_vector_fields(spec),
        lambda t, x, u: 0.5 * (Q * np.asarray(x)[..., 0] ** 2 + R * np.asarray(u)[..., 0] ** 2),
        lambda x: 0.5 * G * np.asarray(x)[..., 0] ** 2,
        controls, spec.T, t0,
        dg=lambda x: G * np.asarray(x),
        df=lambda t, x, u: Q * np.asarray(x),
    )


def multiplicative_value(sol: RiccatiSolution, t, x) -> float:
    """``V(t, x) = 1/2 P(t) x^2``."""
    x = float(np.ravel(x)[0])
    return 0.5 * float(sol.P_at(t)) * x * x


def multiplicative_feedback(sol: RiccatiSolution, spec: MultiplicativeLqcSpec, t, x):
    return -spec.N * float(sol.P_at(t)) / spec.R * np.asarray(x, float)


def multiplicative_value_penalty(sol: RiccatiSolution) -> RogersPenalty:
    return RogersPenalty(
        h=lambda t, x: 0.5 * float(sol.P_at(t)) * np.asarray(x)[..., 0] ** 2,
        h_t=lambda t, x: 0.5 * float(sol.Pdot_at(t)) * np.asarray(x)[..., 0] ** 2,
        dh=lambda t, x: float(sol.P_at(t)) * np.asarray(x),
        d2h=lambda t, x: np.full(np.shape(x)[:-1] + (1, 1), float(sol.P_at(t))),
        name="value-function",
    )


def gamma_propagator(t: float, eta: GridRoughPath, spec: MultiplicativeLqcSpec) -> GridFunction:
    """``Gamma_{t, s}`` for grid ``s >= t`` by the linear Davie recursion."""
    if eta.dim != 1:
        raise InvalidArgumentError("the propagator is scalar")
    k0 = eta.grid.index_of(t)
    dt = eta.grid.dt[k0:]
    factors = 1.0 + spec.M * dt + spec.C * eta.inc[k0:, 0] + spec.C ** 2 * eta.area[k0:, 0, 0]
    vals = np.concatenate([[1.0], np.cumprod(factors)])
    if not np.all(np.isfinite(vals)) or np.any(vals == 0.0):
        bad = int(np.argmax(~np.isfinite(vals) | (vals == 0.0)))
        raise NumericalOverflowError("propagator overflow/underflow", step=k0 + bad - 1)
    return GridFunction(TimeGrid(eta.grid.times[k0:]), vals)


def _theta_weights(spec, eta):
    return eta.inc[:, 0] + 2 * spec.C * eta.area[:, 0, 0] - spec.C * eta.grid.dt


def theta(eta: GridRoughPath, sol: RiccatiSolution, spec: MultiplicativeLqcSpec) -> GridFunction:
    """``Theta_r = int_r^T P_s Gamma_{r,s}^2 (d eta_s - C ds)`` at every grid instant.

    Compensated sum: the integrand's sensitivity to the driver adds ``2C A_j``.
    """
    gam = gamma_propagator(eta.grid.t0, eta, spec).values
    P = np.array([float(sol.P_at(t)) for t in eta.grid.times[:-1]])
    terms = P * gam[:-1] ** 2 * _theta_weights(spec, eta)
    tail = np.concatenate([np.cumsum(terms[::-1])[::-1], [0.0]])
    return GridFunction(eta.grid, tail / gam ** 2)


def multiplicative_lambda_fn(sol: RiccatiSolution, spec: MultiplicativeLqcSpec):
    """Closed-form ``lambda*(t_k, x) = 2 N C Theta_k x``."""

    def make(eta):
        th = theta(eta, sol, spec).values

        def at(k, x):
            return 2 * spec.N * spec.C * th[k] * np.asarray(x, float)
        return at
    return make


def multiplicative_db_penalty(sol: RiccatiSolution, spec: MultiplicativeLqcSpec, closed_form: bool = True):
    fb = lambda t, x: multiplicative_feedback(sol, spec, t, x)  # noqa: E731
    return DavisBursteinPenalty(fb, multiplicative_lambda_fn(sol, spec) if closed_form else None)


def _mult_parts(spec, sol, eta, t, mu):
    k0 = eta.grid.index_of(t)
    gam = gamma_propagator(eta.grid.t0, eta, spec).values
    th = theta(eta, sol, spec).values
    u = mu.values[k0:, 0]
    dt = eta.grid.dt[k0:]
    rel = gam[k0:] / gam[k0]
    return k0, rel, th[k0:], u, dt


def z1_multiplicative(spec: MultiplicativeLqcSpec, sol: RiccatiSolution, eta: GridRoughPath, x, mu: ControlPath,
                      t: float = 0.0) -> float:
    """``int lambda*(r, X_r) mu_r dr`` with ``lambda* = 2NC Theta_r X_r`` and the Duhamel form of ``X``.

    ``X_k = Gamma_{t,k} (x + N sum_{v<k} mu_v dt_v / Gamma_{t,v+1})`` reproduces
    the Davie trajectory of the linear dynamics exactly.
    """
    _, rel, th, u, dt = _mult_parts(spec, sol, eta, t, mu)
    x = float(np.ravel(x)[0])
    push = np.concatenate([[0.0], np.cumsum(u * dt / rel[1:])])[:-1]
    X = rel[:-1] * (x + spec.N * push)
    return math.fsum(2 * spec.N * spec.C * th[:-1] * X * u * dt)


def z2_multiplicative(spec: MultiplicativeLqcSpec, sol: RiccatiSolution, eta: GridRoughPath, x, mu: ControlPath,
                      t: float = 0.0) -> float:
    """``C Theta_t x^2 + C N x int 2 Gamma_{t,s} Theta_s mu_s ds
    + C N^2 iint Gamma_{r^s, rvs} Theta_{rvs} mu_r mu_s dr ds``.

    A control acting on ``[t_v, t_{v+1})`` is attributed to the node ``t_{v+1}``,
    which is how it enters the Davie state; the bilinear term is evaluated as a
    full symmetric double sum.
    """
    _, rel, th, u, dt = _mult_parts(spec, sol, eta, t, mu)
    x = float(np.ravel(x)[0])
    C, N = spec.C, spec.N
    w = u * dt
    first = C * th[0] * x * x
    cross = C * N * x * math.fsum(2 * rel[1:] * th[1:] * w)
    idx = np.arange(1, rel.size)
    lo = np.minimum.outer(idx, idx)
    hi = np.maximum.outer(idx, idx)
    kernel = rel[hi] / rel[lo] * th[hi]
    quad = C * N * N * float(np.sum(kernel * np.outer(w, w)))
    return first + cross + quad
