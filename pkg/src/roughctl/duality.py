"""Monte Carlo duality bounds for stochastic control.

Lower bounds come from simulating adapted feedback policies.  Upper bounds
come from relaxing adaptedness: each sampled Brownian rough path defines a
deterministic control problem, penalised so that the relaxation does not pay
off on average, and solved by :func:`roughctl.control.inner_sup_dp`.

Sign conventions.  Every penalty enters the pathwise objective additively as
``J + z``.  For martingale (Rogers) penalties ``z = -M^h`` with

    M^h = h(T, X_T) - h(t, x) - int (d_s + L^u) h(s, X_s) ds,

and for linear (Davis-Burstein) penalties ``z = -int <lambda*, mu> ds`` where
``lambda* = b_u^T DW`` and ``W(t, x) = g(Z_T)`` along the decoupled flow ``Z``.
Both have zero mean under adapted controls.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .columnar import fmt
from .control import ControlProblem, StateMesh, _dp_backward, shared_dp_values
from .errors import InvalidArgumentError, NumericalOverflowError, RoughCtlError
from .rde import (
    ControlPath,
    RdeSolution,
    VectorFieldSet,
    central_jacobian,
    davie_jacobian,
    integrate,
    DAVIE_SCHEME,
)
from .rough_path import GridRoughPath, TimeGrid, make_uniform_grid, sample_brownian_lift

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# penalties


@dataclass(frozen=True, eq=False)
class RogersPenalty:
    """Martingale penalty generated by ``h(t, x)``.

    ``h(t, x[..., e]) -> [...]``; ``h_t`` the same shape, ``dh -> [..., e]`` and
    ``d2h -> [..., e, e]``.  Missing derivatives use central differences.
    """

    h: Callable
    h_t: Callable | None = None
    dh: Callable | None = None
    d2h: Callable | None = None
    name: str = "rogers"

    def value(self, t, x):
        return np.asarray(self.h(t, x), dtype=float)

    def time_derivative(self, t, x):
        if self.h_t is not None:
            return np.asarray(self.h_t(t, x), dtype=float)
        s = 1e-5 * max(1.0, abs(t))
        return (self.value(t + s, x) - self.value(t - s, x)) / (2 * s)

    def grad(self, t, x):
        if self.dh is not None:
            return np.asarray(self.dh(t, x), dtype=float)
        return central_jacobian(lambda z: self.value(t, z)[..., None], np.asarray(x, float))[..., 0, :]

    def hess(self, t, x):
        if self.d2h is not None:
            return np.asarray(self.d2h(t, x), dtype=float)
        return central_jacobian(lambda z: self.grad(t, z), np.asarray(x, float))

    def consistency(self, probes, t=0.0) -> float:
        """Largest relative mismatch between supplied derivatives and finite differences."""
        probes = np.asarray(probes, float)
        fd = RogersPenalty(self.h)
        worst = 0.0
        for mine, ref in ((self.grad(t, probes), fd.grad(t, probes)),
                          (self.hess(t, probes), fd.hess(t, probes)),
                          (self.time_derivative(t, probes), fd.time_derivative(t, probes))):
            scale = max(1.0, float(np.max(np.abs(ref))))
            worst = max(worst, float(np.max(np.abs(mine - ref))) / scale)
        return worst

    def descriptor(self) -> dict:
        return {"kind": "rogers", "name": self.name}


@dataclass(frozen=True, eq=False)
class DavisBursteinPenalty:
    """Linear penalty built from a feedback ``u*(t, x[..., e]) -> [..., m]``.

    ``lambda_fn(eta)`` may supply a closed form returning ``lam(k, x) -> [..., m]``;
    otherwise ``lambda*`` is tabulated on the DP mesh by a backward recursion.
    ``running`` adds the running-cost extension (augmented state).
    """

    feedback: Callable
    lambda_fn: Callable | None = None
    running: bool = True
    name: str = "davis-burstein"

    def check_interior(self, problem: ControlProblem, probes, times) -> bool:
        lo, hi = problem.u_lower, problem.u_upper
        for t in times:
            u = np.asarray(self.feedback(t, np.asarray(probes, float)), float)
            if np.any(u <= lo) or np.any(u >= hi):
                return False
        return True

    def descriptor(self) -> dict:
        return {"kind": "davis-burstein", "name": self.name, "closed_form": self.lambda_fn is not None}


@dataclass(frozen=True, eq=False)
class CustomPenalty:
    """Penalty ``z`` given as a running rate and optional terminal term.

    ``make_rate(eta)`` returns ``rate(k, x, u) -> [...]`` and
    ``make_terminal(eta)`` returns ``term(x) -> [...]``; ``z`` is added to the
    objective.  ``evaluator(eta, mu, t0, x0)`` evaluates ``z`` along a control.
    """

    make_rate: Callable
    make_terminal: Callable | None = None
    evaluator: Callable | None = None
    name: str = "custom"

    def descriptor(self) -> dict:
        return {"kind": "custom", "name": self.name}


ZERO_PENALTY = CustomPenalty(lambda eta: (lambda k, x, u: 0.0), name="zero")


# ---------------------------------------------------------------------------
# Rogers penalties


def generator(h: RogersPenalty, problem: ControlProblem, t, x, u):
    """``(d_t + L^u) h`` with the Ito-corrected drift ``b + 1/2 sum D sigma_i sigma_i``."""
    vf = problem.vf
    x = np.asarray(x, float)
    s = vf.sigma(x)
    dh = h.grad(t, x)
    state_part = (h.time_derivative(t, x)
                  + 0.5 * np.einsum("...ai,...ab,...bi->...", s, h.hess(t, x), s)
                  + np.einsum("...a,...a->...", vf.stratonovich_correction(x), dh))
    return state_part + np.einsum("...a,...a->...", vf.b(x, u), dh)


def rogers_transform(h: RogersPenalty, problem: ControlProblem, x0, t0=None) -> ControlProblem:
    """Problem whose payoff is ``J - M^h`` for paths started at ``(t0, x0)``.

    ``f~ = f + (d_s + L^u) h`` and ``g~ = g - h(T, .) + h(t0, x0)``.
    """
    t0 = problem.t0 if t0 is None else t0
    x0 = np.atleast_1d(np.asarray(x0, float))
    anchor = float(h.value(t0, x0))
    f, g, T = problem.f, problem.g, problem.T

    def f_new(t, x, u):
        return f(t, x, u) + generator(h, problem, t, x, u)

    def g_new(x):
        return g(x) - h.value(T, x) + anchor

    return ControlProblem(problem.vf, f_new, g_new, problem.controls, problem.T, t0,
                          u_lower=problem.u_lower, u_upper=problem.u_upper)


@dataclass(frozen=True)
class RogersValue:
    increment: float
    rough: float

    @property
    def discrepancy(self) -> float:
        return self.increment - self.rough


def rogers_penalty_parts(h: RogersPenalty, traj: RdeSolution, mu: ControlPath, eta: GridRoughPath,
                         problem: ControlProblem) -> RogersValue:
    """``M^h`` along a trajectory, in increment form and in compensated rough-integral form."""
    n = traj.grid.n
    k0 = eta.n - n
    if not np.array_equal(traj.grid.times, eta.grid.times[k0:]):
        raise InvalidArgumentError("trajectory grid must be a tail of the driver grid")
    vf = problem.vf
    times = traj.grid.times
    xs = traj.states[:-1]
    us = mu.values[k0:]
    dt = traj.grid.dt
    inc, area = eta.inc[k0:], eta.area[k0:]
    gen = np.array([float(generator(h, problem, times[k], xs[k], us[k])) for k in range(n)])
    incr = float(h.value(times[-1], traj.states[-1]) - h.value(times[0], traj.states[0])) - math.fsum(gen * dt)

    dh = np.array([h.grad(times[k], xs[k]) for k in range(n)])          # (n, e)
    d2h = np.array([h.hess(times[k], xs[k]) for k in range(n)])         # (n, e, e)
    s = vf.sigma(xs)                                                     # (n, e, d)
    ds = vf.jac_sigma(xs)                                                # (n, d, e, e)
    first = np.einsum("ka,kai,ki->k", dh, s, inc)
    second = np.einsum("kai,kab,kbj,kij->k", s, d2h, s, area)
    second = second + np.einsum("ka,kjab,kbi,kij->k", dh, ds, s, area)
    corr = -np.einsum("ka,ka->k", vf.stratonovich_correction(xs), dh)
    corr = corr - 0.5 * np.einsum("kai,kab,kbi->k", s, d2h, s)
    rough = math.fsum(first + second) + math.fsum(corr * dt)
    return RogersValue(incr, rough)


def rogers_penalty_value(h: RogersPenalty, traj: RdeSolution, mu: ControlPath, eta: GridRoughPath,
                         problem: ControlProblem, tol: float | None = None) -> float:
    """Increment form of ``M^h``; warns when the rough-integral form disagrees by more than ``tol``."""
    parts = rogers_penalty_parts(h, traj, mu, eta, problem)
    tol = 10.0 * math.sqrt(float(np.max(traj.grid.dt))) if tol is None else tol
    if abs(parts.discrepancy) > tol * max(1.0, abs(parts.increment)):
        logger.warning("Rogers penalty forms differ by %.3g", parts.discrepancy)
    return parts.increment


# ---------------------------------------------------------------------------
# Davis-Burstein penalties


def _z_fields(vf: VectorFieldSet, feedback, f=None):
    """Drift of the decoupled flow and the matching running term."""

    def drift(t, x):
        u = np.asarray(feedback(t, x), float)
        return vf.b(x, u) - np.einsum("...am,...m->...a", vf.jac_b_u(x, u), u)

    def run(t, x):
        u = np.asarray(feedback(t, x), float)
        fu = central_jacobian(lambda v: np.asarray(f(t, x, v), float)[..., None], u)[..., 0, :]
        return np.asarray(f(t, x, u), float) - np.sum(fu * u, axis=-1)

    return drift, (run if f is not None else None)


def _frozen_vf(vf, drift, t):
    return VectorFieldSet(lambda x, u: drift(t, x), vf.sigma, vf.e, vf.d, vf.m, d_sigma=vf.d_sigma,
                          d2_sigma=vf.d2_sigma)


def db_solve_Z(t, x, feedback, vf: VectorFieldSet, eta: GridRoughPath) -> RdeSolution:
    """Davie solution of ``dZ = [b(Z,u*) - b_u(Z,u*) u*] dt + sigma(Z) d eta`` from ``(t, x)``."""
    drift, _ = _z_fields(vf, feedback)
    k0 = eta.grid.index_of(t)
    x = np.atleast_1d(np.asarray(x, float))
    states, _ = integrate(x, vf, eta.inc, eta.area, eta.grid.times, drift=lambda s, z, u: drift(s, z), start=k0)
    return RdeSolution(TimeGrid(eta.grid.times[k0:]), states, dict(DAVIE_SCHEME))


def _w_and_dw(t, x, feedback, vf, g, eta, f=None, dg=None):
    drift, run = _z_fields(vf, feedback, f)
    z = db_solve_Z(t, x, feedback, vf, eta)
    k0 = eta.n - z.grid.n
    times = z.grid.times
    jac = np.eye(vf.e)
    w = 0.0
    dw_run = np.zeros(vf.e)
    for k in range(z.grid.n):
        zk = z.states[k]
        dt = times[k + 1] - times[k]
        if run is not None:
            w += float(run(times[k], zk)) * dt
            grad = central_jacobian(lambda y: np.asarray(run(times[k], y), float)[..., None], zk)[0]
            dw_run += (grad @ jac) * dt
        step = davie_jacobian(zk, _frozen_vf(vf, drift, times[k]), np.zeros(vf.m), eta.inc[k0 + k],
                              eta.area[k0 + k], dt)
        jac = step @ jac
    zT = z.states[-1]
    dgT = np.asarray(dg(zT), float) if dg is not None else central_jacobian(lambda y: np.asarray(g(y), float)[..., None], zT)[0]
    return w + float(g(zT)), dgT @ jac + dw_run


def db_lambda_star(t, x, feedback, vf: VectorFieldSet, g, eta: GridRoughPath, f=None, dg=None,
                   mode: str = "variational") -> np.ndarray:
    """``lambda*(t, x; eta) = b_u^T DW (+ f_u)`` with ``W = g(Z_T) (+ int (f - f_u u*)(Z))``.

    ``mode="variational"`` propagates the tangent flow of the Davie scheme;
    ``mode="fd"`` differentiates ``W`` by central differences in ``x``.
    """
    x = np.atleast_1d(np.asarray(x, float))
    if mode == "variational":
        _, dw = _w_and_dw(t, x, feedback, vf, g, eta, f, dg)
    elif mode == "fd":
        dw = central_jacobian(lambda y: np.array([_w_and_dw(t, yy, feedback, vf, g, eta, f)[0]
                                                  for yy in np.atleast_2d(y)]).reshape(np.shape(y)[:-1] + (1,)),
                              x)[0]
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    u = np.asarray(feedback(t, x), float)
    lam = vf.jac_b_u(x, u).T @ dw
    if f is not None:
        lam = lam + central_jacobian(lambda v: np.asarray(f(t, x, v), float)[..., None], u)[0]
    return lam


def db_lambda_grid(feedback, vf: VectorFieldSet, g, eta: GridRoughPath, mesh: StateMesh, t0=0.0, f=None):
    """``lambda*(t_k, x)`` at every mesh node and grid time from ``t0``: array ``(n - k0, N, m)``.

    Backward recursion ``DW_k(x) = J_k(x)^T DW_{k+1}(Z_step(x)) + D run_k(x) dt``
    with multilinear interpolation of ``DW_{k+1}`` (clamped at the mesh edge).
    """
    drift, run = _z_fields(vf, feedback, f)
    k0 = eta.grid.index_of(t0)
    X = mesh.points
    times = eta.grid.times
    dw = central_jacobian(lambda y: np.asarray(g(y), float)[..., None], X)[:, 0, :]
    out = np.empty((eta.n - k0, X.shape[0], vf.m))
    for k in range(eta.n - 1, k0 - 1, -1):
        dt = times[k + 1] - times[k]
        nxt = X + drift(times[k], X) * dt + vf.noise_term(X, eta.inc[k], eta.area[k])
        dw_next = np.column_stack([mesh.interpolate(dw[:, a], nxt)[0] for a in range(vf.e)])
        jac = davie_jacobian(X, _frozen_vf(vf, drift, times[k]), np.zeros(vf.m), eta.inc[k], eta.area[k], dt)
        dw = np.einsum("nab,na->nb", jac, dw_next)
        if run is not None:
            dw = dw + central_jacobian(lambda y: np.asarray(run(times[k], y), float)[..., None], X)[:, 0, :] * dt
        u = np.asarray(feedback(times[k], X), float)
        lam = np.einsum("nam,na->nm", vf.jac_b_u(X, u), dw)
        if f is not None:
            lam = lam + central_jacobian(lambda v: np.asarray(f(times[k], X, v), float)[..., None], u)[:, 0, :]
        out[k - k0] = lam
    return out


def db_penalty_value(lam, traj: RdeSolution, mu: ControlPath, grid: TimeGrid) -> float:
    """``sum_k <lambda(k, X_k), mu_k> dt_k`` with ``lam(k, x) -> (m,)`` indexed on ``grid``."""
    n = traj.grid.n
    k0 = grid.n - n
    if not np.array_equal(traj.grid.times, grid.times[k0:]):
        raise InvalidArgumentError("trajectory grid must be a tail of the penalty grid")
    dt = traj.grid.dt
    terms = [float(np.dot(lam(k0 + k, traj.states[k]), mu.values[k0 + k])) * dt[k] for k in range(n)]
    return math.fsum(terms)


def concavity_check(vf: VectorFieldSet, g, feedback, etas, probes, u_grid, f=None, tol=1e-9) -> dict:
    """Discrete midpoint concavity of ``u -> <b(x, u), DW(t, x; eta)>`` on ``u_grid`` (scalar u)."""
    if vf.m != 1:
        raise InvalidArgumentError("concavity_check handles scalar controls")
    u = np.sort(np.asarray(u_grid, float).ravel())
    counts = {"strict": 0, "affine": 0, "concave": 0, "violation": 0}
    for eta in etas:
        for t, x in probes:
            x = np.atleast_1d(np.asarray(x, float))
            _, dw = _w_and_dw(t, x, feedback, vf, g, eta, f)
            phi = vf.b(np.broadcast_to(x, (u.size, vf.e)), u[:, None]) @ dw
            second = phi[2:] - 2 * phi[1:-1] + phi[:-2]
            scale = tol * max(1.0, float(np.max(np.abs(phi))))
            if np.all(np.abs(second) <= scale):
                counts["affine"] += 1
            elif np.any(second > scale):
                counts["violation"] += 1
            elif np.all(second < -scale):
                counts["strict"] += 1
            else:
                counts["concave"] += 1
    total = sum(counts.values())
    return {**counts, "total": total, "violation_fraction": counts["violation"] / max(total, 1)}


# ---------------------------------------------------------------------------
# sampling and deterministic parallel map


@dataclass(frozen=True)
class SamplerSettings:
    """Brownian rough paths on a uniform grid; path ``i`` uses stream ``(seed, i)``."""

    T: float
    n: int
    seed: int
    substeps: int = 4
    d: int = 1
    t0: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.substeps < 1 or self.d < 1:
            raise InvalidArgumentError("grid size, substeps and dimension must be positive")
        if int(self.seed) < 0:
            raise InvalidArgumentError("seed must be a non-negative integer")

    @property
    def grid(self) -> TimeGrid:
        return make_uniform_grid(self.T, self.n, self.t0)

    def sample(self, i: int) -> GridRoughPath:
        rng = np.random.default_rng([int(self.seed), int(i)])
        return sample_brownian_lift(rng, self.grid, self.substeps, self.d)


CHUNK = 64
_TASK = None


def _safe(task, i):
    try:
        return task(i), None
    except (RoughCtlError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _run_chunk(bounds):
    lo, hi = bounds
    return _TASK(lo, hi)


def map_chunks(chunk_task, n_paths: int, workers: int = 1, chunk: int = CHUNK):
    """Concatenated ``chunk_task(lo, hi)`` lists over fixed-size index chunks.

    Chunk boundaries depend only on ``n_paths`` and ``chunk``, never on
    ``workers``, so results are identical for any worker count.  With
    ``workers > 1`` chunks run in forked processes.
    """
    global _TASK
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be positive")
    chunks = [(lo, min(lo + chunk, n_paths)) for lo in range(0, n_paths, chunk)]
    if workers <= 1 or len(chunks) <= 1 or "fork" not in mp.get_all_start_methods():
        parts = [chunk_task(lo, hi) for lo, hi in chunks]
    else:
        _TASK = chunk_task
        try:
            with mp.get_context("fork").Pool(min(workers, len(chunks))) as pool:
                parts = pool.map(_run_chunk, chunks, chunksize=1)
        finally:
            _TASK = None
    return [r for part in parts for r in part]


def map_paths(task, n_paths: int, workers: int = 1, chunk: int = CHUNK):
    """``[(result, error), ...]`` for ``task(i)``, ``i < n_paths``, in index order."""
    return map_chunks(lambda lo, hi: [_safe(task, i) for i in range(lo, hi)], n_paths, workers, chunk)


@dataclass(frozen=True)
class Estimate:
    mean: float
    se: float
    n_paths: int
    failures: int = 0


def summarize(values, failures: int = 0) -> Estimate:
    """Mean and standard error with compensated summation (order-fixed)."""
    v = [float(x) for x in values]
    n = len(v)
    if n == 0:
        raise NumericalOverflowError("every path failed")
    mean = math.fsum(v) / n
    var = math.fsum((x - mean) ** 2 for x in v) / (n - 1) if n > 1 else 0.0
    return Estimate(mean, math.sqrt(var / n), n, failures)


def _collect(results, max_failure_fraction):
    values = [r for r, err in results if err is None]
    errors = [err for r, err in results if err is not None]
    if results and len(errors) / len(results) > max_failure_fraction:
        raise NumericalOverflowError(f"{len(errors)} of {len(results)} paths failed; first: {errors[0]}")
    return values, len(errors)


@dataclass
class DualityReport:
    lower: Estimate | None = None
    upper: Estimate | None = None
    master_seed: int = 0
    grid_n: int = 0
    substeps: int = 0
    mesh_nodes: tuple = ()
    controls: int = 0
    penalty: dict = field(default_factory=dict)
    fixture: str = "custom"

    CSV_COLUMNS = ("fixture", "n_paths", "grid_n", "mesh_size", "lower_mean", "lower_se",
                   "upper_mean", "upper_se", "gap", "master_seed")

    @property
    def gap(self) -> float:
        if self.lower is None or self.upper is None:
            return float("nan")
        return self.upper.mean - self.lower.mean

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gap"] = self.gap
        out["mesh_nodes"] = list(self.mesh_nodes)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def csv_row(self) -> str:
        lo, up = self.lower, self.upper
        n_paths = max(lo.n_paths if lo else 0, up.n_paths if up else 0)
        nan = float("nan")
        vals = [self.fixture, str(n_paths), str(self.grid_n), str(int(np.prod(self.mesh_nodes) if self.mesh_nodes else 0)),
                fmt(lo.mean if lo else nan), fmt(lo.se if lo else nan),
                fmt(up.mean if up else nan), fmt(up.se if up else nan), fmt(self.gap), str(self.master_seed)]
        return ",".join(vals)


# ---------------------------------------------------------------------------
# estimators


def _closed_loop(problem, policy, eta, x0):
    times = eta.grid.times
    k0 = eta.grid.index_of(problem.t0)
    states, used = integrate(np.atleast_1d(np.asarray(x0, float)), problem.vf, eta.inc, eta.area, times,
                             feedback=policy, start=k0)
    return RdeSolution(TimeGrid(times[k0:]), states, dict(DAVIE_SCHEME)), used


def closed_loop_payoff(problem: ControlProblem, policy, eta: GridRoughPath, x0):
    """Payoff of the adapted feedback ``policy(t, x)`` along ``eta`` and the realised path."""
    traj, used = _closed_loop(problem, policy, eta, x0)
    times = traj.grid.times
    run = math.fsum(float(problem.f(times[k], traj.states[k], used[k])) * (times[k + 1] - times[k])
                    for k in range(traj.grid.n))
    k0 = eta.n - traj.grid.n
    ctrl = np.vstack([np.zeros((k0, problem.vf.m)), used]) if k0 else used
    return run + float(problem.g(traj.terminal)), traj, ControlPath(eta.grid, ctrl)


def _batch_payoffs(problem, policy, sampler, x0, lo, hi):
    etas = [sampler.sample(i) for i in range(lo, hi)]
    inc = np.stack([p.inc for p in etas], axis=1)
    area = np.stack([p.area for p in etas], axis=1)
    times = etas[0].grid.times
    k0 = etas[0].grid.index_of(problem.t0)
    x = np.broadcast_to(np.atleast_1d(np.asarray(x0, float)), (hi - lo, problem.vf.e))
    states, used = integrate(x, problem.vf, inc, area, times, feedback=policy, start=k0)
    total = np.zeros(hi - lo)
    for k in range(used.shape[0]):
        total += problem.f(times[k0 + k], states[k], used[k]) * (times[k0 + k + 1] - times[k0 + k])
    return total + problem.g(states[-1])


def mc_lower_bound(problem: ControlProblem, policy, sampler: SamplerSettings, n_paths: int, x0,
                   workers: int = 1, max_failure_fraction: float = 0.01) -> Estimate:
    """Average payoff of an adapted feedback policy over sampled paths.

    Paths are simulated in vectorised chunks; a chunk that fails numerically
    is re-run path by path so that failures are attributed individually.
    """
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be positive")

    def chunk_task(lo, hi):
        try:
            vals = _batch_payoffs(problem, policy, sampler, x0, lo, hi)
            if np.all(np.isfinite(vals)):
                return [(float(v), None) for v in vals]
        except (RoughCtlError, FloatingPointError):
            pass
        return [_safe(lambda i: closed_loop_payoff(problem, policy, sampler.sample(i), x0)[0], i)
                for i in range(lo, hi)]

    values, failed = _collect(map_chunks(chunk_task, n_paths, workers), max_failure_fraction)
    return summarize(values, failed)


def default_mesh(problem: ControlProblem, x0, nodes: int = 401, stds: float = 6.0) -> StateMesh:
    """Box around ``x0`` wide enough for ``stds`` driver standard deviations plus drift reach."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    vf = problem.vf
    tau = problem.T - problem.t0
    sig = float(np.max(np.abs(vf.sigma(x0))))
    reach = tau * float(np.max(np.abs(vf.b(np.broadcast_to(x0, (problem.controls.shape[0], vf.e)),
                                            problem.controls))))
    return StateMesh.around(x0, stds * math.sqrt(tau) * max(1.0, sig) + reach, nodes)


def penalized_inner_value(problem: ControlProblem, penalty, eta: GridRoughPath, mesh: StateMesh, x0) -> float:
    """Pathwise value of ``J + z`` for one driver by backward DP (no forward pass)."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    k0 = eta.grid.index_of(problem.t0)
    running = None
    inner = problem
    if isinstance(penalty, RogersPenalty):
        inner = rogers_transform(penalty, problem, x0)
    elif isinstance(penalty, DavisBursteinPenalty):
        if penalty.lambda_fn is not None:
            lam = penalty.lambda_fn(eta)
            X = mesh.points
            table = np.stack([np.asarray(lam(k, X), float).reshape(X.shape[0], -1) for k in range(k0, eta.n)])
        else:
            f = problem.f if penalty.running else None
            table = db_lambda_grid(penalty.feedback, problem.vf, problem.g, eta, mesh, problem.t0, f)

        def running(k, x, u):
            return -np.sum(table[k - k0][None] * u, axis=-1)
    elif isinstance(penalty, CustomPenalty):
        rate = penalty.make_rate(eta)
        running = rate
        if penalty.make_terminal is not None:
            term = penalty.make_terminal(eta)
            g = problem.g
            inner = ControlProblem(problem.vf, problem.f, lambda x: g(x) + term(x), problem.controls,
                                   problem.T, problem.t0, u_lower=problem.u_lower, u_upper=problem.u_upper)
    else:
        raise InvalidArgumentError(f"unsupported penalty {penalty!r}")
    if isinstance(penalty, DavisBursteinPenalty) and mesh.points.shape[0] != table.shape[1]:
        raise InvalidArgumentError("lambda table does not match the mesh")
    values, _, _ = _dp_backward(inner, eta, mesh, k0, running)
    return float(mesh.interpolate(values[0], x0)[0])


def mc_upper_bound(problem: ControlProblem, penalty, sampler: SamplerSettings, n_paths: int, x0,
                   mesh: StateMesh | None = None, workers: int = 1,
                   max_failure_fraction: float = 0.01) -> Estimate:
    """Average over sampled drivers of the penalised pathwise supremum."""
    if n_paths < 1:
        raise InvalidArgumentError("n_paths must be positive")
    mesh = default_mesh(problem, x0) if mesh is None else mesh

    def task(i):
        return penalized_inner_value(problem, penalty, sampler.sample(i), mesh, x0)

    if isinstance(penalty, RogersPenalty) or penalty is ZERO_PENALTY:
        # driver-free running gain: sweep a whole chunk at once
        inner = rogers_transform(penalty, problem, x0) if isinstance(penalty, RogersPenalty) else problem

        def chunk_task(lo, hi):
            try:
                vals = shared_dp_values(inner, [sampler.sample(i) for i in range(lo, hi)], mesh, x0)
                if np.all(np.isfinite(vals)):
                    return [(v, None) for v in vals]
            except (RoughCtlError, FloatingPointError):
                pass
            return [_safe(task, i) for i in range(lo, hi)]

        results = map_chunks(chunk_task, n_paths, workers)
    else:
        results = map_paths(task, n_paths, workers)
    values, failed = _collect(results, max_failure_fraction)
    return summarize(values, failed)


def duality_bounds(problem: ControlProblem, policy, penalty, sampler: SamplerSettings, n_paths: int, x0,
                   mesh: StateMesh | None = None, workers: int = 1, fixture: str = "custom") -> DualityReport:
    mesh = default_mesh(problem, x0) if mesh is None else mesh
    lower = mc_lower_bound(problem, policy, sampler, n_paths, x0, workers)
    upper = mc_upper_bound(problem, penalty, sampler, n_paths, x0, mesh, workers)
    return DualityReport(lower, upper, sampler.seed, sampler.n, sampler.substeps, mesh.nodes,
                         problem.controls.shape[0], penalty.descriptor(), fixture)


@dataclass(frozen=True)
class ZeroMeanReport:
    label: str
    mean: float
    se: float
    n_paths: int

    @property
    def ratio(self) -> float:
        if self.se == 0.0:
            return 0.0 if self.mean == 0.0 else math.inf
        return abs(self.mean) / self.se


def penalty_zero_mean_check(penalty, problem: ControlProblem, sampler: SamplerSettings, n_paths: int,
                            x0=None, policy=None, probes=(), workers: int = 1) -> list:
    """Monte Carlo means of penalties that should vanish on average.

    Rogers: ``M^h`` along the closed loop of the adapted ``policy`` from ``x0``.
    Davis-Burstein: each component of ``lambda*(t, x; B)`` at the ``(t, x)`` probes.
    """
    if isinstance(penalty, RogersPenalty):
        if policy is None or x0 is None:
            raise InvalidArgumentError("Rogers check needs an adapted policy and a start point")

        def task(i):
            eta = sampler.sample(i)
            _, traj, mu = closed_loop_payoff(problem, policy, eta, x0)
            return rogers_penalty_parts(penalty, traj, mu, eta, problem).increment

        values, _ = _collect(map_paths(task, n_paths, workers), 0.01)
        est = summarize(values)
        return [ZeroMeanReport("rogers", est.mean, est.se, est.n_paths)]
    if isinstance(penalty, DavisBursteinPenalty):
        out = []
        for t, x in probes:
            def task(i, t=t, x=x):
                eta = sampler.sample(i)
                if penalty.lambda_fn is not None:
                    k = eta.grid.index_of(t)
                    return np.asarray(penalty.lambda_fn(eta)(k, np.atleast_1d(x)), float).ravel()
                f = problem.f if penalty.running else None
                return db_lambda_star(t, x, penalty.feedback, problem.vf, problem.g, eta, f=f, dg=problem.dg)

            values, _ = _collect(map_paths(task, n_paths, workers), 0.01)
            arr = np.array(values)
            for j in range(arr.shape[1]):
                est = summarize(arr[:, j])
                out.append(ZeroMeanReport(f"lambda[{j}] at t={t}, x={np.ravel(x).tolist()}", est.mean, est.se,
                                          est.n_paths))
        return out
    if isinstance(penalty, CustomPenalty) and penalty.make_rate is ZERO_PENALTY.make_rate:
        return [ZeroMeanReport("zero", 0.0, 0.0, n_paths)]
    raise InvalidArgumentError("zero-mean check needs a Rogers or Davis-Burstein penalty")


__all__ = [
    "RogersPenalty", "DavisBursteinPenalty", "CustomPenalty", "ZERO_PENALTY", "generator", "rogers_transform",
    "rogers_penalty_parts", "rogers_penalty_value", "db_solve_Z", "db_lambda_star", "db_lambda_grid",
    "db_penalty_value", "concavity_check", "SamplerSettings", "map_paths", "Estimate", "summarize",
    "DualityReport", "closed_loop_payoff", "mc_lower_bound", "mc_upper_bound", "default_mesh",
    "penalized_inner_value", "duality_bounds", "ZeroMeanReport", "penalty_zero_mean_check",
]
