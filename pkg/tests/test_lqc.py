"""Tests for the linear-quadratic oracles and their explicit penalties."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from roughctl import duality as du
from roughctl import lqc
from roughctl.control import payoff
from roughctl.errors import FiniteEscapeError, InvalidArgumentError
from roughctl.rde import ControlPath, solve_controlled_rde
from roughctl.rough_path import make_uniform_grid, sample_brownian_lift

ADD = lqc.ADDITIVE_FIXTURE
MUL = lqc.MULTIPLICATIVE_FIXTURE


def reference_riccati(rhs, G, T, shape=()):
    """High-accuracy backward solve of ``P' = rhs(P)`` plus ``int_t^T Tr P`` with DOP853."""
    size = int(np.prod(shape)) if shape else 1

    def f(t, y):
        P = y[:size].reshape(shape) if shape else y[0]
        dP = np.atleast_1d(rhs(P)).ravel()
        tr = np.trace(P) if shape else P
        return np.append(dP, -tr)

    y0 = np.append(np.atleast_1d(G).ravel(), 0.0)
    return solve_ivp(f, (T, 0.0), y0, method="DOP853", rtol=1e-12, atol=1e-13, dense_output=True)


def additive_spec(**kw):
    return lqc.AdditiveLqcSpec(**{**ADD, **kw})


def mult_spec(**kw):
    return lqc.MultiplicativeLqcSpec(**{**MUL, **kw})


# --- specs -----------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        lqc.AdditiveLqcSpec(M=np.eye(2), N=np.ones((2, 1)), Q=np.eye(3), R=-1.0, G=np.eye(2))
    with pytest.raises(InvalidArgumentError):
        additive_spec(R=0.0)
    with pytest.raises(InvalidArgumentError):
        mult_spec(R=0.0)
    with pytest.raises(InvalidArgumentError):
        lqc.riccati_solve_additive(additive_spec(), n_steps=0)


# --- Riccati ---------------------------------------------------------------

def test_zero_weights_give_zero_solution():
    sol = lqc.riccati_solve_additive(additive_spec(Q=0.0, G=0.0), 64)
    assert not np.any(sol.P)
    sol = lqc.riccati_solve_multiplicative(mult_spec(Q=0.0, G=0.0), 64)
    assert not np.any(sol.P)


def test_decoupled_riccati_is_linear():
    # With M = N = 0 the equation is P' = -Q, so P(t) = G + Q (T - t).
    Q, G = np.array([[-1.0, 0.2], [0.2, -0.5]]), np.array([[-2.0, 0.0], [0.0, -1.0]])
    spec = lqc.AdditiveLqcSpec(M=np.zeros((2, 2)), N=np.zeros((2, 1)), Q=Q, R=-1.0, G=G)
    sol = lqc.riccati_solve_additive(spec, 32)
    for t, P in zip(sol.grid.times, sol.P):
        assert np.allclose(P, G + Q * (1.0 - t), atol=1e-13)


def test_additive_fixture_matches_reference():
    spec = additive_spec()
    sol = lqc.riccati_solve_additive(spec)
    ref = reference_riccati(sol.rhs, spec.G, spec.T, (1, 1))
    assert sol.P[0, 0, 0] == pytest.approx(ref.y[0, -1], abs=1e-8)
    assert sol.trace_integral[0] == pytest.approx(ref.y[1, -1], abs=1e-8)
    assert sol.P[-1, 0, 0] == spec.G[0, 0]


def test_matrix_riccati_symmetric_and_accurate():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    Q = -(A @ A.T) - np.eye(3)
    spec = lqc.AdditiveLqcSpec(M=0.3 * rng.normal(size=(3, 3)), N=rng.normal(size=(3, 2)), Q=Q,
                               R=-np.eye(2), G=-np.eye(3))
    sol = lqc.riccati_solve_additive(spec, 2048)
    assert np.max(np.abs(sol.P - np.swapaxes(sol.P, 1, 2))) <= 1e-12
    ref = reference_riccati(sol.rhs, spec.G, spec.T, (3, 3))
    assert np.allclose(sol.P[0], ref.y[:9, -1].reshape(3, 3), atol=1e-8)
    assert np.array_equal(sol.P[-1], spec.G)


def test_multiplicative_fixture_matches_reference():
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec)
    ref = reference_riccati(sol.rhs, spec.G, spec.T)
    assert sol.P[0] == pytest.approx(ref.y[0, -1], abs=1e-8)
    assert sol.P[-1] == spec.G


def test_multiplicative_without_noise_is_additive_riccati():
    a = lqc.riccati_solve_additive(additive_spec(), 512)
    m = lqc.riccati_solve_multiplicative(mult_spec(C=0.0), 512)
    # The multiplicative equation carries 2PM for the scalar M'P + PM.
    assert np.allclose(a.P[:, 0, 0], m.P, atol=1e-13)


def test_finite_escape_detected():
    # P' = -P^2 from P(T) = 2 blows up at T - t = 1/2.
    spec = lqc.AdditiveLqcSpec(M=0.0, N=1.0, Q=0.0, R=-1.0, G=2.0)
    with pytest.raises(FiniteEscapeError):
        lqc.riccati_solve_additive(spec, 4096)


def test_interpolation_and_range():
    sol = lqc.riccati_solve_additive(additive_spec(), 16)
    t = 0.5 * (sol.grid.times[3] + sol.grid.times[4])
    assert np.allclose(sol.P_at(t), 0.5 * (sol.P[3] + sol.P[4]))
    with pytest.raises(InvalidArgumentError):
        sol.P_at(1.5)


# --- value and feedback ----------------------------------------------------

def test_value_at_origin_is_half_trace_integral():
    sol = lqc.riccati_solve_additive(additive_spec())
    spec = additive_spec()
    assert lqc.lqc_additive_value(sol, 0.0, [0.0]) == pytest.approx(0.5 * sol.trace_integral[0])
    assert np.all(lqc.lqc_additive_feedback(sol, spec, 0.3, np.zeros(1)) == 0)


def test_zero_riccati_gives_zero_value_and_feedback():
    spec = additive_spec(Q=0.0, G=0.0)
    sol = lqc.riccati_solve_additive(spec, 32)
    assert lqc.lqc_additive_value(sol, 0.2, [1.3]) == 0.0
    assert np.all(lqc.lqc_additive_feedback(sol, spec, 0.2, np.array([1.3])) == 0)


def test_fixture_value():
    sol = lqc.riccati_solve_additive(additive_spec())
    v = lqc.lqc_additive_value(sol, 0.0, [1.0])
    assert v == pytest.approx(0.5 * sol.P[0, 0, 0] + 0.5 * sol.trace_integral[0])
    assert v < 0


def test_value_out_of_range():
    sol = lqc.riccati_solve_additive(additive_spec(), 16)
    with pytest.raises(InvalidArgumentError):
        lqc.lqc_additive_value(sol, -0.1, [1.0])


# --- additive penalties ----------------------------------------------------

def test_lambda1_trivial_cases():
    spec = additive_spec()
    sol = lqc.riccati_solve_additive(spec, 256)
    eta = sample_brownian_lift(0, make_uniform_grid(1.0, 64))
    assert not np.any(lqc.lambda1_additive(sol, spec, eta.zero_like()).values)
    zero = lqc.riccati_solve_additive(additive_spec(Q=0.0, G=0.0), 64)
    assert not np.any(lqc.lambda1_additive(zero, spec, eta).values)


def test_lambda_star_matches_closed_form():
    spec = additive_spec()
    sol = lqc.riccati_solve_additive(spec)
    eta = sample_brownian_lift(4, make_uniform_grid(1.0, 256))
    p = lqc.additive_problem(spec, np.zeros((1, 1)))
    fb = lambda t, x: lqc.lqc_additive_feedback(sol, spec, t, x)  # noqa: E731
    lam1 = lqc.lambda1_additive(sol, spec, eta)
    for t, x in ((0.0, 1.0), (0.25, -0.5), (0.75, 2.0)):
        k = eta.grid.index_of(t)
        ref = -lam1.values[k]
        for mode in ("variational", "fd"):
            got = du.db_lambda_star(t, [x], fb, p.vf, p.g, eta, f=p.f, mode=mode)
            assert got == pytest.approx(ref, rel=5e-3, abs=1e-3 * np.max(np.abs(lam1.values)))


def test_gamma_r_trivial():
    spec = additive_spec(Q=0.0, G=0.0)
    sol = lqc.riccati_solve_additive(spec, 64)
    eta = sample_brownian_lift(0, make_uniform_grid(1.0, 32)).zero_like()
    assert lqc.gammaR_additive(sol, spec, eta, 0.0, [1.0]) == 0.0


def _additive_parts(seed, n_controls=5, n=256):
    spec = additive_spec()
    sol = lqc.riccati_solve_additive(spec)
    prob = lqc.additive_problem(spec, np.zeros((1, 1)))
    eta = sample_brownian_lift(seed, make_uniform_grid(1.0, n))
    h = lqc.additive_value_penalty(sol)
    lam = lqc.additive_lambda_fn(sol, spec)(eta)
    rng = np.random.default_rng([seed, 99])
    diffs = []
    for _ in range(n_controls):
        mu = ControlPath(eta.grid, rng.uniform(-1, 1) + 0.5 * rng.normal(size=n))
        traj = solve_controlled_rde([1.0], 0.0, prob.vf, mu, eta)
        z2 = du.rogers_penalty_value(h, traj, mu, eta, prob)
        z1 = du.db_penalty_value(lam, traj, mu, eta.grid)
        diffs.append(z2 - z1)
    return np.array(diffs), lqc.gammaR_additive(sol, spec, eta, 0.0, [1.0])


@pytest.mark.parametrize("seed", [0, 1])
def test_penalty_difference_is_control_free_and_equals_gamma_r(seed):
    diffs, gamma = _additive_parts(seed)
    scale = max(1.0, abs(gamma))
    assert np.std(diffs, ddof=1) <= 1e-2 * scale
    assert abs(np.mean(diffs) - gamma) <= 1e-2 * scale


def test_gamma_r_has_zero_mean():
    spec = additive_spec()
    sol = lqc.riccati_solve_additive(spec, 1024)
    s = du.SamplerSettings(T=1.0, n=64, seed=5)
    vals = np.array([lqc.gammaR_additive(sol, spec, s.sample(i), 0.0, [1.0]) for i in range(400)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_pathwise_optimum_beats_perturbations():
    spec = additive_spec()
    eta = sample_brownian_lift(2, make_uniform_grid(1.0, 64))
    best = lqc.pathwise_additive_optimum(spec, eta, [1.0])
    prob = lqc.additive_problem(spec, np.zeros((1, 1)))
    assert payoff(prob, best.control, eta, 0.0, [1.0]) == pytest.approx(best.value, abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        mu = ControlPath(eta.grid, best.control.values + 0.1 * rng.normal(size=(64, 1)))
        assert payoff(prob, mu, eta, 0.0, [1.0]) < best.value


# --- multiplicative penalties ----------------------------------------------

def test_propagator_deterministic_exponential():
    spec = mult_spec(C=0.0)
    eta = sample_brownian_lift(0, make_uniform_grid(1.0, 4096)).zero_like()
    gam = lqc.gamma_propagator(0.25, eta, spec)
    # The drift enters through an Euler step: relative error about M^2 (s - t) dt / 2.
    assert np.allclose(gam.values, np.exp(spec.M * (gam.grid.times - 0.25)), rtol=1e-5)


def test_propagator_cocycle():
    spec = mult_spec()
    eta = sample_brownian_lift(1, make_uniform_grid(1.0, 128))
    full = lqc.gamma_propagator(0.0, eta, spec).values
    k = eta.grid.index_of(0.5)
    tail = lqc.gamma_propagator(0.5, eta, spec).values
    assert np.allclose(full[k:], tail * full[k], rtol=1e-13)
    traj = solve_controlled_rde([1.0], 0.0, lqc.multiplicative_vector_fields(spec),
                                ControlPath.constant(eta.grid, 0.0), eta)
    assert np.allclose(traj.states[:, 0], full, rtol=1e-13)


def test_theta_vanishes_with_zero_riccati():
    spec = mult_spec(Q=0.0, G=0.0)
    sol = lqc.riccati_solve_multiplicative(spec, 64)
    eta = sample_brownian_lift(0, make_uniform_grid(1.0, 32))
    assert not np.any(lqc.theta(eta, sol, spec).values)


def test_z_trivial_cases():
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec)
    eta = sample_brownian_lift(0, make_uniform_grid(1.0, 64))
    zero = ControlPath.constant(eta.grid, 0.0)
    th = lqc.theta(eta, sol, spec).values
    assert lqc.z1_multiplicative(spec, sol, eta, 1.3, zero) == 0.0
    assert lqc.z2_multiplicative(spec, sol, eta, 1.3, zero) == pytest.approx(spec.C * th[0] * 1.69)
    flat = mult_spec(C=0.0)
    mu = ControlPath(eta.grid, np.linspace(-1, 1, 64))
    sol0 = lqc.riccati_solve_multiplicative(flat)
    assert lqc.z1_multiplicative(flat, sol0, eta, 1.3, mu) == 0.0
    assert lqc.z2_multiplicative(flat, sol0, eta, 1.3, mu) == 0.0


def test_duhamel_state_reproduces_davie_trajectory():
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec, 1024)
    eta = sample_brownian_lift(2, make_uniform_grid(1.0, 128))
    rng = np.random.default_rng(0)
    mu = ControlPath(eta.grid, rng.normal(size=128))
    traj = solve_controlled_rde([0.8], 0.0, lqc.multiplicative_vector_fields(spec), mu, eta)
    lam = lqc.multiplicative_lambda_fn(sol, spec)(eta)
    direct = du.db_penalty_value(lam, traj, mu, eta.grid)
    assert lqc.z1_multiplicative(spec, sol, eta, 0.8, mu) == pytest.approx(direct, rel=1e-11)


def test_multiplicative_lambda_star_matches_theta():
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec)
    p = lqc.multiplicative_problem(spec, np.zeros((1, 1)))
    fb = lambda t, x: lqc.multiplicative_feedback(sol, spec, t, x)  # noqa: E731
    base = sample_brownian_lift(3, make_uniform_grid(1.0, 1024), substeps=4)
    errors = []
    for step in (4, 1):
        eta = base.coarsen(step)
        th = lqc.theta(eta, sol, spec).values
        lam = lqc.multiplicative_lambda_fn(sol, spec)(eta)
        worst = 0.0
        for t, x in ((0.0, 1.0), (0.5, -0.7), (0.75, 1.5)):
            k = eta.grid.index_of(t)
            got = du.db_lambda_star(t, [x], fb, p.vf, p.g, eta, f=p.f)[0]
            scale = 2 * abs(spec.N * spec.C * x) * np.max(np.abs(th))
            worst = max(worst, abs(got - float(lam(k, np.array([x]))[0])) / scale)
        errors.append(worst)
    assert errors[1] <= 1e-2
    assert errors[1] < errors[0]


def test_z2_matches_rogers_rough_integral():
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec)
    p = lqc.multiplicative_problem(spec, np.zeros((1, 1)))
    h = lqc.multiplicative_value_penalty(sol)
    rng = np.random.default_rng(7)
    for seed in range(3):
        eta = sample_brownian_lift(seed, make_uniform_grid(1.0, 1024))
        mu = ControlPath(eta.grid, 0.5 * rng.normal(size=1024))
        traj = solve_controlled_rde([1.0], 0.0, p.vf, mu, eta)
        parts = du.rogers_penalty_parts(h, traj, mu, eta, p)
        z2 = lqc.z2_multiplicative(spec, sol, eta, 1.0, mu)
        scale = max(abs(z2), 0.1)
        assert abs(z2 - parts.rough) <= 1e-2 * scale
        assert abs(z2 - parts.increment) <= 1e-2 * scale


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_z1_linear_in_control_scale(seed, x):
    # z1 is bilinear in (x, mu) plus a quadratic part in mu; check the exact scaling identity.
    spec = mult_spec()
    sol = lqc.riccati_solve_multiplicative(spec, 512)
    eta = sample_brownian_lift(seed, make_uniform_grid(1.0, 32))
    mu = ControlPath(eta.grid, np.random.default_rng(seed).normal(size=32))
    mu2 = ControlPath(eta.grid, 2 * mu.values)
    zero_x = lqc.z1_multiplicative(spec, sol, eta, 0.0, mu)
    a = lqc.z1_multiplicative(spec, sol, eta, x, mu) - zero_x
    b = lqc.z1_multiplicative(spec, sol, eta, x, mu2) - lqc.z1_multiplicative(spec, sol, eta, 0.0, mu2)
    assert b == pytest.approx(2 * a, rel=1e-9, abs=1e-12)
    assert lqc.z1_multiplicative(spec, sol, eta, 0.0, mu2) == pytest.approx(4 * zero_x, rel=1e-9, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.5, 0.5), st.floats(-2, -0.1), st.floats(-2, -0.1))
def test_riccati_terminal_condition_exact(M, Q, G):
    spec = additive_spec(M=M, Q=Q, G=G)
    sol = lqc.riccati_solve_additive(spec, 64)
    assert sol.P[-1, 0, 0] == G
    msol = lqc.riccati_solve_multiplicative(mult_spec(M=M, Q=Q, G=G), 64)
    assert msol.P[-1] == G
