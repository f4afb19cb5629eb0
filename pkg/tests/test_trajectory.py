import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import gradient_errors, smooth_instance
from se2nav.flatness import FlatState, RobotParams, flat_outputs, frame_from_normal
from se2nav.terrain import AnalyticTerrain, InvalidParameterError
from se2nav.trajectory import (AlmSettings, AnalyticFieldProvider, BoundaryState, DecisionVars, Evaluator,
                               IllConditionedError, PiecewiseQuintic, SmoothRiskField, TrajectoryProblem,
                               banded_solve, coeffs_from_vars, constraints_at_samples, objective_and_grad,
                               phr_alm_solve, section_coefficients)
from se2nav.trajectory.kernels import jerk_terms
from se2nav.trajectory.minco import assemble
from se2nav.trajectory.polynomial import gauss_legendre01

FLAT = AnalyticFieldProvider(risk=SmoothRiskField(base=0.0))
LOOSE = RobotParams(delta_max=1.5, v_max=1e3, a_lon_max=1e4, a_lat_max=1e4, phi_x_max=1.5, phi_y_max=1.5)


def straight_vars(length, n_pieces, T_f):
    pts = np.column_stack([np.linspace(0, length, n_pieces + 1)[1:-1], np.zeros(n_pieces - 1)])
    return DecisionVars([pts], [np.full(n_pieces, length / n_pieces)], np.zeros((0, 4)), math.log(T_f), (1,))


# ------------------------------------------------------------------ coefficient elimination


def test_single_piece_reproduces_boundary():
    cxy, cs = section_coefficients(np.array([1.3]), np.zeros((0, 2)), np.zeros(2), np.array([1.0, 0.0]),
                                   np.array([1.0, 0.0]), np.array([0.6, 0.8]), 1.0, 0.0, 0.0)
    pq = PiecewiseQuintic(cxy, [1.3])
    np.testing.assert_allclose(pq.evaluate(0.0), [0, 0], atol=1e-10)
    np.testing.assert_allclose(pq.evaluate(0.0, 1), [1, 0], atol=1e-10)
    np.testing.assert_allclose(pq.evaluate(0.0, 2), [0, 0], atol=1e-10)
    np.testing.assert_allclose(pq.evaluate_piece(0, 1.3), [1, 0], atol=1e-10)
    np.testing.assert_allclose(pq.evaluate_piece(0, 1.3, 1), [0.6, 0.8], atol=1e-10)
    np.testing.assert_allclose(pq.evaluate_piece(0, 1.3, 2), [0, 0], atol=1e-10)


def test_banded_matches_dense(rng):
    spans = rng.uniform(0.3, 2.0, 6)
    M = assemble(spans)
    b = rng.normal(size=(36, 2))
    np.testing.assert_allclose(banded_solve(M, b), np.linalg.solve(M, b), atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 10_000))
def test_interior_joints_are_c4(n, seed):
    rng = np.random.default_rng(seed)
    spans = rng.uniform(0.2, 2.0, n)
    pts = rng.normal(size=(n - 1, 2))
    cxy, _ = section_coefficients(spans, pts, rng.normal(size=2), rng.normal(size=2), rng.normal(size=2),
                                  rng.normal(size=2), 1.0, 0.0, 0.0)
    pq = PiecewiseQuintic(cxy, spans)
    for k in range(n - 1):
        np.testing.assert_allclose(pq.evaluate_piece(k, spans[k]), pts[k], atol=1e-9)
        for d in range(1, 5):
            left = pq.evaluate_piece(k, spans[k], d)
            right = pq.evaluate_piece(k + 1, 0.0, d)
            assert np.max(np.abs(left - right)) < 1e-9 * max(1.0, np.abs(left).max())
    np.testing.assert_allclose(pq.evaluate_piece(n - 1, spans[-1], 2), 0.0, atol=1e-9)


def test_degenerate_span_raises():
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(3, 0, 0))
    v = straight_vars(3.0, 2, 4.0)
    v.spans[0][0] = 0.0
    with pytest.raises(IllConditionedError):
        coeffs_from_vars(v, pb)


def test_sections_stitch_across_switch():
    problem, vars, _, _ = smooth_instance(3, with_switch=True)
    (geo1, tim1), (geo2, tim2) = coeffs_from_vars(vars, problem)
    sw = vars.switches[0]
    np.testing.assert_allclose(geo1.evaluate(geo1.total), sw[:2], atol=1e-9)
    np.testing.assert_allclose(geo2.evaluate(0.0), sw[:2], atol=1e-9)
    t_in = geo1.evaluate(geo1.total, 1)
    t_out = geo2.evaluate(0.0, 1)
    np.testing.assert_allclose(t_in, -t_out, atol=1e-9)
    # heading is continuous because eta flips together with the tangent
    assert math.atan2(t_in[1], t_in[0]) == pytest.approx(math.atan2(-t_out[1], -t_out[0]), abs=1e-9)
    for geo in (geo1, geo2):
        np.testing.assert_allclose(geo.evaluate(0.0, 2), 0.0, atol=1e-9)
        np.testing.assert_allclose(geo.evaluate(geo.total, 2), 0.0, atol=1e-9)
    # timing laws span the section arc length over the section duration
    for geo, tim in ((geo1, tim1), (geo2, tim2)):
        assert tim.evaluate(0.0)[0] == pytest.approx(0.0, abs=1e-12)
        assert tim.evaluate(tim.total)[0] == pytest.approx(geo.total, rel=1e-10)


def test_timing_law_in_seconds():
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0, 0.4), BoundaryState(3, 0, 0, 0.2))
    (_, tim), = coeffs_from_vars(straight_vars(3.0, 3, 7.0), pb)
    assert tim.total == pytest.approx(7.0)
    assert tim.evaluate(0.0, 1)[0] == pytest.approx(0.4, abs=1e-10)
    assert tim.evaluate(7.0, 1)[0] == pytest.approx(0.2, abs=1e-10)


# ------------------------------------------------------------------------------ objective


def test_cubic_jerk_is_36():
    cxy = np.zeros((1, 6, 2))
    cxy[0, 3, 0] = 1.0
    cs = np.array([[0.0, 1.0, 0, 0, 0, 0]])
    nodes, weights = gauss_legendre01(23)
    cost, _, _, _ = jerk_terms(cxy, cs, 1.0, nodes, weights)
    assert cost == pytest.approx(36.0, rel=1e-12)


def test_time_term_is_linear():
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(2, 0, 0), rho_t=1.7, rho_r=0.0)
    v = straight_vars(2.0, 2, 1e3)
    f0, _ = objective_and_grad(v, pb)
    dT = 5.0
    v.tau = math.log(1e3 + dT)
    f1, _ = objective_and_grad(v, pb)
    # jerk scales with T_f^-5 and is below 1e-13 here
    assert f1 - f0 == pytest.approx(1.7 * dT, abs=1e-9)


def test_objective_decomposes():
    problem, vars, _, _ = smooth_instance(5)
    e = Evaluator(problem, vars).evaluate(vars.to_vector())
    assert e.objective == pytest.approx(e.jerk + problem.rho_t * vars.T_f + e.risk_cost, rel=1e-14)
    assert e.jerk > 0 and e.risk_cost > 0


def test_out_of_bounds_is_penalised():
    field = AnalyticFieldProvider(risk=SmoothRiskField(base=0.1), bounds=(-1, 4, -0.5, 0.5))
    pb = TrajectoryProblem(field, BoundaryState(0, 0, 0), BoundaryState(3, 0, 0), rho_r=0.0)
    inside = straight_vars(3.0, 2, 5.0)
    outside = DecisionVars([np.array([[1.5, 2.0]])], [np.array([2.5, 2.5])], np.zeros((0, 4)), math.log(5.0), (1,))
    ev_in = Evaluator(pb, inside).evaluate(inside.to_vector())
    ev_out = Evaluator(pb, outside).evaluate(outside.to_vector())
    assert not ev_in.oob and ev_out.oob
    assert ev_out.objective - ev_out.jerk - pb.rho_t * outside.T_f > 100.0


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    problem, vars, lam, rho = smooth_instance(seed)
    err_obj, err_alm = gradient_errors(problem, vars, lam, rho)
    assert err_obj.max() < 1e-4
    assert err_alm.max() < 1e-4


def test_grid_path_matches_staged_path():
    from se2nav.search import SearchConfig, boundary_states, extract_init, hybrid_astar
    from se2nav.traversability import Se2GridSpec, grid_from_mask
    from se2nav.trajectory import GridFieldProvider

    spec = Se2GridSpec.centered((0, 0), 10, 0.1, 16)
    X, Y = np.meshgrid(spec.xs, spec.ys)
    grid = grid_from_mask(spec, np.hypot(X - 1, Y - 1) < 0.6, base_risk=0.1)
    path = hybrid_astar(grid, (-3, -2, 0.3), (-3, 2.5, 0.0), SearchConfig(start_gear=1))
    vars = extract_init(path)
    start, goal = boundary_states(path, 0.2)
    ev = Evaluator(TrajectoryProblem(GridFieldProvider(grid), start, goal), vars)
    rng = np.random.default_rng(0)
    x = vars.to_vector() + rng.normal(0, 0.01, vars.to_vector().size)
    lam = rng.uniform(0, 1, (vars.n_pieces * 16, 9))
    fused = ev.evaluate(x, lam=lam, rho=2.0)
    ev._grid = False
    staged = ev.evaluate(x, lam=lam, rho=2.0)
    assert fused.objective == pytest.approx(staged.objective, rel=1e-13)
    assert fused.penalty == pytest.approx(staged.penalty, rel=1e-13)
    np.testing.assert_allclose(fused.grad, staged.grad, rtol=1e-12, atol=1e-12 * np.abs(staged.grad).max())
    np.testing.assert_allclose(fused.g_scaled, staged.g_scaled, atol=1e-13)


# ---------------------------------------------------------------------------- constraints


def test_slow_straight_line_is_feasible():
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(3, 0, 0))
    g = constraints_at_samples(straight_vars(3.0, 2, 10.0), pb)
    assert np.all(g < 0)


def test_peak_speed_violation():
    # rest to rest on one straight piece: s(t) is the minimum-jerk profile, peak rate 1.875 S / T_f
    S = 5.0
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(S, 0, 0), samples_per_piece=16)
    g = constraints_at_samples(straight_vars(S, 1, 1.875 * S / 1.2), pb)
    assert g[:, 1].max() == pytest.approx(1.2 ** 2 - 1.0, abs=1e-12)


def _reference_constraints(problem, vars):
    """Recompute every sampled constraint from the exported polynomials and scalar flat outputs."""
    field = problem.field
    robot = problem.robot
    K = problem.samples_per_piece
    tp = vars.T_f / vars.n_pieces
    rows = []
    for (geo, tim), eta in zip(coeffs_from_vars(vars, problem), vars.gears):
        for j in range(geo.n_pieces):
            for r in range(K):
                t_loc = r / K * tp
                s = tim.evaluate_piece(j, t_loc, 0)[0]
                sd = tim.evaluate_piece(j, t_loc, 1)[0]
                sdd = tim.evaluate_piece(j, t_loc, 2)[0]
                x, y = geo.evaluate(s)
                dx, dy = geo.evaluate(s, 1)
                ddx, ddy = geo.evaluate(s, 2)
                theta = math.atan2(eta * dy, eta * dx)
                gx, gy = field.terrain.gradient(x, y)
                frame = frame_from_normal([-gx, -gy, 1.0], theta)
                out = flat_outputs(FlatState(dx, dy, ddx, ddy, sd, sdd, eta), frame, robot)
                phi_x = math.asin(frame.x_b[2])
                phi_y = math.asin(frame.y_b[2])
                risk = field.risk(np.array([x]), np.array([y]), np.array([theta]))[0][0]
                sdf = min(math.hypot(x - cx, y - cy) - cr for cx, cy, cr in field.circles)
                rows.append([out.delta ** 2 - robot.delta_max ** 2, out.v_x ** 2 - robot.v_max ** 2,
                             out.a_x ** 2 - robot.a_lon_max ** 2, out.a_y ** 2 - robot.a_lat_max ** 2,
                             phi_x ** 2 - robot.phi_x_max ** 2, phi_y ** 2 - robot.phi_y_max ** 2,
                             risk - problem.r_max, problem.d_min - sdf, problem.delta_plus - (dx * dx + dy * dy)])
    return np.array(rows)


@pytest.mark.parametrize("seed", [0, 1, 4, 7])
def test_constraints_match_independent_evaluation(seed):
    problem, vars, _, _ = smooth_instance(seed)
    g = constraints_at_samples(vars, problem)
    ref = _reference_constraints(problem, vars)
    assert g.shape == ref.shape
    np.testing.assert_allclose(g, ref, rtol=1e-9, atol=1e-9)


# -------------------------------------------------------------------------------- solver


def test_unconstrained_matches_minimum_jerk():
    d, rho_t = 6.0, 1.0
    pb = TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(d, 0, 0), robot=LOOSE, rho_t=rho_t,
                           rho_r=0.0, r_max=10.0, d_min=0.0)
    init = DecisionVars([np.array([[2.0, 0.3], [4.0, -0.2]])], [np.array([2.1, 2.0, 2.1])], np.zeros((0, 4)),
                        math.log(5.0), (1,))
    sol = phr_alm_solve(pb, init)
    assert sol.converged
    # rest-to-rest minimum jerk over duration T: 720 d^2 / T^5
    assert sol.jerk == pytest.approx(720 * d * d / sol.T_f ** 5, abs=1e-6)
    T_star = (5 * 720 * d * d / rho_t) ** (1 / 6)
    assert sol.T_f == pytest.approx(T_star, rel=1e-3)
    assert sol.length() == pytest.approx(d, rel=1e-6)


@pytest.mark.parametrize("seed", range(8))
def test_warm_restart_is_fixed_point(seed):
    problem, vars, _, _ = smooth_instance(seed, with_switch=False)
    sol = phr_alm_solve(problem, vars)
    again = phr_alm_solve(problem, sol.vars, multipliers=sol.multipliers, rho=sol.rho)
    assert again.outer_iterations <= 2
    assert again.cost - sol.cost < 1e-9


def test_constrained_solution_passes_fine_audit():
    pb = TrajectoryProblem(AnalyticFieldProvider(AnalyticTerrain.sinusoid(0.25, 7.0),
                                                 SmoothRiskField([(3, 0.5)], 0.4, 0.8, 0.05),
                                                 circles=[(3.0, -1.0, 0.4)]),
                           BoundaryState(0, 0, 0), BoundaryState(6, 0, 0))
    sol = phr_alm_solve(pb, straight_vars(6.0, 4, 5.0))
    assert sol.converged and sol.max_violation < 1e-4
    audit = sol.audit()
    assert audit.passes(0.01)
    g = constraints_at_samples(sol.vars, pb)
    assert g[:, 8].max() <= 1e-4
    assert sol.sample(np.linspace(0, sol.T_f, 50))["v_x"].max() <= 1.01


def test_solution_with_switch():
    problem, vars, _, _ = smooth_instance(9, with_switch=True)
    sol = phr_alm_solve(problem, vars)
    assert sol.n_switches == 1 and sol.gears == (1, -1)
    assert sol.audit().passes(0.01)
    tr = sol.sample(np.linspace(0, sol.T_f, 200))
    assert set(np.unique(tr["eta"])) == {-1.0, 1.0}
    report = sol.report()
    assert report["converged"] and set(report["violations"]) >= {"delta", "sdf", "tangent"}


def test_violation_history_mostly_monotone():
    outcomes = []
    for seed in range(6):
        problem, vars, _, _ = smooth_instance(seed, with_switch=False)
        sol = phr_alm_solve(problem, vars)
        h = sol.history[1:]
        outcomes.append(all(b <= a + 1e-12 for a, b in zip(h, h[1:])))
    assert np.mean(outcomes) >= 0.8


def test_settings_and_problem_validation():
    with pytest.raises(InvalidParameterError):
        TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(1, 0, 0), delta_plus=1.5)
    with pytest.raises(InvalidParameterError):
        TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(1, 0, 0), samples_per_piece=3)
    with pytest.raises(InvalidParameterError):
        TrajectoryProblem(FLAT, BoundaryState(0, 0, 0), BoundaryState(1, 0, 0), rho_t=-1.0)
    assert AlmSettings().eps_cons == 1e-4


@settings(max_examples=30, deadline=None)
@given(tau=st.floats(-30, 30))
def test_duration_positive(tau):
    v = straight_vars(2.0, 2, 1.0)
    v.tau = tau
    assert v.T_f > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000))
def test_vector_roundtrip(seed):
    _, vars, _, _ = smooth_instance(seed)
    x = vars.to_vector()
    np.testing.assert_allclose(vars.from_vector(x).to_vector(), x, rtol=1e-12, atol=1e-12)
