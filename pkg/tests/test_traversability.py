import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numba import njit

from se2nav.terrain import AnalyticTerrain, HeightField, InvalidParameterError, generate_terrain
from se2nav.traversability import (
    AssessmentParams,
    OutOfBoundsError,
    Se2GridSpec,
    Se2RiskGrid,
    _assess_general,
    assess_state,
    assess_state_details,
    build_risk_grid,
    eig3_sym,
    eigvec3_sym,
    normal_from_cov,
    query_trilinear,
    sdf_from_obstacles,
    signed_distance_layer,
)

from oracles import brute_sdf, charpoly_eig, lipschitz_ok, random_psd, unwrapped_oracle

EQUAL_W = AssessmentParams(weights=(1 / 3, 1 / 3, 1 / 3))


def test_eig3_against_charpoly(rng):
    for _ in range(1000):
        A = random_psd(rng)
        lam, v_ref = charpoly_eig(A)
        got = np.array(eig3_sym(A[0, 0], A[0, 1], A[0, 2], A[1, 1], A[1, 2], A[2, 2]))
        np.testing.assert_allclose(got, lam, atol=1e-9)
        gap = lam[1] - lam[0]
        if gap > 1e-3:
            v = np.array(eigvec3_sym(A[0, 0], A[0, 1], A[0, 2], A[1, 1], A[1, 2], A[2, 2], got[0])[:3])
            assert min(np.abs(v - v_ref).max(), np.abs(v + v_ref).max()) < 1e-9 / gap + 1e-9


def test_eig3_diagonal():
    assert eig3_sym(3.0, 0.0, 0.0, 1.0, 0.0, 2.0) == (1.0, 2.0, 3.0)


def test_flat_plane_zero_risk():
    hf = AnalyticTerrain.flat().rasterize(4, 4, 0.05)
    a = assess_state_details(hf, (0.0, 0.0, 0.7))
    assert a.risk == 0.0 or a.risk < 1e-15
    np.testing.assert_allclose(a.z_b, [0, 0, 1], atol=1e-15)
    assert a.kappa < 1e-15


def test_steep_incline_is_obstacle():
    alpha = 0.6
    hf = AnalyticTerrain.incline(alpha).rasterize(4, 4, 0.05)
    risk, z_b = assess_state(hf, (0.0, 0.0, 0.0))
    assert risk == 1.0
    np.testing.assert_allclose(z_b, [-math.sin(alpha), 0, math.cos(alpha)], atol=1e-12)


def test_incline_risk_hand_value():
    hf = AnalyticTerrain.incline(0.3).rasterize(4, 4, 0.05)
    risk, _ = assess_state(hf, (0.0, 0.0, 0.0), EQUAL_W)
    assert risk == pytest.approx(0.19230769230769, abs=1e-9)
    assert abs(risk - 0.3 / (3 * 0.52)) < 1e-9


@settings(max_examples=40, deadline=None)
@given(alpha=st.floats(0.0, 0.5), theta=st.sampled_from([0.0, math.pi]))
def test_pitch_matches_incline(alpha, theta):
    hf = AnalyticTerrain.incline(alpha).rasterize(4, 4, 0.05)
    a = assess_state_details(hf, (0.0, 0.0, theta), AssessmentParams(ellipse=(0.8, 0.5)))
    assert abs(a.phi_x - alpha) < 1e-3
    assert a.phi_y < 1e-3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_normal_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(50, 3)) * [1.0, 0.7, 0.1]
    C1 = np.cov(pts.T, bias=True)
    C2 = np.cov((pts * scale).T, bias=True)
    n1 = normal_from_cov(C1[0, 0], C1[0, 1], C1[0, 2], C1[1, 1], C1[1, 2], C1[2, 2])
    n2 = normal_from_cov(C2[0, 0], C2[0, 1], C2[0, 2], C2[1, 1], C2[1, 2], C2[2, 2])
    np.testing.assert_allclose(n1[:3], n2[:3], atol=1e-9)
    assert n1[3] == pytest.approx(n2[3], rel=1e-9, abs=1e-15)
    assert 0.0 <= n1[3] <= 1.0 / 3.0 + 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_risk_invariant_to_point_order(seed):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-1, 1, (60, 2)), rng.normal(scale=0.05, size=60)])
    perm = rng.permutation(60)
    prm = AssessmentParams().as_array()
    out = []
    for p in (pts, pts[perm]):
        d = p - p.mean(axis=0)
        C = d.T @ d / len(p)
        out.append(normal_from_cov(C[0, 0], C[0, 1], C[0, 2], C[1, 1], C[1, 2], C[2, 2]))
    np.testing.assert_allclose(out[0][:4], out[1][:4], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(x=st.floats(-2, 2), y=st.floats(-2, 2), th=st.floats(-math.pi, math.pi), seed=st.integers(0, 50))
def test_risk_in_unit_interval(x, y, th, seed):
    hf = generate_terrain(seed, width=6, height=6, resolution=0.1, amplitude=0.8, wavelength=3.0)
    a = assess_state_details(hf, (x, y, th))
    assert 0.0 <= a.risk <= 1.0
    assert abs(np.linalg.norm(a.z_b) - 1.0) < 1e-12 and a.z_b[2] > 0


def test_too_few_points_is_unknown():
    hf = AnalyticTerrain.flat().rasterize(4, 4, 0.5)
    a = assess_state_details(hf, (0.1, 0.1, 0.0), AssessmentParams(ellipse=(0.2, 0.2)))
    assert a.risk == 1.0 and not a.known


def test_collinear_points_unknown():
    # ellipse so thin that it only holds one row of cells
    hf = AnalyticTerrain.flat().rasterize(4, 4, 0.1)
    a = assess_state_details(hf, (hf.xs[20], hf.ys[20], 0.0), AssessmentParams(ellipse=(0.8, 0.01)))
    assert a.n_points >= 3 and not a.known and a.risk == 1.0


def test_assessment_params_validation():
    with pytest.raises(InvalidParameterError):
        AssessmentParams(weights=(0.5, 0.5, 0.5))
    with pytest.raises(InvalidParameterError):
        AssessmentParams(ellipse=(0.0, 1.0))
    with pytest.raises(InvalidParameterError):
        AssessmentParams(kappa_max=0.0)


# ------------------------------------------------------------------ lattice


def test_flat_grid():
    hf = AnalyticTerrain.flat().rasterize(6, 6, 0.1)
    spec = Se2GridSpec.matching(hf, 8, stride=2, margin_cells=5)
    g = build_risk_grid(hf, spec)
    assert np.all(g.risk == 0.0)
    np.testing.assert_array_equal(g.z_b[..., 2], 1.0)
    assert np.all(g.sdf == spec.max_extent)


def test_parallel_and_serial_bit_identical():
    hf = generate_terrain(3, width=10, height=10, resolution=0.1, amplitude=1.2)
    spec = Se2GridSpec.matching(hf, 16)
    a = build_risk_grid(hf, spec, parallel=True)
    b = build_risk_grid(hf, spec, parallel=False)
    for f in ("risk", "z_b", "sdf", "kappa"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


@njit(cache=True)
def _sequential_oracle(heights, res, ox, oy, xs, ys, yaws, prm):
    out = np.empty((yaws.shape[0], ys.shape[0], xs.shape[0], 4))
    for k in range(yaws.shape[0]):
        for j in range(ys.shape[0]):
            for i in range(xs.shape[0]):
                r, nx, ny, nz, _, _, _ = _assess_general(heights, res, ox, oy, xs[i], ys[j], yaws[k], prm)
                out[k, j, i, 0] = r
                out[k, j, i, 1] = nx
                out[k, j, i, 2] = ny
                out[k, j, i, 3] = nz
    return out


def test_grid_matches_sequential_oracle_120():
    hf = generate_terrain(21, width=14, height=14, resolution=0.1, amplitude=1.0, wavelength=5.0)
    spec = Se2GridSpec((hf.origin[0] + 1.0, hf.origin[1] + 1.0), 120, 120, 0.1, 16)
    g = build_risk_grid(hf, spec, with_sdf=False)
    ref = _sequential_oracle(hf.heights, hf.resolution, hf.origin[0], hf.origin[1], spec.xs, spec.ys, spec.yaws,
                             AssessmentParams().as_array())
    assert np.abs(g.risk - ref[..., 0]).max() < 1e-9
    assert np.abs(g.z_b - ref[..., 1:]).max() < 1e-9
    assert 0 < g.obstacles.sum() < g.risk.size


@pytest.mark.parametrize("stride", [1, 2])
def test_grid_matches_oracle_where_footprints_leave_the_map(stride):
    hf = generate_terrain(22, width=6, height=5, resolution=0.1, amplitude=1.0, wavelength=3.0)
    spec = Se2GridSpec.matching(hf, 16, stride=stride)
    g = build_risk_grid(hf, spec, with_sdf=False)
    ref = _sequential_oracle(hf.heights, hf.resolution, hf.origin[0], hf.origin[1], spec.xs, spec.ys, spec.yaws,
                             AssessmentParams().as_array())
    assert np.abs(g.risk - ref[..., 0]).max() < 1e-9
    assert np.abs(g.z_b - ref[..., 1:]).max() < 1e-9


def test_grid_stride_and_alignment_checks():
    hf = AnalyticTerrain.flat().rasterize(4, 4, 0.1)
    with pytest.raises(InvalidParameterError):
        build_risk_grid(hf, Se2GridSpec(hf.origin, 5, 5, 0.15, 4))
    with pytest.raises(InvalidParameterError):
        build_risk_grid(hf, Se2GridSpec((hf.origin[0] + 0.03, hf.origin[1]), 5, 5, 0.1, 4))


# ------------------------------------------------------------------ SDF


def test_sdf_single_obstacle():
    obst = np.zeros((9, 9), bool)
    obst[4, 4] = True
    sdf = signed_distance_layer(obst, 0.2, 99.0)
    assert sdf[4, 5] == 0.2 and sdf[3, 4] == 0.2
    assert sdf[4, 4] == 0.0


def test_sdf_block_center():
    obst = np.zeros((9, 9), bool)
    obst[3:6, 3:6] = True
    assert signed_distance_layer(obst, 0.1, 99.0)[4, 4] == -0.1


def test_sdf_no_obstacles_sentinel():
    assert np.all(signed_distance_layer(np.zeros((4, 5), bool), 0.1, 7.0) == 7.0)


def test_sdf_matches_brute_force(rng):
    for _ in range(5):
        obst = rng.random((64, 64)) < rng.uniform(0.01, 0.3)
        np.testing.assert_allclose(signed_distance_layer(obst, 0.1, 50.0), brute_sdf(obst, 0.1, 50.0), rtol=0,
                                   atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), frac=st.floats(0.0, 0.9))
def test_sdf_lipschitz(seed, frac):
    obst = np.random.default_rng(seed).random((24, 24)) < frac
    sdf = signed_distance_layer(obst, 0.2, 40.0)
    if obst.any() and not obst.all():
        assert lipschitz_ok(sdf, 0.2)
        assert np.all(sdf[~obst] > 0) and np.all(sdf[obst] <= 0)


def test_sdf_per_layer():
    spec = Se2GridSpec((0.0, 0.0), 10, 10, 0.1, 2)
    risk = np.zeros((2, 10, 10))
    risk[1, 5, 5] = 1.0
    g = sdf_from_obstacles(Se2RiskGrid(spec, risk, np.zeros((2, 10, 10, 3))))
    assert np.all(g.sdf[0] == spec.max_extent)
    assert g.sdf[1, 5, 6] == pytest.approx(0.1)


# ------------------------------------------------------------------ trilinear


def _grid_from(values, origin=(0.0, 0.0), res=0.5):
    n_yaw, ny, nx = values.shape
    spec = Se2GridSpec(origin, nx, ny, res, n_yaw)
    return Se2RiskGrid(spec, values, np.zeros(values.shape + (3,)), values.copy())


def test_query_at_nodes_exact(rng):
    g = _grid_from(rng.random((8, 5, 6)))
    s = g.spec
    for k in range(8):
        for j in range(5):
            for i in range(6):
                v, _ = query_trilinear(g, (s.xs[i], s.ys[j], s.yaws[k]), "risk")
                assert v == g.risk[k, j, i]


def test_query_theta_midpoint_mean(rng):
    g = _grid_from(rng.random((8, 5, 6)))
    s = g.spec
    v, _ = query_trilinear(g, (s.xs[2], s.ys[3], s.yaws[3] + s.yaw_step / 2), "sdf")
    assert v == pytest.approx(0.5 * (g.sdf[3, 3, 2] + g.sdf[4, 3, 2]), abs=1e-15)
    # across the seam: between last layer and layer 0
    v, _ = query_trilinear(g, (s.xs[2], s.ys[3], math.pi - s.yaw_step / 2), "sdf")
    assert v == pytest.approx(0.5 * (g.sdf[7, 3, 2] + g.sdf[0, 3, 2]), abs=1e-15)


def test_affine_reproduction_and_seam(rng):
    spec = Se2GridSpec((-1.0, 2.0), 9, 7, 0.25, 16)
    a, b, c, d = 0.7, -1.3, 0.4, 2.0
    X, Y = np.meshgrid(spec.xs, spec.ys)
    values = np.stack([a * X + b * Y + c * th + d for th in spec.yaws])
    g = Se2RiskGrid(spec, values, np.zeros(values.shape + (3,)), values)
    xmin, xmax, ymin, ymax = spec.bounds
    q = np.column_stack([rng.uniform(xmin, xmax, 1000), rng.uniform(ymin, ymax, 1000),
                         rng.uniform(-math.pi, math.pi, 1000)])
    vals, grads = query_trilinear(g, q, "risk")
    top = spec.yaws[-1]
    interior = q[:, 2] <= top
    expect = a * q[:, 0] + b * q[:, 1] + c * q[:, 2] + d
    np.testing.assert_allclose(vals[interior], expect[interior], atol=1e-12)
    np.testing.assert_allclose(grads[interior], np.tile([a, b, c], (interior.sum(), 1)), atol=1e-12)
    assert (~interior).sum() > 10
    for (x, y, th), v in zip(q, vals):
        assert abs(v - unwrapped_oracle(values, spec, x, y, th)) < 1e-12


def test_query_gradient_matches_fd(rng):
    g = _grid_from(rng.random((8, 5, 6)))
    h = 1e-7
    for _ in range(50):
        p = np.array([rng.uniform(0.1, 2.4), rng.uniform(0.1, 1.9), rng.uniform(-3, 3)])
        v, gr = query_trilinear(g, p, "risk")
        for ax in range(3):
            e = np.zeros(3)
            e[ax] = h
            fd = (query_trilinear(g, p + e, "risk")[0] - query_trilinear(g, p - e, "risk")[0]) / (2 * h)
            assert fd == pytest.approx(gr[ax], abs=1e-5)


def test_query_out_of_bounds():
    g = _grid_from(np.zeros((4, 3, 3)))
    with pytest.raises(OutOfBoundsError):
        query_trilinear(g, (5.0, 0.0, 0.0))
    with pytest.raises(OutOfBoundsError):
        query_trilinear(g, (0.5, -0.01, 0.0))
