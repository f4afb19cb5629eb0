import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from se2nav.terrain import (
    AnalyticTerrain,
    HeightField,
    InvalidParameterError,
    NoisyPose,
    ProceduralSurface,
    SensorModel,
    TerrainParams,
    generate_terrain,
    sample_noisy_pose,
    scan_to_world,
    simulate_scan,
    so3_exp,
)


def _pose(x=0.0, y=0.0, z=1.0, R=None):
    return NoisyPose(np.array([x, y, z]), np.eye(3) if R is None else R)


def test_generate_is_deterministic():
    a = generate_terrain(7, width=10, height=10)
    b = generate_terrain(7, width=10, height=10)
    assert np.array_equal(a.heights, b.heights)
    c = generate_terrain(8, width=10, height=10)
    assert not np.array_equal(a.heights, c.heights)


def test_zero_amplitude_is_flat():
    hf = generate_terrain(3, amplitude=0.0, width=6, height=6)
    assert np.all(hf.heights == 0.0)


def test_sinusoid_matches_closed_form():
    params = TerrainParams(kind="sinusoid", amplitude=1.0, wavelength=4.0, width=12, height=8)
    hf = generate_terrain(11, params)
    surf = ProceduralSurface(11, params)
    X, Y = np.meshgrid(hf.xs, hf.ys)
    k = 2 * math.pi / 4.0
    px, py = surf.phase
    expected = np.sin(k * (X + px)) * np.sin(k * (Y + py))
    np.testing.assert_allclose(hf.heights, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kw", [dict(width=0), dict(resolution=-0.1), dict(height=-2), dict(kind="perlin")])
def test_invalid_params(kw):
    with pytest.raises(InvalidParameterError):
        generate_terrain(0, **kw)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), octaves=st.integers(3, 5), amp=st.floats(0.1, 2.0))
def test_slope_bounded_by_params(seed, octaves, amp):
    params = TerrainParams(width=10, height=10, resolution=0.1, amplitude=amp, octaves=octaves)
    hf = generate_terrain(seed, params)
    assert hf.max_slope() <= ProceduralSurface(seed, params).slope_bound() + 1e-9


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-3, 3), y=st.floats(-3, 3), seed=st.integers(0, 100))
def test_bilinear_is_continuous(x, y, seed):
    hf = generate_terrain(seed, width=8, height=8, resolution=0.25)
    eps = 1e-9
    assert abs(hf.height(x, y) - hf.height(x + eps, y + eps)) < 1e-6


def test_heightfield_rejects_nonfinite():
    with pytest.raises(InvalidParameterError):
        HeightField(np.array([[0.0, np.nan], [0.0, 0.0]]), 0.1)
    with pytest.raises(InvalidParameterError):
        HeightField(np.zeros((3, 3)), 0.0)


@pytest.mark.parametrize("terrain", [
    AnalyticTerrain.flat(),
    AnalyticTerrain.incline(0.3, -0.2),
    AnalyticTerrain.sinusoid(0.4, 3.0),
    AnalyticTerrain.cap(5.0),
])
def test_analytic_normal_matches_numerical_gradient(terrain, rng):
    h = 1e-5
    for x, y in rng.uniform(-2, 2, size=(50, 2)):
        gx = (terrain.height(x + h, y) - terrain.height(x - h, y)) / (2 * h)
        gy = (terrain.height(x, y + h) - terrain.height(x, y - h)) / (2 * h)
        n = np.array([-gx, -gy, 1.0])
        n /= np.linalg.norm(n)
        nn = terrain.normal(x, y)
        assert nn[2] > 0
        np.testing.assert_allclose(nn, n, atol=1e-6)


def test_analytic_hessian_matches_fd(rng):
    for terrain in (AnalyticTerrain.sinusoid(0.4, 3.0), AnalyticTerrain.cap(5.0)):
        h = 1e-6
        for x, y in rng.uniform(-2, 2, size=(10, 2)):
            H = terrain.hessian(x, y)
            gxp, gxm = terrain.gradient(x + h, y), terrain.gradient(x - h, y)
            gyp, gym = terrain.gradient(x, y + h), terrain.gradient(x, y - h)
            np.testing.assert_allclose(H[:, 0], (gxp - gxm) / (2 * h), atol=1e-6)
            np.testing.assert_allclose(H[:, 1], (gyp - gym) / (2 * h), atol=1e-6)


def test_scan_straight_down():
    model = SensorModel(elevations=(-math.pi / 2,), azimuth_step=2 * math.pi, p_BS=np.zeros(3))
    scan = simulate_scan(AnalyticTerrain.flat(), _pose(), model)
    assert scan.points.shape == (1, 3)
    np.testing.assert_allclose(scan.points[0], [0, 0, -1], atol=1e-12)


def test_scan_out_of_range_is_empty():
    model = SensorModel(max_range=0.5, p_BS=np.zeros(3))
    scan = simulate_scan(AnalyticTerrain.flat(), _pose(), model)
    assert scan.points.shape == (0, 3)
    assert not scan.below_terrain


def test_scan_below_terrain_flagged():
    scan = simulate_scan(AnalyticTerrain.flat(), _pose(z=-1.0), SensorModel(p_BS=np.zeros(3)))
    assert scan.below_terrain and scan.points.size == 0


def test_scan_points_on_incline():
    terrain = AnalyticTerrain.incline(0.3)
    el = np.radians(np.linspace(-60, -5, 50))
    model = SensorModel(elevations=tuple(el), azimuth_step=2 * math.pi / 200, p_BS=np.array([0.1, 0, 0.5]),
                        max_range=30.0)
    assert model.directions().shape[0] == 10_000
    pose = _pose(0.3, -0.2, 1.0, so3_exp([0.05, -0.1, 0.7]))
    scan = simulate_scan(terrain, pose, model)
    assert scan.points.shape[0] > 9000
    w = scan_to_world(scan.points, pose, model)
    assert np.abs(w[:, 2] - terrain.height(w[:, 0], w[:, 1])).max() < 1e-9


def test_scan_on_heightfield_lies_on_surface():
    hf = generate_terrain(5, width=16, height=16, resolution=0.1, amplitude=0.5)
    model = SensorModel(max_range=6.0)
    pose = _pose(0.0, 0.0, float(hf.height(0.0, 0.0)) + 0.2)
    scan = simulate_scan(hf, pose, model)
    w = scan_to_world(scan.points, pose, model)
    assert len(w) > 100
    assert np.abs(w[:, 2] - hf.height(w[:, 0], w[:, 1])).max() < 1e-9


def test_compiled_march_matches_vectorised():
    from se2nav.terrain import _march, _march_vectorised

    hf = generate_terrain(2, width=12, height=12, resolution=0.1, amplitude=0.6)
    model = SensorModel(max_range=8.0)
    origin = np.array([0.3, -0.2, float(hf.height(0.3, -0.2)) + 0.5])
    dirs = model.directions()
    a = _march(hf, origin, dirs, model.max_range, 0.05)
    b = _march_vectorised(hf, origin, dirs, model.max_range, 0.05)
    assert np.isfinite(a).sum() > 100
    assert np.array_equal(a, b, equal_nan=True)


def test_scan_noise_deterministic():
    model = SensorModel(p_BS=np.zeros(3))
    a = simulate_scan(AnalyticTerrain.flat(), _pose(), model, np.random.default_rng(3)).points
    b = simulate_scan(AnalyticTerrain.flat(), _pose(), model, np.random.default_rng(3)).points
    assert np.array_equal(a, b)


def test_noisy_pose_zero_cov_is_identity(rng):
    pose = _pose(1, 2, 3, so3_exp([0.1, 0.2, 0.3]))
    out = sample_noisy_pose(pose, np.zeros((3, 3)), np.zeros((3, 3)), rng)
    assert np.array_equal(out.position, pose.position)
    assert np.array_equal(out.rotation, pose.rotation)


def test_noisy_pose_covariance(rng):
    cov = 0.01 * np.eye(3)
    pose = _pose()
    samples = np.array([sample_noisy_pose(pose, cov, np.zeros((3, 3)), rng).position for _ in range(100_000)])
    emp = np.cov(samples.T)
    assert np.all(np.abs(np.diag(emp) - 0.01) / 0.01 < 0.05)


def test_noisy_pose_orthonormal(rng):
    pose = _pose()
    for _ in range(200):
        R = sample_noisy_pose(pose, np.eye(3), 0.5 * np.eye(3), rng).rotation
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) > 0


def test_noisy_pose_rejects_non_psd(rng):
    with pytest.raises(InvalidParameterError):
        sample_noisy_pose(_pose(), -np.eye(3), np.zeros((3, 3)), rng)
    with pytest.raises(InvalidParameterError):
        sample_noisy_pose(_pose(), np.zeros((3, 3)), np.array([[1, 2, 0], [0, 1, 0], [0, 0, 1.0]]), rng)


def test_sensor_model_validation():
    with pytest.raises(InvalidParameterError):
        SensorModel(R_BS=2 * np.eye(3))
    with pytest.raises(InvalidParameterError):
        SensorModel(noise_cov=-np.eye(3))
