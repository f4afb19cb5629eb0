import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from se2nav.reeds_shepp import advance, reeds_shepp_distance, reeds_shepp_shoot, rs_distance_many

rsplan = pytest.importorskip("rsplan.planner")

pose = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(-math.pi, math.pi))


def _pose_error(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]), abs(math.remainder(a[2] - b[2], 2 * math.pi)))


def oracle_length(start, goal, radius):
    # independent implementation that enumerates every word family
    return min(p.total_length for p in rsplan._solve_path(start, goal, radius, 0.1))


def test_matches_exhaustive_enumeration():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        a = (*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi))
        b = (*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi))
        r = rng.uniform(0.5, 2.0)
        path = reeds_shepp_shoot(a, b, r)
        worst = max(worst, abs(path.length - oracle_length(a, b, r)))
        assert _pose_error(path.end(), b) < 1e-9
    assert worst < 1e-9


def test_same_pose_is_empty():
    p = reeds_shepp_shoot((1.0, 2.0, 0.3), (1.0, 2.0, 0.3), 1.0)
    assert p.segments == () and p.length == 0.0 and p.word == ""


def test_straight_ahead_is_single_segment():
    p = reeds_shepp_shoot((0.0, 0.0, 0.0), (3.0, 0.0, 0.0), 1.0)
    assert p.word == "S+"
    assert p.segments[0].length == 3.0


def test_straight_behind_is_reverse():
    p = reeds_shepp_shoot((0.0, 0.0, 0.0), (-2.0, 0.0, 0.0), 1.0)
    assert p.word == "S-" and p.length == pytest.approx(2.0, abs=1e-12)


def test_invalid_radius():
    with pytest.raises(ValueError):
        reeds_shepp_shoot((0, 0, 0), (1, 0, 0), 0.0)


@settings(max_examples=200, deadline=None)
@given(a=pose, b=pose, r=st.floats(0.3, 3.0))
def test_inversion_symmetry(a, b, r):
    fwd = reeds_shepp_shoot(a, b, r)
    back = reeds_shepp_shoot(b, a, r)
    assert back.length == pytest.approx(fwd.length, abs=1e-9)
    # traversing the forward word backwards from the goal returns to the start
    pose_ = b
    for seg in reversed(fwd.segments):
        pose_ = advance(pose_, seg.kind, -seg.length, r)
    assert _pose_error(pose_, a) < 1e-9


@settings(max_examples=200, deadline=None)
@given(a=pose, b=pose, r=st.floats(0.3, 3.0))
def test_length_bounds(a, b, r):
    d = reeds_shepp_distance(a, b, r)
    assert d >= math.dist(a[:2], b[:2]) - 1e-9
    assert d == pytest.approx(reeds_shepp_shoot(a, b, r).length, abs=1e-12)


def test_sample_spacing_and_gears():
    p = reeds_shepp_shoot((0, 0, 0), (0.5, 1.5, math.pi), 0.8)
    poses, gears = p.sample(0.05)
    steps = np.hypot(*np.diff(poses[:, :2], axis=0).T)
    assert steps.max() <= 0.05 + 1e-12
    assert _pose_error(poses[-1], (0.5, 1.5, math.pi)) < 1e-9
    assert set(np.unique(gears)) <= {-1, 1}


def test_vectorised_distance():
    rng = np.random.default_rng(3)
    starts = np.column_stack([rng.uniform(-3, 3, (20, 2)), rng.uniform(-3, 3, 20)])
    d = rs_distance_many(starts, 1.0, -0.5, 0.7, 1.2)
    for s, v in zip(starts, d):
        assert v == pytest.approx(reeds_shepp_distance(s, (1.0, -0.5, 0.7), 1.2), abs=1e-12)
