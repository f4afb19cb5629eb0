import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from se2nav import cli
from se2nav.harness import (AUDIT_TOLERANCE, BatchConfig, ThroughputRow, benchmark, cap_unobserved_risk,
                            is_monotone, monotone_violations, run_scenario, sample_start_goal, smooth_unknown, throughput_bench,
                            truth_grid)
from se2nav.scenario import ConfigError, Scenario, build_terrain, load_scenario
from se2nav.traversability import Se2GridSpec, grid_from_mask, query_trilinear

FLAT = {"name": "flat", "seed": 3, "start": [0, 0, 0], "goal": [5, 0, 0],
        "terrain": {"type": "analytic", "kind": "flat", "width": 30, "height": 30}}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def flat_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("flat")
    return run_scenario(Scenario.from_dict(FLAT), out), out


def test_flat_goal_ahead_succeeds(flat_run):
    result, out = flat_run
    m = result.metrics
    assert m.success and m.failure == ""
    # the straight segment is the shortest planar path, so the driven length cannot undercut it
    assert 5.0 - 1e-6 <= m.l_traj <= 5.0 * 1.05
    assert m.goal_error <= 0.3 and m.heading_error <= 0.3
    assert m.audit_worst <= AUDIT_TOLERANCE
    assert all(max(p.audit.values()) <= AUDIT_TOLERANCE for p in result.plans)
    assert m.n_switches == 0


def test_exports_are_complete(flat_run):
    result, out = flat_run
    d = out / "flat"
    for f in ("metrics.csv", "timing.csv", "trajectory.csv", "trace.csv", "map_snapshot.npz", "report.json"):
        assert (d / f).is_file()
    report = json.loads((d / "report.json").read_text())
    # goal invariance across replans
    np.testing.assert_allclose(report["goal"], FLAT["goal"], atol=1e-12, rtol=0)
    for p in report["plans"]:
        np.testing.assert_allclose(p["goal"], FLAT["goal"], atol=1e-12, rtol=0)
    rows = read_csv(d / "metrics.csv")
    assert len(rows) == 1 and rows[0]["success"] == "1"
    assert "t_p_ms" not in rows[0]
    traj = np.loadtxt(d / "trajectory.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(traj[:, 0]) > 0)
    with np.load(d / "map_snapshot.npz") as snap:
        assert snap["heights"].shape == snap["variance"].shape == snap["known"].shape
        assert snap["known"].dtype == bool and snap["known"].any()


def test_unsuccessful_metrics_are_blank():
    sc = Scenario.from_dict({**FLAT, "name": "rock", "terrain": {"amplitude": 0.0, "rock_positions": [[5.0, 0.0]]}})
    m = run_scenario(sc).metrics
    assert not m.success and m.failure == "invalid-endpoint"
    assert math.isnan(m.T_f) and math.isnan(m.l_traj) and math.isnan(m.t_p_ms)
    # the rock's top and shadow are unseen from the start, so one plan may be issued before the goal is rejected
    assert m.goal_error > 1.0


def test_same_seed_same_metric_bytes(tmp_path):
    sc = Scenario.from_dict({**FLAT, "goal": [4, 1.5, 0.4]})
    run_scenario(sc, tmp_path / "a")
    run_scenario(sc, tmp_path / "b")
    for f in ("metrics.csv", "trajectory.csv", "trace.csv"):
        assert (tmp_path / "a/flat" / f).read_bytes() == (tmp_path / "b/flat" / f).read_bytes()


# ------------------------------------------------------------------------- config


@pytest.mark.parametrize("data", [
    {"unknown_key": 1},
    {"map": {"sizee": 10}},
    {"goal": [100, 0, 0]},
    {"start": [0, 0]},
    {"map": {"unknown_risk": 1.5}},
    {"terrain": {"type": "marble"}},
    {"loop": {"dt": 0}},
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        Scenario.from_dict(data)


def test_defaults_are_valid_and_documented():
    sc = Scenario.from_dict({})
    assert sc.goal == (8.0, 0.0, 0.0)
    assert sc.map.stride == 2 and sc.optimizer.r_max == 0.7


def test_with_overrides_keeps_file_terrain(tmp_path):
    hf = build_terrain({"type": "analytic", "kind": "incline", "pitch": 0.1, "width": 20, "height": 20}, 0)
    np.savez(tmp_path / "t.npz", heights=hf.heights, resolution=hf.resolution, origin=np.array(hf.origin))
    (tmp_path / "s.yaml").write_text("terrain: {type: file, path: t.npz}\ngoal: [5, 0, 0]\n")
    sc = load_scenario(tmp_path / "s.yaml").with_overrides(seed=5)
    assert sc.seed == 5
    np.testing.assert_array_equal(sc.build_terrain().heights, hf.heights)


def test_batch_validation():
    with pytest.raises(ConfigError):
        BatchConfig.from_dict({"classes": [{"name": "x", "preset": "lunar"}]})
    with pytest.raises(ConfigError):
        BatchConfig.from_dict({"min_distance": 5, "max_distance": 4})
    with pytest.raises(ConfigError):
        BatchConfig.from_dict({"colour": "red"})


# --------------------------------------------------------------------------- bench


def test_zero_trials_gives_empty_table(tmp_path):
    res = benchmark(BatchConfig.from_dict({"terrains": 3}), 0, out_dir=tmp_path)
    assert res.rows == [] and res.runs == []
    assert read_csv(tmp_path / "bench_table.csv") == []
    assert (tmp_path / "bench_table.csv").read_text().startswith("class,")


def test_sampled_pairs_meet_the_rule():
    batch = BatchConfig.from_dict({"terrains": 1})
    base = Scenario.from_dict({"terrain": {**batch.class_terrain(batch.classes[0]), "seed": 11}})
    truth = build_terrain(base.terrain, 11)
    grid = truth_grid(truth, base, batch.extent)
    rng = np.random.default_rng(0)
    for _ in range(5):
        start, goal = sample_start_goal(truth, base, rng, batch.extent, batch.min_distance, batch.max_distance,
                                        batch.max_attempts, grid)
        assert batch.min_distance <= math.dist(start[:2], goal[:2]) <= batch.max_distance
        for pose in (start, goal):
            assert query_trilinear(grid, np.array(pose), "risk")[0] < base.optimizer.r_max / 2
            assert query_trilinear(grid, np.array(pose), "sdf")[0] >= base.optimizer.d_min


@pytest.mark.slow
def test_bench_csv_is_reproducible(tmp_path):
    batch = BatchConfig.from_dict({"terrains": 1})
    a = benchmark(batch, 2, seed=4, out_dir=tmp_path / "a")
    benchmark(batch, 2, seed=4, out_dir=tmp_path / "b")
    assert len(a.rows) == 1 and a.rows[0]["trials"] == 2
    for f in ("bench_metrics.csv", "bench_runs.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# ----------------------------------------------------------------------- mapbench


def test_throughput_values_are_deterministic():
    a = throughput_bench([4.0, 6.0], [4, 8], repeats=2)
    b = throughput_bench([4.0, 6.0], [4, 8], repeats=2)
    assert [r.risk_digest for r in a] == [r.risk_digest for r in b]
    assert [r.n_states for r in a] == [6400, 12800, 14400, 28800]
    assert all(r.median_ms > 0 and r.within_budget == (r.median_ms < r.budget_ms) for r in a)
    with pytest.raises(ConfigError):
        throughput_bench([], [8])


def _row(n, ms):
    return ThroughputRow(1.0, 8, n, ms, ms, 0, 0, 0, 50.0, True, "")


def test_monotone_check():
    assert is_monotone([_row(10, 1.0), _row(20, 2.0), _row(20, 1.5), _row(40, 2.0)])
    assert not is_monotone([_row(10, 3.0), _row(20, 2.0)])
    bad = monotone_violations([_row(10, 1.0), _row(30, 2.5), _row(20, 3.0)])
    assert [(a.n_states, b.n_states) for a, b in bad] == [(20, 30)]


# ------------------------------------------------------------------ window helpers


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), frac=st.floats(0.05, 0.9), sigma=st.floats(0.5, 6.0))
def test_smooth_fill_keeps_known_cells_and_bounds(seed, frac, sigma):
    rng = np.random.default_rng(seed)
    h = rng.normal(0, 1, (30, 40))
    known = rng.random((30, 40)) < frac
    known[0, 0] = True
    out = smooth_unknown(h, known, sigma)
    assert np.array_equal(out[known], h[known])
    # a weighted mean never leaves the range of the values it averages
    assert out.min() >= h.min() - 1e-9 and out.max() <= h.max() + 1e-9


def test_smooth_fill_reproduces_constant_and_removes_terraces():
    known = np.zeros((40, 40), bool)
    known[:, :5] = True
    known[:, -5:] = True
    h = np.where(np.arange(40) < 20, 0.0, 1.0)[None, :].repeat(40, 0)  # nearest fill: one step in the middle
    out = smooth_unknown(h, known, 5.0)
    assert np.abs(np.diff(out, axis=1)).max() < 0.2
    np.testing.assert_allclose(smooth_unknown(np.full((20, 20), 2.5), known[:20, :20], 3.0), 2.5)


def test_risk_cap_only_touches_unobserved_states():
    spec = Se2GridSpec((0.0, 0.0), 10, 10, 0.2, 4)
    grid = grid_from_mask(spec, np.ones((10, 10), bool))
    known = np.zeros((19, 19), bool)
    known[:, :10] = True
    cap_unobserved_risk(grid, known, 2, 2.0, 0.5)
    assert np.all(grid.risk[:, :, :4] == 1.0)
    assert np.all(grid.risk[:, :, -3:] == 0.5)
    before = grid.risk.copy()
    cap_unobserved_risk(grid, known, 2, 2.0, 1.0)
    assert np.array_equal(before, grid.risk)


# ---------------------------------------------------------------------------- cli


def test_cli_run_and_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_DIR_ENV, str(tmp_path / "env"))
    (tmp_path / "flat.yaml").write_text(json.dumps(FLAT))
    assert cli.main(["run", str(tmp_path / "flat.yaml")]) == 0
    assert "success" in capsys.readouterr().out
    assert (tmp_path / "env/flat/metrics.csv").is_file()
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "bad.yaml").write_text("map: {sizee: 3}\n")
    assert cli.main(["run", str(tmp_path / "bad.yaml")]) == 2
    assert cli.main(["bench", str(tmp_path / "flat.yaml"), "--trials", "0"]) == 2  # not a batch file
    (tmp_path / "batch.yaml").write_text("terrains: 2\n")
    assert cli.main(["bench", str(tmp_path / "batch.yaml"), "--trials", "0", "--out-dir", str(tmp_path / "b")]) == 0
    assert read_csv(tmp_path / "b/bench_table.csv") == []
    assert cli.main(["run", str(tmp_path / "flat.yaml"), "--threads", "0"]) == 2


def test_cli_export_terrain_round_trip(tmp_path):
    assert cli.main(["export-terrain", "--preset", "rough", "--seed", "9", "--out-dir", str(tmp_path)]) == 0
    sc = Scenario.from_dict({"terrain": {"type": "file", "path": str(tmp_path / "terrain.npz")}})
    ref = Scenario.from_dict({"terrain": {"amplitude": 1.5, "rocks": 20, "seed": 9}})
    np.testing.assert_array_equal(sc.build_terrain().heights, ref.build_terrain().heights)


def test_cli_mapbench(tmp_path, capsys):
    assert cli.main(["mapbench", "--sizes", "4", "--yaws", "4", "--repeats", "1", "--out-dir", str(tmp_path)]) == 0
    assert "monotone" in capsys.readouterr().out
    assert len(read_csv(tmp_path / "mapbench.csv")) == 1
