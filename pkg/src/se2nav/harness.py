"""Closed-loop simulation, benchmark batches and mapping throughput measurements.

One run repeats perceive -> map -> assess -> search -> optimise -> drive until the
robot reaches the goal or a stage fails.  Values are fully determined by the seeds;
wall-clock timings are kept apart from them so metric files stay byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .flatness import AnalyticSource, PoseTrace, integrate_kinematics, terrain_pose, write_trace_csv
from .mapping import ElevationMap, EmptyMapError, inpaint, nearest_known_indices, update_map
from .scenario import ConfigError, Scenario, build_terrain, load_yaml
from .search import InvalidEndpointError, NoPathError, extract_init, hybrid_astar
from .terrain import HeightField, NoisyPose, SensorModel, generate_terrain, sample_noisy_pose, simulate_scan
from .trajectory import (BoundaryState, GridFieldProvider, NonConvergenceError, TrajectoryProblem,
                         TrajectorySolution, phr_alm_solve)
from .traversability import Se2GridSpec, Se2RiskGrid, build_risk_grid, query_trilinear, sdf_from_obstacles

logger = logging.getLogger(__name__)

FAILURE_TAGS = ("invalid-endpoint", "no-path", "nonconvergence", "audit-failure", "map-exit", "timeout")
AUDIT_TOLERANCE = 0.01
# a periodic replan replaces a still-safe plan only if it is at most this much slower
ADOPT_RATIO = 1.0


class PlanFailure(RuntimeError):
    def __init__(self, tag: str, message: str = ""):
        super().__init__(message or tag)
        self.tag = tag


# ----------------------------------------------------------------------------- records


@dataclass
class PlanRecord:
    index: int
    sim_time: float
    start: tuple
    goal: tuple
    start_speed: float
    n_switches: int
    T_f: float
    length: float
    audit: dict
    solver: dict
    search_ms: float
    optimize_ms: float

    @property
    def t_p_ms(self) -> float:
        return self.search_ms + self.optimize_ms


@dataclass
class RunMetrics:
    """Outcome of one closed-loop run.  Duration, length and planning time are NaN unless ``success``."""

    name: str
    seed: int
    success: bool
    failure: str
    T_f: float
    l_traj: float
    n_plans: int
    n_switches: int
    audit_worst: float
    goal_error: float
    heading_error: float
    t_p_ms: float = math.nan
    mapping_ms: float = math.nan

    VALUE_COLUMNS = ("name", "seed", "success", "failure", "T_f", "l_traj", "n_plans", "n_switches",
                     "audit_worst", "goal_error", "heading_error")
    TIMING_COLUMNS = ("name", "seed", "t_p_ms", "mapping_ms")

    def value_row(self) -> list:
        return [_fmt(getattr(self, c)) for c in self.VALUE_COLUMNS]

    def timing_row(self) -> list:
        return [_fmt(getattr(self, c)) for c in self.TIMING_COLUMNS]


@dataclass
class RunResult:
    scenario: Scenario
    metrics: RunMetrics
    plans: list
    trajectory: list  # rows of executed planned states
    trace_t: np.ndarray
    trace_states: np.ndarray
    trace_positions: np.ndarray
    trace_rotations: np.ndarray
    trace_controls: np.ndarray
    cycles: list  # (sim_time, mapping_ms, planned: bool)
    elevation: ElevationMap | None = None
    grid: Se2RiskGrid | None = None
    detail: str = ""


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else f"{float(v):.9g}"
    return str(v)


def _wrap(a: float) -> float:
    return math.remainder(a, 2.0 * math.pi)


# -------------------------------------------------------------------------- perception


class Perception:
    """Robot-centric elevation map plus the risk grid over the current planning window."""

    def __init__(self, sc: Scenario, truth: HeightField, rng_sensor, rng_pose):
        self.sc = sc
        self.truth = truth
        self.source = AnalyticSource(truth)
        self.rng_sensor = rng_sensor
        self.rng_pose = rng_pose
        self.map = ElevationMap(sc.map.size, sc.map.resolution, sc.start[:2])
        self.cov_p = np.eye(3) * sc.position_std ** 2
        self.cov_r = np.eye(3) * sc.rotation_std ** 2
        # the sensor cannot see the ground closer than this; see window_heightfield
        steepest = -min(float(np.min(sc.sensor.elevations)), -1e-3)
        self.blind_radius = float(sc.sensor.p_BS[2]) / math.tan(steepest) + 2.0 * sc.map.resolution
        self.estimate = None

    def true_pose(self, state) -> NoisyPose:
        fr = terrain_pose(self.source, state)
        return NoisyPose(np.array([state[0], state[1], fr.z]), fr.rotation)

    def update(self, state, goal) -> tuple[Se2RiskGrid, float]:
        """Scan from the true pose, fuse with the noisy pose estimate, rebuild the window grid."""
        pose = self.true_pose(state)
        scan = simulate_scan(self.truth, pose, self.sc.sensor, self.rng_sensor)
        est = sample_noisy_pose(pose, self.cov_p, self.cov_r, self.rng_pose)
        t0 = time.perf_counter()
        self.map = update_map(self.map, est, scan.points, self.sc.sensor)
        self.estimate = est
        hf, known = self.window_heightfield(state, goal)
        spec = Se2GridSpec.matching(hf, self.sc.map.n_yaw, self.sc.map.stride)
        grid = build_risk_grid(hf, spec, self.sc.assessment, with_sdf=False)
        cap_unobserved_risk(grid, known, self.sc.map.stride, self.sc.assessment.ellipse[0] / hf.resolution,
                            self.sc.map.unknown_risk)
        grid = sdf_from_obstacles(grid)
        return grid, 1e3 * (time.perf_counter() - t0)

    def window_heightfield(self, state, goal) -> tuple[HeightField, np.ndarray]:
        """Planning window of the map, inpainted, with its observed-cell mask."""
        m = self.map
        ox, oy = m.origin
        res = m.resolution
        pad = self.sc.map.plan_margin
        lo = np.minimum(state[:2], goal[:2]) - pad
        hi = np.maximum(state[:2], goal[:2]) + pad
        i0 = max(int(math.floor((lo[0] - ox) / res)), 0)
        j0 = max(int(math.floor((lo[1] - oy) / res)), 0)
        i1 = min(int(math.ceil((hi[0] - ox) / res)), m.n - 1)
        j1 = min(int(math.ceil((hi[1] - oy) / res)), m.n - 1)
        known = m.known[j0:j1 + 1, i0:i1 + 1].copy()
        heights = m.height[j0:j1 + 1, i0:i1 + 1].copy()
        if self.estimate is not None:
            # unseen cells under the robot take the contact plane of the pose estimate
            p = self.estimate.position
            n = self.estimate.rotation[:, 2]
            X, Y = np.meshgrid(ox + res * np.arange(i0, i1 + 1), oy + res * np.arange(j0, j1 + 1))
            fill = ~known & (np.hypot(X - p[0], Y - p[1]) <= self.blind_radius)
            heights[fill] = p[2] - (n[0] * (X[fill] - p[0]) + n[1] * (Y[fill] - p[1])) / n[2]
            known |= fill
        r, c = nearest_known_indices(known)
        filled = heights[r, c]
        sigma = self.sc.map.fill_sigma / res
        if sigma > 0 and not known.all():
            filled = smooth_unknown(filled, known, sigma)
        return HeightField(filled, res, (ox + i0 * res, oy + j0 * res)), known


def smooth_unknown(filled: np.ndarray, known: np.ndarray, sigma: float) -> np.ndarray:
    """Replace unknown cells by a Gaussian-weighted mean of known heights.

    Nearest-neighbour fill leaves terraces along the boundaries between the regions
    closest to different known cells; those read as steps in the risk assessment.
    Cells with no known height within a few ``sigma`` use the blurred nearest fill.
    """
    w = ndimage.gaussian_filter(known.astype(float), sigma, mode="nearest")
    num = ndimage.gaussian_filter(np.where(known, filled, 0.0), sigma, mode="nearest")
    far = ndimage.gaussian_filter(filled, sigma, mode="nearest")
    alpha = np.clip(w / 0.05, 0.0, 1.0)
    blend = alpha * (num / np.maximum(w, 1e-12)) + (1 - alpha) * far
    return np.where(known, filled, blend)


def cap_unobserved_risk(grid: Se2RiskGrid, known: np.ndarray, stride: int, radius_cells: float,
                        cap: float, min_coverage: float = 0.5) -> None:
    """Limit the risk of states whose footprint neighbourhood is mostly unobserved (in place).

    Inpainted heights there are guesses, so they may slow the search down but not
    block it; the next replan re-assesses once the cells have been seen.
    """
    if cap >= 1.0:
        return
    size = 2 * int(math.ceil(radius_cells)) + 1
    cover = ndimage.uniform_filter(known.astype(float), size, mode="nearest")
    cover = cover[::stride, ::stride][:grid.spec.ny, :grid.spec.nx]
    blind = cover < min_coverage
    grid.risk[:, blind] = np.minimum(grid.risk[:, blind], cap)


# ---------------------------------------------------------------------------- planning


def plan_once(sc: Scenario, grid: Se2RiskGrid, state, start_speed: float, gear: int) -> tuple:
    """Search and optimise from ``state`` to the scenario goal; returns (solution, record fields)."""
    opt = sc.optimizer
    start = tuple(float(v) for v in state)
    t0 = time.perf_counter()
    try:
        path = hybrid_astar(grid, start, sc.goal, sc.search_config(gear if start_speed > 1e-6 else 0))
    except InvalidEndpointError as exc:
        raise PlanFailure("invalid-endpoint", str(exc)) from exc
    except NoPathError as exc:
        raise PlanFailure("no-path", str(exc)) from exc
    t1 = time.perf_counter()
    init = extract_init(path, sc.robot, opt.speed_fraction, opt.piece_length)
    problem = TrajectoryProblem(GridFieldProvider(grid), BoundaryState(*start, speed=float(start_speed)),
                                BoundaryState(*sc.goal), sc.robot, rho_t=opt.rho_t, rho_r=opt.rho_r,
                                r_max=opt.r_max, d_min=opt.d_min, delta_plus=opt.delta_plus,
                                samples_per_piece=opt.samples_per_piece)
    try:
        sol = phr_alm_solve(problem, init)
    except NonConvergenceError as exc:
        raise PlanFailure("nonconvergence", str(exc)) from exc
    t2 = time.perf_counter()
    audit = sol.audit()
    if not audit.passes(AUDIT_TOLERANCE):
        raise PlanFailure("audit-failure", f"worst relative violation {audit.worst():.3g}")
    return sol, audit, 1e3 * (t1 - t0), 1e3 * (t2 - t1)


def remaining_is_safe(sol: TrajectorySolution, t_from: float, grid: Se2RiskGrid, sc: Scenario,
                      spacing: float = 0.05) -> bool:
    """Risk and clearance of the not yet executed part, looked up in a newer grid."""
    if t_from >= sol.T_f:
        return True
    n = max(2, int(math.ceil((sol.T_f - t_from) / spacing)) + 1)
    smp = sol.sample(np.linspace(t_from, sol.T_f, n))
    vals, _, oob = GridFieldProvider(grid).query(smp["x"], smp["y"], smp["theta"])
    if oob.any():
        return False
    return bool(np.all(vals[:, 3] < sc.optimizer.r_max) and np.all(vals[:, 4] >= sc.optimizer.d_min))


# -------------------------------------------------------------------------- closed loop


TRAJECTORY_COLUMNS = ("t", "plan", "x", "y", "theta", "eta", "v_x", "delta", "a_x", "a_y", "phi_x", "phi_y",
                      "risk", "sdf")


def run_scenario(sc: Scenario, out_dir=None) -> RunResult:
    """Drive one scenario to the goal (or to the first unrecoverable failure)."""
    truth = sc.build_terrain()
    ss = np.random.SeedSequence(sc.seed)
    rng_sensor, rng_pose = (np.random.default_rng(s) for s in ss.spawn(2))
    per = Perception(sc, truth, rng_sensor, rng_pose)
    lp = sc.loop
    goal = np.array(sc.goal)
    state = np.array(sc.start, dtype=float)
    sdot, gear, t = 0.0, 0, 0.0
    sol, sol_t, since_plan = None, 0.0, math.inf
    plans, traj_rows, cycles = [], [], []
    tr_t, tr_s, tr_p, tr_r, tr_c = [np.array([0.0])], [state[None]], [], [], []
    p0 = per.true_pose(state)
    tr_p.append(p0.position[None])
    tr_r.append(p0.rotation[None])
    tr_c.append(np.zeros((1, 4)))
    failure = ""
    detail = ""
    grid = None
    audits = []
    plan_ms = []

    def at_goal():
        return (math.dist(state[:2], goal[:2]) <= lp.goal_tolerance
                and abs(_wrap(state[2] - goal[2])) <= lp.heading_tolerance)

    while True:
        if sol is None and at_goal():
            break
        if t >= lp.max_time - 1e-9:
            failure = "timeout"
            break
        try:
            grid, ms = per.update(state, goal)
        except EmptyMapError:
            failure = "no-path"
            break
        remaining = sol.T_f - sol_t if sol is not None else 0.0
        need = sol is None or (since_plan >= lp.replan_period - 1e-9 and remaining > lp.replan_period + 1e-9)
        if not need and lp.perception_period < lp.replan_period and not remaining_is_safe(sol, sol_t, grid, sc):
            need = True
        planned = False
        if need:
            try:
                new, audit, ms_s, ms_o = plan_once(sc, grid, state, sdot, gear)
            except PlanFailure as exc:
                logger.info("plan %d failed at t=%.2f: %s", len(plans), t, exc)
                if sol is not None and remaining > 1e-9 and remaining_is_safe(sol, sol_t, grid, sc):
                    new = None
                else:
                    failure = exc.tag
                    detail = f"t={t:.2f}: {exc}"
                    cycles.append((t, ms, False))
                    break
            if new is not None:
                plan_ms.append(ms_s + ms_o)
                if (sol is not None and new.T_f > ADOPT_RATIO * remaining
                        and remaining_is_safe(sol, sol_t, grid, sc)):
                    # the old plan is still safe and no slower; switching would only add dithering
                    new, since_plan = None, 0.0
            if new is not None:
                planned = True
                sol, sol_t, since_plan = new, 0.0, 0.0
                audits.append(audit.worst())
                plans.append(PlanRecord(len(plans), t, tuple(float(v) for v in state), tuple(sc.goal), sdot,
                                        sol.n_switches, sol.T_f, sol.length(), dict(audit.relative), sol.report(),
                                        ms_s, ms_o))
        cycles.append((t, ms, planned))
        seg = min(lp.perception_period, sol.T_f - sol_t)
        n = max(1, int(round(seg / lp.dt)))
        ts = sol_t + seg * np.arange(n + 1) / n
        smp = sol.sample(ts)
        trace = integrate_kinematics(ts, smp["v_x"], smp["delta"], per.source, state, seg / n,
                                     sc.robot.wheelbase)
        k_end = len(trace.t)
        for r in range(1, k_end):
            traj_rows.append([t + ts[r] - sol_t, len(plans) - 1, *(float(smp[c][r]) for c in TRAJECTORY_COLUMNS[2:])])
        tr_t.append(t + trace.t[1:] - sol_t)
        tr_s.append(trace.states[1:])
        tr_p.append(trace.positions[1:])
        tr_r.append(trace.rotations[1:])
        tr_c.append(np.column_stack([smp["v_x"], smp["delta"], smp["a_x"], smp["a_y"]])[1:k_end])
        if trace.truncated:
            failure = "map-exit"
            break
        state = trace.states[-1].copy()
        sol_t += seg
        since_plan += seg
        t += seg
        sdot = float(smp["sdot"][-1])
        gear = int(smp["eta"][-1])
        if sol_t >= sol.T_f - 1e-9:
            sol = None
            sdot = 0.0
            if at_goal():
                break

    states = np.vstack(tr_s)
    success = failure == ""
    driven = float(np.sum(np.hypot(*np.diff(states[:, :2], axis=0).T))) if len(states) > 1 else 0.0
    eta_exec = np.array([row[5] for row in traj_rows])
    n_sw = int(np.count_nonzero(np.diff(eta_exec) != 0)) if eta_exec.size else 0
    t_p = plan_ms
    maps = [c[1] for c in cycles]
    metrics = RunMetrics(
        name=sc.name, seed=sc.seed, success=success, failure=failure,
        T_f=t if success else math.nan, l_traj=driven if success else math.nan,
        n_plans=len(plans), n_switches=n_sw,
        audit_worst=max(audits) if audits else math.nan,
        goal_error=math.dist(state[:2], goal[:2]), heading_error=abs(_wrap(state[2] - goal[2])),
        t_p_ms=float(np.mean(t_p)) if success and t_p else math.nan,
        mapping_ms=float(np.mean(maps)) if maps else math.nan,
    )
    result = RunResult(sc, metrics, plans, traj_rows, np.concatenate(tr_t), states, np.vstack(tr_p),
                       np.vstack(tr_r), np.vstack(tr_c), cycles, per.map, grid, detail)
    if out_dir is not None:
        export_run(result, out_dir)
    return result


# ------------------------------------------------------------------------------ exports


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def export_run(result: RunResult, out_dir) -> Path:
    """Write metrics, timings, trajectories, map snapshot and solver report under ``out_dir/<name>``."""
    d = Path(out_dir) / result.scenario.name
    d.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    _write_csv(d / "metrics.csv", RunMetrics.VALUE_COLUMNS, [m.value_row()])
    _write_csv(d / "timing.csv", ("sim_time", "mapping_ms", "plan", "search_ms", "optimize_ms", "t_p_ms"),
               _timing_rows(result))
    # only audited plans are ever executed, so every row below comes from a passing trajectory
    _write_csv(d / "trajectory.csv", TRAJECTORY_COLUMNS,
               [[_fmt(r[0]), str(r[1]), *(_fmt(v) for v in r[2:])] for r in result.trajectory])
    write_trace_csv(d / "trace.csv", PoseTrace(result.trace_t, result.trace_states, result.trace_positions,
                                               result.trace_rotations), result.trace_controls)
    if result.elevation is not None:
        # terrain-file layout (heights, resolution, origin) plus the variance and known layers
        snap = dict(heights=result.elevation.height, resolution=result.elevation.resolution,
                    origin=np.array(result.elevation.origin), variance=result.elevation.variance,
                    known=result.elevation.known)
        if result.grid is not None:
            g = result.grid
            snap.update(risk=g.risk, sdf=g.sdf, z_b=g.z_b, grid_origin=np.array(g.spec.origin),
                        grid_resolution=g.spec.resolution, n_yaw=g.spec.n_yaw)
        np.savez_compressed(d / "map_snapshot.npz", **snap)
    report = {
        "scenario": result.scenario.raw,
        "goal": list(result.scenario.goal),
        "metrics": {c: getattr(m, c) for c in RunMetrics.VALUE_COLUMNS},
        "failure_detail": result.detail,
        "plans": [dict(asdict(p), t_p_ms=p.t_p_ms) for p in result.plans],
    }
    with open(d / "report.json", "w") as fh:
        json.dump(_jsonable(report), fh, indent=1)
    return d


def _timing_rows(result: RunResult) -> list:
    rows = []
    k = 0
    for sim_t, ms, planned in result.cycles:
        if planned:
            p = result.plans[k]
            rows.append([_fmt(sim_t), _fmt(ms), str(k), _fmt(p.search_ms), _fmt(p.optimize_ms), _fmt(p.t_p_ms)])
            k += 1
        else:
            rows.append([_fmt(sim_t), _fmt(ms), "", "", "", ""])
    return rows


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


# ---------------------------------------------------------------------------- benchmark


PRESETS = {
    "gentle": {"amplitude": 0.5, "rocks": 0},
    "moderate": {"amplitude": 1.0, "rocks": 12},
    "rough": {"amplitude": 1.5, "rocks": 20},
}


@dataclass
class BatchConfig:
    """Scenario classes sharing a base configuration; each class spans ``terrains`` generated terrains."""

    name: str = "batch"
    terrains: int = 20
    classes: list = field(default_factory=lambda: [{"name": "moderate", "preset": "moderate"}])
    base: dict = field(default_factory=dict)
    extent: float = 10.0
    min_distance: float = 6.0
    max_distance: float = 15.0
    max_attempts: int = 20000

    @classmethod
    def from_dict(cls, data: dict) -> "BatchConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown batch keys: {sorted(extra)}")
        cfg = cls(**data)
        if cfg.terrains < 0 or not cfg.classes:
            raise ConfigError("batch needs >= 0 terrains and at least one class")
        if not 0 < cfg.min_distance <= cfg.max_distance or cfg.extent <= 0:
            raise ConfigError("sampling distances must satisfy 0 < min <= max and extent > 0")
        for c in cfg.classes:
            if "name" not in c:
                raise ConfigError("every class needs a name")
            if c.get("preset") is not None and c["preset"] not in PRESETS:
                raise ConfigError(f"unknown preset {c['preset']!r}")
        # resolve once so config errors surface before any run
        Scenario.from_dict({**cfg.base, "terrain": cfg.class_terrain(cfg.classes[0])})
        return cfg

    def class_terrain(self, cls_cfg: dict) -> dict:
        terrain = dict(self.base.get("terrain", {}))
        terrain.update(PRESETS.get(cls_cfg.get("preset"), {}))
        terrain.update(cls_cfg.get("terrain", {}))
        return terrain


def load_batch(path) -> BatchConfig:
    return BatchConfig.from_dict(load_yaml(path))


def sample_start_goal(truth: HeightField, sc: Scenario, rng: np.random.Generator, extent: float,
                      min_distance: float, max_distance: float, max_attempts: int = 20000,
                      grid: Se2RiskGrid | None = None):
    """Rejection-sample a start/goal pair with low risk and a bounded separation.

    Both poses need risk below half the risk limit and clearance of at least ``d_min``
    on the ground-truth assessment; the pair must lie within the local map's reach.
    Returns None when no pair is found.
    """
    if grid is None:
        grid = truth_grid(truth, sc, extent)
    r_ok = 0.5 * sc.optimizer.r_max
    reach = 0.5 * sc.map.size - max(sc.assessment.ellipse) - sc.map.resolution * sc.map.stride

    def draw():
        return np.array([rng.uniform(-extent, extent), rng.uniform(-extent, extent), rng.uniform(-math.pi, math.pi)])

    def good(p):
        risk, _ = query_trilinear(grid, p, "risk")
        sdf, _ = query_trilinear(grid, p, "sdf")
        return risk < r_ok and sdf >= sc.optimizer.d_min

    for _ in range(max_attempts):
        s, g = draw(), draw()
        d = math.dist(s[:2], g[:2])
        if not min_distance <= d <= max_distance or np.max(np.abs(g[:2] - s[:2])) > reach:
            continue
        if good(s) and good(g):
            return tuple(float(v) for v in s), tuple(float(v) for v in g)
    return None


def truth_grid(truth: HeightField, sc: Scenario, extent: float) -> Se2RiskGrid:
    ox, oy = truth.origin
    res = truth.resolution
    m = sc.map.stride
    pad = extent + 1.0
    i0 = max(int(math.floor((-pad - ox) / res)), 0)
    j0 = max(int(math.floor((-pad - oy) / res)), 0)
    ny, nx = truth.heights.shape
    n_x = min(int(math.ceil(2 * pad / res)) + 1, nx - i0)
    n_y = min(int(math.ceil(2 * pad / res)) + 1, ny - j0)
    spec = Se2GridSpec((ox + i0 * res, oy + j0 * res), (n_x - 1) // m + 1, (n_y - 1) // m + 1, res * m,
                       sc.map.n_yaw)
    return build_risk_grid(truth, spec, sc.assessment)


@dataclass
class BenchResult:
    rows: list  # per terrain: dict of aggregated values
    runs: list  # RunMetrics per run, in execution order

    VALUE_COLUMNS = ("class", "terrain", "terrain_seed", "trials", "successes", "success_rate", "mean_T_f",
                     "mean_l_traj", *(f"fail_{t}" for t in FAILURE_TAGS))
    TABLE_COLUMNS = ("class", "terrain", "trials", "success_rate", "avg_t_p_ms", "avg_T_f_s", "avg_l_traj_m")

    def class_summary(self) -> list:
        out = []
        for name in dict.fromkeys(r["class"] for r in self.rows):
            rs = [r for r in self.rows if r["class"] == name]
            trials = sum(r["trials"] for r in rs)
            succ = sum(r["successes"] for r in rs)
            tf = [r["_T_f"] for r in rs]
            out.append({"class": name, "terrains": len(rs), "trials": trials,
                        "success_rate": succ / trials if trials else math.nan,
                        "mean_T_f": _mean(sum(tf, [])), "mean_l_traj": _mean(sum((r["_l"] for r in rs), [])),
                        "mean_t_p_ms": _mean(sum((r["_tp"] for r in rs), []))})
        return out


def _mean(xs) -> float:
    return float(np.mean(xs)) if len(xs) else math.nan


def benchmark(batch: BatchConfig, trials: int, seed: int = 0, out_dir=None, progress=None) -> BenchResult:
    """Sample ``trials`` start/goal pairs on every terrain of every class and run each closed loop."""
    if trials < 0:
        raise ConfigError("trials must be non-negative")
    rows, runs = [], []
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(batch.classes) * batch.terrains)
    if trials > 0:
        for ci, cls_cfg in enumerate(batch.classes):
            terrain_cfg = batch.class_terrain(cls_cfg)
            for ti in range(batch.terrains):
                child = children[ci * batch.terrains + ti]
                terrain_seed = int(child.generate_state(1)[0])
                base = Scenario.from_dict({**batch.base, "terrain": {**terrain_cfg, "seed": terrain_seed},
                                           "start": [0, 0, 0], "goal": [1, 0, 0]})
                truth = build_terrain(base.terrain, terrain_seed)
                grid = truth_grid(truth, base, batch.extent)
                rng = np.random.default_rng(child)
                run_seeds = child.spawn(trials)
                res = []
                for k in range(trials):
                    pair = sample_start_goal(truth, base, rng, batch.extent, batch.min_distance,
                                             batch.max_distance, batch.max_attempts, grid)
                    name = f"{cls_cfg['name']}_t{ti:03d}_p{k:03d}"
                    if pair is None:
                        m = RunMetrics(name, 0, False, "invalid-endpoint", math.nan, math.nan, 0, 0, math.nan,
                                       math.nan, math.nan)
                    else:
                        sc = Scenario.from_dict({**base.raw, "name": name, "start": list(pair[0]),
                                                 "goal": list(pair[1]),
                                                 "seed": int(run_seeds[k].generate_state(1)[0])})
                        m = run_scenario(sc, None if out_dir is None else Path(out_dir) / "runs").metrics
                    res.append(m)
                    runs.append(m)
                    if progress is not None:
                        progress(m)
                ok = [m for m in res if m.success]
                row = {"class": cls_cfg["name"], "terrain": ti, "terrain_seed": terrain_seed, "trials": len(res),
                       "successes": len(ok), "success_rate": len(ok) / len(res),
                       "mean_T_f": _mean([m.T_f for m in ok]), "mean_l_traj": _mean([m.l_traj for m in ok]),
                       "_T_f": [m.T_f for m in ok], "_l": [m.l_traj for m in ok], "_tp": [m.t_p_ms for m in ok],
                       "avg_t_p_ms": _mean([m.t_p_ms for m in ok])}
                for tag in FAILURE_TAGS:
                    row[f"fail_{tag}"] = sum(m.failure == tag for m in res)
                rows.append(row)
    result = BenchResult(rows, runs)
    if out_dir is not None:
        export_bench(result, out_dir)
    return result


def export_bench(result: BenchResult, out_dir) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "bench_metrics.csv", BenchResult.VALUE_COLUMNS,
               [[_fmt(r[c]) for c in BenchResult.VALUE_COLUMNS] for r in result.rows])
    _write_csv(d / "bench_table.csv", BenchResult.TABLE_COLUMNS,
               [[_fmt(r["class"]), _fmt(r["terrain"]), _fmt(r["trials"]), _fmt(r["success_rate"]),
                 _fmt(r["avg_t_p_ms"]), _fmt(r["mean_T_f"]), _fmt(r["mean_l_traj"])] for r in result.rows])
    _write_csv(d / "bench_runs.csv", RunMetrics.VALUE_COLUMNS, [m.value_row() for m in result.runs])
    _write_csv(d / "bench_runs_timing.csv", RunMetrics.TIMING_COLUMNS, [m.timing_row() for m in result.runs])
    summary = result.class_summary()
    cols = ("class", "terrains", "trials", "success_rate", "mean_T_f", "mean_l_traj", "mean_t_p_ms")
    _write_csv(d / "bench_summary.csv", cols, [[_fmt(s[c]) for c in cols] for s in summary])
    return d


# --------------------------------------------------------------------------- throughput


@dataclass
class ThroughputRow:
    size_m: float
    n_yaw: int
    n_states: int
    median_ms: float
    min_ms: float
    update_ms: float
    inpaint_ms: float
    assess_ms: float
    budget_ms: float
    within_budget: bool
    risk_digest: str

    COLUMNS = ("size_m", "n_yaw", "n_states", "median_ms", "min_ms", "update_ms", "inpaint_ms", "assess_ms",
               "budget_ms", "within_budget", "risk_digest")


def grid_digest(grid: Se2RiskGrid) -> str:
    h = hashlib.sha256()
    for a in (grid.risk, grid.z_b, grid.sdf):
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def throughput_bench(sizes, yaws=(8, 16, 32), resolution: float = 0.1, repeats: int = 7, seed: int = 0,
                     budget_ms: float = 50.0, sensor: SensorModel | None = None) -> list:
    """Median wall time of one full mapping update per (map size, yaw bins).

    One update covers recentring, band filter, variance propagation, ray-cast reset,
    Kalman fusion, inpainting, the risk assessment of every lattice state and the SDF.
    The simulated scan is produced once beforehand and not timed.
    """
    sizes = [float(s) for s in sizes]
    yaws = [int(k) for k in yaws]
    if not sizes or not yaws or min(sizes) <= 2 * resolution or min(yaws) < 1 or repeats < 1:
        raise ConfigError("need positive map sizes, >= 1 yaw bin and >= 1 repeat")
    sensor = sensor or SensorModel()
    truth = generate_terrain(seed, width=max(sizes) + 2 * sensor.max_range, height=max(sizes) + 2 * sensor.max_range,
                             resolution=resolution, **PRESETS["moderate"])
    src = AnalyticSource(truth)
    fr = terrain_pose(src, (0.0, 0.0, 0.0))
    pose = NoisyPose(np.array([0.0, 0.0, fr.z]), fr.rotation)
    scan = simulate_scan(truth, pose, sensor, np.random.default_rng(seed))
    rows = []
    for size in sizes:
        for n_yaw in yaws:
            m0 = update_map(ElevationMap(size, resolution, (0.0, 0.0)), pose, scan.points, sensor)
            samples, grid = [], None
            for _ in range(repeats + 1):
                t0 = time.perf_counter()
                m1 = update_map(m0, pose, scan.points, sensor)
                t1 = time.perf_counter()
                hf = inpaint(m1)
                t2 = time.perf_counter()
                grid = build_risk_grid(hf, Se2GridSpec.matching(hf, n_yaw))
                t3 = time.perf_counter()
                samples.append((t3 - t0, t1 - t0, t2 - t1, t3 - t2))
            s = 1e3 * np.array(samples[1:])  # first pass warms caches
            med = float(np.median(s[:, 0]))
            rows.append(ThroughputRow(size, n_yaw, grid.spec.n_states, med, float(s[:, 0].min()),
                                      float(np.median(s[:, 1])), float(np.median(s[:, 2])),
                                      float(np.median(s[:, 3])), budget_ms, med < budget_ms, grid_digest(grid)))
    return rows


def monotone_violations(rows) -> list:
    """Adjacent (smaller, larger) state-count pairs whose median time decreases."""
    order = sorted(rows, key=lambda r: (r.n_states, r.median_ms))
    return [(a, b) for a, b in zip(order, order[1:]) if b.median_ms < a.median_ms]


def is_monotone(rows) -> bool:
    """Median time non-decreasing in state count (ties in state count compared by median)."""
    return not monotone_violations(rows)


def export_throughput(rows, out_dir) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "mapbench.csv", ThroughputRow.COLUMNS,
               [[_fmt(getattr(r, c)) for c in ThroughputRow.COLUMNS] for r in rows])
    return d
