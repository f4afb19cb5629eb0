"""Hybrid A* over the SE(2) risk grid and extraction of an optimizer initial guess."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import jit
from .flatness import RobotParams
from .reeds_shepp import RSPath, reeds_shepp_shoot, rs_distance
from .traversability import Se2RiskGrid, trilinear_many
from .trajectory.problem import BoundaryState, DecisionVars


class InvalidEndpointError(ValueError):
    """Start or goal is not a free state."""


class NoPathError(RuntimeError):
    """Search exhausted its open set or expansion budget."""


@dataclass(frozen=True)
class SearchConfig:
    xy_resolution: float = 0.3
    yaw_bins: int = 36
    step: float = 0.5
    delta_max: float = RobotParams().delta_max
    wheelbase: float = RobotParams().wheelbase
    steering_levels: int = 2  # arcs at 0 and +-k/levels * delta_max
    switch_penalty: float = 2.0
    risk_weight: float = 1.0
    r_max: float = 0.7
    d_min: float = 0.1
    shoot_period: int = 32
    shoot_radius: float = 3.0
    check_step: float = 0.1
    allow_reverse: bool = True
    start_gear: int = 0  # 0 = free, otherwise the first motion must use this gear
    min_gear_run: float = 0.3
    max_expansions: int = 20000

    def __post_init__(self):
        if not 0.0 < self.delta_max < math.pi / 2 or self.wheelbase <= 0:
            raise ValueError("steering limit must lie in (0, pi/2) and the wheelbase be positive")
        if self.min_turn_radius <= 0 or self.step <= 0 or self.xy_resolution <= 0:
            raise ValueError("search resolutions and turning radius must be positive")
        if self.step < self.xy_resolution * math.sqrt(2.0):
            raise ValueError("primitive step must leave the closed-set cell")

    @property
    def min_turn_radius(self) -> float:
        return self.wheelbase / math.tan(self.delta_max)

    @property
    def steering(self) -> np.ndarray:
        k = np.arange(-self.steering_levels, self.steering_levels + 1) / self.steering_levels
        return k * self.delta_max


@dataclass
class Se2Path:
    poses: np.ndarray  # (n, 3)
    gears: np.ndarray  # (n,) gear of the motion reaching each pose; entry 0 copies entry 1
    expansions: int = 0
    cost: float = 0.0
    shot: bool = False

    @property
    def switch_indices(self) -> np.ndarray:
        """Pose indices of the cusps, where the gear of the next motion differs."""
        g = self.gears
        return np.nonzero(g[1:-1] != g[2:])[0] + 1

    @property
    def n_switches(self) -> int:
        return int(self.switch_indices.size)

    @property
    def length(self) -> float:
        """Arc length; consecutive poses are joined by constant-curvature arcs."""
        d = np.diff(self.poses[:, :2], axis=0)
        chord = np.hypot(d[:, 0], d[:, 1])
        half = 0.5 * np.abs(np.remainder(np.diff(self.poses[:, 2]) + math.pi, 2 * math.pi) - math.pi)
        ratio = np.ones_like(half)
        bent = half > 1e-9
        ratio[bent] = half[bent] / np.sin(half[bent])
        return float(np.sum(chord * ratio))

    def write_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.poses, self.gears]), delimiter=",",
                   header="x,y,theta,eta", comments="", fmt="%.9g")


# ------------------------------------------------------------------------- kernels


@jit
def _free_states(data, x0, y0, res, xs, ys, ths, r_max, d_min):
    vals, _, oob = trilinear_many(data, x0, y0, res, xs, ys, ths, False)
    n = xs.shape[0]
    ok = np.empty(n, dtype=np.bool_)
    for i in range(n):
        ok[i] = (not oob[i]) and vals[i, 0] < r_max and vals[i, 1] >= d_min
    return ok, vals[:, 0]


@jit
def _arc(x, y, th, curvature, length):
    if abs(curvature) < 1e-12:
        return x + length * math.cos(th), y + length * math.sin(th), th
    th1 = th + curvature * length
    r = 1.0 / curvature
    return x + r * (math.sin(th1) - math.sin(th)), y - r * (math.cos(th1) - math.cos(th)), th1


@jit
def _expand(x, y, th, curv, gears, step, n_check, data, x0, y0, res, r_max, d_min, gx, gy, gth, radius):
    """Successors of one node: end poses, validity, mean risk and heuristic."""
    n = curv.shape[0]
    out = np.empty((n, 3))
    ok = np.zeros(n, dtype=np.bool_)
    risk = np.zeros(n)
    h = np.zeros(n)
    xs = np.empty(n_check)
    ys = np.empty(n_check)
    ts = np.empty(n_check)
    for p in range(n):
        for k in range(n_check):
            xs[k], ys[k], ts[k] = _arc(x, y, th, curv[p], gears[p] * step * (k + 1) / n_check)
        free, r = _free_states(data, x0, y0, res, xs, ys, ts, r_max, d_min)
        good = True
        for k in range(n_check):
            if not free[k]:
                good = False
                break
        ok[p] = good
        out[p, 0] = xs[n_check - 1]
        out[p, 1] = ys[n_check - 1]
        out[p, 2] = math.atan2(math.sin(ts[n_check - 1]), math.cos(ts[n_check - 1]))
        if good:
            risk[p] = np.mean(r)
            e = math.hypot(gx - out[p, 0], gy - out[p, 1])
            h[p] = max(e, rs_distance(out[p, 0], out[p, 1], out[p, 2], gx, gy, gth, radius))
    return out, ok, risk, h


class _Searcher:
    def __init__(self, grid: Se2RiskGrid, cfg: SearchConfig):
        if grid.sdf is None:
            raise ValueError("risk grid needs an SDF layer")
        self.cfg = cfg
        self.data = np.ascontiguousarray(np.stack([grid.risk, grid.sdf], axis=-1))
        spec = grid.spec
        self.x0, self.y0, self.res = float(spec.origin[0]), float(spec.origin[1]), float(spec.resolution)

    def free(self, poses: np.ndarray):
        poses = np.atleast_2d(np.asarray(poses, dtype=float))
        return _free_states(self.data, self.x0, self.y0, self.res, np.ascontiguousarray(poses[:, 0]),
                            np.ascontiguousarray(poses[:, 1]), np.ascontiguousarray(poses[:, 2]),
                            self.cfg.r_max, self.cfg.d_min)


def _key(pose, cfg: SearchConfig):
    yaw = int(math.floor((pose[2] + math.pi) / (2.0 * math.pi) * cfg.yaw_bins + 0.5)) % cfg.yaw_bins
    return (int(math.floor(pose[0] / cfg.xy_resolution)), int(math.floor(pose[1] / cfg.xy_resolution)), yaw)


def _count_switches(gears) -> int:
    """Gear changes along a sequence; a leading 0 (free start gear) never counts."""
    n = 0
    for a, b in zip(gears[:-1], gears[1:]):
        if a != 0 and a != b:
            n += 1
    return n


def hybrid_astar(grid: Se2RiskGrid, start, goal, cfg: SearchConfig = SearchConfig()) -> Se2Path:
    """Kinodynamic search with constant-steering arcs and Reeds-Shepp goal shots."""
    S = _Searcher(grid, cfg)
    start = tuple(float(v) for v in start)
    goal = tuple(float(v) for v in goal)
    ok, _ = S.free(np.array([start, goal]))
    if not ok[0]:
        raise InvalidEndpointError("start state is not free")
    if not ok[1]:
        raise InvalidEndpointError("goal state is not free")
    radius = cfg.min_turn_radius
    steer = cfg.steering
    gear_set = [1, -1] if cfg.allow_reverse else [1]
    curv = np.array([math.tan(d) / cfg.wheelbase for g in gear_set for d in steer])
    gears = np.array([g for g in gear_set for _ in steer], dtype=float)
    n_check = max(1, int(math.ceil(cfg.step / cfg.check_step)))

    # node arrays: pose, g cost, gear, parent
    poses = [start]
    gcost = [0.0]
    ngear = [cfg.start_gear]
    parent = [-1]
    h0 = max(math.dist(start[:2], goal[:2]), rs_distance(*start, *goal, radius))
    heap = [(h0, h0, 0, 0)]
    counter = 1
    best_g = {_key(start, cfg): 0.0}
    closed = set()
    expansions = 0

    def chain(idx):
        out = []
        while idx >= 0:
            out.append(idx)
            idx = parent[idx]
        return out[::-1]

    def try_shot(idx):
        node = poses[idx]
        rs = reeds_shepp_shoot(node, goal, radius)
        if not rs.segments:
            return None
        if not cfg.allow_reverse and any(s.gear < 0 for s in rs.segments):
            return None
        sp, sg = rs.sample(cfg.check_step)
        ids = chain(idx)
        first_gear = cfg.start_gear if len(ids) == 1 else ngear[idx]
        if first_gear != 0 and len(ids) == 1 and sg[1] != first_gear:
            return None
        free, _ = S.free(sp[1:])
        if not free.all():
            return None
        node_gears = [ngear[i] for i in ids[1:]]
        # run lengths over the whole candidate path; primitives count one step each
        runs = [[g, cfg.step] for g in node_gears[:1]]
        for g in node_gears[1:]:
            if runs[-1][0] == g:
                runs[-1][1] += cfg.step
            else:
                runs.append([g, cfg.step])
        seglens = np.hypot(*np.diff(sp[:, :2], axis=0).T)
        for g, l in zip(sg[1:], seglens):
            if runs and runs[-1][0] == g:
                runs[-1][1] += float(l)
            else:
                runs.append([int(g), float(l)])
        if len(runs) > 1 and min(l for _, l in runs) < cfg.min_gear_run:
            return None
        return rs, sp, sg

    while heap:
        f, h, _, idx = heapq.heappop(heap)
        key = _key(poses[idx], cfg)
        if key in closed:
            continue
        closed.add(key)
        expansions += 1
        if expansions > cfg.max_expansions:
            break
        near = math.dist(poses[idx][:2], goal[:2]) <= cfg.shoot_radius
        if near or expansions % cfg.shoot_period == 1:
            shot = try_shot(idx)
            if shot is not None:
                rs, sp, sg = shot
                ids = chain(idx)
                P = np.array([poses[i] for i in ids] + [tuple(p) for p in sp[1:]])
                G = np.array([0] + [ngear[i] for i in ids[1:]] + list(sg[1:]), dtype=np.int64)
                G[0] = G[1]
                new_switches = _count_switches([ngear[idx]] + list(sg[1:]))
                cost = gcost[idx] + rs.length + cfg.switch_penalty * new_switches
                return Se2Path(P, G, expansions, cost, True)
        x, y, th = poses[idx]
        succ, okm, risk, hs = _expand(x, y, th, curv, gears, cfg.step, n_check, S.data, S.x0, S.y0, S.res,
                                      cfg.r_max, cfg.d_min, goal[0], goal[1], goal[2], radius)
        for p in range(succ.shape[0]):
            if not okm[p]:
                continue
            g_p = int(gears[p])
            if idx == 0 and cfg.start_gear != 0 and g_p != cfg.start_gear:
                continue
            c = cfg.step * (1.0 + cfg.risk_weight * risk[p])
            if ngear[idx] != 0 and g_p != ngear[idx]:
                c += cfg.switch_penalty
            g_new = gcost[idx] + c
            pose = (float(succ[p, 0]), float(succ[p, 1]), float(succ[p, 2]))
            k = _key(pose, cfg)
            if k in closed or best_g.get(k, math.inf) <= g_new:
                continue
            best_g[k] = g_new
            poses.append(pose)
            gcost.append(g_new)
            ngear.append(g_p)
            parent.append(idx)
            heapq.heappush(heap, (g_new + hs[p], hs[p], counter, len(poses) - 1))
            counter += 1
    raise NoPathError(f"no path after {expansions} expansions")


# --------------------------------------------------------------------- initial guess


def _resample(poly: np.ndarray, n: int) -> np.ndarray:
    d = np.hypot(*np.diff(poly, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(d)])
    target = np.linspace(0.0, cum[-1], n + 1)
    return np.column_stack([np.interp(target, cum, poly[:, 0]), np.interp(target, cum, poly[:, 1])])


def pieces_for_length(length: float, piece_length: float = 1.5) -> int:
    return max(2, int(math.ceil(length / piece_length)))


def extract_init(path: Se2Path, robot: RobotParams = RobotParams(), speed_fraction: float = 0.5,
                 piece_length: float = 1.5, pieces: int | list | None = None) -> DecisionVars:
    """Split at gear switches and resample each section into equal-length pieces."""
    if path.poses.shape[0] < 2:
        raise ValueError("path needs at least two poses")
    cusps = list(path.switch_indices)
    bounds = [0] + cusps + [path.poses.shape[0] - 1]
    gears = []
    pts, spans, switches = [], [], []
    total = 0.0
    for w in range(len(bounds) - 1):
        a, b = bounds[w], bounds[w + 1]
        seg = path.poses[a:b + 1, :2]
        gear = int(path.gears[a + 1])
        length = float(np.sum(np.hypot(*np.diff(seg, axis=0).T)))
        total += length
        if pieces is None:
            n = pieces_for_length(length, piece_length)
        elif np.ndim(pieces) == 0:
            n = int(pieces)
        else:
            n = int(pieces[w])
        rs = _resample(seg, n)
        pts.append(rs[1:-1])
        spans.append(np.full(n, length / n))
        gears.append(gear)
        if w < len(bounds) - 2:
            th = path.poses[b, 2]
            switches.append([path.poses[b, 0], path.poses[b, 1], gear * math.cos(th), gear * math.sin(th)])
    T_f = max(total, 1e-3) / (speed_fraction * robot.v_max)
    return DecisionVars(pts, spans, np.array(switches).reshape(-1, 4), math.log(T_f), tuple(gears))


def boundary_states(path: Se2Path, start_speed: float = 0.0):
    s, g = path.poses[0], path.poses[-1]
    return BoundaryState(*s, speed=start_speed), BoundaryState(*g)
