"""Terrain-induced body frames, flat-output kinematics and a kinematic integrator.

A planar state ``(x, y, theta)`` plus the terrain normal ``z_b`` below it fixes the
full attitude: the body y axis is orthogonal to both the normal and the yaw heading,
and the body x axis completes the right-handed frame.  With that frame the speed,
steering and accelerations of a car-like robot follow algebraically from the
geometric curve ``(x(s), y(s))`` and the timing law ``s(t)``.

Frame scalars used throughout (``a = z_b . x_yaw``, ``b = z_b . y_yaw``,
``c = z_b . b3``, ``m = sqrt(1 - a^2)``)::

    x_b . x_yaw = m          y_b . y_yaw = c / m
    x_b . b3    = -a c / m   y_b . b3    = -b / m
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .terrain import AnalyticTerrain, HeightField, InvalidParameterError

GRAVITY = 9.81
B3 = np.array([0.0, 0.0, 1.0])


class DegenerateFrameError(ValueError):
    pass


class DegenerateStateError(ValueError):
    pass


@dataclass(frozen=True)
class RobotParams:
    wheelbase: float = 0.6
    gravity: float = GRAVITY
    delta_max: float = 0.785
    v_max: float = 1.0
    a_lon_max: float = 5.0
    a_lat_max: float = 10.0
    phi_x_max: float = 0.52
    phi_y_max: float = 0.52

    def __post_init__(self):
        vals = (self.wheelbase, self.gravity, self.delta_max, self.v_max, self.a_lon_max,
                self.a_lat_max, self.phi_x_max, self.phi_y_max)
        if min(vals) <= 0:
            raise InvalidParameterError("robot parameters must be positive")

    @property
    def min_turn_radius(self) -> float:
        return self.wheelbase / math.tan(self.delta_max)


@dataclass(frozen=True)
class TerrainFrame:
    z: float
    theta: float
    z_b: np.ndarray
    x_b: np.ndarray
    y_b: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return np.column_stack([self.x_b, self.y_b, self.z_b])

    @property
    def x_yaw(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), 0.0])

    @property
    def y_yaw(self) -> np.ndarray:
        return np.array([-math.sin(self.theta), math.cos(self.theta), 0.0])

    @property
    def pitch(self) -> float:
        """Signed angle of x_b above the horizontal plane."""
        return math.asin(max(-1.0, min(1.0, self.x_b[2])))

    @property
    def roll(self) -> float:
        """Signed angle of y_b above the horizontal plane."""
        return math.asin(max(-1.0, min(1.0, self.y_b[2])))


@dataclass(frozen=True)
class FlatState:
    """s-derivatives of the geometric curve and time derivatives of ``s(t)``."""

    dx: float
    dy: float
    ddx: float = 0.0
    ddy: float = 0.0
    sdot: float = 0.0
    sddot: float = 0.0
    eta: int = 1


@dataclass(frozen=True)
class ControlOutputs:
    v_x: float
    omega_z: float
    delta: float
    a_x: float
    a_y: float
    theta: float


# ---------------------------------------------------------------------- normal sources


class AnalyticSource:
    """Height and normal straight from a closed-form terrain."""

    def __init__(self, terrain: AnalyticTerrain | HeightField):
        self.terrain = terrain

    def height_normal(self, x: float, y: float, theta: float):
        return float(self.terrain.height(x, y)), np.asarray(self.terrain.normal(x, y), dtype=float)

    def normal_tuple(self, x: float, y: float, theta: float):
        """Scalar fast path used by the integrator's inner loop."""
        t = self.terrain
        if isinstance(t, AnalyticTerrain):
            if t.kind == "flat":
                return 0.0, 0.0, 1.0
            if t.kind == "incline":
                gx, gy = math.tan(t.pitch), math.tan(t.roll)
            elif t.kind == "sinusoid":
                k = 2.0 * math.pi / t.wavelength
                gx = t.amplitude * k * math.cos(k * x) * math.cos(k * y)
                gy = -t.amplitude * k * math.sin(k * x) * math.sin(k * y)
            else:
                w = math.sqrt(t.radius ** 2 - x * x - y * y)
                gx, gy = -x / w, -y / w
            n = math.sqrt(gx * gx + gy * gy + 1.0)
            return -gx / n, -gy / n, 1.0 / n
        zb = self.height_normal(x, y, theta)[1]
        return zb[0], zb[1], zb[2]

    def contains(self, x: float, y: float) -> bool:
        if isinstance(self.terrain, HeightField):
            return bool(self.terrain.contains(x, y))
        return True


class GridSource:
    """Height from a heightfield, normal from the risk grid's ``z_b`` layer (renormalised)."""

    def __init__(self, grid, height: HeightField):
        self.grid = grid
        self.height = height

    def height_normal(self, x: float, y: float, theta: float):
        from .traversability import query_trilinear

        zb, _ = query_trilinear(self.grid, (x, y, theta), "z_b")
        zb = np.asarray(zb, dtype=float)
        n = np.linalg.norm(zb)
        if n < 1e-12:
            zb, n = B3.copy(), 1.0
        return float(self.height.height(x, y)), zb / n

    def normal_tuple(self, x: float, y: float, theta: float):
        zb = self.height_normal(x, y, theta)[1]
        return zb[0], zb[1], zb[2]

    def contains(self, x: float, y: float) -> bool:
        xmin, xmax, ymin, ymax = self.grid.spec.bounds
        return xmin <= x <= xmax and ymin <= y <= ymax


# ------------------------------------------------------------------------ pose mapping


def frame_from_normal(z_b, theta: float, z: float = 0.0) -> TerrainFrame:
    z_b = np.asarray(z_b, dtype=float)
    z_b = z_b / np.linalg.norm(z_b)
    x_yaw = np.array([math.cos(theta), math.sin(theta), 0.0])
    y = np.cross(z_b, x_yaw)
    n = np.linalg.norm(y)
    if n < 1e-9:
        raise DegenerateFrameError("terrain normal is parallel to the heading")
    y_b = y / n
    x_b = np.cross(y_b, z_b)
    return TerrainFrame(float(z), float(theta), z_b, x_b, y_b)


def terrain_pose(source, s_r) -> TerrainFrame:
    """Full terrain-consistent frame at an SE(2) state."""
    x, y, theta = (float(v) for v in s_r)
    z, z_b = source.height_normal(x, y, theta)
    return frame_from_normal(z_b, theta, z)


def frame_scalars(z_b, theta):
    """(a, b, c, m) as in the module docstring; vectorised over leading axes."""
    z_b = np.asarray(z_b, dtype=float)
    ct, st = np.cos(theta), np.sin(theta)
    a = z_b[..., 0] * ct + z_b[..., 1] * st
    b = -z_b[..., 0] * st + z_b[..., 1] * ct
    c = z_b[..., 2]
    return a, b, c, np.sqrt(np.maximum(1.0 - a * a, 0.0))


# ----------------------------------------------------------------------- flat outputs


def flat_outputs(fs: FlatState, frame: TerrainFrame, params: RobotParams = RobotParams()) -> ControlOutputs:
    """Controls and accelerations implied by a flat state on the given terrain frame.

    ``eta = -1`` (reverse gear) flips the sign of the longitudinal speed, acceleration
    and lateral acceleration; the heading points against the direction of travel.
    Steering uses ``atan(L omega / v)``, which matches ``atan2`` in forward gear and
    stays finite when ``sdot`` vanishes.
    """
    eta = 1.0 if fs.eta >= 0 else -1.0
    q = fs.dx * fs.dx + fs.dy * fs.dy
    if q < 1e-9:
        raise DegenerateStateError("curve tangent vanishes")
    theta = math.atan2(eta * fs.dy, eta * fs.dx)
    xb_xyaw = float(frame.x_b @ frame.x_yaw)
    yb_yyaw = float(frame.y_b @ frame.y_yaw)
    zb_b3 = float(frame.z_b[2])
    if min(xb_xyaw, yb_yyaw, zb_b3) < 1e-9:
        raise DegenerateStateError("terrain frame too steep for the flat-output map")
    sq = math.sqrt(q)
    cross = fs.dx * fs.ddy - fs.dy * fs.ddx
    dot = fs.dx * fs.ddx + fs.dy * fs.ddy
    g = params.gravity
    v_x = eta * fs.sdot * sq / xb_xyaw
    omega = cross * fs.sdot / (q * zb_b3)
    delta = math.atan(eta * params.wheelbase * cross / (q * sq * zb_b3) * xb_xyaw)
    a_x = eta * (fs.sdot ** 2 * dot + fs.sddot * q) / (sq * xb_xyaw) + g * float(frame.x_b[2])
    a_y = eta * cross / (sq * yb_yyaw) * fs.sdot ** 2 + g * float(frame.y_b[2])
    return ControlOutputs(v_x, omega, delta, a_x, a_y, theta)


def flat_outputs_array(dx, dy, ddx, ddy, sdot, sddot, eta, z_b, params: RobotParams = RobotParams()):
    """Vectorised :func:`flat_outputs`; ``z_b`` has shape (n, 3).

    Returns a dict of arrays ``theta, v_x, omega_z, delta, a_x, a_y, phi_x, phi_y``.
    """
    dx, dy, ddx, ddy, sdot, sddot = (np.asarray(v, dtype=float) for v in (dx, dy, ddx, ddy, sdot, sddot))
    eta = np.where(np.asarray(eta) >= 0, 1.0, -1.0)
    z_b = np.asarray(z_b, dtype=float)
    z_b = z_b / np.linalg.norm(z_b, axis=-1, keepdims=True)
    q = dx * dx + dy * dy
    if np.any(q < 1e-9):
        raise DegenerateStateError("curve tangent vanishes")
    theta = np.arctan2(eta * dy, eta * dx)
    a, b, c, m = frame_scalars(z_b, theta)
    if np.any(np.minimum(m, c) < 1e-9):
        raise DegenerateStateError("terrain frame too steep for the flat-output map")
    sq = np.sqrt(q)
    cross = dx * ddy - dy * ddx
    dot = dx * ddx + dy * ddy
    g = params.gravity
    xb3 = -a * c / m
    yb3 = -b / m
    return {
        "theta": theta,
        "v_x": eta * sdot * sq / m,
        "omega_z": cross * sdot / (q * c),
        "delta": np.arctan(eta * params.wheelbase * cross * m / (q * sq * c)),
        "a_x": eta * (sdot ** 2 * dot + sddot * q) / (sq * m) + g * xb3,
        "a_y": eta * cross * sdot ** 2 * m / (sq * c) + g * yb3,
        "phi_x": np.arcsin(np.clip(xb3, -1.0, 1.0)),
        "phi_y": np.arcsin(np.clip(yb3, -1.0, 1.0)),
    }


# ------------------------------------------------------------------------- integrator


@dataclass
class PoseTrace:
    t: np.ndarray
    states: np.ndarray  # (n, 3) x, y, theta
    positions: np.ndarray  # (n, 3)
    rotations: np.ndarray  # (n, 3, 3)
    truncated: bool = False

    def write_csv(self, path, controls=None) -> None:
        write_trace_csv(path, self, controls)


def _rates(source, state, v, delta, wheelbase):
    x, y, th = state
    n0, n1, c = source.normal_tuple(x, y, th)
    ct, st = math.cos(th), math.sin(th)
    a = n0 * ct + n1 * st
    m = math.sqrt(max(1.0 - a * a, 0.0))
    return np.array([v * m * ct, v * m * st, v * math.tan(delta) / wheelbase * c])


def integrate_kinematics(t, v_x, delta, source, start, dt: float, wheelbase: float = RobotParams().wheelbase,
                         record_every: int = 1) -> PoseTrace:
    """RK4 integration of the terrain-projected car kinematics.

    Controls are given at times ``t`` and interpolated linearly.  The planar state
    evolves as ``d(x, y)/dt = v (x_b . x_yaw) x_yaw`` and
    ``dtheta/dt = (v tan(delta) / L) (z_b . b3)``; the attitude is rebuilt from the
    terrain frame at every recorded step.  Leaving the terrain stops the run with
    ``truncated=True``.
    """
    if not dt > 0:
        raise InvalidParameterError("dt must be positive")
    t = np.asarray(t, dtype=float)
    v_x = np.asarray(v_x, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not (np.all(np.isfinite(v_x)) and np.all(np.isfinite(delta))):
        raise InvalidParameterError("controls must be finite")
    n_steps = int(round((t[-1] - t[0]) / dt))
    state = np.array(start, dtype=float)

    def ctrl(tt):
        return float(np.interp(tt, t, v_x)), float(np.interp(tt, t, delta))

    times, states = [t[0]], [state.copy()]
    truncated = False
    for k in range(n_steps):
        t0 = t[0] + k * dt
        v0, d0 = ctrl(t0)
        vm, dm = ctrl(t0 + 0.5 * dt)
        v1, d1 = ctrl(t0 + dt)
        k1 = _rates(source, state, v0, d0, wheelbase)
        k2 = _rates(source, state + 0.5 * dt * k1, vm, dm, wheelbase)
        k3 = _rates(source, state + 0.5 * dt * k2, vm, dm, wheelbase)
        k4 = _rates(source, state + dt * k3, v1, d1, wheelbase)
        nxt = state + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not source.contains(nxt[0], nxt[1]):
            truncated = True
            break
        state = nxt
        if (k + 1) % record_every == 0 or k == n_steps - 1:
            times.append(t0 + dt)
            states.append(state.copy())
    states = np.array(states)
    pos = np.empty((len(states), 3))
    rots = np.empty((len(states), 3, 3))
    for i, s in enumerate(states):
        fr = terrain_pose(source, s)
        pos[i] = (s[0], s[1], fr.z)
        rots[i] = fr.rotation
    return PoseTrace(np.array(times), states, pos, rots, truncated)


def write_trace_csv(path, trace: PoseTrace, controls=None) -> None:
    """Rows of t, x, y, z, theta, phi_x, phi_y, v_x, delta, a_x, a_y.

    ``controls`` is an optional (n, 4) array of v_x, delta, a_x, a_y per row.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "theta", "phi_x", "phi_y", "v_x", "delta", "a_x", "a_y"])
        for i in range(len(trace.t)):
            R = trace.rotations[i]
            phi_x = math.asin(max(-1.0, min(1.0, R[2, 0])))
            phi_y = math.asin(max(-1.0, min(1.0, R[2, 1])))
            c = controls[i] if controls is not None else (float("nan"),) * 4
            w.writerow([f"{trace.t[i]:.6f}", *(f"{v:.9f}" for v in trace.positions[i]),
                        f"{trace.states[i, 2]:.9f}", f"{phi_x:.9f}", f"{phi_y:.9f}", *(f"{v:.9f}" for v in c)])
