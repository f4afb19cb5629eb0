"""Robot-centric elevation map.

The map is an axis-aligned square grid of cells holding a height, a height variance
and a known flag.  Its centre ``p_M`` snaps to multiples of the resolution below the
robot position, so recentering is an integer shift of the arrays.

Per frame, :func:`update_map` filters the scan to a body-frame height band,
propagates each point's height variance from the sensor, attitude and position
covariances, clears cells that the new rays prove to be ghosts, and finally fuses the
points cell by cell with a gated scalar Kalman filter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ._jit import jit
from .terrain import HeightField, InvalidParameterError, NoisyPose, SensorModel, hat

B3 = np.array([0.0, 0.0, 1.0])


class InvalidMeasurementError(ValueError):
    pass


class EmptyMapError(RuntimeError):
    pass


@dataclass(frozen=True)
class ElevationCell:
    height: float = 0.0
    variance: float = 0.0
    known: bool = False


@dataclass(frozen=True)
class MappingParams:
    gate: float = 2.0
    band: tuple[float, float] = (-1.5, 1.5)
    ray_margin: float = 0.05
    min_variance: float = 1e-10


class ElevationMap:
    """Square robot-centric grid.

    ``height[j, i]`` belongs to the cell whose centre is
    ``p_M + resolution * (i - n // 2, j - n // 2)``.  ``center_index`` stores
    ``p_M / resolution`` as integers so the origin never accumulates rounding.
    """

    def __init__(self, size_m: float, resolution: float, center_xy=(0.0, 0.0)):
        if not (size_m > 0 and resolution > 0):
            raise InvalidParameterError("map size and resolution must be positive")
        n = int(round(size_m / resolution))
        if n < 2:
            raise InvalidParameterError("map must hold at least 2x2 cells")
        self.n = n
        self.resolution = float(resolution)
        self.height = np.zeros((n, n))
        self.variance = np.zeros((n, n))
        self.known = np.zeros((n, n), dtype=bool)
        self.center_index = (math.floor(center_xy[0] / resolution), math.floor(center_xy[1] / resolution))

    @property
    def p_M(self) -> np.ndarray:
        return np.array([self.center_index[0] * self.resolution, self.center_index[1] * self.resolution, 0.0])

    @property
    def size_m(self) -> float:
        return self.n * self.resolution

    @property
    def origin(self) -> tuple[float, float]:
        """World (x, y) of the centre of cell (0, 0)."""
        h = self.n // 2
        return ((self.center_index[0] - h) * self.resolution, (self.center_index[1] - h) * self.resolution)

    def copy(self) -> "ElevationMap":
        m = ElevationMap.__new__(ElevationMap)
        m.n, m.resolution, m.center_index = self.n, self.resolution, self.center_index
        m.height, m.variance, m.known = self.height.copy(), self.variance.copy(), self.known.copy()
        return m

    def cell_index(self, x, y):
        """Integer (i, j) of the cells containing world points (may fall outside the map)."""
        ox, oy = self.origin
        i = np.floor((np.asarray(x) - ox) / self.resolution + 0.5).astype(np.int64)
        j = np.floor((np.asarray(y) - oy) / self.resolution + 0.5).astype(np.int64)
        return i, j

    def cell(self, i: int, j: int) -> ElevationCell:
        return ElevationCell(float(self.height[j, i]), float(self.variance[j, i]), bool(self.known[j, i]))

    def cell_centers(self):
        ox, oy = self.origin
        xs = ox + self.resolution * np.arange(self.n)
        ys = oy + self.resolution * np.arange(self.n)
        return np.meshgrid(xs, ys)


def recenter(m: ElevationMap, robot_xy) -> ElevationMap:
    """Shift the map so ``p_M = res * floor(robot / res)``; vacated cells become unknown.

    Returns a new map; the input is left untouched.
    """
    new_idx = (math.floor(robot_xy[0] / m.resolution), math.floor(robot_xy[1] / m.resolution))
    out = m.copy()
    dx = new_idx[0] - m.center_index[0]
    dy = new_idx[1] - m.center_index[1]
    out.center_index = new_idx
    if dx == 0 and dy == 0:
        return out
    n = m.n
    out.height[:] = 0.0
    out.variance[:] = 0.0
    out.known[:] = False
    if abs(dx) >= n or abs(dy) >= n:
        return out
    # new cell (i, j) == old cell (i + dx, j + dy)
    src_x = slice(max(dx, 0), n + min(dx, 0))
    dst_x = slice(max(-dx, 0), n + min(-dx, 0))
    src_y = slice(max(dy, 0), n + min(dy, 0))
    dst_y = slice(max(-dy, 0), n + min(-dy, 0))
    out.height[dst_y, dst_x] = m.height[src_y, src_x]
    out.variance[dst_y, dst_x] = m.variance[src_y, src_x]
    out.known[dst_y, dst_x] = m.known[src_y, src_x]
    return out


# ------------------------------------------------------------------------ point variance


def point_height_variance(p_s, pose: NoisyPose, R_BS, p_BS, cov_sensor,
                          cov_rotation=None, cov_position=None) -> np.ndarray:
    """First-order variance of the world height of sensor-frame points.

    ``p_s`` has shape (3,) or (n, 3).  Attitude uncertainty is a right (body-frame)
    perturbation ``R Exp(xi)``.
    """
    single = np.ndim(p_s) == 1
    p_s = np.atleast_2d(np.asarray(p_s, dtype=float))
    R = np.asarray(pose.rotation, dtype=float)
    R_BS = np.asarray(R_BS, dtype=float)
    cov_rotation = pose.cov_rotation if cov_rotation is None else np.asarray(cov_rotation, float)
    cov_position = pose.cov_position if cov_position is None else np.asarray(cov_position, float)
    J_S = (R @ R_BS).T @ B3
    var = np.full(p_s.shape[0], J_S @ np.asarray(cov_sensor, float) @ J_S)
    if np.any(cov_rotation):
        q = p_s @ R_BS.T + np.asarray(p_BS, float)
        J_R = np.cross(q, R.T @ B3)  # q^ R^T b3
        var = var + np.einsum("ni,ij,nj->n", J_R, cov_rotation, J_R)
    var = var + cov_position[2, 2]
    var = np.maximum(var, 0.0)
    return float(var[0]) if single else var


def jacobians(p_s, pose: NoisyPose, R_BS, p_BS):
    """(J_S, J_R, J_B) of the world height of one sensor-frame point."""
    R = np.asarray(pose.rotation, float)
    q = np.asarray(R_BS, float) @ np.asarray(p_s, float) + np.asarray(p_BS, float)
    return (R @ R_BS).T @ B3, hat(q) @ R.T @ B3, -B3


# ------------------------------------------------------------------------------ raycast


@jit
def _raycast_kernel(height, known, ox, oy, res, sensor, points, margin, reset):
    n_rows, n_cols = height.shape
    # cell k spans [o + (k - 0.5) res, o + (k + 0.5) res)
    x0 = ox - 0.5 * res
    y0 = oy - 0.5 * res
    for r in range(points.shape[0]):
        sx = sensor[0]
        sy = sensor[1]
        sz = sensor[2]
        dx = points[r, 0] - sx
        dy = points[r, 1] - sy
        dz = points[r, 2] - sz
        # clip the segment to the map rectangle
        t0 = 0.0
        t1 = 1.0
        ok = True
        for ax in range(2):
            p0 = sx if ax == 0 else sy
            d = dx if ax == 0 else dy
            lo = x0 if ax == 0 else y0
            hi = lo + (n_cols if ax == 0 else n_rows) * res
            if abs(d) < 1e-300:
                if p0 < lo or p0 >= hi:
                    ok = False
            else:
                ta = (lo - p0) / d
                tb = (hi - p0) / d
                if ta > tb:
                    ta, tb = tb, ta
                t0 = max(t0, ta)
                t1 = min(t1, tb)
        if not ok or t1 <= t0:
            continue
        ei = int(math.floor((points[r, 0] - x0) / res))
        ej = int(math.floor((points[r, 1] - y0) / res))
        # nudge into the first cell along the ray
        eps = 1e-12 * max(1.0, t1 - t0)
        i = int(math.floor((sx + (t0 + eps) * dx - x0) / res))
        j = int(math.floor((sy + (t0 + eps) * dy - y0) / res))
        step_i = 1 if dx > 0 else -1
        step_j = 1 if dy > 0 else -1
        if dx != 0.0:
            nb = x0 + (i + (1 if dx > 0 else 0)) * res
            tmax_x = (nb - sx) / dx
            tdel_x = res / abs(dx)
        else:
            tmax_x = np.inf
            tdel_x = np.inf
        if dy != 0.0:
            nb = y0 + (j + (1 if dy > 0 else 0)) * res
            tmax_y = (nb - sy) / dy
            tdel_y = res / abs(dy)
        else:
            tmax_y = np.inf
            tdel_y = np.inf
        t_in = t0
        while t_in < t1:
            t_out = min(tmax_x, tmax_y, t1)
            if 0 <= i < n_cols and 0 <= j < n_rows and not (i == ei and j == ej):
                if t_out > t_in and known[j, i]:
                    zmax = max(sz + t_in * dz, sz + t_out * dz)
                    if height[j, i] > zmax + margin:
                        reset[j, i] = True
            if t_out >= t1:
                break
            if tmax_x < tmax_y:
                i += step_i
                t_in = tmax_x
                tmax_x += tdel_x
            else:
                j += step_j
                t_in = tmax_y
                tmax_y += tdel_y


def raycast_reset(m: ElevationMap, sensor_pos, points, margin: float = 0.05) -> ElevationMap:
    """Mark known cells under sensor-to-point rays as unknown when they stick out above the ray.

    A traversed cell (the end point's own cell excluded) is reset if its stored height
    exceeds the highest ray height over the cell by more than ``margin``.
    Returns a new map.
    """
    out = m.copy()
    pts = np.ascontiguousarray(np.atleast_2d(points), dtype=float)
    reset = np.zeros_like(m.known)
    if pts.shape[0]:
        ox, oy = m.origin
        _raycast_kernel(m.height, m.known, ox, oy, m.resolution,
                        np.asarray(sensor_pos, dtype=float), pts, float(margin), reset)
    out.known[reset] = False
    out.height[reset] = 0.0
    out.variance[reset] = 0.0
    return out


# ---------------------------------------------------------------------------- KF fusion


def kf_update(cell: ElevationCell, measurements, gate: float = 2.0) -> ElevationCell:
    """Fuse ``(z, var)`` measurements into one cell in the given order.

    An unknown cell takes its first measurement.  A measurement whose normalised
    innovation ``|z - h| / sqrt(var + var_m)`` exceeds ``gate`` is not fused: it
    overwrites the cell when higher and is dropped otherwise.
    """
    h, v, known = cell.height, cell.variance, cell.known
    for z, var in measurements:
        if not var > 0:
            raise InvalidMeasurementError(f"measurement variance must be positive, got {var}")
        if not known:
            h, v, known = float(z), float(var), True
            continue
        if abs(z - h) / math.sqrt(v + var) > gate:
            if z > h:
                h, v = float(z), float(var)
            continue
        h, v = (var * h + v * z) / (v + var), v * var / (v + var)
    return ElevationCell(h, v, known)


@jit
def _fuse_kernel(height, variance, known, ii, jj, zs, vs, gate):
    n_rows, n_cols = height.shape
    for k in range(zs.shape[0]):
        i = ii[k]
        j = jj[k]
        if i < 0 or j < 0 or i >= n_cols or j >= n_rows:
            continue
        z = zs[k]
        var = vs[k]
        if not known[j, i]:
            height[j, i] = z
            variance[j, i] = var
            known[j, i] = True
            continue
        h = height[j, i]
        v = variance[j, i]
        if abs(z - h) / math.sqrt(v + var) > gate:
            if z > h:
                height[j, i] = z
                variance[j, i] = var
            continue
        height[j, i] = (var * h + v * z) / (v + var)
        variance[j, i] = v * var / (v + var)


def fuse_points(m: ElevationMap, points_world, variances, gate: float = 2.0) -> ElevationMap:
    """Sequentially fuse world points into their cells (points outside the map are ignored)."""
    pts = np.atleast_2d(points_world)
    variances = np.asarray(variances, dtype=float)
    if np.any(variances <= 0):
        raise InvalidMeasurementError("measurement variances must be positive")
    out = m.copy()
    i, j = m.cell_index(pts[:, 0], pts[:, 1])
    _fuse_kernel(out.height, out.variance, out.known, i, j,
                 np.ascontiguousarray(pts[:, 2], dtype=float), np.ascontiguousarray(variances), float(gate))
    return out


def update_map(m: ElevationMap, pose: NoisyPose, scan_points, model: SensorModel,
               params: MappingParams = MappingParams()) -> ElevationMap:
    """One mapping frame: recenter, band filter, variance, ray reset, then fusion."""
    m = recenter(m, pose.position[:2])
    pts = np.atleast_2d(np.asarray(scan_points, dtype=float)).reshape(-1, 3)
    q_body = pts @ model.R_BS.T + model.p_BS
    keep = (q_body[:, 2] >= params.band[0]) & (q_body[:, 2] <= params.band[1])
    pts, q_body = pts[keep], q_body[keep]
    if pts.shape[0] == 0:
        return m
    world = q_body @ pose.rotation.T + pose.position
    var = point_height_variance(pts, pose, model.R_BS, model.p_BS, model.noise_cov)
    var = np.maximum(var, params.min_variance)
    sensor = pose.position + pose.rotation @ model.p_BS
    m = raycast_reset(m, sensor, world, params.ray_margin)
    return fuse_points(m, world, var, params.gate)


# ------------------------------------------------------------------------------ inpaint


@jit
def _isqrt(n):
    s = int(math.sqrt(n))
    while s * s > n:
        s -= 1
    while (s + 1) * (s + 1) <= n:
        s += 1
    return s


@jit
def _nearest_known(known, d2):
    n_rows, n_cols = known.shape
    src_r = np.empty((n_rows, n_cols), dtype=np.int64)
    src_c = np.empty((n_rows, n_cols), dtype=np.int64)
    for r in range(n_rows):
        for c in range(n_cols):
            if known[r, c]:
                src_r[r, c] = r
                src_c[r, c] = c
                continue
            target = d2[r, c]
            rad = _isqrt(target)
            found = False
            for dr in range(-rad, rad + 1):
                rem = target - dr * dr
                if rem < 0:
                    continue
                s = _isqrt(rem)
                if s * s != rem:
                    continue
                rr = r + dr
                if rr < 0 or rr >= n_rows:
                    continue
                for dc in (-s, s):
                    cc = c + dc
                    if 0 <= cc < n_cols and known[rr, cc]:
                        src_r[r, c] = rr
                        src_c[r, c] = cc
                        found = True
                        break
                if found:
                    break
    return src_r, src_c


def nearest_known_indices(known: np.ndarray):
    """Row/column of the nearest known cell for every cell (ties: row-major first)."""
    if not known.any():
        raise EmptyMapError("cannot inpaint a map without known cells")
    dist = ndimage.distance_transform_edt(~known)
    d2 = np.rint(dist * dist).astype(np.int64)
    return _nearest_known(np.ascontiguousarray(known), d2)


def inpaint(m: ElevationMap) -> HeightField:
    """Dense heightfield where unknown cells copy their nearest known neighbour."""
    r, c = nearest_known_indices(m.known)
    return HeightField(m.height[r, c], m.resolution, m.origin)
