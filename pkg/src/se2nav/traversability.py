"""SE(2) traversability lattice.

Every lattice state ``(x, y, theta)`` gets a risk in [0, 1] and a terrain normal
``z_b`` from the points of the heightfield that fall inside a yaw-aligned ellipse
around ``(x, y)``:

1. the normal is the smallest-eigenvalue eigenvector of the point covariance and the
   surface variation ``lambda_min / trace`` is the roughness,
2. the body axes follow from the normal and the yaw, giving roll and pitch,
3. risk is 1 when any of roughness / pitch / roll exceeds its limit and a weighted sum
   of the normalised quantities otherwise.

A per-yaw-layer signed distance field over the ``risk == 1`` cells and a cyclic
trilinear interpolator complete the module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._jit import jit, prange
from .terrain import HeightField, InvalidParameterError


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class AssessmentParams:
    ellipse: tuple[float, float] = (0.8, 0.5)
    weights: tuple[float, float, float] = (0.4, 0.3, 0.3)
    kappa_max: float = 0.1
    phi_x_max: float = 0.52
    phi_y_max: float = 0.52

    def __post_init__(self):
        if min(self.ellipse) <= 0:
            raise InvalidParameterError("ellipse semi-axes must be positive")
        if min(self.weights) < 0 or abs(sum(self.weights) - 1.0) > 1e-9:
            raise InvalidParameterError("risk weights must be non-negative and sum to 1")
        if min(self.kappa_max, self.phi_x_max, self.phi_y_max) <= 0:
            raise InvalidParameterError("limits must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([*self.ellipse, *self.weights, self.kappa_max, self.phi_x_max, self.phi_y_max])


@dataclass(frozen=True)
class Se2GridSpec:
    """Lattice nodes at ``origin + resolution * (i, j)`` and yaw ``-pi + k * 2 pi / n_yaw``."""

    origin: tuple[float, float]
    nx: int
    ny: int
    resolution: float
    n_yaw: int

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2 or self.n_yaw < 1 or not self.resolution > 0:
            raise InvalidParameterError("grid needs >= 2x2 nodes, >= 1 yaw bin and positive resolution")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @classmethod
    def centered(cls, center, size_m: float, resolution: float, n_yaw: int) -> "Se2GridSpec":
        n = int(round(size_m / resolution))
        ox = center[0] - (n - 1) * resolution / 2.0
        oy = center[1] - (n - 1) * resolution / 2.0
        return cls((ox, oy), n, n, resolution, n_yaw)

    @classmethod
    def matching(cls, hf: HeightField, n_yaw: int, stride: int = 1, margin_cells: int = 0) -> "Se2GridSpec":
        """Lattice on the heightfield cell centres (every ``stride``-th cell)."""
        ny, nx = hf.heights.shape
        ox, oy = hf.origin
        m = margin_cells
        return cls((ox + m * hf.resolution, oy + m * hf.resolution),
                   (nx - 1 - 2 * m) // stride + 1, (ny - 1 - 2 * m) // stride + 1,
                   hf.resolution * stride, n_yaw)

    @property
    def n_states(self) -> int:
        return self.nx * self.ny * self.n_yaw

    @property
    def yaw_step(self) -> float:
        return 2.0 * math.pi / self.n_yaw

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.resolution * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.resolution * np.arange(self.ny)

    @property
    def yaws(self) -> np.ndarray:
        return -math.pi + self.yaw_step * np.arange(self.n_yaw)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return (self.origin[0], self.origin[0] + (self.nx - 1) * self.resolution,
                self.origin[1], self.origin[1] + (self.ny - 1) * self.resolution)

    @property
    def max_extent(self) -> float:
        return math.hypot(self.nx * self.resolution, self.ny * self.resolution)


@dataclass
class Se2RiskGrid:
    """Risk, normals and SDF over the lattice; arrays are indexed ``[yaw, row(y), col(x)]``."""

    spec: Se2GridSpec
    risk: np.ndarray
    z_b: np.ndarray
    sdf: np.ndarray | None = None
    kappa: np.ndarray | None = field(default=None, repr=False)

    @property
    def obstacles(self) -> np.ndarray:
        return self.risk >= 1.0


# ---------------------------------------------------------------------- 3x3 eigensolver


@jit
def eig3_sym(a00, a01, a02, a11, a12, a22):
    """Eigenvalues (ascending) of a symmetric 3x3 matrix by the trigonometric method."""
    p1 = a01 * a01 + a02 * a02 + a12 * a12
    q = (a00 + a11 + a22) / 3.0
    if p1 == 0.0:
        e0, e1, e2 = a00, a11, a22
    else:
        b00 = a00 - q
        b11 = a11 - q
        b22 = a22 - q
        p2 = b00 * b00 + b11 * b11 + b22 * b22 + 2.0 * p1
        p = math.sqrt(p2 / 6.0)
        det = (b00 * (b11 * b22 - a12 * a12) - a01 * (a01 * b22 - a12 * a02)
               + a02 * (a01 * a12 - b11 * a02))
        r = det / (2.0 * p * p * p)
        r = min(max(r, -1.0), 1.0)
        phi = math.acos(r) / 3.0
        e2 = q + 2.0 * p * math.cos(phi)
        e0 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
        e1 = 3.0 * q - e0 - e2
    # sort ascending
    if e0 > e1:
        e0, e1 = e1, e0
    if e1 > e2:
        e1, e2 = e2, e1
    if e0 > e1:
        e0, e1 = e1, e0
    return e0, e1, e2


@jit
def eigvec3_sym(a00, a01, a02, a11, a12, a22, lam):
    """Unit eigenvector for eigenvalue ``lam`` from the best cross product of rows of A - lam I."""
    r0x, r0y, r0z = a00 - lam, a01, a02
    r1x, r1y, r1z = a01, a11 - lam, a12
    r2x, r2y, r2z = a02, a12, a22 - lam
    c0x = r0y * r1z - r0z * r1y
    c0y = r0z * r1x - r0x * r1z
    c0z = r0x * r1y - r0y * r1x
    c1x = r0y * r2z - r0z * r2y
    c1y = r0z * r2x - r0x * r2z
    c1z = r0x * r2y - r0y * r2x
    c2x = r1y * r2z - r1z * r2y
    c2y = r1z * r2x - r1x * r2z
    c2z = r1x * r2y - r1y * r2x
    n0 = c0x * c0x + c0y * c0y + c0z * c0z
    n1 = c1x * c1x + c1y * c1y + c1z * c1z
    n2 = c2x * c2x + c2y * c2y + c2z * c2z
    if n0 >= n1 and n0 >= n2:
        s = math.sqrt(n0)
        return c0x / s, c0y / s, c0z / s, n0
    if n1 >= n2:
        s = math.sqrt(n1)
        return c1x / s, c1y / s, c1z / s, n1
    if n2 == 0.0:
        return 0.0, 0.0, 1.0, 0.0
    s = math.sqrt(n2)
    return c2x / s, c2y / s, c2z / s, n2


@jit
def normal_from_cov(c00, c01, c02, c11, c12, c22):
    """(nx, ny, nz, kappa, ok): upward min-eigenvector and surface variation of a covariance."""
    e0, e1, e2 = eig3_sym(c00, c01, c02, c11, c12, c22)
    tr = e0 + e1 + e2
    if not tr > 0.0 or (e1 - e0) <= 1e-12 * tr:
        return 0.0, 0.0, 1.0, 1.0, False
    nx, ny, nz, nrm = eigvec3_sym(c00, c01, c02, c11, c12, c22, e0)
    if nrm == 0.0:
        return 0.0, 0.0, 1.0, 1.0, False
    if nz < 0.0:
        nx, ny, nz = -nx, -ny, -nz
    if nz <= 0.0:
        return nx, ny, nz, 1.0, False
    # eigenvalues below round-off of the trace count as exactly zero
    kappa = e0 / tr if e0 > 1e-14 * tr else 0.0
    return nx, ny, nz, kappa, True


@jit
def _risk_from_normal(nx, ny, nz, kappa, theta, prm):
    """Risk of one state given its normal and roughness; mirrors the assessment rules."""
    kappa_max = prm[5]
    if kappa > kappa_max:
        return 1.0
    c = math.cos(theta)
    s = math.sin(theta)
    # y_b = z_b x x_yaw normalised; x_b = y_b x z_b
    yx = -nz * s
    yy = nz * c
    yz = ny * c - nx * s
    yn = math.sqrt(yx * yx + yy * yy + yz * yz)
    if yn < 1e-12:
        return 1.0
    yx /= yn
    yy /= yn
    yz /= yn
    xz = yx * ny - yy * nx
    phi_x = abs(math.asin(min(max(xz, -1.0), 1.0)))
    phi_y = abs(math.asin(min(max(yz, -1.0), 1.0)))
    if phi_x > prm[6] or phi_y > prm[7]:
        return 1.0
    r = prm[2] * kappa / kappa_max + prm[3] * phi_x / prm[6] + prm[4] * phi_y / prm[7]
    return min(max(r, 0.0), 1.0)


@jit
def _attitude(nx, ny, nz, theta):
    c = math.cos(theta)
    s = math.sin(theta)
    yx = -nz * s
    yy = nz * c
    yz = ny * c - nx * s
    yn = math.sqrt(yx * yx + yy * yy + yz * yz)
    yx /= yn
    yy /= yn
    yz /= yn
    xz = yx * ny - yy * nx
    return abs(math.asin(min(max(xz, -1.0), 1.0))), abs(math.asin(min(max(yz, -1.0), 1.0)))


@jit
def _assess_general(heights, res, ox, oy, x, y, theta, prm):
    """Bounding-box gather + two-pass covariance for an arbitrary continuous state."""
    ny_, nx_ = heights.shape
    ex = prm[0]
    ey = prm[1]
    c = math.cos(theta)
    s = math.sin(theta)
    r = max(ex, ey)
    i0 = max(int(math.floor((x - r - ox) / res)), 0)
    i1 = min(int(math.ceil((x + r - ox) / res)), nx_ - 1)
    j0 = max(int(math.floor((y - r - oy) / res)), 0)
    j1 = min(int(math.ceil((y + r - oy) / res)), ny_ - 1)
    cnt = 0
    mx = 0.0
    my = 0.0
    mz = 0.0
    for j in range(j0, j1 + 1):
        for i in range(i0, i1 + 1):
            dx = ox + i * res - x
            dy = oy + j * res - y
            u = (c * dx + s * dy) / ex
            w = (-s * dx + c * dy) / ey
            if u * u + w * w <= 1.0 + 1e-9:
                cnt += 1
                mx += dx
                my += dy
                mz += heights[j, i]
    if cnt < 3:
        return 1.0, 0.0, 0.0, 1.0, 1.0, cnt, False
    mx /= cnt
    my /= cnt
    mz /= cnt
    c00 = c01 = c02 = c11 = c12 = c22 = 0.0
    for j in range(j0, j1 + 1):
        for i in range(i0, i1 + 1):
            dx = ox + i * res - x
            dy = oy + j * res - y
            u = (c * dx + s * dy) / ex
            w = (-s * dx + c * dy) / ey
            if u * u + w * w <= 1.0 + 1e-9:
                px = dx - mx
                py = dy - my
                pz = heights[j, i] - mz
                c00 += px * px
                c01 += px * py
                c02 += px * pz
                c11 += py * py
                c12 += py * pz
                c22 += pz * pz
    nx, ny, nz, kappa, ok = normal_from_cov(c00 / cnt, c01 / cnt, c02 / cnt, c11 / cnt, c12 / cnt, c22 / cnt)
    if not ok:
        return 1.0, 0.0, 0.0, 1.0, 1.0, cnt, False
    return _risk_from_normal(nx, ny, nz, kappa, theta, prm), nx, ny, nz, kappa, cnt, True


@dataclass(frozen=True)
class Assessment:
    risk: float
    z_b: np.ndarray
    kappa: float
    phi_x: float
    phi_y: float
    n_points: int
    known: bool


def assess_state_details(height: HeightField, s_r, params: AssessmentParams = AssessmentParams()) -> Assessment:
    x, y, theta = (float(v) for v in s_r)
    prm = params.as_array()
    risk, nx, ny, nz, kappa, cnt, known = _assess_general(height.heights, height.resolution, height.origin[0],
                                                          height.origin[1], x, y, theta, prm)
    z_b = np.array([nx, ny, nz])
    if known:
        phi_x, phi_y = _attitude(nx, ny, nz, theta)
    else:
        phi_x = phi_y = float("nan")
    return Assessment(float(risk), z_b, float(kappa), phi_x, phi_y, int(cnt), known)


def assess_state(height: HeightField, s_r, params: AssessmentParams = AssessmentParams()):
    """Risk in [0, 1] and upward unit normal at one SE(2) state.

    States with fewer than three footprint points or a degenerate covariance get risk 1
    and normal ``(0, 0, 1)``.
    """
    a = assess_state_details(height, s_r, params)
    return a.risk, a.z_b


# ------------------------------------------------------------------------ lattice kernel


def _ellipse_offsets(ex, ey, theta, res):
    r = int(math.ceil(max(ex, ey) / res)) + 1
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1))
    dx = di * res
    dy = dj * res
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / ex
    w = (-s * dx + c * dy) / ey
    inside = u * u + w * w <= 1.0 + 1e-9
    return di[inside].astype(np.int64), dj[inside].astype(np.int64)


def _row_runs(lists):
    """Per footprint, rows of (dj, first di, last di); an ellipse meets each row in one run."""
    runs, ptr = [], [0]
    for di, dj in lists:
        for r in np.unique(dj):
            cols = di[dj == r]
            assert cols.max() - cols.min() + 1 == cols.size
            runs.append((r, cols.min(), cols.max()))
        ptr.append(len(runs))
    return np.array(runs, dtype=np.int64).reshape(-1, 3), np.array(ptr, dtype=np.int64)


@jit
def _sum_squares(m):
    # sum of d^2 for d = 0..m; the polynomial also telescopes for negative m
    return m * (m + 1) * (2 * m + 1) // 6


def _grid_kernel(heights, stride, i_base, j_base, nx, ny, yaws, pair, offs_ptr, runs, run_ptr,
                 pre0, pre1, pre2, zref, moments, reach, res, prm, risk, zb, kappa_out):
    # yaw k and yaw pair[k] (k + n/2) share one footprint, so each footprint is
    # evaluated once and its normal reused for both headings.  Footprints are
    # summed one row run at a time from row prefix sums of h, i h and h^2.
    nh_r, nh_c = heights.shape
    n_fp = offs_ptr.shape[0] - 1
    total = n_fp * ny
    for job in prange(total):
        k = job // ny
        gj = job - k * ny
        a = offs_ptr[k]
        b = offs_ptr[k + 1]
        rch = reach[k]
        cj = j_base + gj * stride
        for gi in range(nx):
            ci = i_base + gi * stride
            interior = ci - rch >= 0 and cj - rch >= 0 and ci + rch < nh_c and cj + rch < nh_r
            zc = heights[min(max(cj, 0), nh_r - 1), min(max(ci, 0), nh_c - 1)]
            sz = 0.0
            sxz = 0.0
            syz = 0.0
            szz = 0.0
            if interior:
                cnt = b - a
                zr = zc - zref
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                sj = 0.0
                for q in range(run_ptr[k], run_ptr[k + 1]):
                    row = cj + runs[q, 0]
                    lo = ci + runs[q, 1]
                    hi = ci + runs[q, 2] + 1
                    r0 = pre0[row, hi] - pre0[row, lo]
                    s0 += r0
                    s1 += pre1[row, hi] - pre1[row, lo]
                    s2 += pre2[row, hi] - pre2[row, lo]
                    sj += runs[q, 0] * r0
                sz = s0 - cnt * zr
                sxz = (s1 - ci * s0) - zr * moments[k, 0]
                syz = sj - zr * moments[k, 1]
                szz = s2 - 2.0 * zr * s0 + cnt * zr * zr
                sx = moments[k, 0]
                sy = moments[k, 1]
                sxx = moments[k, 2]
                sxy = moments[k, 3]
                syy = moments[k, 4]
            else:
                # same row runs, clipped to the heightfield; offset moments in closed form
                cnt = 0
                sx = 0.0
                sy = 0.0
                sxx = 0.0
                sxy = 0.0
                syy = 0.0
                zr = zc - zref
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                sj = 0.0
                for q in range(run_ptr[k], run_ptr[k + 1]):
                    dj = runs[q, 0]
                    row = cj + dj
                    if row < 0 or row >= nh_r:
                        continue
                    lo = max(ci + runs[q, 1], 0)
                    hi = min(ci + runs[q, 2] + 1, nh_c)
                    if hi <= lo:
                        continue
                    n = hi - lo
                    d0 = lo - ci
                    d1 = hi - 1 - ci
                    sum_d = n * (d0 + d1) // 2
                    cnt += n
                    sx += sum_d
                    sy += dj * n
                    sxx += _sum_squares(d1) - _sum_squares(d0 - 1)
                    sxy += dj * sum_d
                    syy += dj * dj * n
                    r0 = pre0[row, hi] - pre0[row, lo]
                    s0 += r0
                    s1 += pre1[row, hi] - pre1[row, lo]
                    s2 += pre2[row, hi] - pre2[row, lo]
                    sj += dj * r0
                sz = s0 - cnt * zr
                sxz = (s1 - ci * s0) - zr * sx
                syz = sj - zr * sy
                szz = s2 - 2.0 * zr * s0 + cnt * zr * zr
            ok = False
            nxv = 0.0
            nyv = 0.0
            nzv = 1.0
            kap = 1.0
            if cnt >= 3:
                inv = 1.0 / cnt
                # offsets are in cells; rescale the xy moments to metres
                mx = sx * inv * res
                my = sy * inv * res
                mz = sz * inv
                nxv, nyv, nzv, kap, ok = normal_from_cov(
                    sxx * inv * res * res - mx * mx, sxy * inv * res * res - mx * my, sxz * inv * res - mx * mz,
                    syy * inv * res * res - my * my, syz * inv * res - my * mz, szz * inv - mz * mz)
                if not ok:
                    nxv = 0.0
                    nyv = 0.0
                    nzv = 1.0
                    kap = 1.0
            kk = k
            while kk >= 0:
                zb[kk, gj, gi, 0] = nxv
                zb[kk, gj, gi, 1] = nyv
                zb[kk, gj, gi, 2] = nzv
                kappa_out[kk, gj, gi] = kap
                risk[kk, gj, gi] = _risk_from_normal(nxv, nyv, nzv, kap, yaws[kk], prm) if ok else 1.0
                kk = pair[kk] if kk == k else -1


_grid_parallel = jit(_grid_kernel, parallel=True)
_grid_serial = jit(_grid_kernel)


def build_risk_grid(height: HeightField, spec: Se2GridSpec, params: AssessmentParams = AssessmentParams(),
                    parallel: bool = True, with_sdf: bool = True) -> Se2RiskGrid:
    """Assess every lattice state (data-parallel over yaw layers and rows).

    Lattice nodes must coincide with heightfield cell centres (integer stride).
    Footprint cells falling off the heightfield are skipped.
    """
    ratio = spec.resolution / height.resolution
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9:
        raise InvalidParameterError("lattice resolution must be an integer multiple of the heightfield resolution")
    fi = (spec.origin[0] - height.origin[0]) / height.resolution
    fj = (spec.origin[1] - height.origin[1]) / height.resolution
    i_base, j_base = int(round(fi)), int(round(fj))
    if abs(fi - i_base) > 1e-6 or abs(fj - j_base) > 1e-6:
        raise InvalidParameterError("lattice nodes must align with heightfield cell centres")
    yaws = spec.yaws
    ex, ey = params.ellipse
    n_fp = spec.n_yaw // 2 if spec.n_yaw % 2 == 0 else spec.n_yaw
    pair = np.full(spec.n_yaw, -1, dtype=np.int64)
    if n_fp < spec.n_yaw:
        pair[:n_fp] = np.arange(n_fp) + n_fp
    lists = [_ellipse_offsets(ex, ey, th, height.resolution) for th in yaws[:n_fp]]
    ptr = np.zeros(n_fp + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(l[0]) for l in lists])
    moments = np.array([[di.sum(), dj.sum(), (di * di).sum(), (di * dj).sum(), (dj * dj).sum()]
                        for di, dj in lists], dtype=float)
    reach = np.array([max(np.abs(di).max(), np.abs(dj).max()) for di, dj in lists], dtype=np.int64)
    shape = (spec.n_yaw, spec.ny, spec.nx)
    risk = np.empty(shape)
    zb = np.empty(shape + (3,))
    kappa = np.empty(shape)
    runs, run_ptr = _row_runs(lists)
    h = height.heights
    zref = float(np.mean(h))
    hr = h - zref
    cols = np.arange(h.shape[1], dtype=float)
    pre0, pre1, pre2 = (np.zeros((h.shape[0], h.shape[1] + 1)) for _ in range(3))
    np.cumsum(hr, axis=1, out=pre0[:, 1:])
    np.cumsum(hr * cols, axis=1, out=pre1[:, 1:])
    np.cumsum(hr * hr, axis=1, out=pre2[:, 1:])
    kern = _grid_parallel if parallel else _grid_serial
    kern(h, stride, i_base, j_base, spec.nx, spec.ny, yaws, pair, ptr, runs, run_ptr,
         pre0, pre1, pre2, zref, moments, reach, height.resolution, params.as_array(), risk, zb, kappa)
    grid = Se2RiskGrid(spec, risk, zb, None, kappa)
    if with_sdf:
        grid = sdf_from_obstacles(grid)
    return grid


# ---------------------------------------------------------------------------------- SDF


def signed_distance_layer(obstacle: np.ndarray, resolution: float, sentinel: float) -> np.ndarray:
    """Signed distance of one 2-D obstacle mask in metres.

    Free cells hold the distance to the nearest obstacle centre.  Obstacle cells hold
    minus the distance to the nearest free centre, shifted by one cell so boundary
    obstacle cells read 0; this keeps the field 1-Lipschitz across the boundary.
    """
    if not obstacle.any():
        return np.full(obstacle.shape, sentinel)
    if obstacle.all():
        return np.full(obstacle.shape, -sentinel)
    outside = ndimage.distance_transform_edt(~obstacle) * resolution
    inside = ndimage.distance_transform_edt(obstacle) * resolution
    return np.where(obstacle, -(inside - resolution), outside)


def sdf_from_obstacles(grid: Se2RiskGrid) -> Se2RiskGrid:
    """Attach a per-yaw-layer SDF of the ``risk >= 1`` cells."""
    sentinel = grid.spec.max_extent
    obst = grid.obstacles
    layers, seen = [], {}
    for k in range(grid.spec.n_yaw):
        # identical masks (common when obstacles do not depend on heading) share one transform
        key = obst[k].tobytes()
        if key not in seen:
            seen[key] = signed_distance_layer(obst[k], grid.spec.resolution, sentinel)
        layers.append(seen[key])
    sdf = np.stack(layers)
    return Se2RiskGrid(grid.spec, grid.risk, grid.z_b, sdf, grid.kappa)


# --------------------------------------------------------------------------- trilinear


@jit
def _snap(f):
    r = math.floor(f + 0.5)
    if abs(f - r) < 1e-9:
        return r
    return f


@jit
def trilinear_many(data, x0, y0, res, xs, ys, ths, clamp):
    """Interpolate ``data[yaw, row, col, ch]`` at continuous states.

    Returns values (n, ch), gradients (n, ch, 3) w.r.t. (x, y, theta) and an
    out-of-bounds flag per query.  Out-of-bounds queries are clamped to the edge.
    """
    n_yaw, n_r, n_c, n_ch = data.shape
    n = xs.shape[0]
    vals = np.zeros((n, n_ch))
    grads = np.zeros((n, n_ch, 3))
    oob = np.zeros(n, dtype=np.bool_)
    dth = 2.0 * math.pi / n_yaw
    for q in range(n):
        fx = _snap((xs[q] - x0) / res)
        fy = _snap((ys[q] - y0) / res)
        if fx < 0.0 or fx > n_c - 1.0 or fy < 0.0 or fy > n_r - 1.0 or not (fx == fx and fy == fy):
            oob[q] = True
            if not clamp:
                continue
            fx = min(max(fx, 0.0), n_c - 1.0) if fx == fx else 0.0
            fy = min(max(fy, 0.0), n_r - 1.0) if fy == fy else 0.0
        ft = (ths[q] + math.pi) / dth
        ft = ft - n_yaw * math.floor(ft / n_yaw)
        ft = _snap(ft)
        if ft >= n_yaw:
            ft -= n_yaw
        i = min(int(fx), n_c - 2)
        j = min(int(fy), n_r - 2)
        k = int(ft)
        if k >= n_yaw:
            k = n_yaw - 1
        k1 = (k + 1) % n_yaw
        tx = fx - i
        ty = fy - j
        tt = ft - k
        for ch in range(n_ch):
            v000 = data[k, j, i, ch]
            v100 = data[k, j, i + 1, ch]
            v010 = data[k, j + 1, i, ch]
            v110 = data[k, j + 1, i + 1, ch]
            v001 = data[k1, j, i, ch]
            v101 = data[k1, j, i + 1, ch]
            v011 = data[k1, j + 1, i, ch]
            v111 = data[k1, j + 1, i + 1, ch]
            a0 = (1.0 - tx) * v000 + tx * v100
            b0 = (1.0 - tx) * v010 + tx * v110
            a1 = (1.0 - tx) * v001 + tx * v101
            b1 = (1.0 - tx) * v011 + tx * v111
            c0 = (1.0 - ty) * a0 + ty * b0
            c1 = (1.0 - ty) * a1 + ty * b1
            vals[q, ch] = (1.0 - tt) * c0 + tt * c1
            gx0 = (1.0 - ty) * (v100 - v000) + ty * (v110 - v010)
            gx1 = (1.0 - ty) * (v101 - v001) + ty * (v111 - v011)
            grads[q, ch, 0] = ((1.0 - tt) * gx0 + tt * gx1) / res
            grads[q, ch, 1] = ((1.0 - tt) * (b0 - a0) + tt * (b1 - a1)) / res
            grads[q, ch, 2] = (c1 - c0) / dth
    return vals, grads, oob


def _field_data(grid: Se2RiskGrid, field_name: str) -> np.ndarray:
    if field_name == "risk":
        return grid.risk[..., None]
    if field_name == "sdf":
        if grid.sdf is None:
            raise ValueError("grid has no SDF layer; call sdf_from_obstacles first")
        return grid.sdf[..., None]
    if field_name == "z_b":
        return grid.z_b
    raise ValueError(f"unknown field {field_name!r}")


def query_trilinear(grid: Se2RiskGrid, s_r, field_name: str = "risk"):
    """Trilinear value and gradient d/d(x, y, theta) of ``risk`` or ``sdf``.

    ``s_r`` is a single (x, y, theta) or an (n, 3) array.  Yaw wraps cyclically.
    Raises :class:`OutOfBoundsError` when any (x, y) lies outside the lattice.
    """
    q = np.atleast_2d(np.asarray(s_r, dtype=float))
    data = np.ascontiguousarray(_field_data(grid, field_name))
    spec = grid.spec
    vals, grads, oob = trilinear_many(data, spec.origin[0], spec.origin[1], spec.resolution,
                                      np.ascontiguousarray(q[:, 0]), np.ascontiguousarray(q[:, 1]),
                                      np.ascontiguousarray(q[:, 2]), False)
    if oob.any():
        raise OutOfBoundsError(f"{int(oob.sum())} queries outside the lattice extent")
    if field_name != "z_b":
        vals, grads = vals[:, 0], grads[:, 0]
    if np.ndim(s_r) == 1:
        return vals[0], grads[0]
    return vals, grads


def grid_from_mask(spec: Se2GridSpec, obstacle: np.ndarray, base_risk: float | np.ndarray = 0.0) -> Se2RiskGrid:
    """Flat-ground grid whose risk is 1 on ``obstacle`` (ny, nx) and ``base_risk`` elsewhere.

    Handy for synthetic maps; the mask applies to every yaw layer.
    """
    obstacle = np.asarray(obstacle, dtype=bool)
    if obstacle.shape != (spec.ny, spec.nx):
        raise InvalidParameterError("mask shape must be (ny, nx)")
    shape = (spec.n_yaw, spec.ny, spec.nx)
    risk = np.broadcast_to(np.where(obstacle, 1.0, base_risk), shape).copy()
    zb = np.zeros(shape + (3,))
    zb[..., 2] = 1.0
    return sdf_from_obstacles(Se2RiskGrid(spec, risk, zb, None, np.zeros(shape)))
