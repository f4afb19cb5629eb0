"""Ground-truth terrains, a simulated range sensor and noisy pose generation.

Two terrain flavours are provided:

* :class:`HeightField` -- a regular grid of heights queried bilinearly.  Produced by
  :func:`generate_terrain` (value noise or a sinusoid) or loaded from disk.
* :class:`AnalyticTerrain` -- closed-form surfaces (flat, inclined plane, sinusoid,
  spherical cap) with exact normals, used as oracles.

Both expose vectorised ``height(x, y)``, ``gradient(x, y)`` and ``normal(x, y)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._jit import jit

logger = logging.getLogger(__name__)

B3 = np.array([0.0, 0.0, 1.0])


class InvalidParameterError(ValueError):
    """Raised for non-physical or inconsistent parameters."""


# --------------------------------------------------------------------------- heightfield


@jit
def _bilinear(heights, res, ox, oy, xs, ys):
    ny, nx = heights.shape
    out = np.empty(xs.shape[0])
    for n in range(xs.shape[0]):
        fx = (xs[n] - ox) / res
        fy = (ys[n] - oy) / res
        fx = min(max(fx, 0.0), nx - 1.0)
        fy = min(max(fy, 0.0), ny - 1.0)
        i = min(int(math.floor(fx)), nx - 2)
        j = min(int(math.floor(fy)), ny - 2)
        tx = fx - i
        ty = fy - j
        h00 = heights[j, i]
        h10 = heights[j, i + 1]
        h01 = heights[j + 1, i]
        h11 = heights[j + 1, i + 1]
        out[n] = (1.0 - ty) * ((1.0 - tx) * h00 + tx * h10) + ty * ((1.0 - tx) * h01 + tx * h11)
    return out


@jit
def _bilinear_grad(heights, res, ox, oy, xs, ys):
    ny, nx = heights.shape
    out = np.empty((xs.shape[0], 2))
    for n in range(xs.shape[0]):
        fx = min(max((xs[n] - ox) / res, 0.0), nx - 1.0)
        fy = min(max((ys[n] - oy) / res, 0.0), ny - 1.0)
        i = min(int(math.floor(fx)), nx - 2)
        j = min(int(math.floor(fy)), ny - 2)
        tx = fx - i
        ty = fy - j
        h00 = heights[j, i]
        h10 = heights[j, i + 1]
        h01 = heights[j + 1, i]
        h11 = heights[j + 1, i + 1]
        out[n, 0] = ((1.0 - ty) * (h10 - h00) + ty * (h11 - h01)) / res
        out[n, 1] = ((1.0 - tx) * (h01 - h00) + tx * (h11 - h10)) / res
    return out


@dataclass(frozen=True)
class HeightField:
    """Regular height grid.

    ``heights[j, i]`` is the height at the centre of cell ``(i, j)`` whose world position
    is ``origin + resolution * (i, j)``.  Queries between centres are bilinear and
    clamp to the outermost centres.
    """

    heights: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        h = np.ascontiguousarray(self.heights, dtype=float)
        if h.ndim != 2 or min(h.shape) < 2:
            raise InvalidParameterError("heights must be a 2-D array with at least 2x2 cells")
        if not self.resolution > 0:
            raise InvalidParameterError("resolution must be positive")
        if not np.all(np.isfinite(h)):
            raise InvalidParameterError("heights must be finite")
        object.__setattr__(self, "heights", h)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.heights.shape

    @property
    def width_m(self) -> float:
        return self.heights.shape[1] * self.resolution

    @property
    def height_m(self) -> float:
        return self.heights.shape[0] * self.resolution

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.resolution * np.arange(self.heights.shape[1])

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.resolution * np.arange(self.heights.shape[0])

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the cell centres."""
        ny, nx = self.heights.shape
        ox, oy = self.origin
        return ox, ox + (nx - 1) * self.resolution, oy, oy + (ny - 1) * self.resolution

    def contains(self, x, y) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        xs = np.broadcast_to(x, shape).ravel()
        ys = np.broadcast_to(y, shape).ravel()
        out = _bilinear(self.heights, self.resolution, self.origin[0], self.origin[1],
                        np.ascontiguousarray(xs), np.ascontiguousarray(ys))
        return out.reshape(shape) if shape else float(out[0])

    def gradient(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        xs = np.ascontiguousarray(np.broadcast_to(x, shape).ravel())
        ys = np.ascontiguousarray(np.broadcast_to(y, shape).ravel())
        g = _bilinear_grad(self.heights, self.resolution, self.origin[0], self.origin[1], xs, ys)
        return g.reshape(shape + (2,))

    def normal(self, x, y) -> np.ndarray:
        g = self.gradient(x, y)
        n = np.concatenate([-g, np.ones(g.shape[:-1] + (1,))], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def max_slope(self) -> float:
        """Largest finite-difference slope between neighbouring cell centres."""
        h = self.heights
        sx = np.abs(np.diff(h, axis=1)).max() / self.resolution
        sy = np.abs(np.diff(h, axis=0)).max() / self.resolution
        return float(math.hypot(sx, sy))


# ---------------------------------------------------------------------- procedural terrain


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


@dataclass(frozen=True)
class TerrainParams:
    """Parameters of the procedural generator.

    ``kind="value"`` sums ``octaves`` layers of quintic-faded value noise, octave ``o``
    having lattice spacing ``wavelength / 2**o`` and amplitude
    ``amplitude * persistence**o``.  ``kind="sinusoid"`` is the single closed-form
    surface ``amplitude * sin(k (x + px)) * sin(k (y + py))`` with random phases.
    ``rocks`` adds that many steep radial bumps of height ``rock_height``; ``rock_positions``
    places further bumps at given (x, y) centres.
    """

    width: float = 24.0
    height: float = 24.0
    resolution: float = 0.1
    amplitude: float = 1.0
    wavelength: float = 8.0
    octaves: int = 4
    persistence: float = 0.45
    kind: str = "value"
    rocks: int = 0
    rock_radius: float = 0.5
    rock_height: float = 0.8
    rock_positions: tuple = ()
    origin: tuple[float, float] | None = None

    def validate(self) -> None:
        if not (self.width > 0 and self.height > 0 and self.resolution > 0):
            raise InvalidParameterError("terrain size and resolution must be positive")
        if self.wavelength <= 0 or self.amplitude < 0:
            raise InvalidParameterError("wavelength must be positive and amplitude non-negative")
        if self.kind not in ("value", "sinusoid"):
            raise InvalidParameterError(f"unknown terrain kind {self.kind!r}")
        if self.kind == "value" and not 1 <= self.octaves <= 8:
            raise InvalidParameterError("octaves must lie in [1, 8]")
        if self.rocks < 0 or self.rock_radius <= 0:
            raise InvalidParameterError("rock count must be >= 0 and radius positive")
        if any(len(c) != 2 for c in self.rock_positions):
            raise InvalidParameterError("rock positions must be (x, y) pairs")


class ProceduralSurface:
    """Closed-form evaluator behind :func:`generate_terrain`.

    Exposed so tests can compare stored heights with the analytic basis.
    """

    def __init__(self, seed: int, params: TerrainParams):
        params.validate()
        self.params = params
        rng = np.random.default_rng(seed)
        p = params
        ox, oy = p.origin if p.origin is not None else (-p.width / 2.0, -p.height / 2.0)
        self.origin = (float(ox), float(oy))
        self.lattices = []
        if p.kind == "value":
            for o in range(p.octaves):
                spacing = p.wavelength / 2.0**o
                nx = int(math.ceil(p.width / spacing)) + 2
                ny = int(math.ceil(p.height / spacing)) + 2
                self.lattices.append((spacing, p.amplitude * p.persistence**o,
                                      rng.uniform(-1.0, 1.0, size=(ny, nx))))
            self.phase = (0.0, 0.0)
        else:
            self.phase = tuple(rng.uniform(0.0, p.wavelength, size=2))
        self.rocks = []
        for _ in range(p.rocks):
            cx = rng.uniform(ox, ox + p.width)
            cy = rng.uniform(oy, oy + p.height)
            self.rocks.append((cx, cy))
        self.rocks.extend((float(cx), float(cy)) for cx, cy in p.rock_positions)

    def __call__(self, x, y) -> np.ndarray:
        p = self.params
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if p.kind == "sinusoid":
            k = 2.0 * math.pi / p.wavelength
            z = p.amplitude * np.sin(k * (x + self.phase[0])) * np.sin(k * (y + self.phase[1]))
        else:
            z = np.zeros(np.broadcast(x, y).shape)
            for spacing, amp, lat in self.lattices:
                u = (x - self.origin[0]) / spacing
                v = (y - self.origin[1]) / spacing
                i = np.clip(np.floor(u).astype(int), 0, lat.shape[1] - 2)
                j = np.clip(np.floor(v).astype(int), 0, lat.shape[0] - 2)
                tx = _fade(u - i)
                ty = _fade(v - j)
                a = lat[j, i] + tx * (lat[j, i + 1] - lat[j, i])
                b = lat[j + 1, i] + tx * (lat[j + 1, i + 1] - lat[j + 1, i])
                z = z + amp * (a + ty * (b - a))
        for cx, cy in self.rocks:
            r2 = ((x - cx) ** 2 + (y - cy) ** 2) / p.rock_radius**2
            z = z + p.rock_height * np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
        return z

    def slope_bound(self) -> float:
        """Upper bound on |grad z| for the noise part (rocks excluded)."""
        p = self.params
        if p.kind == "sinusoid":
            return math.sqrt(2.0) * p.amplitude * 2.0 * math.pi / p.wavelength
        # |fade'| <= 15/8, lattice differences <= 2
        return sum(math.sqrt(2.0) * amp * 2.0 * 1.875 / spacing for spacing, amp, _ in self.lattices)


def generate_terrain(seed: int, params: TerrainParams | None = None, **overrides) -> HeightField:
    """Build a reproducible procedural heightfield.

    Parameters
    ----------
    seed : int
        Seed of the generator; identical seeds give bit-identical fields.
    params : TerrainParams, optional
        Generator parameters; keyword ``overrides`` replace individual fields.

    Raises
    ------
    InvalidParameterError
        For non-positive dimensions or unknown kinds.
    """
    if params is None:
        params = TerrainParams(**overrides)
    elif overrides:
        params = TerrainParams(**{**params.__dict__, **overrides})
    surface = ProceduralSurface(seed, params)
    nx = int(round(params.width / params.resolution))
    ny = int(round(params.height / params.resolution))
    if nx < 2 or ny < 2:
        raise InvalidParameterError("terrain must span at least 2x2 cells")
    ox, oy = surface.origin
    xs = ox + params.resolution * (np.arange(nx) + 0.5)
    ys = oy + params.resolution * (np.arange(ny) + 0.5)
    X, Y = np.meshgrid(xs, ys)
    return HeightField(surface(X, Y), params.resolution, (xs[0], ys[0]))


# ----------------------------------------------------------------------- analytic terrains


@dataclass(frozen=True)
class AnalyticTerrain:
    """Closed-form surface with exact height, gradient and Hessian.

    kinds and parameters:

    * ``flat``
    * ``incline``: ``pitch`` (rise along +x), ``roll`` (rise along +y); z = x tan(pitch) + y tan(roll)
    * ``sinusoid``: ``amplitude``, ``wavelength``; z = A sin(kx) cos(ky)
    * ``cap``: ``radius``; z = sqrt(R^2 - r^2) - R (only defined for r < R)
    """

    kind: str = "flat"
    pitch: float = 0.0
    roll: float = 0.0
    amplitude: float = 0.0
    wavelength: float = 1.0
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("flat", "incline", "sinusoid", "cap"):
            raise InvalidParameterError(f"unknown analytic terrain {self.kind!r}")
        if self.kind == "sinusoid" and self.wavelength <= 0:
            raise InvalidParameterError("wavelength must be positive")
        if self.kind == "cap" and self.radius <= 0:
            raise InvalidParameterError("radius must be positive")
        if self.kind == "incline" and max(abs(self.pitch), abs(self.roll)) >= math.pi / 2:
            raise InvalidParameterError("incline angles must lie in (-pi/2, pi/2)")

    @classmethod
    def flat(cls):
        return cls("flat")

    @classmethod
    def incline(cls, pitch: float, roll: float = 0.0):
        return cls("incline", pitch=pitch, roll=roll)

    @classmethod
    def sinusoid(cls, amplitude: float, wavelength: float):
        return cls("sinusoid", amplitude=amplitude, wavelength=wavelength)

    @classmethod
    def cap(cls, radius: float):
        return cls("cap", radius=radius)

    def height(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.kind == "flat":
            z = np.zeros(np.broadcast(x, y).shape)
        elif self.kind == "incline":
            z = x * math.tan(self.pitch) + y * math.tan(self.roll)
        elif self.kind == "sinusoid":
            k = 2.0 * math.pi / self.wavelength
            z = self.amplitude * np.sin(k * x) * np.cos(k * y)
        else:
            z = np.sqrt(np.maximum(self.radius**2 - x * x - y * y, 0.0)) - self.radius
        return z if z.shape else float(z)

    def gradient(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        if self.kind == "flat":
            gx = np.zeros(shape)
            gy = np.zeros(shape)
        elif self.kind == "incline":
            gx = np.full(shape, math.tan(self.pitch))
            gy = np.full(shape, math.tan(self.roll))
        elif self.kind == "sinusoid":
            k = 2.0 * math.pi / self.wavelength
            gx = self.amplitude * k * np.cos(k * x) * np.cos(k * y)
            gy = -self.amplitude * k * np.sin(k * x) * np.sin(k * y)
        else:
            w = np.sqrt(self.radius**2 - x * x - y * y)
            gx = -x / w
            gy = -y / w
        return np.stack(np.broadcast_arrays(gx, gy), axis=-1)

    def hessian(self, x, y) -> np.ndarray:
        """Second derivatives ``[[hxx, hxy], [hxy, hyy]]`` stacked on the last two axes."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        H = np.zeros(shape + (2, 2))
        if self.kind == "sinusoid":
            k = 2.0 * math.pi / self.wavelength
            A = self.amplitude
            H[..., 0, 0] = -A * k * k * np.sin(k * x) * np.cos(k * y)
            H[..., 1, 1] = -A * k * k * np.sin(k * x) * np.cos(k * y)
            H[..., 0, 1] = H[..., 1, 0] = -A * k * k * np.cos(k * x) * np.sin(k * y)
        elif self.kind == "cap":
            w2 = self.radius**2 - x * x - y * y
            w3 = w2 * np.sqrt(w2)
            H[..., 0, 0] = -(self.radius**2 - y * y) / w3
            H[..., 1, 1] = -(self.radius**2 - x * x) / w3
            H[..., 0, 1] = H[..., 1, 0] = -x * y / w3
        return H

    def normal(self, x, y) -> np.ndarray:
        g = self.gradient(x, y)
        n = np.concatenate([-g, np.ones(g.shape[:-1] + (1,))], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def rasterize(self, width: float, height: float, resolution: float,
                  origin: tuple[float, float] | None = None) -> HeightField:
        """Sample the surface at cell centres of a ``width x height`` grid."""
        nx = int(round(width / resolution))
        ny = int(round(height / resolution))
        if origin is None:
            origin = (-(nx - 1) * resolution / 2.0, -(ny - 1) * resolution / 2.0)
        xs = origin[0] + resolution * np.arange(nx)
        ys = origin[1] + resolution * np.arange(ny)
        X, Y = np.meshgrid(xs, ys)
        return HeightField(self.height(X, Y), resolution, origin)


# ------------------------------------------------------------------------------ rotations


def hat(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = float(np.linalg.norm(w))
    K = hat(w)
    if th < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + math.sin(th) / th * K + (1.0 - math.cos(th)) / th**2 * (K @ K)


def orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _check_psd(name: str, cov) -> np.ndarray:
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (3, 3) or not np.allclose(cov, cov.T, atol=1e-12):
        raise InvalidParameterError(f"{name} must be a symmetric 3x3 matrix")
    if np.linalg.eigvalsh(cov).min() < -1e-12:
        raise InvalidParameterError(f"{name} must be positive semidefinite")
    return cov


# ------------------------------------------------------------------------------- sensor


@dataclass(frozen=True)
class SensorModel:
    """Spinning range sensor.

    Beams sweep ``azimuth_step`` around the sensor z axis for each angle in
    ``elevations``.  ``R_BS``/``p_BS`` place the sensor in the body frame.
    """

    max_range: float = 12.0
    azimuth_step: float = math.radians(2.0)
    elevations: tuple = tuple(np.radians(np.linspace(-30.0, 0.0, 12)))
    noise_cov: np.ndarray = field(default_factory=lambda: np.diag([0.01**2] * 3))
    R_BS: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_BS: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.8]))
    march_step: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "noise_cov", _check_psd("noise_cov", self.noise_cov))
        R = np.asarray(self.R_BS, dtype=float)
        if R.shape != (3, 3) or not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise InvalidParameterError("R_BS must be orthonormal")
        object.__setattr__(self, "R_BS", R)
        object.__setattr__(self, "p_BS", np.asarray(self.p_BS, dtype=float))
        if not self.max_range > 0:
            raise InvalidParameterError("max_range must be positive")

    def directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, shape (n, 3)."""
        az = np.arange(0.0, 2.0 * math.pi - 1e-12, self.azimuth_step)
        el = np.asarray(self.elevations, dtype=float)
        A, E = np.meshgrid(az, el)
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class NoisyPose:
    """Body pose estimate with its position and attitude covariances.

    ``rotation`` maps body to world.  ``cov_rotation`` lives in the body-frame tangent
    space (right perturbation ``R Exp(xi)``).
    """

    position: np.ndarray
    rotation: np.ndarray
    cov_position: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cov_rotation: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "cov_position", np.asarray(self.cov_position, dtype=float))
        object.__setattr__(self, "cov_rotation", np.asarray(self.cov_rotation, dtype=float))


@dataclass
class Scan:
    """Sensor-frame points of one sweep.  ``below_terrain`` flags an invalid sensor pose."""

    points: np.ndarray
    below_terrain: bool = False


@jit
def _bilinear1(heights, res, ox, oy, x, y):
    ny, nx = heights.shape
    fx = min(max((x - ox) / res, 0.0), nx - 1.0)
    fy = min(max((y - oy) / res, 0.0), ny - 1.0)
    i = min(int(math.floor(fx)), nx - 2)
    j = min(int(math.floor(fy)), ny - 2)
    tx = fx - i
    ty = fy - j
    return ((1.0 - ty) * ((1.0 - tx) * heights[j, i] + tx * heights[j, i + 1])
            + ty * ((1.0 - tx) * heights[j + 1, i] + tx * heights[j + 1, i + 1]))


@jit
def _march_heightfield(heights, res, ox, oy, bounds, origin, dirs, max_range, step):
    # same stepping and bisection as the generic march, one beam at a time
    n = dirs.shape[0]
    hit = np.full(n, np.nan)
    nsteps = int(math.ceil(max_range / step))
    for b in range(n):
        dx, dy, dz = dirs[b, 0], dirs[b, 1], dirs[b, 2]
        for k in range(1, nsteps + 1):
            t = min(k * step, max_range)
            px = origin[0] + t * dx
            py = origin[1] + t * dy
            if not (px >= bounds[0] and px <= bounds[1] and py >= bounds[2] and py <= bounds[3]):
                break
            pz = origin[2] + t * dz
            if pz - _bilinear1(heights, res, ox, oy, px, py) <= 0.0:
                lo = (k - 1) * step
                hi = t
                for _ in range(64):
                    mid = 0.5 * (lo + hi)
                    f = origin[2] + mid * dz - _bilinear1(heights, res, ox, oy, origin[0] + mid * dx,
                                                          origin[1] + mid * dy)
                    if f > 0.0:
                        lo = mid
                    else:
                        hi = mid
                hit[b] = 0.5 * (lo + hi)
                break
    return hit


def _march(terrain, origin, dirs, max_range, step):
    if isinstance(terrain, HeightField):
        return _march_heightfield(terrain.heights, terrain.resolution, terrain.origin[0], terrain.origin[1],
                                  np.array(terrain.bounds, dtype=float), np.asarray(origin, dtype=float),
                                  np.ascontiguousarray(dirs), float(max_range), float(step))
    return _march_vectorised(terrain, origin, dirs, max_range, step)


def _march_vectorised(terrain, origin, dirs, max_range, step):
    n = dirs.shape[0]
    hit = np.full(n, np.nan)
    active = np.arange(n)
    nsteps = int(math.ceil(max_range / step))
    bounded = isinstance(terrain, HeightField)
    for k in range(1, nsteps + 1):
        if active.size == 0:
            break
        t = min(k * step, max_range)
        d = dirs[active]
        px = origin[0] + t * d[:, 0]
        py = origin[1] + t * d[:, 1]
        pz = origin[2] + t * d[:, 2]
        if bounded:
            inside = terrain.contains(px, py)
        else:
            inside = np.ones(active.size, dtype=bool)
        below = inside & (pz - terrain.height(px, py) <= 0.0)
        if np.any(below):
            idx = active[below]
            lo = np.full(idx.size, (k - 1) * step)
            hi = np.full(idx.size, t)
            dd = dirs[idx]
            for _ in range(64):
                mid = 0.5 * (lo + hi)
                f = origin[2] + mid * dd[:, 2] - terrain.height(origin[0] + mid * dd[:, 0],
                                                                origin[1] + mid * dd[:, 1])
                above = f > 0.0
                lo = np.where(above, mid, lo)
                hi = np.where(above, hi, mid)
            hit[idx] = 0.5 * (lo + hi)
        keep = inside & ~below
        active = active[keep]
    return hit


def simulate_scan(terrain, pose: NoisyPose, model: SensorModel,
                  rng: np.random.Generator | None = None) -> Scan:
    """Cast every beam of ``model`` from ``pose`` and return first-hit points.

    Points are expressed in the sensor frame with zero-mean Gaussian noise of covariance
    ``model.noise_cov`` added when ``rng`` is given.  Beams without a hit inside
    ``max_range`` (or leaving a bounded heightfield) are dropped.
    """
    R_WS = pose.rotation @ model.R_BS
    origin = pose.position + pose.rotation @ model.p_BS
    if origin[2] <= float(terrain.height(origin[0], origin[1])):
        logger.warning("sensor origin below terrain; returning empty scan")
        return Scan(np.zeros((0, 3)), below_terrain=True)
    dirs_s = model.directions()
    dirs_w = dirs_s @ R_WS.T
    step = terrain.resolution / 2.0 if isinstance(terrain, HeightField) else model.march_step
    t = _march(terrain, origin, dirs_w, model.max_range, step)
    ok = np.isfinite(t)
    pts = dirs_s[ok] * t[ok, None]
    if rng is not None and np.any(model.noise_cov):
        pts = pts + rng.multivariate_normal(np.zeros(3), model.noise_cov, size=pts.shape[0])
    return Scan(pts)


def scan_to_world(scan_points: np.ndarray, pose: NoisyPose, model: SensorModel) -> np.ndarray:
    """Transform sensor-frame points to the world frame with the given pose."""
    q = scan_points @ model.R_BS.T + model.p_BS
    return q @ pose.rotation.T + pose.position


def sample_noisy_pose(true_pose: NoisyPose, cov_position, cov_rotation,
                      rng: np.random.Generator) -> NoisyPose:
    """Perturb a pose: Gaussian position noise and a right tangent-space attitude error."""
    cov_position = _check_psd("cov_position", cov_position)
    cov_rotation = _check_psd("cov_rotation", cov_rotation)
    p = np.array(true_pose.position, dtype=float)
    R = np.array(true_pose.rotation, dtype=float)
    if np.any(cov_position):
        p = p + rng.multivariate_normal(np.zeros(3), cov_position)
    if np.any(cov_rotation):
        xi = rng.multivariate_normal(np.zeros(3), cov_rotation)
        R = orthonormalize(R @ so3_exp(xi))
    return NoisyPose(p, R, cov_position, cov_rotation)
