"""Field providers: terrain normal, risk and signed distance at SE(2) samples.

A provider answers ``query(xs, ys, thetas)`` with

* ``values``  (n, 5): unnormalised normal (3), risk, sdf
* ``grads``   (n, 5, 3): derivatives w.r.t. (x, y, theta)
* ``oob``     (n,) bool: sample lies outside the provider's extent

and exposes ``bounds = (xmin, xmax, ymin, ymax)`` (infinite when unbounded).
"""

from __future__ import annotations

import math

import numpy as np

from ..terrain import AnalyticTerrain
from ..traversability import Se2RiskGrid, trilinear_many


class GridFieldProvider:
    """Trilinear interpolation of a risk grid's ``z_b``, ``risk`` and ``sdf`` layers."""

    smooth = False

    def __init__(self, grid: Se2RiskGrid):
        if grid.sdf is None:
            raise ValueError("risk grid needs an SDF layer")
        self.grid = grid
        self.data = np.ascontiguousarray(
            np.concatenate([grid.z_b, grid.risk[..., None], grid.sdf[..., None]], axis=-1))
        spec = grid.spec
        self.bounds = spec.bounds
        self._origin = (float(spec.origin[0]), float(spec.origin[1]), float(spec.resolution))
        self.origin = np.array(self._origin)

    def query(self, xs, ys, ths):
        x0, y0, res = self._origin
        vals, grads, oob = trilinear_many(self.data, x0, y0, res, xs, ys, ths, True)
        if oob.any():
            xmin, xmax, ymin, ymax = self.bounds
            outx = (xs < xmin) | (xs > xmax)
            outy = (ys < ymin) | (ys > ymax)
            grads[outx, :, 0] = 0.0
            grads[outy, :, 1] = 0.0
        return vals, grads, oob


class SmoothRiskField:
    """Sum of Gaussian bumps with a mild heading modulation; smooth everywhere."""

    def __init__(self, centers=(), amplitude: float = 0.3, width: float = 1.0,
                 base: float = 0.05, yaw_gain: float = 0.2):
        self.centers = np.asarray(centers, dtype=float).reshape(-1, 2)
        self.amplitude = float(amplitude)
        self.width = float(width)
        self.base = float(base)
        self.yaw_gain = float(yaw_gain)

    def __call__(self, xs, ys, ths):
        n = xs.shape[0]
        bump = np.zeros(n)
        gx = np.zeros(n)
        gy = np.zeros(n)
        w2 = self.width ** 2
        for cx, cy in self.centers:
            dx, dy = xs - cx, ys - cy
            e = self.amplitude * np.exp(-(dx * dx + dy * dy) / (2.0 * w2))
            bump += e
            gx -= e * dx / w2
            gy -= e * dy / w2
        mod = 1.0 + self.yaw_gain * np.cos(ths)
        val = self.base + bump * mod
        grad = np.stack([gx * mod, gy * mod, -bump * self.yaw_gain * np.sin(ths)], axis=-1)
        return val, grad


class AnalyticFieldProvider:
    """Closed-form normal from an analytic surface, smooth risk and circular obstacles.

    Used where exact derivatives matter (gradient checks); the signed distance
    is the distance to the nearest circle boundary.
    """

    smooth = True

    def __init__(self, terrain: AnalyticTerrain | None = None, risk: SmoothRiskField | None = None,
                 circles=(), bounds=(-math.inf, math.inf, -math.inf, math.inf), far: float = 10.0):
        self.terrain = terrain if terrain is not None else AnalyticTerrain.flat()
        self.risk = risk if risk is not None else SmoothRiskField()
        self.circles = np.asarray(circles, dtype=float).reshape(-1, 3)
        self.bounds = tuple(float(b) for b in bounds)
        self.far = float(far)

    def query(self, xs, ys, ths):
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        ths = np.asarray(ths, dtype=float)
        n = xs.shape[0]
        vals = np.zeros((n, 5))
        grads = np.zeros((n, 5, 3))
        g = np.atleast_2d(self.terrain.gradient(xs, ys))
        H = self.terrain.hessian(xs, ys).reshape(n, 2, 2)
        g = g.reshape(n, 2)
        vals[:, 0] = -g[:, 0]
        vals[:, 1] = -g[:, 1]
        vals[:, 2] = 1.0
        grads[:, 0, 0] = -H[:, 0, 0]
        grads[:, 0, 1] = -H[:, 0, 1]
        grads[:, 1, 0] = -H[:, 1, 0]
        grads[:, 1, 1] = -H[:, 1, 1]
        r, dr = self.risk(xs, ys, ths)
        vals[:, 3] = r
        grads[:, 3] = dr
        sdf = np.full(n, self.far)
        for cx, cy, rad in self.circles:
            dx, dy = xs - cx, ys - cy
            dist = np.hypot(dx, dy)
            d = dist - rad
            closer = d < sdf
            safe = np.maximum(dist, 1e-12)
            sdf = np.where(closer, d, sdf)
            grads[closer, 4, 0] = (dx / safe)[closer]
            grads[closer, 4, 1] = (dy / safe)[closer]
        vals[:, 4] = sdf
        xmin, xmax, ymin, ymax = self.bounds
        oob = (xs < xmin) | (xs > xmax) | (ys < ymin) | (ys > ymax)
        return vals, grads, oob
