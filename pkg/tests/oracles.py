"""Brute-force reference implementations used as test oracles."""

import math

import numpy as np


def charpoly_eig(A):
    """Eigenvalues from the cubic characteristic polynomial, eigenvectors from the SVD null space."""
    c2 = -np.trace(A)
    c1 = 0.5 * (np.trace(A) ** 2 - np.trace(A @ A))
    c0 = -np.linalg.det(A)
    lam = np.sort(np.roots([1.0, c2, c1, c0]).real)
    _, _, Vt = np.linalg.svd(A - lam[0] * np.eye(3))
    return lam, Vt[-1]


def random_psd(rng):
    Q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    w = rng.uniform(0.0, 2.0, 3) ** 2
    return Q @ np.diag(w) @ Q.T


def brute_sdf(obst, res, sentinel):
    r, c = np.indices(obst.shape)
    out = np.empty(obst.shape)
    orr, occ = np.nonzero(obst)
    frr, fcc = np.nonzero(~obst)
    for i in range(obst.shape[0]):
        for j in range(obst.shape[1]):
            if obst[i, j]:
                if len(frr) == 0:
                    out[i, j] = -sentinel
                    continue
                d = math.sqrt(((frr - i) ** 2 + (fcc - j) ** 2).min()) * res
                out[i, j] = -(d - res)
            else:
                if len(orr) == 0:
                    out[i, j] = sentinel
                    continue
                out[i, j] = math.sqrt(((orr - i) ** 2 + (occ - j) ** 2).min()) * res
    return out


def lipschitz_ok(sdf, res):
    dx = np.abs(np.diff(sdf, axis=1))
    dy = np.abs(np.diff(sdf, axis=0))
    dd1 = np.abs(sdf[1:, 1:] - sdf[:-1, :-1])
    dd2 = np.abs(sdf[1:, :-1] - sdf[:-1, 1:])
    tol = 1e-12
    return (dx.max() <= res + tol and dy.max() <= res + tol
            and max(dd1.max(), dd2.max()) <= math.sqrt(2) * res + tol)


def unwrapped_oracle(values, spec, x, y, th):
    """Plain trilinear interpolation on a grid with layer 0 duplicated after the last one."""
    ext = np.concatenate([values, values[:1]], axis=0)
    t = (th + math.pi) / spec.yaw_step % spec.n_yaw
    fx = (x - spec.origin[0]) / spec.resolution
    fy = (y - spec.origin[1]) / spec.resolution
    i, j, k = min(int(fx), spec.nx - 2), min(int(fy), spec.ny - 2), int(t)
    tx, ty, tt = fx - i, fy - j, t - k
    out = 0.0
    for dk, wk in ((0, 1 - tt), (1, tt)):
        for dj, wj in ((0, 1 - ty), (1, ty)):
            for di, wi in ((0, 1 - tx), (1, tx)):
                out += wk * wj * wi * ext[k + dk, j + dj, i + di]
    return out
