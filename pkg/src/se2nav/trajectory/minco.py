"""Coefficient elimination: from waypoints and spans to quintic coefficients.

Each gear section with N pieces has 6N unknown coefficients per channel.  Row
layout of the square system (bandwidth 4 below and 2 above the diagonal):

* rows 0..2          value, first and second derivative at the section start
* rows 3+6k .. 8+6k  joint k: end value of piece k, start value of piece k+1,
                     then continuity of derivatives 1..4
* last three rows    value, first and second derivative at the section end

The same matrix with unit spans serves the timing polynomial s(u), whose
pieces are parameterized by normalized time u in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .._jit import jit

# nonzeros lie at most KL below and KU above the diagonal
KL = 4
KU = 2


class IllConditionedError(ValueError):
    """The elimination system is singular or numerically degenerate."""


@jit
def _fill_basis(M, row, col, t, d, sign):
    for j in range(d, 6):
        f = 1.0
        for r in range(d):
            f *= j - r
        M[row, col + j] = sign * f * t ** (j - d)


@jit
def assemble(spans):
    """Dense storage of the banded system for pieces with the given spans."""
    n = spans.shape[0]
    M = np.zeros((6 * n, 6 * n))
    for d in range(3):
        _fill_basis(M, d, 0, 0.0, d, 1.0)
    for k in range(n - 1):
        base = 3 + 6 * k
        _fill_basis(M, base, 6 * k, spans[k], 0, 1.0)
        _fill_basis(M, base + 1, 6 * (k + 1), 0.0, 0, 1.0)
        for d in range(1, 5):
            _fill_basis(M, base + 1 + d, 6 * k, spans[k], d, 1.0)
            _fill_basis(M, base + 1 + d, 6 * (k + 1), 0.0, d, -1.0)
    last = 6 * (n - 1)
    for d in range(3):
        _fill_basis(M, 6 * n - 3 + d, last, spans[n - 1], d, 1.0)
    return M


@jit
def band_lu(A, kl, ku):
    """In-place LU with partial pivoting restricted to the band.

    Returns (pivots, ok).  Row swaps are stored LAPACK style: at step k rows
    k and piv[k] were exchanged.  Whole rows are swapped, so the multipliers
    in L can leave the band while U keeps bandwidth kl + ku.
    """
    n = A.shape[0]
    piv = np.arange(n)
    scale = 0.0
    for i in range(n):
        for j in range(n):
            v = abs(A[i, j])
            if v > scale:
                scale = v
    tiny = 1e-13 * max(scale, 1.0)
    ok = True
    for k in range(n):
        last_row = min(n - 1, k + kl)
        p = k
        best = abs(A[k, k])
        for i in range(k + 1, last_row + 1):
            if abs(A[i, k]) > best:
                best = abs(A[i, k])
                p = i
        piv[k] = p
        if best <= tiny:
            ok = False
            continue
        if p != k:
            for j in range(n):
                tmp = A[k, j]
                A[k, j] = A[p, j]
                A[p, j] = tmp
        last_col = min(n - 1, k + kl + ku)
        inv = 1.0 / A[k, k]
        for i in range(k + 1, last_row + 1):
            f = A[i, k] * inv
            A[i, k] = f
            if f != 0.0:
                for j in range(k + 1, last_col + 1):
                    A[i, j] -= f * A[k, j]
    return piv, ok


@jit
def lu_solve(LU, piv, b):
    """Solve A x = b for one or more right-hand sides (b is (n, m))."""
    n = LU.shape[0]
    x = b.copy()
    m = x.shape[1]
    for k in range(n):
        p = piv[k]
        if p != k:
            for c in range(m):
                tmp = x[k, c]
                x[k, c] = x[p, c]
                x[p, c] = tmp
    for i in range(n):
        for j in range(i):
            f = LU[i, j]
            if f != 0.0:
                for c in range(m):
                    x[i, c] -= f * x[j, c]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, min(n, i + KL + KU + 1)):
            f = LU[i, j]
            if f != 0.0:
                for c in range(m):
                    x[i, c] -= f * x[j, c]
        inv = 1.0 / LU[i, i]
        for c in range(m):
            x[i, c] *= inv
    return x


@jit
def lu_solve_t(LU, piv, b):
    """Solve A^T x = b using the factors of A."""
    n = LU.shape[0]
    x = b.copy()
    m = x.shape[1]
    # U^T y = b
    for i in range(n):
        for j in range(max(0, i - KL - KU), i):
            f = LU[j, i]
            if f != 0.0:
                for c in range(m):
                    x[i, c] -= f * x[j, c]
        inv = 1.0 / LU[i, i]
        for c in range(m):
            x[i, c] *= inv
    # L^T z = y
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            f = LU[j, i]
            if f != 0.0:
                for c in range(m):
                    x[i, c] -= f * x[j, c]
    for k in range(n - 1, -1, -1):
        p = piv[k]
        if p != k:
            for c in range(m):
                tmp = x[k, c]
                x[k, c] = x[p, c]
                x[p, c] = tmp
    return x


def banded_solve(M: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve one elimination system; raises on singular spans."""
    A = np.array(M, dtype=float, copy=True)
    piv, ok = band_lu(A, KL, KU)
    if not ok:
        raise IllConditionedError("elimination system is singular")
    rhs = np.asarray(b, dtype=float)
    out = lu_solve(A, piv, rhs.reshape(rhs.shape[0], -1).copy())
    return out.reshape(rhs.shape)


def position_rhs(p0, t0, p1, t1, points) -> np.ndarray:
    """Right-hand side of the geometric system, one column per channel."""
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = points.shape[0] + 1
    b = np.zeros((6 * n, 2))
    b[0] = p0
    b[1] = t0
    for k in range(n - 1):
        b[3 + 6 * k] = points[k]
        b[4 + 6 * k] = points[k]
    b[6 * n - 3] = p1
    b[6 * n - 2] = t1
    return b


def timing_rhs(spans, piece_time, sdot_start=0.0, sdot_end=0.0) -> np.ndarray:
    spans = np.asarray(spans, dtype=float)
    n = spans.shape[0]
    b = np.zeros((6 * n, 1))
    b[1, 0] = piece_time * sdot_start
    for k in range(n - 1):
        b[3 + 6 * k, 0] = spans[k]
    b[6 * n - 3, 0] = spans[-1]
    b[6 * n - 2, 0] = piece_time * sdot_end
    return b


def section_coefficients(spans, points, p0, t0, p1, t1, piece_time,
                         sdot_start=0.0, sdot_end=0.0):
    """Coefficients of one gear section.

    Returns ``(cxy, cs)`` with shapes (N, 6, 2) and (N, 6).
    """
    spans = np.asarray(spans, dtype=float)
    if np.any(~np.isfinite(spans)) or np.any(spans <= 0):
        raise IllConditionedError("spans must be positive and finite")
    n = spans.shape[0]
    cxy = banded_solve(assemble(spans), position_rhs(p0, t0, p1, t1, points))
    cs = banded_solve(assemble(np.ones(n)),
                      timing_rhs(spans, piece_time, sdot_start, sdot_end))
    return cxy.reshape(n, 6, 2), cs.reshape(n, 6)
