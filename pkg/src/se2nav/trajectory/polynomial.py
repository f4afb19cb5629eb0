"""Quintic pieces: basis derivatives, evaluation and Gauss-Legendre rules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .._jit import jit

# d-th derivative of t^j is FALLING[d, j] * t^(j - d)
FALLING = np.array([[1, 1, 1, 1, 1, 1],
                    [0, 1, 2, 3, 4, 5],
                    [0, 0, 2, 6, 12, 20],
                    [0, 0, 0, 6, 24, 60],
                    [0, 0, 0, 0, 24, 120],
                    [0, 0, 0, 0, 0, 120]], dtype=float)


@jit
def basis(t, d, out):
    """Write the d-th derivative of [1, t, ..., t^5] into ``out``."""
    for j in range(6):
        if j < d:
            out[j] = 0.0
        else:
            f = 1.0
            for r in range(d):
                f *= j - r
            out[j] = f * t ** (j - d)


@jit
def poly_all(c, t):
    """Value and derivatives 0..5 of one quintic ``c`` at ``t``."""
    c0, c1, c2, c3, c4, c5 = c[0], c[1], c[2], c[3], c[4], c[5]
    p0 = c0 + t * (c1 + t * (c2 + t * (c3 + t * (c4 + t * c5))))
    p1 = c1 + t * (2.0 * c2 + t * (3.0 * c3 + t * (4.0 * c4 + t * 5.0 * c5)))
    p2 = 2.0 * c2 + t * (6.0 * c3 + t * (12.0 * c4 + t * 20.0 * c5))
    p3 = 6.0 * c3 + t * (24.0 * c4 + t * 60.0 * c5)
    p4 = 24.0 * c4 + t * 120.0 * c5
    p5 = 120.0 * c5
    return p0, p1, p2, p3, p4, p5


def basis_np(t, d: int = 0) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    j = np.arange(6)
    powers = np.where(j >= d, np.power.outer(t, np.maximum(j - d, 0)), 0.0)
    return FALLING[d] * powers


def gauss_legendre01(n: int):
    """Nodes and weights of the n-point rule on [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass
class PiecewiseQuintic:
    """N quintic pieces, each on its own local parameter range ``[0, spans[i]]``.

    ``coeffs`` has shape (N, 6, n_channels).  The global parameter runs over
    ``[0, sum(spans)]``.
    """

    coeffs: np.ndarray
    spans: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim == 2:
            self.coeffs = self.coeffs[:, :, None]
        self.spans = np.asarray(self.spans, dtype=float)

    @property
    def n_pieces(self) -> int:
        return self.coeffs.shape[0]

    @property
    def breaks(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.spans)])

    @property
    def total(self) -> float:
        return float(self.spans.sum())

    def locate(self, s):
        s = np.asarray(s, dtype=float)
        br = self.breaks
        idx = np.clip(np.searchsorted(br, s, side="right") - 1, 0, self.n_pieces - 1)
        return idx, s - br[idx]

    def evaluate(self, s, d: int = 0) -> np.ndarray:
        """d-th derivative at global parameters ``s``; shape (..., n_channels)."""
        idx, loc = self.locate(s)
        B = basis_np(loc, d)
        return np.einsum("...j,...jc->...c", B, self.coeffs[idx])

    def evaluate_piece(self, i: int, local, d: int = 0) -> np.ndarray:
        return basis_np(local, d) @ self.coeffs[i]
