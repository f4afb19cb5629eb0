"""Problem definition, decision variables and the objective/gradient driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ..flatness import RobotParams
from ..terrain import InvalidParameterError
from ..traversability import trilinear_many
from . import kernels as K
from .minco import IllConditionedError, KL, KU, assemble, band_lu, lu_solve, lu_solve_t
from .polynomial import PiecewiseQuintic, gauss_legendre01
from .._jit import jit

# exact for the degree-44 integrand of the squared jerk
JERK_NODES, JERK_WEIGHTS = gauss_legendre01(23)


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass(frozen=True)
class BoundaryState:
    """Planar pose plus the rate of the arc parameter (0 = at rest)."""

    x: float
    y: float
    theta: float
    speed: float = 0.0

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def heading(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta)])


@dataclass
class TrajectoryProblem:
    """Everything the optimizer needs besides the decision variables.

    ``field`` is a provider from :mod:`.fields`.  Defaults for the cost weights
    and safety thresholds are this package's choices.
    """

    field: object
    start: BoundaryState
    goal: BoundaryState
    robot: RobotParams = field(default_factory=RobotParams)
    rho_t: float = 1.0
    rho_r: float = 1.0
    r_max: float = 0.7
    d_min: float = 0.1
    delta_plus: float = 0.9
    samples_per_piece: int = 16
    boundary_weight: float = 1e3
    # sampled safety constraints are tightened so the path between samples stays clear
    sdf_margin: float = 0.03
    risk_margin: float = 0.0
    limit_margin: float = 0.02  # fraction of each kinematic and attitude limit

    def __post_init__(self):
        if self.rho_t < 0 or self.rho_r < 0:
            raise InvalidParameterError("cost weights must be non-negative")
        if self.r_max <= 0 or self.d_min < 0:
            raise InvalidParameterError("r_max must be positive and d_min non-negative")
        if not 0.0 < self.delta_plus <= 1.0:
            raise InvalidParameterError("delta_plus must lie in (0, 1]")
        if self.sdf_margin < 0 or not 0 <= self.risk_margin < self.r_max:
            raise InvalidParameterError("safety margins must be non-negative and below r_max")
        if not 0.0 <= self.limit_margin < 0.5:
            raise InvalidParameterError("limit_margin must lie in [0, 0.5)")
        if self.samples_per_piece < 4:
            raise InvalidParameterError("need at least 4 samples per piece")

    def with_samples(self, k: int) -> "TrajectoryProblem":
        return replace(self, samples_per_piece=int(k))

    def without_margins(self) -> "TrajectoryProblem":
        return replace(self, sdf_margin=0.0, risk_margin=0.0, limit_margin=0.0)

    def param_vector(self) -> np.ndarray:
        r = self.robot
        f = 1.0 - self.limit_margin
        return np.array([r.wheelbase, r.gravity, f * r.delta_max, f * r.v_max, f * r.a_lon_max,
                         f * r.a_lat_max, f * r.phi_x_max, f * r.phi_y_max, self.r_max - self.risk_margin,
                         self.d_min + self.sdf_margin, self.delta_plus,
                         self.rho_r, self.boundary_weight, max(self.d_min, 0.1)])

    def limits(self) -> np.ndarray:
        """Natural limit per constraint, used to express violations relative to the limit."""
        r = self.robot
        return np.array([r.delta_max, r.v_max, r.a_lon_max, r.a_lat_max, r.phi_x_max,
                         r.phi_y_max, self.r_max, max(self.d_min, 0.1), self.delta_plus])


@dataclass
class DecisionVars:
    """Interior waypoints and spans per gear section, switch states and log duration."""

    points: list
    spans: list
    switches: np.ndarray
    tau: float
    gears: tuple

    def __post_init__(self):
        self.points = [np.asarray(p, dtype=float).reshape(-1, 2) for p in self.points]
        self.spans = [np.asarray(s, dtype=float).reshape(-1) for s in self.spans]
        self.switches = np.asarray(self.switches, dtype=float).reshape(-1, 4)
        self.gears = tuple(1 if g >= 0 else -1 for g in self.gears)
        n_sec = len(self.gears)
        if len(self.points) != n_sec or len(self.spans) != n_sec or self.switches.shape[0] != n_sec - 1:
            raise InvalidParameterError("inconsistent number of gear sections")
        for p, s in zip(self.points, self.spans):
            if p.shape[0] != s.shape[0] - 1:
                raise InvalidParameterError("each section needs N spans and N-1 interior points")

    @property
    def T_f(self) -> float:
        return math.exp(self.tau)

    @property
    def pieces(self) -> tuple:
        return tuple(s.shape[0] for s in self.spans)

    @property
    def n_pieces(self) -> int:
        return int(sum(self.pieces))

    @property
    def n_switches(self) -> int:
        return len(self.gears) - 1

    def to_vector(self) -> np.ndarray:
        parts = [p.ravel() for p in self.points]
        parts += [softplus_inv(s) for s in self.spans]
        parts += [self.switches.ravel(), [self.tau]]
        return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])

    def from_vector(self, vec) -> "DecisionVars":
        vec = np.asarray(vec, dtype=float)
        pts, spans = [], []
        o = 0
        for n in self.pieces:
            pts.append(vec[o:o + 2 * (n - 1)].reshape(-1, 2))
            o += 2 * (n - 1)
        for n in self.pieces:
            spans.append(softplus(vec[o:o + n]))
            o += n
        sw = vec[o:o + 4 * self.n_switches].reshape(-1, 4)
        o += 4 * self.n_switches
        return DecisionVars(pts, spans, sw, float(vec[o]), self.gears)

    def copy(self) -> "DecisionVars":
        return self.from_vector(self.to_vector())


# ------------------------------------------------------------------------- forward map


def _unit(t):
    t = np.asarray(t, dtype=float)
    n = float(np.hypot(t[0], t[1]))
    if n < 1e-12:
        raise IllConditionedError("gear-switch tangent vanishes")
    return t / n, n


def section_boundaries(vars: DecisionVars, start: BoundaryState, goal: BoundaryState):
    """Per section: (p0, t0, p1, t1, sdot0, sdot1).

    Section tangents are unit vectors along the direction of increasing arc
    parameter; at a gear switch the outgoing section runs against the incoming one.
    """
    out = []
    n_sec = len(vars.gears)
    for w in range(n_sec):
        eta = vars.gears[w]
        if w == 0:
            p0, t0, sd0 = start.xy, eta * start.heading, abs(start.speed)
        else:
            sw = vars.switches[w - 1]
            p0, t0, sd0 = sw[:2], -_unit(sw[2:])[0], 0.0
        if w == n_sec - 1:
            p1, t1, sd1 = goal.xy, eta * goal.heading, abs(goal.speed)
        else:
            sw = vars.switches[w]
            p1, t1, sd1 = sw[:2], _unit(sw[2:])[0], 0.0
        out.append((p0, t0, p1, t1, sd0, sd1))
    return out


@dataclass
class ForwardState:
    vars: DecisionVars
    cxy: np.ndarray  # (n_pieces, 6, 2)
    cs: np.ndarray  # (n_pieces, 6)
    eta_piece: np.ndarray
    tp: float
    factors: list  # per section (LU_p, piv_p, LU_s, piv_s, sdot0, sdot1)
    offsets: np.ndarray


_TIMING_LU: dict = {}


def _timing_factors(n: int):
    if n not in _TIMING_LU:
        A = assemble(np.ones(n))
        piv, ok = band_lu(A, KL, KU)
        _TIMING_LU[n] = (A, piv)
    return _TIMING_LU[n]


@jit
def section_forward(spans, pts, p0, t0, p1, t1, sd0, sd1, tp, As, pivs):
    """Coefficients of one section plus the factorised geometric system."""
    n = spans.shape[0]
    A = assemble(spans)
    piv, ok = band_lu(A, KL, KU)
    b = np.zeros((6 * n, 2))
    bs = np.zeros((6 * n, 1))
    for ch in range(2):
        b[0, ch] = p0[ch]
        b[1, ch] = t0[ch]
        b[6 * n - 3, ch] = p1[ch]
        b[6 * n - 2, ch] = t1[ch]
        for k in range(n - 1):
            b[3 + 6 * k, ch] = pts[k, ch]
            b[4 + 6 * k, ch] = pts[k, ch]
    bs[1, 0] = tp * sd0
    for k in range(n - 1):
        bs[3 + 6 * k, 0] = spans[k]
    bs[6 * n - 3, 0] = spans[n - 1]
    bs[6 * n - 2, 0] = tp * sd1
    cxy = lu_solve(A, piv, b).reshape(n, 6, 2)
    cs = lu_solve(As, pivs, bs).reshape(n, 6)
    return cxy, cs, A, piv, ok


def forward(vars: DecisionVars, start: BoundaryState, goal: BoundaryState) -> ForwardState:
    tp = vars.T_f / vars.n_pieces
    bnd = section_boundaries(vars, start, goal)
    cxy_l, cs_l, eta_l, factors = [], [], [], []
    for w, (p0, t0, p1, t1, sd0, sd1) in enumerate(bnd):
        spans = vars.spans[w]
        if not np.all(np.isfinite(spans)) or np.any(spans <= 1e-9):
            raise IllConditionedError("spans must be positive")
        As, pivs = _timing_factors(spans.shape[0])
        cxy, cs, A, piv, ok = section_forward(spans, vars.points[w], np.asarray(p0, dtype=float),
                                              np.asarray(t0, dtype=float), np.asarray(p1, dtype=float),
                                              np.asarray(t1, dtype=float), float(sd0), float(sd1), tp, As, pivs)
        if not ok:
            raise IllConditionedError("geometric elimination system is singular")
        cxy_l.append(cxy)
        cs_l.append(cs)
        eta_l.append(np.full(spans.shape[0], float(vars.gears[w])))
        factors.append((A, piv, As, pivs, sd0, sd1))
    offsets = np.concatenate([[0], np.cumsum(vars.pieces)]).astype(np.int64)
    if len(cxy_l) == 1:
        return ForwardState(vars, cxy_l[0], cs_l[0], eta_l[0], tp, factors, offsets)
    return ForwardState(vars, np.concatenate(cxy_l), np.concatenate(cs_l), np.concatenate(eta_l),
                        tp, factors, offsets)


@jit
def section_adjoint(A, piv, As, pivs, gcxy, gcs, cxy, spans):
    """Pull coefficient gradients back to right-hand sides and spans.

    Returns (lam_p (6N, 2), lam_s (6N, 1), d_spans (N,)).
    """
    n = spans.shape[0]
    lam_p = lu_solve_t(A, piv, gcxy.reshape(6 * n, 2).copy())
    lam_s = lu_solve_t(As, pivs, gcs.reshape(6 * n, 1).copy())
    d_spans = np.zeros(n)
    for k in range(n):
        S = spans[k]
        for ch in range(2):
            c = cxy[k, :, ch]
            # derivatives 1..5 of piece k at its end
            p0, p1, p2, p3, p4, p5 = 0.0, 0.0, 0.0, 0.0, 0.0, 0.0
            p0 = c[0] + S * (c[1] + S * (c[2] + S * (c[3] + S * (c[4] + S * c[5]))))
            p1 = c[1] + S * (2.0 * c[2] + S * (3.0 * c[3] + S * (4.0 * c[4] + S * 5.0 * c[5])))
            p2 = 2.0 * c[2] + S * (6.0 * c[3] + S * (12.0 * c[4] + S * 20.0 * c[5]))
            p3 = 6.0 * c[3] + S * (24.0 * c[4] + S * 60.0 * c[5])
            p4 = 24.0 * c[4] + S * 120.0 * c[5]
            p5 = 120.0 * c[5]
            if k < n - 1:
                base = 3 + 6 * k
                d_spans[k] -= (lam_p[base, ch] * p1 + lam_p[base + 2, ch] * p2 + lam_p[base + 3, ch] * p3
                               + lam_p[base + 4, ch] * p4 + lam_p[base + 5, ch] * p5)
            else:
                r = 6 * n - 3
                d_spans[k] -= lam_p[r, ch] * p1 + lam_p[r + 1, ch] * p2 + lam_p[r + 2, ch] * p3
        if k < n - 1:
            d_spans[k] += lam_s[3 + 6 * k, 0]
        else:
            d_spans[k] += lam_s[6 * n - 3, 0]
    return lam_p, lam_s, d_spans


@jit
def _softplus1(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@jit
def _sigmoid1(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@jit
def fused_grid_evaluate(vec, pieces, gears, start, goal, timing_lu, timing_piv, timing_off, u_nodes,
                        piece_of, k_per_piece, data, origin, bounds, prm, lam, rho, use_alm, rho_t,
                        jerk_nodes, jerk_weights, want_grad):
    """Whole evaluation for a gridded field in one compiled call.

    Mirrors ``forward`` + ``Evaluator.samples`` + ``sample_terms`` + ``jerk_terms``
    + ``Evaluator._pullback``.  ``start``/``goal`` are ``(x, y, theta, speed)``.
    Returns ``(status, objective, penalty, grad, jerk, risk_value, any_oob, g_scaled)``
    where status 0 is success, 1 a degenerate span or tangent and 2 a singular system.
    """
    n_sec = pieces.shape[0]
    n_tot = 0
    for w in range(n_sec):
        n_tot += pieces[w]
    n_pts = 0
    for w in range(n_sec):
        n_pts += 2 * (pieces[w] - 1)
    o_sig = n_pts
    o_sw = o_sig + n_tot
    o_tau = o_sw + 4 * (n_sec - 1)
    grad = np.zeros(vec.shape[0])
    empty = np.zeros((0, K.N_CONS))
    tau = vec[o_tau]
    T_f = math.exp(tau)
    tp = T_f / n_tot
    cxy = np.zeros((n_tot, 6, 2))
    cs = np.zeros((n_tot, 6))
    eta_piece = np.zeros(n_tot)
    spans_all = np.zeros(n_tot)
    # factorised geometric systems, stored flat per section
    lu_size = 0
    for w in range(n_sec):
        lu_size += 36 * pieces[w] * pieces[w]
    lu_store = np.zeros(lu_size)
    piv_store = np.zeros(6 * n_tot, dtype=np.int64)
    bnd = np.zeros((n_sec, 8))  # p0, t0, p1, t1
    sdots = np.zeros((n_sec, 2))
    tnorm = np.ones(max(n_sec - 1, 1))
    for w in range(n_sec - 1):
        tx, ty = vec[o_sw + 4 * w + 2], vec[o_sw + 4 * w + 3]
        tnorm[w] = math.hypot(tx, ty)
        if tnorm[w] < 1e-12:
            return 1, 0.0, 0.0, grad, 0.0, 0.0, False, empty
    o_p = 0
    o_piece = 0
    o_lu = 0
    for w in range(n_sec):
        n = pieces[w]
        eta = gears[w]
        if w == 0:
            bnd[w, 0], bnd[w, 1] = start[0], start[1]
            bnd[w, 2], bnd[w, 3] = eta * math.cos(start[2]), eta * math.sin(start[2])
            sdots[w, 0] = abs(start[3])
        else:
            b = o_sw + 4 * (w - 1)
            bnd[w, 0], bnd[w, 1] = vec[b], vec[b + 1]
            bnd[w, 2], bnd[w, 3] = -vec[b + 2] / tnorm[w - 1], -vec[b + 3] / tnorm[w - 1]
        if w == n_sec - 1:
            bnd[w, 4], bnd[w, 5] = goal[0], goal[1]
            bnd[w, 6], bnd[w, 7] = eta * math.cos(goal[2]), eta * math.sin(goal[2])
            sdots[w, 1] = abs(goal[3])
        else:
            b = o_sw + 4 * w
            bnd[w, 4], bnd[w, 5] = vec[b], vec[b + 1]
            bnd[w, 6], bnd[w, 7] = vec[b + 2] / tnorm[w], vec[b + 3] / tnorm[w]
        spans = np.empty(n)
        for k in range(n):
            spans[k] = _softplus1(vec[o_sig + o_piece + k])
            if not spans[k] > 1e-9 or not math.isfinite(spans[k]):
                return 1, 0.0, 0.0, grad, 0.0, 0.0, False, empty
            spans_all[o_piece + k] = spans[k]
            eta_piece[o_piece + k] = eta
        pts = vec[o_p:o_p + 2 * (n - 1)].copy().reshape(n - 1, 2)
        ts = timing_off[w]
        As = timing_lu[ts:ts + 36 * n * n].reshape(6 * n, 6 * n)
        pivs = timing_piv[w, :6 * n].copy()
        c1, c2, A, piv, ok = section_forward(spans, pts, bnd[w, 0:2].copy(), bnd[w, 2:4].copy(),
                                             bnd[w, 4:6].copy(), bnd[w, 6:8].copy(), sdots[w, 0],
                                             sdots[w, 1], tp, As, pivs)
        if not ok:
            return 2, 0.0, 0.0, grad, 0.0, 0.0, False, empty
        cxy[o_piece:o_piece + n] = c1
        cs[o_piece:o_piece + n] = c2
        lu_store[o_lu:o_lu + 36 * n * n] = A.ravel()
        piv_store[6 * o_piece:6 * (o_piece + n)] = piv
        o_p += 2 * (n - 1)
        o_piece += n
        o_lu += 36 * n * n

    smp = K.sample_pieces(cxy, cs, eta_piece, u_nodes)
    n_s = smp.shape[0]
    xs = smp[:, K.C_X].copy()
    ys = smp[:, K.C_Y].copy()
    ths = smp[:, K.C_TH].copy()
    vals, fgrads, oob = trilinear_many(data, origin[0], origin[1], origin[2], xs, ys, ths, True)
    any_oob = False
    for r in range(n_s):
        if oob[r]:
            any_oob = True
            if xs[r] < bounds[0] or xs[r] > bounds[1]:
                fgrads[r, :, 0] = 0.0
            if ys[r] < bounds[2] or ys[r] > bounds[3]:
                fgrads[r, :, 1] = 0.0
    eta_s = np.empty(n_s)
    for r in range(n_s):
        eta_s[r] = eta_piece[piece_of[r]]
    rv, pen, gcxy, gcs, dtp, g_scaled = K.sample_terms(smp, piece_of, k_per_piece, cxy, cs, eta_s, tp,
                                                       vals, fgrads, oob, bounds, prm, lam, rho, use_alm)
    jerk, gcxy_j, gcs_j, dtp_j = K.jerk_terms(cxy, cs, tp, jerk_nodes, jerk_weights)
    objective = jerk + rho_t * T_f + rv
    if not want_grad:
        return 0, objective, pen, grad, jerk, rv, any_oob, g_scaled
    gcxy += gcxy_j
    gcs += gcs_j
    dtp += dtp_j

    g_p0 = np.zeros((n_sec, 2))
    g_t0 = np.zeros((n_sec, 2))
    g_p1 = np.zeros((n_sec, 2))
    g_t1 = np.zeros((n_sec, 2))
    o_p = 0
    o_piece = 0
    o_lu = 0
    for w in range(n_sec):
        n = pieces[w]
        A = lu_store[o_lu:o_lu + 36 * n * n].reshape(6 * n, 6 * n)
        piv = piv_store[6 * o_piece:6 * (o_piece + n)].copy()
        ts = timing_off[w]
        As = timing_lu[ts:ts + 36 * n * n].reshape(6 * n, 6 * n)
        pivs = timing_piv[w, :6 * n].copy()
        lam_p, lam_s, d_sp = section_adjoint(A, piv, As, pivs, gcxy[o_piece:o_piece + n].copy(),
                                             gcs[o_piece:o_piece + n].copy(), cxy[o_piece:o_piece + n],
                                             spans_all[o_piece:o_piece + n].copy())
        for k in range(n - 1):
            for ch in range(2):
                grad[o_p + 2 * k + ch] = lam_p[3 + 6 * k, ch] + lam_p[4 + 6 * k, ch]
        for k in range(n):
            grad[o_sig + o_piece + k] = d_sp[k] * _sigmoid1(vec[o_sig + o_piece + k])
        for ch in range(2):
            g_p0[w, ch] = lam_p[0, ch]
            g_t0[w, ch] = lam_p[1, ch]
            g_p1[w, ch] = lam_p[6 * n - 3, ch]
            g_t1[w, ch] = lam_p[6 * n - 2, ch]
        dtp += lam_s[1, 0] * sdots[w, 0] + lam_s[6 * n - 2, 0] * sdots[w, 1]
        o_p += 2 * (n - 1)
        o_piece += n
        o_lu += 36 * n * n
    for w in range(n_sec - 1):
        b = o_sw + 4 * w
        grad[b] = g_p1[w, 0] + g_p0[w + 1, 0]
        grad[b + 1] = g_p1[w, 1] + g_p0[w + 1, 1]
        hx, hy = bnd[w, 6], bnd[w, 7]
        gx = g_t1[w, 0] - g_t0[w + 1, 0]
        gy = g_t1[w, 1] - g_t0[w + 1, 1]
        proj = hx * gx + hy * gy
        grad[b + 2] = (gx - hx * proj) / tnorm[w]
        grad[b + 3] = (gy - hy * proj) / tnorm[w]
    grad[o_tau] = rho_t * T_f + dtp * tp
    return 0, objective, pen, grad, jerk, rv, any_oob, g_scaled


def sections_from_forward(fw: ForwardState):
    """Split the stacked coefficients into per-section (x(s), y(s), s(u)) polynomials."""
    out = []
    for w in range(len(fw.vars.gears)):
        a, b = fw.offsets[w], fw.offsets[w + 1]
        geo = PiecewiseQuintic(fw.cxy[a:b], fw.vars.spans[w])
        # s(u) lives on u in [0, 1] and restarts at every piece; rescale to seconds
        # and offset by the preceding spans so the timing law covers the whole section
        cs_t = fw.cs[a:b] * fw.tp ** -np.arange(6.0)
        cs_t[:, 0] += np.concatenate([[0.0], np.cumsum(fw.vars.spans[w])[:-1]])
        timing = PiecewiseQuintic(cs_t[:, :, None], np.full(b - a, fw.tp))
        out.append((geo, timing))
    return out


# ------------------------------------------------------------------------ evaluation


@dataclass
class Evaluation:
    objective: float
    penalty: float
    grad: np.ndarray | None
    g_natural: np.ndarray | None  # (n_samples, 9)
    g_scaled: np.ndarray | None
    jerk: float
    risk_cost: float
    oob: bool
    forward: ForwardState | None


class Evaluator:
    """Objective, augmented Lagrangian and gradients for a fixed problem and layout."""

    def __init__(self, problem: TrajectoryProblem, template: DecisionVars):
        self.problem = problem
        self.template = template
        self.prm = problem.param_vector()
        k = problem.samples_per_piece
        self.u_nodes = np.arange(k) / k
        self.piece_of = np.repeat(np.arange(template.n_pieces), k).astype(np.int64)
        self.bounds = np.array(problem.field.bounds, dtype=float)
        self.n_calls = 0
        # gridded fields take the single-call compiled path
        self._grid = getattr(problem.field, "data", None) is not None and hasattr(problem.field, "origin")
        if self._grid:
            pieces = template.pieces
            self._pieces = np.array(pieces, dtype=np.int64)
            self._gears = np.array(template.gears, dtype=float)
            st, gl = problem.start, problem.goal
            self._start = np.array([st.x, st.y, st.theta, st.speed], dtype=float)
            self._goal = np.array([gl.x, gl.y, gl.theta, gl.speed], dtype=float)
            self._timing_off = np.concatenate([[0], np.cumsum([36 * n * n for n in pieces])]).astype(np.int64)
            self._timing_lu = np.concatenate([_timing_factors(n)[0].ravel() for n in pieces])
            self._timing_piv = np.zeros((len(pieces), 6 * max(pieces)), dtype=np.int64)
            for w, n in enumerate(pieces):
                self._timing_piv[w, :6 * n] = _timing_factors(n)[1]

    def samples(self, fw: ForwardState):
        smp = K.sample_pieces(fw.cxy, fw.cs, fw.eta_piece, self.u_nodes)
        vals, grads, oob = self.problem.field.query(
            np.ascontiguousarray(smp[:, K.C_X]), np.ascontiguousarray(smp[:, K.C_Y]),
            np.ascontiguousarray(smp[:, K.C_TH]))
        return smp, vals, grads, oob

    def evaluate(self, vec, lam=None, rho: float = 0.0, want_grad: bool = True,
                 want_constraints: bool = False) -> Evaluation:
        self.n_calls += 1
        if self._grid and not want_constraints:
            return self._evaluate_grid(vec, lam, rho, want_grad)
        vars = self.template.from_vector(vec)
        fw = forward(vars, self.problem.start, self.problem.goal)
        smp, vals, grads, oob = self.samples(fw)
        eta_s = fw.eta_piece[self.piece_of]
        use_alm = lam is not None
        lam_arr = lam if use_alm else np.zeros((1, K.N_CONS))
        rv, pen, gcxy, gcs, dtp, g_scaled = K.sample_terms(
            smp, self.piece_of, self.problem.samples_per_piece, fw.cxy, fw.cs, eta_s, fw.tp, vals, grads,
            oob, self.bounds, self.prm, lam_arr, float(rho) if use_alm else 1.0, use_alm)
        jerk, gcxy_j, gcs_j, dtp_j = K.jerk_terms(fw.cxy, fw.cs, fw.tp, JERK_NODES, JERK_WEIGHTS)
        T_f = vars.T_f
        objective = jerk + self.problem.rho_t * T_f + rv
        g_nat = None
        if want_constraints:
            zn = vals[:, :3] / np.linalg.norm(vals[:, :3], axis=1, keepdims=True)
            g_nat, _ = K.constraint_values(smp, zn, np.ascontiguousarray(vals[:, 3:5]), eta_s, fw.tp, self.prm)
        grad = None
        if want_grad:
            grad = self._pullback(fw, gcxy + gcxy_j, gcs + gcs_j, dtp + dtp_j)
        risk_cost = rv
        return Evaluation(objective, pen, grad, g_nat, g_scaled if use_alm else None, jerk, risk_cost,
                          bool(oob.any()), fw)

    def _evaluate_grid(self, vec, lam, rho, want_grad) -> Evaluation:
        use_alm = lam is not None
        lam_arr = lam if use_alm else np.zeros((1, K.N_CONS))
        fld = self.problem.field
        status, obj, pen, grad, jerk, rv, oob, g_scaled = fused_grid_evaluate(
            np.asarray(vec, dtype=float), self._pieces, self._gears, self._start, self._goal,
            self._timing_lu, self._timing_piv, self._timing_off, self.u_nodes, self.piece_of,
            self.problem.samples_per_piece, fld.data, fld.origin, self.bounds, self.prm, lam_arr,
            float(rho) if use_alm else 1.0, use_alm, float(self.problem.rho_t), JERK_NODES, JERK_WEIGHTS,
            want_grad)
        if status == 1:
            raise IllConditionedError("spans must be positive and switch tangents non-zero")
        if status == 2:
            raise IllConditionedError("geometric elimination system is singular")
        return Evaluation(obj, pen, grad if want_grad else None, None, g_scaled if use_alm else None,
                          jerk, rv, bool(oob), None)

    def _pullback(self, fw: ForwardState, gcxy, gcs, dtp_total):
        vars = fw.vars
        n_sec = len(vars.gears)
        g_pts, g_sig = [], []
        g_p0, g_t0, g_p1, g_t1 = [], [], [], []
        for w in range(n_sec):
            a, b = fw.offsets[w], fw.offsets[w + 1]
            A, piv, As, pivs, sd0, sd1 = fw.factors[w]
            n = b - a
            lam_p, lam_s, d_sp = section_adjoint(A, piv, As, pivs, np.ascontiguousarray(gcxy[a:b]),
                                                 np.ascontiguousarray(gcs[a:b]), fw.cxy[a:b], vars.spans[w])
            g_pts.append((lam_p[3:6 * n - 3:6] + lam_p[4:6 * n - 3:6]).ravel())
            sig = softplus_inv(vars.spans[w])
            g_sig.append(d_sp * expit(sig))
            g_p0.append(lam_p[0])
            g_t0.append(lam_p[1])
            g_p1.append(lam_p[6 * n - 3])
            g_t1.append(lam_p[6 * n - 2])
            dtp_total += lam_s[1, 0] * sd0 + lam_s[6 * n - 2, 0] * sd1
        g_sw = np.zeros((n_sec - 1, 4))
        for w in range(n_sec - 1):
            g_sw[w, :2] = g_p1[w] + g_p0[w + 1]
            t_hat, t_norm = _unit(vars.switches[w, 2:])
            g_that = g_t1[w] - g_t0[w + 1]
            g_sw[w, 2:] = (g_that - t_hat * (t_hat @ g_that)) / t_norm
        T_f = vars.T_f
        g_tau = self.problem.rho_t * T_f + dtp_total * fw.tp
        return np.concatenate(g_pts + g_sig + [g_sw.ravel(), [g_tau]])
