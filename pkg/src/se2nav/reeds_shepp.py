"""Shortest bounded-curvature paths with reversals.

Candidate words are generated from five base families (CSC, CCC, CCCC, CCSC,
CCSCC).  Each base solution is also tried under time-flip (reverse every
motion), reflection (swap left and right) and both, which together cover
all 48 words.  Lengths are in units of the turning radius internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._jit import jit

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

# segment letters per word type; 0 = left, 1 = right, 2 = straight, -1 = unused
_L, _R, _S, _N = 0, 1, 2, -1
WORD_TYPES = np.array([
    [_L, _R, _L, _N, _N],  # 0
    [_R, _L, _R, _N, _N],  # 1
    [_L, _R, _L, _R, _N],  # 2
    [_R, _L, _R, _L, _N],  # 3
    [_L, _R, _S, _L, _N],  # 4
    [_R, _L, _S, _R, _N],  # 5
    [_L, _S, _R, _L, _N],  # 6
    [_R, _S, _L, _R, _N],  # 7
    [_L, _R, _S, _R, _N],  # 8
    [_R, _L, _S, _L, _N],  # 9
    [_R, _S, _R, _L, _N],  # 10
    [_L, _S, _L, _R, _N],  # 11
    [_L, _S, _R, _N, _N],  # 12
    [_R, _S, _L, _N, _N],  # 13
    [_L, _S, _L, _N, _N],  # 14
    [_R, _S, _R, _N, _N],  # 15
    [_L, _R, _S, _L, _R],  # 16
    [_R, _L, _S, _R, _L],  # 17
], dtype=np.int64)
LETTERS = "LRS"


@jit
def _mod2pi(x):
    v = np.fmod(x, TWO_PI)
    if v < -math.pi:
        v += TWO_PI
    elif v > math.pi:
        v -= TWO_PI
    return v


@jit
def _polar(x, y):
    return math.sqrt(x * x + y * y), math.atan2(y, x)


@jit
def _tau_omega(u, v, xi, eta, phi):
    delta = _mod2pi(u - v)
    a = math.sin(u) - math.sin(delta)
    b = math.cos(u) - math.cos(delta) - 1.0
    t1 = math.atan2(eta * a - xi * b, xi * a + eta * b)
    t2 = 2.0 * (math.cos(delta) - math.cos(v) - math.cos(u)) + 3.0
    tau = _mod2pi(t1 + math.pi) if t2 < 0 else _mod2pi(t1)
    omega = _mod2pi(tau - u + v - phi)
    return tau, omega


# base solutions; each returns (ok, t, u, v)

@jit
def _lp_sp_lp(x, y, phi):
    u, t = _polar(x - math.sin(phi), y - 1.0 + math.cos(phi))
    if t >= -1e-12:
        v = _mod2pi(phi - t)
        if v >= -1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_sp_rp(x, y, phi):
    u1, t1 = _polar(x + math.sin(phi), y - 1.0 - math.cos(phi))
    u1 = u1 * u1
    if u1 >= 4.0:
        u = math.sqrt(u1 - 4.0)
        theta = math.atan2(2.0, u)
        t = _mod2pi(t1 + theta)
        v = _mod2pi(t - phi)
        if t >= -1e-12 and v >= -1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rm_l(x, y, phi):
    xi = x - math.sin(phi)
    eta = y - 1.0 + math.cos(phi)
    u1, theta = _polar(xi, eta)
    if u1 <= 4.0:
        u = -2.0 * math.asin(0.25 * u1)
        t = _mod2pi(theta + 0.5 * u + math.pi)
        v = _mod2pi(phi - t + u)
        if t >= -1e-12 and u <= 1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rup_lum_rm(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho = 0.25 * (2.0 + math.sqrt(xi * xi + eta * eta))
    if rho <= 1.0:
        u = math.acos(rho)
        t, v = _tau_omega(u, -u, xi, eta, phi)
        if t >= -1e-12 and v <= 1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rum_lum_rp(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho = (20.0 - xi * xi - eta * eta) / 16.0
    if 0.0 <= rho <= 1.0:
        u = -math.acos(rho)
        if u >= -HALF_PI:
            t, v = _tau_omega(u, u, xi, eta, phi)
            if t >= -1e-12 and v >= -1e-12:
                return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rm_sm_lm(x, y, phi):
    xi = x - math.sin(phi)
    eta = y - 1.0 + math.cos(phi)
    rho, theta = _polar(xi, eta)
    if rho >= 2.0:
        r = math.sqrt(rho * rho - 4.0)
        u = 2.0 - r
        t = _mod2pi(theta + math.atan2(r, -2.0))
        v = _mod2pi(phi - HALF_PI - t)
        if t >= -1e-12 and u <= 1e-12 and v <= 1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rm_sm_rm(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho, theta = _polar(-eta, xi)
    if rho >= 2.0:
        t = theta
        u = 2.0 - rho
        v = _mod2pi(t + HALF_PI - phi)
        if t >= -1e-12 and u <= 1e-12 and v <= 1e-12:
            return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _lp_rm_s_lm_rp(x, y, phi):
    xi = x + math.sin(phi)
    eta = y - 1.0 - math.cos(phi)
    rho, theta = _polar(xi, eta)
    if rho >= 2.0:
        u = 4.0 - math.sqrt(rho * rho - 4.0)
        if u <= 1e-12:
            t = _mod2pi(math.atan2((4.0 - u) * xi - 2.0 * eta, -2.0 * xi + (u - 4.0) * eta))
            v = _mod2pi(t - phi)
            if t >= -1e-12 and v >= -1e-12:
                return True, t, u, v
    return False, 0.0, 0.0, 0.0


@jit
def _consider(best, word, ok, typ, a, b, c, d, e):
    if not ok:
        return
    length = abs(a) + abs(b) + abs(c) + abs(d) + abs(e)
    if length < best[0] - 1e-12:
        best[0] = length
        best[1] = typ
        word[0] = a
        word[1] = b
        word[2] = c
        word[3] = d
        word[4] = e


@jit
def solve_normalized(x, y, phi):
    """Shortest word for the goal (x, y, phi) given in the start frame, unit radius.

    Returns (word type, signed segment lengths (5,), total length).
    """
    best = np.array([np.inf, -1.0])
    w = np.zeros(5)
    hp = HALF_PI
    # CSC
    ok, t, u, v = _lp_sp_lp(x, y, phi)
    _consider(best, w, ok, 14, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_lp(-x, y, -phi)
    _consider(best, w, ok, 14, -t, -u, -v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_lp(x, -y, -phi)
    _consider(best, w, ok, 15, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_lp(-x, -y, phi)
    _consider(best, w, ok, 15, -t, -u, -v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_rp(x, y, phi)
    _consider(best, w, ok, 12, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_rp(-x, y, -phi)
    _consider(best, w, ok, 12, -t, -u, -v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_rp(x, -y, -phi)
    _consider(best, w, ok, 13, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_sp_rp(-x, -y, phi)
    _consider(best, w, ok, 13, -t, -u, -v, 0.0, 0.0)
    # CCC, forwards and backwards
    ok, t, u, v = _lp_rm_l(x, y, phi)
    _consider(best, w, ok, 0, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(-x, y, -phi)
    _consider(best, w, ok, 0, -t, -u, -v, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(x, -y, -phi)
    _consider(best, w, ok, 1, t, u, v, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(-x, -y, phi)
    _consider(best, w, ok, 1, -t, -u, -v, 0.0, 0.0)
    xb = x * math.cos(phi) + y * math.sin(phi)
    yb = x * math.sin(phi) - y * math.cos(phi)
    ok, t, u, v = _lp_rm_l(xb, yb, phi)
    _consider(best, w, ok, 0, v, u, t, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(-xb, yb, -phi)
    _consider(best, w, ok, 0, -v, -u, -t, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(xb, -yb, -phi)
    _consider(best, w, ok, 1, v, u, t, 0.0, 0.0)
    ok, t, u, v = _lp_rm_l(-xb, -yb, phi)
    _consider(best, w, ok, 1, -v, -u, -t, 0.0, 0.0)
    # CCCC
    ok, t, u, v = _lp_rup_lum_rm(x, y, phi)
    _consider(best, w, ok, 2, t, u, -u, v, 0.0)
    ok, t, u, v = _lp_rup_lum_rm(-x, y, -phi)
    _consider(best, w, ok, 2, -t, -u, u, -v, 0.0)
    ok, t, u, v = _lp_rup_lum_rm(x, -y, -phi)
    _consider(best, w, ok, 3, t, u, -u, v, 0.0)
    ok, t, u, v = _lp_rup_lum_rm(-x, -y, phi)
    _consider(best, w, ok, 3, -t, -u, u, -v, 0.0)
    ok, t, u, v = _lp_rum_lum_rp(x, y, phi)
    _consider(best, w, ok, 2, t, u, u, v, 0.0)
    ok, t, u, v = _lp_rum_lum_rp(-x, y, -phi)
    _consider(best, w, ok, 2, -t, -u, -u, -v, 0.0)
    ok, t, u, v = _lp_rum_lum_rp(x, -y, -phi)
    _consider(best, w, ok, 3, t, u, u, v, 0.0)
    ok, t, u, v = _lp_rum_lum_rp(-x, -y, phi)
    _consider(best, w, ok, 3, -t, -u, -u, -v, 0.0)
    # CCSC, forwards and backwards
    ok, t, u, v = _lp_rm_sm_lm(x, y, phi)
    _consider(best, w, ok, 4, t, -hp, u, v, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(-x, y, -phi)
    _consider(best, w, ok, 4, -t, hp, -u, -v, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(x, -y, -phi)
    _consider(best, w, ok, 5, t, -hp, u, v, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(-x, -y, phi)
    _consider(best, w, ok, 5, -t, hp, -u, -v, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(x, y, phi)
    _consider(best, w, ok, 8, t, -hp, u, v, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(-x, y, -phi)
    _consider(best, w, ok, 8, -t, hp, -u, -v, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(x, -y, -phi)
    _consider(best, w, ok, 9, t, -hp, u, v, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(-x, -y, phi)
    _consider(best, w, ok, 9, -t, hp, -u, -v, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(xb, yb, phi)
    _consider(best, w, ok, 6, v, u, -hp, t, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(-xb, yb, -phi)
    _consider(best, w, ok, 6, -v, -u, hp, -t, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(xb, -yb, -phi)
    _consider(best, w, ok, 7, v, u, -hp, t, 0.0)
    ok, t, u, v = _lp_rm_sm_lm(-xb, -yb, phi)
    _consider(best, w, ok, 7, -v, -u, hp, -t, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(xb, yb, phi)
    _consider(best, w, ok, 10, v, u, -hp, t, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(-xb, yb, -phi)
    _consider(best, w, ok, 10, -v, -u, hp, -t, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(xb, -yb, -phi)
    _consider(best, w, ok, 11, v, u, -hp, t, 0.0)
    ok, t, u, v = _lp_rm_sm_rm(-xb, -yb, phi)
    _consider(best, w, ok, 11, -v, -u, hp, -t, 0.0)
    # CCSCC
    ok, t, u, v = _lp_rm_s_lm_rp(x, y, phi)
    _consider(best, w, ok, 16, t, -hp, u, -hp, v)
    ok, t, u, v = _lp_rm_s_lm_rp(-x, y, -phi)
    _consider(best, w, ok, 16, -t, hp, -u, hp, -v)
    ok, t, u, v = _lp_rm_s_lm_rp(x, -y, -phi)
    _consider(best, w, ok, 17, t, -hp, u, -hp, v)
    ok, t, u, v = _lp_rm_s_lm_rp(-x, -y, phi)
    _consider(best, w, ok, 17, -t, hp, -u, hp, -v)
    return int(best[1]), w, best[0]


@jit
def _relative(x0, y0, th0, x1, y1, th1, radius):
    dx = x1 - x0
    dy = y1 - y0
    c = math.cos(th0)
    s = math.sin(th0)
    return (c * dx + s * dy) / radius, (-s * dx + c * dy) / radius, _mod2pi(th1 - th0)


@jit
def rs_distance(x0, y0, th0, x1, y1, th1, radius):
    x, y, phi = _relative(x0, y0, th0, x1, y1, th1, radius)
    _, _, length = solve_normalized(x, y, phi)
    return length * radius


@jit
def rs_distance_many(starts, x1, y1, th1, radius):
    out = np.empty(starts.shape[0])
    for i in range(starts.shape[0]):
        out[i] = rs_distance(starts[i, 0], starts[i, 1], starts[i, 2], x1, y1, th1, radius)
    return out


@dataclass(frozen=True)
class Segment:
    kind: str  # "L", "R" or "S"
    length: float  # metres, signed: negative means reverse gear

    @property
    def gear(self) -> int:
        return 1 if self.length >= 0 else -1


@dataclass(frozen=True)
class RSPath:
    start: tuple
    segments: tuple
    radius: float

    @property
    def length(self) -> float:
        return float(sum(abs(s.length) for s in self.segments))

    @property
    def word(self) -> str:
        return "".join(s.kind + ("+" if s.gear > 0 else "-") for s in self.segments)

    def end(self) -> tuple:
        x, y, th = self.start
        for seg in self.segments:
            x, y, th = advance((x, y, th), seg.kind, seg.length, self.radius)
        return x, y, th

    def sample(self, step: float):
        """Poses every ``step`` metres (plus segment ends) and the gear of each pose."""
        poses = [tuple(self.start)]
        gears = [self.segments[0].gear if self.segments else 1]
        pose = tuple(self.start)
        for seg in self.segments:
            n = max(1, int(math.ceil(abs(seg.length) / step)))
            for k in range(1, n + 1):
                poses.append(advance(pose, seg.kind, seg.length * k / n, self.radius))
                gears.append(seg.gear)
            pose = poses[-1]
        return np.array(poses), np.array(gears, dtype=np.int64)


def advance(pose, kind: str, length: float, radius: float):
    """Move along a single segment of signed length (metres)."""
    x, y, th = pose
    if kind == "S":
        return x + length * math.cos(th), y + length * math.sin(th), th
    turn = length / radius if kind == "L" else -length / radius
    th1 = th + turn
    if kind == "L":
        x1 = x + radius * (math.sin(th1) - math.sin(th))
        y1 = y - radius * (math.cos(th1) - math.cos(th))
    else:
        x1 = x - radius * (math.sin(th1) - math.sin(th))
        y1 = y + radius * (math.cos(th1) - math.cos(th))
    return x1, y1, th1


def reeds_shepp_shoot(start, goal, radius: float) -> RSPath:
    """Optimal word from ``start`` to ``goal`` (both (x, y, theta)) with turning radius ``radius``."""
    if radius <= 0:
        raise ValueError("turning radius must be positive")
    x, y, phi = _relative(float(start[0]), float(start[1]), float(start[2]),
                          float(goal[0]), float(goal[1]), float(goal[2]), float(radius))
    typ, w, _ = solve_normalized(x, y, phi)
    segs = []
    for k in range(5):
        letter = WORD_TYPES[typ, k]
        if letter < 0 or abs(w[k]) < 1e-12:
            continue
        segs.append(Segment(LETTERS[letter], float(w[k]) * radius))
    return RSPath(tuple(float(v) for v in start), tuple(segs), float(radius))


def reeds_shepp_distance(start, goal, radius: float) -> float:
    return float(rs_distance(float(start[0]), float(start[1]), float(start[2]),
                             float(goal[0]), float(goal[1]), float(goal[2]), float(radius)))
