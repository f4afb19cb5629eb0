"""Compiled evaluation kernels for the trajectory objective and constraints.

Coefficient arrays cover all pieces of all gear sections: ``cxy`` is
(n_pieces, 6, 2) over the local arc parameter, ``cs`` is (n_pieces, 6) over
normalised piece time u in [0, 1].  A piece lasts ``tp`` seconds.
"""

from __future__ import annotations

import math

import numpy as np

from .._jit import jit
from .polynomial import basis, poly_all

N_CONS = 9
CONSTRAINT_NAMES = ("delta", "v_x", "a_x", "a_y", "phi_x", "phi_y", "risk", "sdf", "tangent")

# parameter vector layout shared with problem.py
P_WHEELBASE, P_G, P_DELTA, P_V, P_AX, P_AY, P_PHIX, P_PHIY, P_RMAX, P_DMIN, P_DPLUS, P_RHO_R, P_OOB, P_DSCALE = range(14)

# sample column layout
C_X, C_Y, C_X1, C_Y1, C_X2, C_Y2, C_X3, C_Y3, C_S, C_SU, C_SUU, C_TH = range(12)


@jit
def sample_pieces(cxy, cs, eta, u_nodes):
    """Geometry at normalised times ``u_nodes`` inside every piece.

    Returns an (n_pieces * len(u_nodes), 12) array with the columns above.
    """
    n_p = cxy.shape[0]
    k = u_nodes.shape[0]
    out = np.empty((n_p * k, 12))
    for i in range(n_p):
        for p in range(k):
            r = i * k + p
            s, su, suu, _, _, _ = poly_all(cs[i], u_nodes[p])
            x0, x1, x2, x3, _, _ = poly_all(cxy[i, :, 0], s)
            y0, y1, y2, y3, _, _ = poly_all(cxy[i, :, 1], s)
            out[r, C_X] = x0
            out[r, C_Y] = y0
            out[r, C_X1] = x1
            out[r, C_Y1] = y1
            out[r, C_X2] = x2
            out[r, C_Y2] = y2
            out[r, C_X3] = x3
            out[r, C_Y3] = y3
            out[r, C_S] = s
            out[r, C_SU] = su
            out[r, C_SUU] = suu
            out[r, C_TH] = math.atan2(eta[i] * y1, eta[i] * x1)
    return out


@jit
def _flat_forward(x1, y1, x2, y2, su, suu, z0, z1, z2, th, eta, tp, prm):
    """Flat outputs at one sample; returns the intermediates the backward pass needs."""
    q = max(x1 * x1 + y1 * y1, 1e-12)
    sq = math.sqrt(q)
    cr = x1 * y2 - y1 * x2
    dt = x1 * x2 + y1 * y2
    ct = math.cos(th)
    st = math.sin(th)
    a = z0 * ct + z1 * st
    b = -z0 * st + z1 * ct
    c = max(z2, 1e-6)
    m = math.sqrt(max(1.0 - a * a, 1e-12))
    sd = su / tp
    sdd = suu / (tp * tp)
    L = prm[P_WHEELBASE]
    g = prm[P_G]
    v = eta * sd * sq / m
    kt = eta * L * cr * m / (q * sq * c)
    delta = math.atan(kt)
    num = sd * sd * dt + sdd * q
    ax = eta * num / (sq * m) - g * a * c / m
    ay = eta * cr * sd * sd * m / (sq * c) - g * b / m
    px = -a * c / m
    py = -b / m
    return q, sq, cr, dt, ct, st, a, b, c, m, sd, sdd, v, kt, delta, num, ax, ay, px, py


@jit
def constraint_values(samples, zvals, fvals, eta_s, tp, prm):
    """Natural-unit constraint values (n, 9) and the flat outputs (n, 8).

    ``zvals`` holds the normalised normal per sample, ``fvals`` risk and sdf.
    Output columns: delta, v_x, a_x, a_y, phi_x, phi_y, theta, q.
    """
    n = samples.shape[0]
    g = np.empty((n, N_CONS))
    outs = np.empty((n, 8))
    for r in range(n):
        sm = samples[r]
        (q, sq, cr, dt, ct, st, a, b, c, m, sd, sdd, v, kt, delta, num, ax, ay, px, py) = _flat_forward(
            sm[C_X1], sm[C_Y1], sm[C_X2], sm[C_Y2], sm[C_SU], sm[C_SUU],
            zvals[r, 0], zvals[r, 1], zvals[r, 2], sm[C_TH], eta_s[r], tp, prm)
        phx = math.asin(min(max(px, -1.0), 1.0))
        phy = math.asin(min(max(py, -1.0), 1.0))
        g[r, 0] = delta * delta - prm[P_DELTA] ** 2
        g[r, 1] = v * v - prm[P_V] ** 2
        g[r, 2] = ax * ax - prm[P_AX] ** 2
        g[r, 3] = ay * ay - prm[P_AY] ** 2
        g[r, 4] = phx * phx - prm[P_PHIX] ** 2
        g[r, 5] = phy * phy - prm[P_PHIY] ** 2
        g[r, 6] = fvals[r, 0] - prm[P_RMAX]
        g[r, 7] = prm[P_DMIN] - fvals[r, 1]
        g[r, 8] = prm[P_DPLUS] - (sm[C_X1] ** 2 + sm[C_Y1] ** 2)
        outs[r, 0] = delta
        outs[r, 1] = v
        outs[r, 2] = ax
        outs[r, 3] = ay
        outs[r, 4] = phx
        outs[r, 5] = phy
        outs[r, 6] = sm[C_TH]
        outs[r, 7] = sm[C_X1] ** 2 + sm[C_Y1] ** 2
    return g, outs


@jit
def constraint_scales(prm):
    sc = np.empty(N_CONS)
    sc[0] = 1.0 / prm[P_DELTA] ** 2
    sc[1] = 1.0 / prm[P_V] ** 2
    sc[2] = 1.0 / prm[P_AX] ** 2
    sc[3] = 1.0 / prm[P_AY] ** 2
    sc[4] = 1.0 / prm[P_PHIX] ** 2
    sc[5] = 1.0 / prm[P_PHIY] ** 2
    sc[6] = 1.0 / prm[P_RMAX]
    sc[7] = 1.0 / prm[P_DSCALE]
    sc[8] = 1.0 / prm[P_DPLUS]
    return sc


@jit
def sample_terms(samples, piece_of, k_per_piece, cxy, cs, eta_s, tp, fvals, fgrads, oob, bounds,
                 prm, lam, rho, use_alm):
    """Risk integral, boundary penalty and (optionally) PHR penalty at all samples.

    Returns ``(value, penalty, gcxy, gcs, dtp, g_scaled)``.  ``value`` is the part of
    the objective (risk + out-of-bounds), ``penalty`` the augmented-Lagrangian part.
    Gradients are w.r.t. the coefficient arrays and the piece duration.
    """
    n = samples.shape[0]
    gcxy = np.zeros(cxy.shape)
    gcs = np.zeros(cs.shape)
    dtp = 0.0
    value = 0.0
    penalty = 0.0
    g_scaled = np.zeros((n, N_CONS))
    sc = constraint_scales(prm)
    rho_r = prm[P_RHO_R]
    w_oob = prm[P_OOB]
    wk = 1.0 / k_per_piece
    xmin, xmax, ymin, ymax = bounds[0], bounds[1], bounds[2], bounds[3]
    bv = np.empty(6)
    gv = np.empty(N_CONS)
    w = np.empty(N_CONS)
    for r in range(n):
        sm = samples[r]
        i = piece_of[r]
        eta = eta_s[r]
        x1, y1, x2, y2, x3, y3 = sm[C_X1], sm[C_Y1], sm[C_X2], sm[C_Y2], sm[C_X3], sm[C_Y3]
        su, suu, th = sm[C_SU], sm[C_SUU], sm[C_TH]
        zt0, zt1, zt2 = fvals[r, 0], fvals[r, 1], fvals[r, 2]
        zn = math.sqrt(zt0 * zt0 + zt1 * zt1 + zt2 * zt2)
        z0, z1, z2 = zt0 / zn, zt1 / zn, zt2 / zn
        risk = fvals[r, 3]
        sdf = fvals[r, 4]

        gx = 0.0
        gy = 0.0
        gth = 0.0
        g_risk = 0.0
        g_sdf = 0.0
        gx1 = 0.0
        gy1 = 0.0
        gx2 = 0.0
        gy2 = 0.0
        gsu = 0.0
        gsuu = 0.0

        # risk integral
        value += rho_r * risk * risk * tp * wk
        g_risk += 2.0 * rho_r * risk * tp * wk
        dtp += rho_r * risk * risk * wk

        # boundary penalty
        if oob[r] or sm[C_X] < xmin or sm[C_X] > xmax or sm[C_Y] < ymin or sm[C_Y] > ymax:
            ex = 0.0
            if sm[C_X] < xmin:
                ex = sm[C_X] - xmin
            elif sm[C_X] > xmax:
                ex = sm[C_X] - xmax
            ey = 0.0
            if sm[C_Y] < ymin:
                ey = sm[C_Y] - ymin
            elif sm[C_Y] > ymax:
                ey = sm[C_Y] - ymax
            value += w_oob * (ex * ex + ey * ey)
            gx += 2.0 * w_oob * ex
            gy += 2.0 * w_oob * ey

        if use_alm:
            (q, sq, cr, dt, ct, st, a, b, c, m, sd, sdd, v, kt, delta, num, ax, ay, px, py) = _flat_forward(
                x1, y1, x2, y2, su, suu, z0, z1, z2, th, eta, tp, prm)
            pxc = min(max(px, -1.0 + 1e-12), 1.0 - 1e-12)
            pyc = min(max(py, -1.0 + 1e-12), 1.0 - 1e-12)
            phx = math.asin(pxc)
            phy = math.asin(pyc)
            gv[0] = delta * delta - prm[P_DELTA] ** 2
            gv[1] = v * v - prm[P_V] ** 2
            gv[2] = ax * ax - prm[P_AX] ** 2
            gv[3] = ay * ay - prm[P_AY] ** 2
            gv[4] = phx * phx - prm[P_PHIX] ** 2
            gv[5] = phy * phy - prm[P_PHIY] ** 2
            gv[6] = risk - prm[P_RMAX]
            gv[7] = prm[P_DMIN] - sdf
            gv[8] = prm[P_DPLUS] - (x1 * x1 + y1 * y1)
            for j in range(N_CONS):
                gsc = gv[j] * sc[j]
                g_scaled[r, j] = gsc
                lj = lam[r, j]
                t = lj + rho * gsc
                if t > 0.0:
                    penalty += (t * t - lj * lj) / (2.0 * rho)
                    w[j] = t * sc[j]
                else:
                    penalty -= lj * lj / (2.0 * rho)
                    w[j] = 0.0
            G_delta = w[0] * 2.0 * delta
            G_v = w[1] * 2.0 * v
            G_ax = w[2] * 2.0 * ax
            G_ay = w[3] * 2.0 * ay
            G_px = w[4] * 2.0 * phx / math.sqrt(1.0 - pxc * pxc)
            G_py = w[5] * 2.0 * phy / math.sqrt(1.0 - pyc * pyc)
            g_risk += w[6]
            g_sdf -= w[7]
            # tangent constraint acts on x1, y1 directly
            gx1 += -w[8] * 2.0 * x1
            gy1 += -w[8] * 2.0 * y1

            L = prm[P_WHEELBASE]
            grav = prm[P_G]
            G_sd = 0.0
            G_sdd = 0.0
            G_q = 0.0
            G_cr = 0.0
            G_dt = 0.0
            G_m = 0.0
            G_a = 0.0
            G_b = 0.0
            G_c = 0.0
            # v = eta sd sq / m
            G_sd += G_v * eta * sq / m
            G_q += G_v * eta * sd / (2.0 * sq * m)
            G_m += -G_v * v / m
            # delta = atan(kt), kt = eta L cr m / (q^1.5 c)
            G_kt = G_delta / (1.0 + kt * kt)
            G_cr += G_kt * eta * L * m / (q * sq * c)
            G_m += G_kt * eta * L * cr / (q * sq * c)
            G_q += G_kt * (-1.5 * kt / q)
            G_c += G_kt * (-kt / c)
            # a_x
            A1 = eta / (sq * m)
            G_sd += G_ax * A1 * 2.0 * sd * dt
            G_sdd += G_ax * A1 * q
            G_dt += G_ax * A1 * sd * sd
            G_q += G_ax * (A1 * sdd - 0.5 * eta * num / (q * sq * m))
            G_m += G_ax * (-eta * num / (sq * m * m) + grav * a * c / (m * m))
            G_a += G_ax * (-grav * c / m)
            G_c += G_ax * (-grav * a / m)
            # a_y
            B1 = eta * sd * sd * m / (sq * c)
            G_cr += G_ay * B1
            G_sd += G_ay * 2.0 * eta * cr * sd * m / (sq * c)
            G_m += G_ay * (eta * cr * sd * sd / (sq * c) + grav * b / (m * m))
            G_q += G_ay * (-0.5 * cr * B1 / q)
            G_c += G_ay * (-cr * B1 / c)
            G_b += G_ay * (-grav / m)
            # attitude
            G_a += G_px * (-c / m)
            G_c += G_px * (-a / m)
            G_m += G_px * (a * c / (m * m))
            G_b += G_py * (-1.0 / m)
            G_m += G_py * (b / (m * m))
            # m = sqrt(1 - a^2)
            G_a += G_m * (-a / m)
            # primitives
            gx1 += G_q * 2.0 * x1 + G_cr * y2 + G_dt * x2
            gy1 += G_q * 2.0 * y1 - G_cr * x2 + G_dt * y2
            gx2 += -G_cr * y1 + G_dt * x1
            gy2 += G_cr * x1 + G_dt * y1
            gsu += G_sd / tp
            gsuu += G_sdd / (tp * tp)
            dtp += -G_sd * sd / tp - 2.0 * G_sdd * sdd / tp
            # normal and heading
            gz0 = G_a * ct - G_b * st
            gz1 = G_a * st + G_b * ct
            gz2 = G_c if z2 > 1e-6 else 0.0
            gth += G_a * b - G_b * a
            dotz = gz0 * z0 + gz1 * z1 + gz2 * z2
            gzt0 = (gz0 - z0 * dotz) / zn
            gzt1 = (gz1 - z1 * dotz) / zn
            gzt2 = (gz2 - z2 * dotz) / zn
            for d in range(3):
                gzd = gzt0 * fgrads[r, 0, d] + gzt1 * fgrads[r, 1, d] + gzt2 * fgrads[r, 2, d]
                if d == 0:
                    gx += gzd
                elif d == 1:
                    gy += gzd
                else:
                    gth += gzd

        # fields depend on (x, y, theta)
        gx += g_risk * fgrads[r, 3, 0] + g_sdf * fgrads[r, 4, 0]
        gy += g_risk * fgrads[r, 3, 1] + g_sdf * fgrads[r, 4, 1]
        gth += g_risk * fgrads[r, 3, 2] + g_sdf * fgrads[r, 4, 2]
        # theta = atan2(eta y', eta x')
        qq = max(x1 * x1 + y1 * y1, 1e-12)
        gx1 += -gth * y1 / qq
        gy1 += gth * x1 / qq

        s = sm[C_S]
        # chain into the arc parameter and the geometric coefficients
        g_s = gx * x1 + gy * y1 + gx1 * x2 + gy1 * y2 + gx2 * x3 + gy2 * y3
        basis(s, 0, bv)
        for j in range(6):
            gcxy[i, j, 0] += gx * bv[j]
            gcxy[i, j, 1] += gy * bv[j]
        basis(s, 1, bv)
        for j in range(6):
            gcxy[i, j, 0] += gx1 * bv[j]
            gcxy[i, j, 1] += gy1 * bv[j]
        basis(s, 2, bv)
        for j in range(6):
            gcxy[i, j, 0] += gx2 * bv[j]
            gcxy[i, j, 1] += gy2 * bv[j]
        u = (r % k_per_piece) * wk
        basis(u, 0, bv)
        for j in range(6):
            gcs[i, j] += g_s * bv[j]
        basis(u, 1, bv)
        for j in range(6):
            gcs[i, j] += gsu * bv[j]
        basis(u, 2, bv)
        for j in range(6):
            gcs[i, j] += gsuu * bv[j]
    return value, penalty, gcxy, gcs, dtp, g_scaled


@jit
def jerk_terms(cxy, cs, tp, nodes, weights):
    """Integral of the squared time jerk over all pieces with exact quadrature.

    Along one piece the jerk is ``X_uuu / tp^3`` with
    ``X_uuu = x''' s_u^3 + 3 x'' s_u s_uu + x' s_uuu``, so the integral equals
    ``tp^-5 * int_0^1 |X_uuu|^2 du``.
    """
    n_p = cxy.shape[0]
    gcxy = np.zeros(cxy.shape)
    gcs = np.zeros(cs.shape)
    total = 0.0
    inv5 = tp ** -5
    bv = np.empty(6)
    for i in range(n_p):
        for gidx in range(nodes.shape[0]):
            u = nodes[gidx]
            w = weights[gidx]
            s, su, suu, suuu, _, _ = poly_all(cs[i], u)
            x0, x1, x2, x3, x4, _ = poly_all(cxy[i, :, 0], s)
            y0, y1, y2, y3, y4, _ = poly_all(cxy[i, :, 1], s)
            su2 = su * su
            su3 = su2 * su
            jx = x3 * su3 + 3.0 * x2 * su * suu + x1 * suuu
            jy = y3 * su3 + 3.0 * y2 * su * suu + y1 * suuu
            total += w * (jx * jx + jy * jy)
            hx = 2.0 * w * jx * inv5
            hy = 2.0 * w * jy * inv5
            # w.r.t. geometric coefficients
            basis(s, 1, bv)
            for j in range(6):
                gcxy[i, j, 0] += hx * suuu * bv[j]
                gcxy[i, j, 1] += hy * suuu * bv[j]
            basis(s, 2, bv)
            f2 = 3.0 * su * suu
            for j in range(6):
                gcxy[i, j, 0] += hx * f2 * bv[j]
                gcxy[i, j, 1] += hy * f2 * bv[j]
            basis(s, 3, bv)
            for j in range(6):
                gcxy[i, j, 0] += hx * su3 * bv[j]
                gcxy[i, j, 1] += hy * su3 * bv[j]
            # w.r.t. timing coefficients
            g_s = hx * (x4 * su3 + 3.0 * x3 * su * suu + x2 * suuu) + hy * (y4 * su3 + 3.0 * y3 * su * suu + y2 * suuu)
            g_su = hx * (3.0 * x3 * su2 + 3.0 * x2 * suu) + hy * (3.0 * y3 * su2 + 3.0 * y2 * suu)
            g_suu = hx * 3.0 * x2 * su + hy * 3.0 * y2 * su
            g_suuu = hx * x1 + hy * y1
            for d in range(4):
                basis(u, d, bv)
                gd = g_s if d == 0 else (g_su if d == 1 else (g_suu if d == 2 else g_suuu))
                for j in range(6):
                    gcs[i, j] += gd * bv[j]
    cost = total * inv5
    return cost, gcxy, gcs, -5.0 * cost / tp
