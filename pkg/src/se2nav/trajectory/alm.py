"""Augmented-Lagrangian solver and the solution object it returns."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import kernels as K
from .minco import IllConditionedError
from .polynomial import gauss_legendre01
from .problem import (DecisionVars, Evaluator, ForwardState, TrajectoryProblem, forward,
                      sections_from_forward)




class NonConvergenceError(RuntimeError):
    """Raised when the iteration caps are hit with violations above tolerance.

    ``solution`` holds the best iterate found.
    """

    def __init__(self, message, solution):
        super().__init__(message)
        self.solution = solution


@dataclass(frozen=True)
class AlmSettings:
    eps_cons: float = 1e-4
    eps_grad: float = 1e-5
    max_outer: int = 30
    max_inner: int = 300
    rho_init: float = 1.0
    rho_growth: float = 10.0
    rho_max: float = 1e6
    # penalty grows when the violation measure shrinks by less than this factor
    shrink: float = 0.25
    # inner solves also stop on relative decrease of the augmented Lagrangian;
    # None picks 1e-7 for interpolated (kinked) fields and 1e-13 for smooth ones
    ftol: float | None = None
    history_size: int = 30

    def inner_ftol(self, field) -> float:
        if self.ftol is not None:
            return self.ftol
        return 1e-13 if getattr(field, "smooth", False) else 1e-7


@dataclass
class AuditReport:
    """Worst violation per constraint, relative to its limit (<= 0 means satisfied)."""

    relative: dict
    natural: dict
    min_tangent: float
    samples: int

    def worst(self) -> float:
        return max(self.relative.values())

    def passes(self, tolerance: float = 0.01) -> bool:
        return self.worst() <= tolerance and self.min_tangent > 0.0


@dataclass
class TrajectorySolution:
    problem: TrajectoryProblem
    vars: DecisionVars
    cost: float
    jerk: float
    risk_cost: float
    violations: dict
    max_violation: float
    converged: bool
    outer_iterations: int
    inner_iterations: int
    history: list
    multipliers: np.ndarray
    rho: float
    wall_time: float
    grad_norm: float
    _fw: ForwardState | None = field(default=None, repr=False)

    @property
    def fw(self) -> ForwardState:
        if self._fw is None:
            self._fw = forward(self.vars, self.problem.start, self.problem.goal)
        return self._fw

    @property
    def T_f(self) -> float:
        return self.vars.T_f

    @property
    def gears(self) -> tuple:
        return self.vars.gears

    @property
    def n_switches(self) -> int:
        return self.vars.n_switches

    @property
    def sections(self):
        """Per gear section: (geometric curve, timing law) as piecewise quintics."""
        return sections_from_forward(self.fw)

    def length(self) -> float:
        """Geometric length: integral of the tangent norm over the arc parameter."""
        nodes, weights = gauss_legendre01(12)
        total = 0.0
        for geo, _ in self.sections:
            for i, span in enumerate(geo.spans):
                d = geo.evaluate_piece(i, nodes * span, 1)
                total += span * float(weights @ np.hypot(d[:, 0], d[:, 1]))
        return total

    def sample(self, t) -> dict:
        """States and flat outputs at times ``t`` (clipped to [0, T_f])."""
        fw = self.fw
        t = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), 0.0, self.T_f)
        n_p = fw.cxy.shape[0]
        idx = np.minimum((t / fw.tp).astype(np.int64), n_p - 1)
        u = t / fw.tp - idx
        out = {k: np.empty(t.shape[0]) for k in ("x", "y", "dx", "dy", "ddx", "ddy", "s", "sdot", "sddot")}
        for r in range(t.shape[0]):
            i = idx[r]
            s, su, suu = (np.polynomial.polynomial.polyval(u[r], np.polynomial.polynomial.polyder(fw.cs[i], d))
                          for d in range(3))
            vals = [np.polynomial.polynomial.polyval(s, np.polynomial.polynomial.polyder(fw.cxy[i, :, ch], d))
                    for d in range(3) for ch in range(2)]
            out["x"][r], out["y"][r], out["dx"][r], out["dy"][r], out["ddx"][r], out["ddy"][r] = vals
            out["s"][r] = s
            out["sdot"][r] = su / fw.tp
            out["sddot"][r] = suu / fw.tp ** 2
        eta = fw.eta_piece[idx]
        theta = np.arctan2(eta * out["dy"], eta * out["dx"])
        vals, _, _ = self.problem.field.query(out["x"], out["y"], theta)
        from ..flatness import flat_outputs_array

        fo = flat_outputs_array(out["dx"], out["dy"], out["ddx"], out["ddy"], out["sdot"], out["sddot"],
                                eta, vals[:, :3], self.problem.robot)
        out.update(fo)
        out.update(t=t, eta=eta, risk=vals[:, 3], sdf=vals[:, 4], piece=idx)
        return out

    def audit(self, factor: int = 10) -> AuditReport:
        return audit_constraints(self.problem, self.vars, factor)

    def report(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "inner_iterations": self.inner_iterations,
            "cost": self.cost,
            "jerk": self.jerk,
            "risk_cost": self.risk_cost,
            "T_f": self.T_f,
            "gears": list(self.gears),
            "max_violation": self.max_violation,
            "violations": dict(self.violations),
            "grad_norm": self.grad_norm,
            "wall_time_s": self.wall_time,
        }


def _violation_dict(g_nat: np.ndarray) -> dict:
    worst = np.max(g_nat, axis=0) if g_nat.shape[0] else np.zeros(K.N_CONS)
    return {name: float(max(v, 0.0)) for name, v in zip(K.CONSTRAINT_NAMES, worst)}


def audit_constraints(problem: TrajectoryProblem, vars: DecisionVars, factor: int = 10) -> AuditReport:
    """Re-sample the constraints ``factor`` times finer than the optimizer does."""
    fine = problem.without_margins().with_samples(problem.samples_per_piece * factor)
    ev = Evaluator(fine, vars)
    fw = forward(vars, problem.start, problem.goal)
    smp, vals, _, _ = ev.samples(fw)
    eta_s = fw.eta_piece[ev.piece_of]
    zn = vals[:, :3] / np.linalg.norm(vals[:, :3], axis=1, keepdims=True)
    g_nat, outs = K.constraint_values(smp, zn, np.ascontiguousarray(vals[:, 3:5]), eta_s, fw.tp, ev.prm)
    lim = problem.limits()
    rel = {}
    for j, name in enumerate(K.CONSTRAINT_NAMES[:6]):
        rel[name] = float(np.max(np.abs(outs[:, j])) / lim[j] - 1.0)
    rel["risk"] = float(np.max(vals[:, 3]) / problem.r_max - 1.0)
    rel["sdf"] = float((problem.d_min - np.min(vals[:, 4])) / lim[7])
    rel["tangent"] = float((problem.delta_plus - np.min(outs[:, 7])) / problem.delta_plus)
    return AuditReport(rel, _violation_dict(g_nat), float(np.min(outs[:, 7])), int(smp.shape[0]))


def coeffs_from_vars(vars: DecisionVars, problem: TrajectoryProblem):
    """Per gear section (x(s), y(s)) and s(u) piecewise quintics."""
    return sections_from_forward(forward(vars, problem.start, problem.goal))


def objective_and_grad(vars: DecisionVars, problem: TrajectoryProblem):
    """Objective value and gradient w.r.t. the packed variable vector."""
    ev = Evaluator(problem, vars)
    e = ev.evaluate(vars.to_vector())
    return e.objective, e.grad


def constraints_at_samples(vars: DecisionVars, problem: TrajectoryProblem) -> np.ndarray:
    """Natural-unit constraint values, shape (n_pieces * K, 9); feasible where <= 0.

    Values are measured against the true limits; the optimizer's safety margins are not applied.
    """
    ev = Evaluator(problem.without_margins(), vars)
    return ev.evaluate(vars.to_vector(), want_grad=False, want_constraints=True).g_natural


def phr_alm_solve(problem: TrajectoryProblem, init: DecisionVars, settings: AlmSettings = AlmSettings(),
                  multipliers: np.ndarray | None = None, rho: float | None = None) -> TrajectorySolution:
    """Minimise the objective subject to the sampled constraints.

    ``multipliers`` and ``rho`` warm-start the outer loop, e.g. from a previous
    :class:`TrajectorySolution` with the same layout.
    """
    t0 = time.perf_counter()
    ev = Evaluator(problem, init)
    n_s = init.n_pieces * problem.samples_per_piece
    lam = np.zeros((n_s, K.N_CONS)) if multipliers is None else np.array(multipliers, dtype=float)
    if lam.shape != (n_s, K.N_CONS):
        raise ValueError("multiplier shape does not match the variable layout")
    rho = settings.rho_init if rho is None else float(rho)
    x = init.to_vector()
    ftol = settings.inner_ftol(problem.field)

    def fun(z, lam_k, rho_k):
        try:
            e = ev.evaluate(z, lam=lam_k, rho=rho_k)
        except (IllConditionedError, ArithmeticError):
            return 1e20, np.zeros_like(z)
        val = e.objective + e.penalty
        if not math.isfinite(val) or not np.all(np.isfinite(e.grad)):
            return 1e20, np.zeros_like(z)
        return val, e.grad

    history = []
    best = None
    inner_total = 0
    prev_measure = math.inf
    converged = False
    outer = 0
    grad_norm = math.inf
    lam_used = lam.copy()
    for outer in range(1, settings.max_outer + 1):
        lam_used = lam.copy()
        if outer == 1 and multipliers is not None:
            # a warm start that already meets the termination test is returned unchanged
            e = ev.evaluate(x, lam=lam, rho=rho, want_constraints=True)
            grad_norm = float(np.max(np.abs(e.grad))) if e.grad.size else 0.0
            viol = float(max(np.max(e.g_natural), 0.0))
            if viol < settings.eps_cons and grad_norm < settings.eps_grad:
                history.append(viol)
                best = (viol, e.objective, x.copy(), lam_used, rho, e, grad_norm)
                converged = True
                break
        res = minimize(fun, x, args=(lam, rho), jac=True, method="L-BFGS-B",
                       options={"maxiter": settings.max_inner, "gtol": settings.eps_grad, "ftol": ftol,
                                "maxcor": settings.history_size})
        inner_total += int(res.nit)
        if np.all(np.isfinite(res.x)):
            x = res.x
        e = ev.evaluate(x, lam=lam, rho=rho, want_constraints=True)
        grad_norm = float(np.max(np.abs(e.grad))) if e.grad.size else 0.0
        viol = float(max(np.max(e.g_natural), 0.0))
        history.append(viol)
        cand = (viol, e.objective, x.copy(), lam_used, rho, e, grad_norm)
        if best is None or (viol, e.objective) < (best[0], best[1]):
            best = cand
        # on kinked trilinear fields the gradient need not vanish; accept the inner
        # solver's own convergence (small gradient or stalled relative decrease)
        inner_done = res.success or res.status == 2 or res.nit == 0
        if viol < settings.eps_cons and (grad_norm < settings.eps_grad or inner_done):
            converged = True
            best = cand
            break
        g_s = e.g_scaled
        measure = float(np.max(np.abs(np.maximum(g_s, -lam / rho))))
        lam = np.maximum(0.0, lam + rho * g_s)
        if measure > settings.shrink * prev_measure and viol >= settings.eps_cons:
            rho = min(rho * settings.rho_growth, settings.rho_max)
        prev_measure = measure

    viol, _, xb, lam_b, rho_b, e, gn = best
    vars = init.from_vector(xb)
    sol = TrajectorySolution(problem, vars, e.objective, e.jerk, e.risk_cost, _violation_dict(e.g_natural),
                             viol, converged, outer, inner_total, history, lam_b, rho_b,
                             time.perf_counter() - t0, gn, e.forward)
    if not converged and viol > 10.0 * settings.eps_cons:
        raise NonConvergenceError(f"constraint violation {viol:.3g} after {outer} outer iterations", sol)
    return sol
