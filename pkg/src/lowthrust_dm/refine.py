"""Levenberg-Marquardt shooting on the terminal state constraint.

By default the six initial costates are adjusted with the shooting time,
final coast and mass costate held fixed, until the state at ``tau_s``
matches the target point selected during screening.  With
``free_times=True`` the shooting time and final coast join the unknowns:
the arrival point then slides along the final coast arc so that the end of
that coast stays fixed.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .config import NondimensionalProblem
from .cr3bp import MAX_STEPS, PropagationError, propagate_ballistic
from .indirect import DecisionVector

FD_STEP = 1e-7
LM_INIT = 1e-3
LM_UP = 10.0
LM_DOWN = 10.0
LM_MAX = 1e12
GN_BACKTRACK = (1.0, 0.5, 0.25, 0.125, 0.0625)


class ResidualError(RuntimeError):
    """The extremal could not be propagated to ``tau_s``."""


@dataclass(frozen=True)
class RefineReport:
    decision: DecisionVector
    residual_norm: float
    iterations: int
    converged: bool
    wall_time: float
    initial_residual_norm: float = math.nan
    message: str = ""


def _terminal(costates, decision, problem, tol):
    y0 = np.concatenate([problem.x0, [problem.m0], costates, [decision.lam_m0]])
    p = np.array([problem.mu, problem.c, problem.t_max, 0.0])
    status, t_last, y, *_ = K.propagate(K.KIND_AUGMENTED, y0, decision.tau_s, p, tol, tol,
                                        1e-6, problem.m_dry, False, MAX_STEPS)
    if status != K.OK:
        raise ResidualError(f"propagation stopped at t={t_last:.6g} (status {status})")
    return y[:6]


def residual(decision: DecisionVector, problem: NondimensionalProblem, target_point,
             tol=1e-12) -> np.ndarray:
    """``(r(tau_s) - r_f, v(tau_s) - v_f)`` against a fixed target state."""
    target = np.asarray(target_point, dtype=float).reshape(6)
    return _terminal(decision.costates, decision, problem, tol) - target


def _slide(target, dtau_f, mu, tol):
    """Arrival point whose final coast is longer by ``dtau_f`` than the original's."""
    if dtau_f == 0.0:
        return target
    return propagate_ballistic(target, mu, -dtau_f, tol=tol).final_state


def refine(decision: DecisionVector, problem: NondimensionalProblem, target_point, tol=1e-6,
           max_time=30.0, max_iters=50, integ_tol=1e-12, free_times=False,
           tau_s_bounds=(0.0, math.inf), tau_f_bounds=(0.0, math.inf)) -> RefineReport:
    """Drive the terminal residual below ``tol`` in the max-norm.

    Each iteration first tries the minimum-norm Gauss-Newton step with
    backtracking and falls back to Levenberg-Marquardt damping (start 1e-3,
    x10 on rejection, /10 on acceptance) when that fails to reduce the
    squared residual.  The returned decision is the best one seen, so its
    residual never exceeds the input's.  Failure to converge is reported,
    not raised.
    """
    start = time.perf_counter()
    target = np.asarray(target_point, dtype=float).reshape(6)
    n_var = 8 if free_times else 6

    def unpack(z):
        if not free_times:
            return decision.replace(lam_r0=z[:3], lam_v0=z[3:6])
        return decision.replace(lam_r0=z[:3], lam_v0=z[3:6], tau_s=z[6], tau_f=z[7])

    def res(z):
        if free_times and not (tau_s_bounds[0] < z[6] <= tau_s_bounds[1]
                               and tau_f_bounds[0] <= z[7] <= tau_f_bounds[1]):
            return None
        d = unpack(z)
        try:
            goal = _slide(target, d.tau_f - decision.tau_f, problem.mu, integ_tol) if free_times \
                else target
            return _terminal(d.costates, d, problem, integ_tol) - goal
        except (ResidualError, PropagationError):
            return None

    x = decision.costates
    if free_times:
        x = np.concatenate([x, [decision.tau_s, decision.tau_f]])
    r = res(x)
    if r is None or not np.all(np.isfinite(r)):
        raise ResidualError("residual is not finite at the initial guess")
    norm0 = float(np.max(np.abs(r)))
    best_x, best_norm = x.copy(), norm0
    lm = LM_INIT
    it = 0

    def report(converged, msg):
        return RefineReport(unpack(best_x), best_norm, it, converged,
                            time.perf_counter() - start, norm0, msg)

    if norm0 <= tol:
        return report(True, "already feasible")

    cost = float(r @ r)
    message = "iteration limit"
    while it < max_iters:
        if time.perf_counter() - start > max_time:
            message = "time limit"
            break
        J = np.empty((6, n_var))
        for k in range(n_var):
            xp = x.copy()
            xp[k] += FD_STEP
            rp = res(xp)
            if rp is None:
                xp[k] -= 2 * FD_STEP  # one-sided step back inside the bounds
                rp = res(xp)
                if rp is None:
                    break
                J[:, k] = (r - rp) / FD_STEP
            else:
                J[:, k] = (rp - r) / FD_STEP
        else:
            rp = r
        if rp is None or not np.all(np.isfinite(J)):
            message = "jacobian evaluation failed"
            break
        it += 1
        A = J.T @ J
        g = J.T @ r
        diag = np.diag(A)
        scale = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        improved = False
        # Gauss-Newton probe: minimum-norm step with backtracking
        gn = np.linalg.lstsq(J, -r, rcond=None)[0]
        for t in GN_BACKTRACK:
            x_try = x + t * gn
            r_try = res(x_try)
            if r_try is not None and np.all(np.isfinite(r_try)) and float(r_try @ r_try) < cost:
                x, r, cost = x_try, r_try, float(r_try @ r_try)
                improved = True
                break
        while not improved and lm <= LM_MAX:
            try:
                step = np.linalg.solve(A + lm * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                lm *= LM_UP
                continue
            x_try = x + step
            r_try = res(x_try)
            if r_try is not None and np.all(np.isfinite(r_try)) and float(r_try @ r_try) < cost:
                x, r, cost = x_try, r_try, float(r_try @ r_try)
                lm = max(lm / LM_DOWN, 1e-15)
                improved = True
                break
            lm *= LM_UP
            if time.perf_counter() - start > max_time:
                break
        if not improved:
            message = "damping exhausted"
            break
        norm = float(np.max(np.abs(r)))
        if norm < best_norm:
            best_x, best_norm = x.copy(), norm
        if best_norm <= tol:
            return report(True, "converged")
    return report(best_norm <= tol, message)
