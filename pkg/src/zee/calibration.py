"""Calibrated two-phase weights by exponential tilting.

The weights ``w_i = R_i exp(-gamma' Vtilde_i) / pi_i`` minimise the total
Poisson deviance from the design weights ``1 / pi_i`` subject to the
phase-I totals being reproduced, ``sum_i Vtilde_i = sum_i R_i w_i Vtilde_i``.
``gamma`` is found by Newton's method on the convex dual

    g(gamma) = (1/N) [ sum_i (R_i/pi_i) exp(-gamma' Vtilde_i) + gamma' sum_i Vtilde_i ]

whose gradient is the mean constraint residual.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .data import Dataset, WeightScheme, validate
from .errors import NoConvergence, SingularSystem, UnboundedDual

ARMIJO = 1e-4
SHRINK = 0.5
# exp(-gamma'V) beyond this exponent is treated as divergence of the dual
MAX_EXPONENT = 700.0


@dataclass(frozen=True, eq=False)
class CalibrationSolution:
    gamma: np.ndarray
    weights: np.ndarray
    constraint_residual: np.ndarray
    deviance: float
    iterations: int
    converged: bool
    hessian_min_eigenvalues: list = field(default_factory=list, repr=False)

    @property
    def scheme(self):
        return WeightScheme.calibrated(self.gamma)

    @property
    def max_residual(self):
        return float(np.max(np.abs(self.constraint_residual))) if self.constraint_residual.size else 0.0


def poisson_deviance(w, base):
    """``G(w, base) = w log(w / base) - (w - base)``, with ``0 log 0 = 0``."""
    w = np.asarray(w, dtype=float)
    base = np.asarray(base, dtype=float)
    if np.any(w < 0) or np.any(base <= 0):
        raise ValueError("need w >= 0 and base > 0")
    safe = np.where(w > 0, w, 1.0)
    # logs taken separately: w / base can underflow for subnormal w
    out = np.where(w > 0, w * (np.log(safe) - np.log(base)), 0.0) - (w - base)
    return out if out.ndim else float(out)


def calibrated_weights(gamma, dataset: Dataset) -> np.ndarray:
    return WeightScheme.calibrated(gamma).weights(dataset)


def _dual(gamma, base, vt, total):
    expo = -(vt @ gamma)
    if np.max(expo, initial=-np.inf) > MAX_EXPONENT:
        return np.inf, None
    e = base * np.exp(expo)
    return e.sum() / len(base) + gamma @ total, e


def solve_gamma(dataset: Dataset, tol=1e-10, max_iter=50) -> CalibrationSolution:
    """Solve the calibration equations for the Lagrange multipliers.

    Raises
    ------
    SingularSystem
        The selected-subject second-moment matrix of ``Vtilde`` is singular.
    UnboundedDual
        The phase-I totals cannot be matched by positive tilted weights.
    NoConvergence
        ``max_iter`` Newton steps without meeting ``tol``.
    """
    validate(dataset, WeightScheme.ipw())
    vt = np.asarray(dataset.auxiliary, dtype=float)
    n, q = vt.shape
    if q == 0:
        raise SingularSystem("auxiliary second-moment matrix singular: no auxiliary variables")
    base = dataset.selected / dataset.sampling_prob
    total = vt.sum(axis=0) / n
    gamma = np.zeros(q)
    value, e = _dual(gamma, base, vt, total)
    eigs = []
    for it in range(max_iter + 1):
        resid = total - e @ vt / n
        hess = (vt * e[:, None]).T @ vt / n
        ev = np.linalg.eigvalsh(hess)
        eigs.append(float(ev[0]))
        if np.max(np.abs(resid)) <= tol:
            if it > 0:
                # one extra full step: quadratic convergence takes gamma to rounding level
                cand = gamma - np.linalg.solve(hess, resid)
                new_value, new_e = _dual(cand, base, vt, total)
                if new_e is not None:
                    new_resid = total - new_e @ vt / n
                    if np.max(np.abs(new_resid)) <= np.max(np.abs(resid)):
                        gamma, resid = cand, new_resid
            return _solution(dataset, gamma, resid, it, True, eigs)
        if it == max_iter:
            break
        if ev[0] <= ev[-1] * 1e-13 or ev[-1] <= 0:
            if it == 0:
                raise SingularSystem("auxiliary second-moment matrix singular among selected subjects")
            break
        step = -np.linalg.solve(hess, resid)
        slope = resid @ step
        t = 1.0
        while True:
            cand = gamma + t * step
            new_value, new_e = _dual(cand, base, vt, total)
            if new_value <= value + ARMIJO * t * slope:
                break
            # near the optimum the dual value is flat to rounding; fall back
            # on a decrease of the gradient itself
            if new_e is not None and (np.max(np.abs(total - new_e @ vt / n))
                                      < np.max(np.abs(resid))):
                break
            t *= SHRINK
            if t < 1e-12:
                break
        if t < 1e-12:
            break
        gamma, value, e = cand, new_value, new_e
    if not _totals_attainable(vt[base > 0], vt.sum(axis=0)):
        raise UnboundedDual(
            "calibration dual is unbounded: phase-I totals lie outside the "
            f"attainable weighted totals (max residual {np.max(np.abs(resid)):.3g})",
            residual=resid)
    raise NoConvergence(f"calibration did not converge in {max_iter} iterations "
                        f"(max residual {np.max(np.abs(resid)):.3g})")


def _totals_attainable(vt_selected, totals):
    """Whether strictly positive weights can reproduce ``totals`` exactly.

    Solves ``max s`` subject to ``vt' w = totals``, ``w >= s``, ``s <= 1``.
    """
    m = vt_selected.shape[0]
    scale = max(1.0, float(np.max(np.abs(totals))))
    c = np.zeros(m + 1)
    c[-1] = -1.0
    a_eq = np.hstack([vt_selected.T, np.zeros((vt_selected.shape[1], 1))]) / scale
    a_ub = np.hstack([-np.eye(m), np.ones((m, 1))])
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(m), A_eq=a_eq, b_eq=totals / scale,
                  bounds=[(0, None)] * m + [(None, 1.0)], method="highs")
    return bool(res.status == 0 and -res.fun > 1e-9)


def _solution(dataset, gamma, resid, iterations, converged, eigs):
    w = calibrated_weights(gamma, dataset)
    r = dataset.selected == 1
    dev = float(np.sum(poisson_deviance(w[r], 1.0 / dataset.sampling_prob[r])))
    return CalibrationSolution(gamma=gamma, weights=w, constraint_residual=resid,
                               deviance=dev, iterations=iterations,
                               converged=converged, hessian_min_eigenvalues=eigs)
