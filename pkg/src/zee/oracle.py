"""Brute-force root finder for the estimating equations on a finite index grid.

This module shares no arithmetic with :mod:`zee.estimators`. The baseline
cumulative hazard is parameterised by a free jump at each distinct event
time and a free slope on each interval of the observed-time grid, and the
equations are the coefficient equations (``h1`` = unit vectors, ``h2 = 0``)
together with ``h2 = 1(t <= u_k)`` at every grid point and ``h2 = 1(t < s_j)``
at every event time. That square system is solved by Newton's method with a
central-difference Jacobian. In the calibrated scheme the multipliers are
solved jointly with the calibration equations.

Meant for desk-scale problems (a few dozen subjects).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, WeightScheme, validate
from .errors import NoConvergence, SingularJacobian
from .risk import CumulativeHazard, StepFunction, stieltjes_integral

DEFAULT_CAP = 200
COND_LIMIT = 1e13


@dataclass(frozen=True)
class IndexGrid:
    """Finite index set: coefficient directions plus indicator functions.

    ``knots`` are the distinct follow-up times ``min(T, tau)`` (and ``tau``);
    ``event_times`` the distinct event times in ``[0, tau]``.
    """

    p: int
    knots: np.ndarray
    event_times: np.ndarray

    @classmethod
    def from_dataset(cls, dataset: Dataset, weights):
        keep = weights > 0
        t = np.minimum(dataset.time[keep], dataset.tau)
        ev = (dataset.event[keep] == 1) & (dataset.time[keep] <= dataset.tau)
        knots = np.unique(np.append(t[t > 0], dataset.tau))
        return cls(dataset.p, knots, np.unique(t[ev]))

    @property
    def size(self):
        return self.p + len(self.knots) + len(self.event_times)

    def elements(self):
        """Yield ``(h1, h2)`` pairs, ``h2`` as a :class:`StepFunction`."""
        tau = float(self.knots[-1])
        for j in range(self.p):
            yield np.eye(self.p)[j], None
        for u in self.knots:
            yield np.zeros(self.p), _indicator(u, tau, closed="left")
        for s in self.event_times:
            yield np.zeros(self.p), _indicator(s, tau, closed="right")


def _indicator(s, tau, closed):
    """``1(t <= s)`` (closed="left") or ``1(t < s)`` (closed="right") on [0, tau]."""
    if s >= tau:
        if closed == "left":
            return StepFunction([0.0, tau], [1.0], closed="left")
        return StepFunction([0.0, tau], [1.0], closed="right")
    return StepFunction([0.0, s, tau], [1.0, 0.0], closed=closed)


def ee_residual(dataset: Dataset, scheme: WeightScheme, theta, lam: CumulativeHazard, h):
    """Weighted empirical mean of the estimating function at ``(theta, lam)``.

    ``h = (h1, h2)`` with ``h2`` a :class:`StepFunction` (or None). The
    function is ``h1' int Z dM + int h2 dM`` with
    ``dM = dN - Y dLambda - Y Z' theta dt`` over ``[0, tau]``.
    """
    validate(dataset, scheme)
    w = scheme.weights(dataset)
    keep = w > 0
    w = w[keep]
    z = dataset.covariates[keep]
    t = np.minimum(dataset.time[keep], dataset.tau)
    d = ((dataset.event[keep] == 1) & (dataset.time[keep] <= dataset.tau)).astype(float)
    theta = np.asarray(theta, dtype=float)
    h1, h2 = h
    c = z @ theta
    total = 0.0
    if h1 is not None and np.any(h1):
        total += np.sum(w * (z @ h1) * (d - lam(t) - c * t))
    if h2 is not None:
        total += np.sum(w * (d * h2(t) - stieltjes_integral(h2, lam, t)
                             - c * h2.antiderivative(t)))
    return float(total / dataset.n)


class _System:
    def __init__(self, dataset: Dataset, scheme: WeightScheme):
        validate(dataset, scheme)
        self.calibrated = scheme.kind == "calibrated"
        w = scheme.weights(dataset) if not self.calibrated else (
            dataset.selected / dataset.sampling_prob)
        keep = w > 0
        self.n = dataset.n
        self.base = w[keep]
        self.vt_all = dataset.auxiliary
        self.vt = dataset.auxiliary[keep]
        self.z = dataset.covariates[keep]
        self.t = np.minimum(dataset.time[keep], dataset.tau)
        self.d = ((dataset.event[keep] == 1) & (dataset.time[keep] <= dataset.tau)).astype(float)
        self.grid = IndexGrid.from_dataset(dataset, w)
        self.p = dataset.p
        self.q = dataset.q if self.calibrated else 0
        u = self.grid.knots
        self.lo = np.concatenate([[0.0], u[:-1]])
        self.hi = u
        self.ev = self.grid.event_times
        self.m = len(self.ev)
        self.k = len(u)
        # evaluation points: one row per equation family, one column per subject
        self.x_le = np.minimum(u[:, None], self.t[None, :])
        self.x_lt = np.minimum(self.ev[:, None], self.t[None, :])
        self.lt_cut = self.ev[:, None] <= self.t[None, :]

    @property
    def size(self):
        return self.p + self.m + self.k + self.q

    def unpack(self, x):
        p, m, k = self.p, self.m, self.k
        return x[:p], x[p:p + m], x[p + m:p + m + k], x[p + m + k:]

    def cumhaz(self, x_pts, jumps, slopes, strict=False):
        """Lambda(x) (or Lambda(x-) when strict) from jump and slope parameters."""
        x_pts = np.asarray(x_pts)
        hit = (self.ev <= x_pts[..., None]) if not strict else (self.ev < x_pts[..., None])
        seg = np.clip(x_pts[..., None] - self.lo, 0.0, self.hi - self.lo)
        return hit @ jumps + seg @ slopes

    def residual(self, x):
        theta, jumps, slopes, gamma = self.unpack(x)
        w = self.base * (np.exp(-(self.vt @ gamma)) if self.calibrated else 1.0)
        c = self.z @ theta
        n = self.n
        lam_t = self.cumhaz(self.t, jumps, slopes)
        r_theta = self.z.T @ (w * (self.d - lam_t - c * self.t)) / n
        dn_le = self.d[None, :] * (self.t[None, :] <= self.hi[:, None])
        r_le = (dn_le - self.cumhaz(self.x_le, jumps, slopes) - c[None, :] * self.x_le) @ w / n
        dn_lt = self.d[None, :] * (self.t[None, :] < self.ev[:, None])
        lam_lt = np.where(self.lt_cut,
                          self.cumhaz(self.x_lt, jumps, slopes, strict=True),
                          self.cumhaz(self.x_lt, jumps, slopes))
        r_lt = (dn_lt - lam_lt - c[None, :] * self.x_lt) @ w / n
        parts = [r_theta, r_le, r_lt]
        if self.calibrated:
            parts.append((w @ self.vt - self.vt_all.sum(axis=0)) / n)
        return np.concatenate(parts)

    def jacobian(self, x):
        jac = np.empty((self.size, self.size))
        for j in range(self.size):
            step = 1e-6 * (1.0 + abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += step
            xm[j] -= step
            jac[:, j] = (self.residual(xp) - self.residual(xm)) / (2 * step)
        return jac


@dataclass(frozen=True, eq=False)
class OracleRoot:
    theta: np.ndarray
    jumps: np.ndarray
    event_times: np.ndarray
    slopes: np.ndarray
    knots: np.ndarray
    gamma: np.ndarray
    max_residual: float
    iterations: int

    def cumulative_hazard(self):
        knots = np.concatenate([[0.0], self.knots])
        jumps = np.zeros(len(self.knots))
        jumps[np.searchsorted(self.knots, self.event_times)] = self.jumps
        return CumulativeHazard(knots, jumps, self.slopes)


def solve_ee(dataset: Dataset, scheme: WeightScheme, init=None, tol=1e-14,
             max_iter=50, cap=DEFAULT_CAP) -> OracleRoot:
    """Newton root of the gridded estimating equations.

    Parameters
    ----------
    init : tuple, optional
        ``(theta, jumps, slopes[, gamma])`` starting point; zeros by default.
    cap : int
        Largest system dimension accepted.
    """
    sys_ = _System(dataset, scheme)
    if sys_.size > cap:
        raise ValueError(f"oracle system has {sys_.size} unknowns, cap is {cap}")
    x = np.zeros(sys_.size)
    if init is not None:
        x = np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in init])
        if x.shape[0] != sys_.size:
            raise ValueError("init does not match the system dimension")
    r = sys_.residual(x)
    best = np.max(np.abs(r), initial=0.0)
    for it in range(max_iter + 1):
        if best <= tol:
            theta, jumps, slopes, gamma = sys_.unpack(x)
            return OracleRoot(theta, jumps, sys_.ev, slopes, sys_.grid.knots, gamma,
                              float(best), it)
        if it == max_iter:
            break
        jac = sys_.jacobian(x)
        if not np.isfinite(np.linalg.cond(jac)) or np.linalg.cond(jac) > COND_LIMIT:
            raise SingularJacobian("estimating-equation Jacobian is singular "
                                   "(no covariate variation among subjects at risk?)")
        x_new = x - np.linalg.solve(jac, r)
        r_new = sys_.residual(x_new)
        new = np.max(np.abs(r_new), initial=0.0)
        if new >= best and best <= 1e3 * tol:
            # rounding floor reached just above tol; accept
            tol = best
            continue
        x, r, best = x_new, r_new, new
    raise NoConvergence(f"oracle Newton did not converge in {max_iter} iterations "
                        f"(max residual {np.max(np.abs(r)):.3g})")


def compare(fit, root: OracleRoot):
    """Vector-relative discrepancies between a closed-form fit and an oracle root."""
    def rel(a, b):
        a, b = np.asarray(a, float), np.asarray(b, float)
        if a.size == 0:
            return 0.0
        return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))

    lam = fit.lambda_
    knots = lam.knots[1:]
    pos = np.searchsorted(knots, root.event_times)
    return {
        "theta": rel(fit.theta, root.theta),
        "jumps": rel(lam.jumps[pos], root.jumps),
        "slopes": rel(lam.slopes, root.slopes) if fit.p else 0.0,
        "grid": float(np.max(np.abs(knots - root.knots))) if knots.shape == root.knots.shape else np.inf,
    }


def check_fit(dataset: Dataset, scheme: WeightScheme, fit, cap=DEFAULT_CAP):
    """Certify a closed-form fit against the gridded equations.

    Returns the largest equation residual at the closed-form parameters and
    the largest relative difference from the independent Newton root.
    """
    sys_ = _System(dataset, scheme)
    lam = fit.lambda_
    pos = np.searchsorted(lam.knots[1:], sys_.ev)
    x = [fit.theta, lam.jumps[pos], lam.slopes]
    if sys_.calibrated:
        x.append(np.asarray(scheme.gamma))
    at_fit = float(np.max(np.abs(sys_.residual(np.concatenate(x)))))
    diff = compare(fit, solve_ee(dataset, scheme, cap=cap))
    return {"max_residual": at_fit,
            "max_relative_difference": max(diff["theta"], diff["jumps"], diff["slopes"])}
