"""Influence functions and sandwich variances for the 9 point estimators.

For a target functional the per-subject influence row is the estimating
function evaluated at the fit along the index that isolates the target:

* coefficients: ``A^{-1} int (Z_i - Zbar) dM_i``,
* baseline cumulative hazard at ``s``:
  ``int_0^s dM_i / ybar - D(s)' A^{-1} int (Z_i - Zbar) dM_i``,
* subject-specific cumulative hazard at ``(s, z)``: as above with ``D(s)``
  replaced by ``D(s) - z s``,

where ``dM_i = dN_i - Y_i {dLambda_hat + Z_i' theta_hat dt}``,
``ybar`` is the weighted at-risk mean and ``D(s) = int_0^s Zbar dt``.
Rows are signed so that ``sqrt(N) (estimate - truth)`` is asymptotically
the weighted empirical process of the rows.

Robust variance plug-ins (V is the variance of ``sqrt(N)(estimate - truth)``):

======== ==========================================================
unit     ``mean(psi psi')``
ipw      ``mean(R / pi^2 psi psi')``
cal      ``mean(R/pi psi psi') + mean(R/pi (1-pi)/pi (psi-Pi)(psi-Pi)')``
======== ==========================================================

with ``Pi_i = C M^{-1} Vtilde_i``, ``C = mean(R/pi psi Vtilde')`` and
``M = mean(Vtilde Vtilde')`` over the whole cohort. Model-based variances
swap the first term for the compensator form (``A^{-1} B A^{-1}`` for the
coefficients) and keep the same two-phase penalty.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset, WeightScheme
from .errors import DomainError, SingularAuxiliary
from .estimators import FitResult, _centered_c_moments
from .risk import StepFunction, stieltjes_integral

ROBUST = "robust"
MODEL = "model"


@dataclass(frozen=True)
class Target:
    """Which functional an influence row describes."""

    kind: str
    s: Optional[float] = None
    z: Optional[tuple] = None

    @classmethod
    def theta(cls):
        return cls("theta")

    @classmethod
    def lambda_at(cls, s):
        return cls("lambda", float(s))

    @classmethod
    def pred_at(cls, s, z):
        return cls("pred", float(s), tuple(float(v) for v in np.atleast_1d(z)))

    @property
    def label(self):
        if self.kind == "theta":
            return "theta"
        if self.kind == "lambda":
            return f"Lambda({self.s:g})"
        zs = ",".join(f"{v:g}" for v in self.z)
        return f"Lambda({self.s:g}|{zs})"


@dataclass(frozen=True, eq=False)
class InfluenceRows:
    """Influence rows for the subjects with positive weight.

    ``rows[j]`` belongs to dataset record ``index[j]``.
    """

    rows: np.ndarray
    index: np.ndarray
    target: Target
    scheme: WeightScheme

    def weighted_mean(self, dataset):
        w = self.scheme.weights(dataset)[self.index]
        return (w[:, None] * self.rows).sum(axis=0) / dataset.n


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    """Estimated variance of an estimator (``asymptotic / N``)."""

    asymptotic: np.ndarray
    n: int
    kind: str
    scheme: WeightScheme
    target: Target
    first_term: np.ndarray
    penalty: np.ndarray

    @property
    def matrix(self):
        return self.asymptotic / self.n

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.matrix), 0, None))


# --- influence rows -------------------------------------------------------

def _theta_raw(fit: FitResult):
    """Per-subject ``int (Z_i - Zbar) dM_hat_i`` (before the ``A^{-1}`` factor)."""
    tab, lam = fit.table, fit.lambda_
    idx = tab.idx
    z = tab.z
    c = z @ fit.theta
    dlam = lam.jumps + lam.slopes * tab.du
    big_l = tab.cumulate(dlam, idx)
    czl = tab.cumulate(tab.zbar * dlam[:, None], idx)
    czt = tab.cumulate(tab.zbar * tab.du[:, None], idx)
    zbar_at = tab.zbar[np.maximum(idx - 1, 0)]
    return (tab.delta[:, None] * (z - zbar_at)
            - (z * big_l[:, None] - czl)
            - c[:, None] * (z * tab.t[:, None] - czt))


def _check_s(fit, s):
    if not (0 <= s <= fit.tau):
        raise DomainError(f"s={s} outside [0, {fit.tau:g}]")


def _nelson_aalen_part(fit: FitResult, s):
    """Per-subject ``int_0^s dM_hat_i / ybar``."""
    tab, lam = fit.table, fit.lambda_
    c = tab.z @ fit.theta
    x = np.minimum(s, tab.t)
    f1 = tab.integral_to(x, lam.slopes / tab.m0, lam.jumps / tab.m0)
    f2 = tab.integral_to(x, 1.0 / tab.m0)
    ev = tab.delta * (tab.t <= s) / tab.m0[np.maximum(tab.idx - 1, 0)]
    return ev - f1 - c * f2


def d_of(fit: FitResult, s):
    """``D(s) = int_0^s Zbar(t) dt``."""
    tab = fit.table
    return tab.integral_to(np.asarray(s, dtype=float), tab.zbar)


def _index(fit):
    return np.flatnonzero(fit.table.active)


def influence_theta(dataset: Dataset, scheme: WeightScheme, fit: FitResult) -> InfluenceRows:
    rows = _theta_raw(fit) @ fit.a_inverse()
    return InfluenceRows(rows, _index(fit), Target.theta(), scheme)


def _drift_vector(fit, s, z):
    d = d_of(fit, s)
    if z is not None:
        d = d - np.asarray(z, dtype=float) * s
    return d


def influence_lambda(dataset: Dataset, scheme: WeightScheme, fit: FitResult, s) -> InfluenceRows:
    _check_s(fit, s)
    phi = _theta_raw(fit) @ fit.a_inverse()
    rows = _nelson_aalen_part(fit, s) - phi @ _drift_vector(fit, s, None)
    return InfluenceRows(rows[:, None], _index(fit), Target.lambda_at(s), scheme)


def influence_pred(dataset: Dataset, scheme: WeightScheme, fit: FitResult, s, z) -> InfluenceRows:
    _check_s(fit, s)
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != fit.p:
        raise DomainError(f"z has dimension {z.shape[0]}, model has p={fit.p}")
    phi = _theta_raw(fit) @ fit.a_inverse()
    rows = _nelson_aalen_part(fit, s) - phi @ _drift_vector(fit, s, z)
    return InfluenceRows(rows[:, None], _index(fit), Target.pred_at(s, z), scheme)


def influence(dataset, scheme, fit, target: Target) -> InfluenceRows:
    if target.kind == "theta":
        return influence_theta(dataset, scheme, fit)
    if target.kind == "lambda":
        return influence_lambda(dataset, scheme, fit, target.s)
    return influence_pred(dataset, scheme, fit, target.s, target.z)


# --- variance assembly ----------------------------------------------------

def _outer_mean(rows, weights, n):
    return np.einsum("i,ij,ik->jk", weights, rows, rows) / n


def _design(rows: InfluenceRows, dataset: Dataset):
    i = rows.index
    r = dataset.selected[i].astype(float)
    pi = dataset.sampling_prob[i]
    return r, pi


def projection_residuals(rows: InfluenceRows, dataset: Dataset, moments="design"):
    """``psi_i - Pi(psi_i | Vtilde_i)`` for the selected subjects.

    ``moments="design"`` uses ``C = mean(R/pi psi Vtilde')`` and the full-cohort
    ``M = mean(Vtilde Vtilde')``. ``moments="penalty"`` is the weighted
    least-squares fit with the penalty weights ``R/pi (1-pi)/pi``.
    """
    r, pi = _design(rows, dataset)
    vt = dataset.auxiliary[rows.index]
    n = dataset.n
    if moments == "design":
        c = np.einsum("i,ij,ik->jk", r / pi, rows.rows, vt) / n
        m = dataset.auxiliary.T @ dataset.auxiliary / n
    elif moments == "penalty":
        # weighted least squares; the fitted values are unique even when the
        # weighted moments are rank deficient (e.g. a column that only varies
        # where the penalty weight is zero)
        om = np.sqrt(r / pi * (1 - pi) / pi)
        if vt.shape[1] == 0:
            raise SingularAuxiliary("auxiliary second-moment matrix singular: no auxiliary variables")
        coef = np.linalg.lstsq(om[:, None] * vt, om[:, None] * rows.rows, rcond=None)[0]
        return rows.rows - vt @ coef
    else:
        raise ValueError(f"unknown moments {moments!r}")
    if m.shape[0] == 0:
        raise SingularAuxiliary("auxiliary second-moment matrix singular: no auxiliary variables")
    if np.linalg.matrix_rank(m) < m.shape[0]:
        raise SingularAuxiliary("auxiliary second-moment matrix singular")
    coef = np.linalg.solve(m, c.T)
    return rows.rows - vt @ coef


def penalty_terms(rows: InfluenceRows, dataset: Dataset, moments="design"):
    """Two-phase penalties ``(vps, calibrated)`` for the same rows."""
    r, pi = _design(rows, dataset)
    om = r / pi * (1 - pi) / pi
    vps = _outer_mean(rows.rows, om, dataset.n)
    cal = None
    if dataset.q:
        res = projection_residuals(rows, dataset, moments)
        cal = _outer_mean(res, om, dataset.n)
    return vps, cal


def _split(rows: InfluenceRows, dataset: Dataset):
    """First (complete-data) term and two-phase penalty of the robust variance."""
    kind = rows.scheme.kind
    n = dataset.n
    if kind == "unit":
        first = _outer_mean(rows.rows, np.ones(len(rows.index)), n)
        return first, np.zeros_like(first)
    r, pi = _design(rows, dataset)
    first = _outer_mean(rows.rows, r / pi, n)
    om = r / pi * (1 - pi) / pi
    if kind == "ipw":
        return first, _outer_mean(rows.rows, om, n)
    res = projection_residuals(rows, dataset, "design")
    return first, _outer_mean(res, om, n)


def _symmetrize(m):
    return 0.5 * (m + m.T)


def robust_variance(rows: InfluenceRows, dataset: Dataset, scheme: WeightScheme = None) -> VarianceEstimate:
    """Influence-function (sandwich) variance valid without the working model."""
    if scheme is not None and scheme != rows.scheme:
        raise ValueError("rows were computed under a different scheme")
    first, pen = _split(rows, dataset)
    if rows.scheme.kind == "ipw":
        # (1/N) sum R/pi^2 psi psi' in one pass; algebraically first + pen
        r, pi = _design(rows, dataset)
        total = _outer_mean(rows.rows, r / pi ** 2, dataset.n)
    else:
        total = first + pen
    return VarianceEstimate(_symmetrize(total), dataset.n, ROBUST, rows.scheme,
                            rows.target, first, pen)


def _model_first_term(fit: FitResult, target: Target):
    tab, lam = fit.table, fit.lambda_
    ainv = fit.a_inverse()
    b = fit.b_matrix
    if target.kind == "theta":
        return ainv @ b @ ainv
    s = target.s
    a = ainv @ _drift_vector(fit, s, None if target.kind == "lambda" else target.z)
    _, e, _ = _centered_c_moments(tab, tab.z @ fit.theta)
    inside, knot_in = tab.split_at(s)
    na = np.sum(knot_in * tab.dn / tab.m0 ** 2)
    cross = -2.0 * a @ np.sum((inside / tab.m0)[:, None] * e, axis=0)
    return np.array([[na + cross + a @ b @ a]])


def model_based_variance(dataset: Dataset, scheme: WeightScheme, fit: FitResult,
                         rows: InfluenceRows) -> VarianceEstimate:
    """Variance assuming the additive hazards model generated the data.

    The complete-data term is the predictable-variation form: the squared
    martingale residuals are replaced by the fitted compensator
    ``dLambda_hat + Z' theta_hat dt``. The two-phase penalty is the same as
    in :func:`robust_variance`.
    """
    first = _symmetrize(_model_first_term(fit, rows.target))
    _, pen = _split(rows, dataset)
    return VarianceEstimate(_symmetrize(first + pen), dataset.n, MODEL, scheme,
                            rows.target, first, pen)


def variances(dataset, scheme, fit, target, kinds=(ROBUST, MODEL)):
    """Influence rows plus the requested variance estimates for one target."""
    rows = influence(dataset, scheme, fit, target)
    out = {}
    if ROBUST in kinds:
        out[ROBUST] = robust_variance(rows, dataset)
    if MODEL in kinds:
        out[MODEL] = model_based_variance(dataset, scheme, fit, rows)
    return rows, out


# --- Frechet derivative ---------------------------------------------------

def frechet_apply(dataset: Dataset, fit: FitResult, direction, h) -> float:
    """Empirical derivative of the estimating function, applied to ``direction``.

    Parameters
    ----------
    direction : tuple (d_theta, d_lambda)
        ``d_lambda`` is a :class:`CumulativeHazard` (or None for zero).
    h : tuple (h1, h2)
        ``h2`` is a :class:`StepFunction` on ``[0, tau]`` (or None for zero).

    Returns the sum of the four blocks
    ``-h1' Pw int Y Z Z' dt dtheta - h1' Pw int Z Y d(dLambda)
    - Pw int h2 Y Z' dt dtheta - Pw int h2 Y d(dLambda)``.
    """
    d_theta, d_lambda = direction
    h1, h2 = h
    tab = fit.table
    w, z, t = tab.w, tab.z, tab.t
    d_theta = np.zeros(tab.p) if d_theta is None else np.asarray(d_theta, float)
    h1 = np.zeros(tab.p) if h1 is None else np.asarray(h1, float)
    total = 0.0
    zz = np.einsum("k,kij->ij", tab.du, tab.m2)
    total -= h1 @ zz @ d_theta
    if h2 is not None:
        total -= np.sum(w * h2.antiderivative(t) * (z @ d_theta))
    if d_lambda is not None:
        total -= h1 @ np.sum((w * d_lambda(t))[:, None] * z, axis=0)
        if h2 is not None:
            total -= np.sum(w * stieltjes_integral(h2, d_lambda, t))
    return float(total)


def theta_index(fit: FitResult, h1):
    """Index ``(-A^{-1} h1, (A^{-1} h1)' Zbar)`` that isolates ``h1' theta``."""
    tab = fit.table
    g = fit.a_inverse() @ np.asarray(h1, float)
    return -g, StepFunction(tab.knots, tab.zbar @ g, closed="left")


def lambda_index(fit: FitResult, s, z=None):
    """Index isolating ``Lambda(s)`` (or ``Lambda(s | z)`` when ``z`` is given)."""
    tab = fit.table
    g = fit.a_inverse() @ _drift_vector(fit, s, z)
    knots = np.union1d(tab.knots, [s])
    mid = 0.5 * (knots[:-1] + knots[1:])
    k = np.clip(np.searchsorted(tab.knots, mid, side="left") - 1, 0, tab.K - 1)
    vals = -(mid <= s).astype(float) / tab.m0[k] - tab.zbar[k] @ g
    return g, StepFunction(knots, vals, closed="left")
