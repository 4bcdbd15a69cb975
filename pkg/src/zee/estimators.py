"""Closed-form additive hazards estimators under any weighting scheme.

Under the additive hazards model ``lambda(t | Z) = lambda(t) + Z' theta`` the
estimating equations have explicit roots:

* ``theta_hat = A^{-1} b`` with
  ``A = Pw int_0^tau (Z - Zbar(t))^{(x)2} Y(t) dt`` and
  ``b = Pw int_0^tau (Z - Zbar(t)) dN(t)``,
* ``Lambda_hat(s) = int_0^s Pw dN / Pw Y - int_0^s Zbar(t)' theta_hat dt``,

where ``Pw`` is the scheme-weighted empirical mean. ``Lambda_hat`` is not
forced to be monotone; it can decrease where the covariate drift dominates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import Dataset, WeightScheme, validate
from .errors import DomainError, SingularA
from .risk import CumulativeHazard, RiskTable

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class FitResult:
    theta: np.ndarray
    lambda_: CumulativeHazard
    a_matrix: np.ndarray
    b_matrix: np.ndarray
    scheme: WeightScheme
    table: RiskTable = field(repr=False)

    @property
    def p(self):
        return self.theta.shape[0]

    @property
    def tau(self):
        return self.lambda_.tau

    def a_inverse(self):
        return _spd_inverse(self.a_matrix)

    def predict(self, z, s):
        return predict_cumhaz(self, z, s)


def _spd_inverse(a):
    if a.shape[0] == 0:
        return a.copy()
    try:
        cond = np.linalg.cond(a)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise np.linalg.LinAlgError
        factor = scipy.linalg.cho_factor(a)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise SingularA(
            "design matrix A is singular or not positive definite: covariates "
            "lack variation among subjects at risk") from None
    return scipy.linalg.cho_solve(factor, np.eye(a.shape[0]))


def risk_table(dataset: Dataset, scheme: WeightScheme) -> RiskTable:
    validate(dataset, scheme)
    return RiskTable(dataset, scheme.weights(dataset))


def _a_and_b(tab: RiskTable):
    a = np.einsum("k,kij->ij", tab.du, tab.centered_m2())
    a = 0.5 * (a + a.T)
    b = (tab.e1 - tab.dn[:, None] * tab.zbar).sum(axis=0)
    return a, b


def _theta_from(tab):
    a, b = _a_and_b(tab)
    theta = _spd_inverse(a) @ b if a.shape[0] else np.zeros(0)
    return theta, a


def _lambda_from(tab, theta):
    jumps = tab.dn / tab.m0
    slopes = -(tab.zbar @ theta)
    return CumulativeHazard(tab.knots, jumps, slopes)


def fit_theta(dataset: Dataset, scheme: WeightScheme):
    """Return ``(theta_hat, A_hat)``.

    Raises
    ------
    SingularA
        When ``A_hat`` has condition number above 1e12.
    """
    return _theta_from(risk_table(dataset, scheme))


def fit_lambda(dataset: Dataset, scheme: WeightScheme, theta) -> CumulativeHazard:
    """Baseline cumulative hazard estimate given a coefficient vector."""
    tab = risk_table(dataset, scheme)
    return _lambda_from(tab, np.asarray(theta, dtype=float))


def _b_from(tab, theta, lam):
    """``B_hat = Pw int (Z - Zbar)^{(x)2} Y {dLambda_hat + Z' theta dt}``."""
    v = tab.centered_m2()
    c = tab.z @ theta
    vc = _centered_c_moments(tab, c)[2]
    b = (np.einsum("k,kij->ij", lam.jumps, v)
         + np.einsum("k,kij->ij", tab.du * lam.slopes, v)
         + np.einsum("k,kij->ij", tab.du, vc))
    return 0.5 * (b + b.T)


def _centered_c_moments(tab, c):
    """At-risk moments weighted additionally by ``c_i``, centred at ``Zbar``.

    Returns ``(m0c, e, vc)`` with ``m0c = sum w Y c``,
    ``e = sum w Y c (Z - Zbar)`` and ``vc = sum w Y c (Z - Zbar)^{(x)2}``.
    """
    wc = tab.w * c
    m0c = tab.at_risk_sum(wc)
    m1c = tab.at_risk_sum(wc[:, None] * tab.z)
    m2c = tab.at_risk_sum(wc[:, None, None] * tab.z[:, :, None] * tab.z[:, None, :])
    zb = tab.zbar
    e = m1c - m0c[:, None] * zb
    vc = (m2c - m1c[:, :, None] * zb[:, None, :] - zb[:, :, None] * m1c[:, None, :]
          + m0c[:, None, None] * zb[:, :, None] * zb[:, None, :])
    return m0c, e, vc


def compute_B(dataset: Dataset, scheme: WeightScheme, fit: FitResult) -> np.ndarray:
    """Model-based meat matrix ``B_hat`` for ``fit`` (same dataset and scheme)."""
    tab = fit.table if fit.table is not None else risk_table(dataset, scheme)
    return _b_from(tab, fit.theta, fit.lambda_)


def fit(dataset: Dataset, scheme: WeightScheme) -> FitResult:
    """Fit coefficients, baseline cumulative hazard, ``A_hat`` and ``B_hat``."""
    tab = risk_table(dataset, scheme)
    theta, a = _theta_from(tab)
    lam = _lambda_from(tab, theta)
    b = _b_from(tab, theta, lam)
    return FitResult(theta=theta, lambda_=lam, a_matrix=a, b_matrix=b,
                     scheme=scheme, table=tab)


def predict_cumhaz(fit: FitResult, z, s):
    """``Lambda_hat(s | z) = Lambda_hat(s) + z' theta_hat * s``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != fit.p:
        raise DomainError(f"z has dimension {z.shape[0]}, model has p={fit.p}")
    if not (0 <= s <= fit.tau):
        raise DomainError(f"s={s} outside [0, {fit.tau:g}]")
    return float(fit.lambda_(s)) + float(z @ fit.theta) * s
