"""Weighted counting-process numerics on [0, tau].

Everything here is exact: integrands are piecewise constant between the
distinct observed times, so integrals are sums of value times length.

Conventions
-----------
The grid is ``0 = u_0 < u_1 < ... < u_K = tau`` where ``u_1..u_K`` are the
distinct values of ``min(T_i, tau)`` among subjects with positive weight,
plus ``tau``. Interval ``k`` is ``(u_{k-1}, u_k]``; subject ``i`` is at risk
on it iff ``min(T_i, tau) >= u_k`` (closed at-risk indicator ``1[T >= t]``).
Events with ``T_i > tau`` are treated as censored at ``tau``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .data import Dataset, WeightScheme, validate
from .errors import DomainError, ZeroRiskSet


class StepFunction:
    """Piecewise-constant function on ``[0, tau]``.

    Parameters
    ----------
    knots : array_like, shape (K + 1,)
        Strictly increasing breakpoints, ``knots[0] == 0`` and
        ``knots[-1] == tau``.
    values : array_like, shape (K, ...)
        ``values[k]`` is the value on the k-th interval. Values may be
        scalars, vectors or matrices.
    closed : {"left", "right"}
        ``"right"`` means intervals ``[knots[k], knots[k+1])`` (right
        continuous); ``"left"`` means ``(knots[k], knots[k+1]]``, which is
        how at-risk aggregates behave.
    """

    def __init__(self, knots, values, closed="right"):
        knots = np.asarray(knots, dtype=float)
        values = np.asarray(values, dtype=float)
        if knots.ndim != 1 or knots.shape[0] < 2:
            raise ValueError("need at least two knots")
        if knots[0] != 0 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must start at 0 and be strictly increasing")
        if values.shape[0] != knots.shape[0] - 1:
            raise ValueError("need one value per interval")
        if closed not in ("left", "right"):
            raise ValueError("closed must be 'left' or 'right'")
        self.knots = knots
        self.values = values
        self.closed = closed
        knots.setflags(write=False)
        values.setflags(write=False)

    @property
    def tau(self):
        return float(self.knots[-1])

    @property
    def initial(self):
        return self.values[0]

    def _interval(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0) or np.any(t > self.tau):
            raise DomainError(f"evaluation point outside [0, {self.tau:g}]")
        if self.closed == "right":
            k = np.searchsorted(self.knots, t, side="right") - 1
        else:
            k = np.searchsorted(self.knots, t, side="left") - 1
        return np.clip(k, 0, self.values.shape[0] - 1)

    def __call__(self, t):
        return self.values[self._interval(t)]

    def integral(self, a, b):
        return integrate(self, a, b)

    def antiderivative(self, x):
        """``int_0^x f(t) dt`` evaluated at every point of ``x``."""
        x = np.asarray(x, dtype=float)
        if np.any(x < 0) or np.any(x > self.tau):
            raise DomainError(f"evaluation point outside [0, {self.tau:g}]")
        du = np.diff(self.knots).reshape((-1,) + (1,) * (self.values.ndim - 1))
        cum = np.concatenate([np.zeros((1,) + self.values.shape[1:]),
                              np.cumsum(self.values * du, axis=0)])
        k = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0,
                    self.values.shape[0] - 1)
        part = (x - self.knots[k]).reshape(x.shape + (1,) * (self.values.ndim - 1))
        return cum[k] + self.values[k] * part

    def __repr__(self):
        return f"StepFunction(K={self.values.shape[0]}, tau={self.tau:g}, closed={self.closed!r})"


def integrate(f: StepFunction, a, b):
    """Exact integral of a step function over ``[a, b]``."""
    if not (0 <= a <= b <= f.tau):
        raise DomainError(f"[{a}, {b}] is not a subinterval of [0, {f.tau:g}]")
    lo = np.clip(a, f.knots[:-1], f.knots[1:])
    hi = np.clip(b, f.knots[:-1], f.knots[1:])
    return np.tensordot(hi - lo, f.values, axes=(0, 0))


class CumulativeHazard:
    """Right-continuous function with jumps and piecewise-linear drift.

    ``F(s) = sum_{u_k <= s} jumps[k] + integral_0^s slope(t) dt`` where the
    slope is ``slopes[k]`` on ``(u_{k-1}, u_k)``. This is the shape of the
    cumulative-hazard estimate: a Nelson-Aalen-type jump part plus the
    covariate drift.
    """

    def __init__(self, knots, jumps, slopes):
        knots = np.asarray(knots, dtype=float)
        jumps = np.asarray(jumps, dtype=float)
        slopes = np.asarray(slopes, dtype=float)
        if knots[0] != 0 or np.any(np.diff(knots) <= 0):
            raise ValueError("knots must start at 0 and be strictly increasing")
        if jumps.shape != (knots.shape[0] - 1,) or slopes.shape != jumps.shape:
            raise ValueError("need one jump and one slope per interval")
        self.knots = knots
        self.jumps = jumps
        self.slopes = slopes
        du = np.diff(knots)
        self._cum = np.concatenate([[0.0], np.cumsum(jumps + slopes * du)])

    @property
    def tau(self):
        return float(self.knots[-1])

    @property
    def values(self):
        """Function values at the knots (right limits)."""
        return self._cum.copy()

    @property
    def jump_times(self):
        nz = self.jumps != 0
        return self.knots[1:][nz], self.jumps[nz]

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0) or np.any(s > self.tau):
            raise DomainError(f"evaluation point outside [0, {self.tau:g}]")
        # k: largest knot index with knots[k] <= s
        k = np.searchsorted(self.knots, s, side="right") - 1
        k = np.clip(k, 0, self.knots.shape[0] - 1)
        nxt = np.minimum(k, self.slopes.shape[0] - 1)
        drift = np.where(k < self.slopes.shape[0],
                         self.slopes[nxt] * (s - self.knots[k]), 0.0)
        return self._cum[k] + drift

    def __repr__(self):
        return f"CumulativeHazard(K={self.jumps.shape[0]}, tau={self.tau:g})"


def stieltjes_integral(h2, f: CumulativeHazard, x):
    """``int_0^{x_i} h2 dF`` for each ``x_i``; ``h2 = None`` means ``h2 = 1``."""
    x = np.asarray(x, dtype=float)
    if h2 is None:
        return f(x)
    knots = np.union1d(h2.knots, f.knots)
    lo, hi = knots[:-1], knots[1:]
    mid = 0.5 * (lo + hi)
    slope = f.slopes[np.clip(np.searchsorted(f.knots, mid, side="right") - 1, 0,
                             f.slopes.shape[0] - 1)]
    hv = h2(mid)
    jt, jv = f.jump_times
    out = np.zeros_like(x)
    for j in range(x.shape[0]):
        seg = np.clip(x[j], lo, hi) - lo
        out[j] = np.sum(hv * slope * seg)
        hit = jt <= x[j]
        if np.any(hit):
            out[j] += np.sum(h2(jt[hit]) * jv[hit])
    return out


class RiskTable:
    """Weighted at-risk moments on the observed-time grid.

    Built once per (dataset, weights); all closed forms are assembled from
    its arrays. ``w`` is divided by the full-cohort size N, so every moment
    is a weighted empirical mean.

    Attributes
    ----------
    knots : (K + 1,) grid, ``knots[0] = 0``.
    du : (K,) interval lengths.
    idx : (n_active,) grid index of ``min(T_i, tau)`` for each active subject.
    m0, m1, m2 : at-risk weighted mean of 1, Z and ZZ' on each interval.
    dn, e1 : weighted event mass and event-weighted Z at each knot.
    """

    def __init__(self, dataset: Dataset, weights: np.ndarray):
        active = weights > 0
        self.n_total = dataset.n
        self.tau = dataset.tau
        self.active = active
        t = np.minimum(dataset.time[active], dataset.tau)
        d = (dataset.event[active] == 1) & (dataset.time[active] <= dataset.tau)
        self.z = dataset.covariates[active]
        self.w = weights[active] / dataset.n
        self.delta = d.astype(float)
        grid = np.unique(np.concatenate([t[t > 0], [dataset.tau]]))
        self.knots = np.concatenate([[0.0], grid])
        self.du = np.diff(self.knots)
        self.idx = np.searchsorted(self.knots, t, side="left")
        self.t = t
        K = grid.shape[0]
        self.K = K

        self.m0 = self.at_risk_sum(self.w)
        if not self.m0[-1] > 0:
            raise ZeroRiskSet("weighted at-risk mean is zero at or before tau")
        self.m1 = self.at_risk_sum(self.w[:, None] * self.z)
        self.m2 = self.at_risk_sum(self.w[:, None, None] * self.z[:, :, None] * self.z[:, None, :])
        self.zbar = self.m1 / self.m0[:, None]
        self.dn = self.event_sum(self.w * self.delta)
        self.e1 = self.event_sum((self.w * self.delta)[:, None] * self.z)

    @property
    def p(self):
        return self.z.shape[1]

    def at_risk_sum(self, x):
        """``sum_i x_i 1(subject i at risk on interval k)`` for k = 1..K."""
        out = self._bin(x)
        out = np.cumsum(out[::-1], axis=0)[::-1]
        return out[1:].reshape((self.K,) + np.shape(x)[1:])

    def event_sum(self, x):
        """``sum_i x_i 1(min(T_i, tau) = u_k)`` for knots k = 1..K."""
        return self._bin(x)[1:].reshape((self.K,) + np.shape(x)[1:])

    def _bin(self, x):
        flat = np.asarray(x, dtype=float).reshape(len(self.idx), -1)
        out = np.empty((self.K + 1, flat.shape[1]))
        for j in range(flat.shape[1]):
            out[:, j] = np.bincount(self.idx, weights=flat[:, j], minlength=self.K + 1)
        return out

    def centered_m2(self):
        """Per-interval ``sum w Y (Z - Zbar)(Z - Zbar)'``."""
        return self.m2 - self.m1[:, :, None] * self.zbar[:, None, :]

    def cumulate(self, per_interval, at_index):
        """Running sum of ``per_interval`` up to and including grid index ``at_index``."""
        per_interval = np.asarray(per_interval, dtype=float)
        cum = np.concatenate([np.zeros((1,) + per_interval.shape[1:]),
                              np.cumsum(per_interval, axis=0)])
        return cum[at_index]

    def integral_to(self, x, rate, jumps=None):
        """``int_0^x rate(t) dt + sum_{u_k <= x} jumps_k`` at each point of ``x``.

        ``rate`` is per interval, ``jumps`` per knot ``u_1..u_K``; trailing
        dimensions are carried through.
        """
        x = np.asarray(x, dtype=float)
        rate = np.asarray(rate, dtype=float)
        tail = rate.shape[1:]
        seg = rate * self.du.reshape((-1,) + (1,) * len(tail))
        if jumps is not None:
            seg = seg + np.asarray(jumps, dtype=float)
        cum = np.concatenate([np.zeros((1,) + tail), np.cumsum(seg, axis=0)])
        k = np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, self.K)
        nxt = np.minimum(k, self.K - 1)
        partial = (x - self.knots[k]) * (k < self.K)
        partial = partial.reshape(partial.shape + (1,) * len(tail))
        return cum[k] + rate[nxt] * partial

    def split_at(self, s):
        """Lengths of each interval lying in ``[0, s]`` and the knot mask ``u_k <= s``."""
        lo = self.knots[:-1]
        inside = np.clip(s - lo, 0.0, self.du)
        return inside, self.knots[1:] <= s


def _table(dataset, scheme):
    validate(dataset, scheme)
    return RiskTable(dataset, scheme.weights(dataset))


def at_risk_mean(dataset: Dataset, scheme: WeightScheme) -> StepFunction:
    """``t -> (1/N) sum_i w_i 1(T_i >= t)`` as a left-closed step function."""
    tab = _table(dataset, scheme)
    return StepFunction(tab.knots, tab.m0, closed="left")


def zbar(dataset: Dataset, scheme: WeightScheme) -> StepFunction:
    """Weighted mean covariate vector among those at risk."""
    tab = _table(dataset, scheme)
    return StepFunction(tab.knots, tab.zbar, closed="left")


def stieltjes_event_sum(dataset: Dataset, scheme: WeightScheme,
                        g: Callable[[float, np.ndarray], object]):
    """Empirical ``integral_0^tau g dN``: ``(1/N) sum_i w_i Delta_i g(T_i, Z_i)``."""
    validate(dataset, scheme)
    w = scheme.weights(dataset)
    hits = np.flatnonzero((w > 0) & (dataset.event == 1) & (dataset.time <= dataset.tau))
    total = 0.0
    for i in hits:
        total = total + w[i] * np.asarray(g(float(dataset.time[i]), dataset.covariates[i]))
    return total / dataset.n
