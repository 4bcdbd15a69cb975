"""Subject records, datasets, weighting schemes and CSV ingestion.

A :class:`Dataset` stores its columns as read-only numpy arrays. Covariates
of subjects outside the phase-II subsample are absent: the record carries
``covariates=None`` and the array rows are NaN with ``has_covariates`` False.
Numerical code only ever reads covariate rows whose weight is positive, and
positive weight implies the row is observed.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    InvalidRecord,
    MissingColumn,
    NonBinaryIndicator,
    NoSubjectAtRiskAtTau,
    ProbabilityOutOfRange,
    SchemeDataMismatch,
)

DEFAULT_SIGMA = 1e-6


@dataclass(frozen=True)
class SubjectRecord:
    time: float
    event: int
    covariates: Optional[tuple]
    auxiliary: tuple = ()
    phase1: tuple = ()
    selected: int = 1
    sampling_prob: float = 1.0


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _binary(values, name):
    arr = np.asarray(values, dtype=float)
    if not np.all((arr == 0) | (arr == 1)):
        bad = arr[(arr != 0) & (arr != 1)][0]
        raise NonBinaryIndicator(f"column {name!r} must be 0/1, found {bad!r}")
    return arr.astype(np.int8)


class Dataset:
    """Validated, immutable single-phase or two-phase survival sample.

    Parameters
    ----------
    time, event : array_like, shape (N,)
        Follow-up time ``min(T, C)`` and event indicator.
    covariates : array_like, shape (N, p)
        NaN marks an absent entry; absent entries are allowed only on rows
        with ``selected == 0``.
    tau : float
        Administrative horizon. Estimation needs a positive weighted at-risk
        mass at ``tau``; that is checked where it matters (CSV loading and
        the risk-set numerics), not here.
    selected, sampling_prob : array_like, optional
        Phase-II indicator and known selection probability. Default to a
        fully observed random sample.
    auxiliary : array_like, shape (N, q), optional
        Calibration variables, observed on everyone.
    phase1 : array_like, shape (N, r), optional
        Other phase-I variables carried along for bookkeeping.
    sigma : float
        Lower bound enforced on ``sampling_prob``.
    """

    def __init__(self, time, event, covariates, tau, selected=None,
                 sampling_prob=None, auxiliary=None, phase1=None,
                 sigma=DEFAULT_SIGMA):
        time = np.asarray(time, dtype=float).reshape(-1)
        n = time.shape[0]
        if n == 0:
            raise InvalidRecord("dataset has no records")
        z = np.asarray(covariates, dtype=float)
        if z.ndim == 1:
            z = z.reshape(n, -1)
        if z.shape[0] != n:
            raise InvalidRecord("covariate rows do not match number of records")
        if not (np.isfinite(tau) and tau > 0):
            raise InvalidRecord(f"tau must be a positive finite number, got {tau!r}")
        if np.any(~np.isfinite(time)) or np.any(time < 0):
            raise InvalidRecord("follow-up times must be finite and nonnegative")
        event = _binary(event, "event")
        if np.any((event == 1) & (time == 0)):
            raise InvalidRecord("an event at time 0 is not allowed (N(0) = 0)")
        selected = (np.ones(n, dtype=np.int8) if selected is None
                    else _binary(selected, "selected"))
        prob = (np.ones(n) if sampling_prob is None
                else np.asarray(sampling_prob, dtype=float).reshape(-1))
        if prob.shape[0] != n or selected.shape[0] != n or event.shape[0] != n:
            raise InvalidRecord("column lengths differ")
        if np.any(~np.isfinite(prob)) or np.any(prob <= 0) or np.any(prob > 1):
            raise ProbabilityOutOfRange("sampling probabilities must lie in (0, 1]")
        if np.any(prob < sigma):
            raise ProbabilityOutOfRange(
                f"sampling probability below the configured floor sigma={sigma:g}")
        missing = np.isnan(z)
        partial = missing.any(axis=1)
        if np.any(partial & (selected == 1)):
            i = int(np.flatnonzero(partial & (selected == 1))[0])
            raise InvalidRecord(f"record {i} is selected but has missing covariates")
        z = z.copy()
        z[partial] = np.nan
        aux = np.zeros((n, 0)) if auxiliary is None else np.asarray(auxiliary, float)
        if aux.ndim == 1:
            aux = aux.reshape(n, -1)
        ph1 = np.zeros((n, 0)) if phase1 is None else np.asarray(phase1, float)
        if ph1.ndim == 1:
            ph1 = ph1.reshape(n, -1)
        if aux.shape[0] != n or ph1.shape[0] != n:
            raise InvalidRecord("auxiliary rows do not match number of records")
        if not np.all(np.isfinite(aux)) or not np.all(np.isfinite(ph1)):
            raise InvalidRecord("phase-I variables must be observed on every record")

        self.time = _frozen(time)
        self.event = _frozen(event)
        self.covariates = _frozen(z)
        self.has_covariates = _frozen(~partial)
        self.selected = _frozen(selected)
        self.sampling_prob = _frozen(prob)
        self.auxiliary = _frozen(aux)
        self.phase1 = _frozen(ph1)
        self.tau = float(tau)
        self.sigma = float(sigma)

    @classmethod
    def from_records(cls, records: Sequence[SubjectRecord], tau, sigma=DEFAULT_SIGMA):
        if not records:
            raise InvalidRecord("dataset has no records")
        p = next((len(r.covariates) for r in records if r.covariates is not None), None)
        if p is None:
            raise InvalidRecord("no record carries covariates")
        q = len(records[0].auxiliary)
        r1 = len(records[0].phase1)
        z = np.full((len(records), p), np.nan)
        for i, rec in enumerate(records):
            if rec.covariates is not None:
                if len(rec.covariates) != p:
                    raise InvalidRecord(f"record {i} has {len(rec.covariates)} covariates, expected {p}")
                z[i] = [np.nan if c is None else c for c in rec.covariates]
            if len(rec.auxiliary) != q or len(rec.phase1) != r1:
                raise InvalidRecord(f"record {i} has inconsistent phase-I dimensions")
        return cls(
            time=[r.time for r in records],
            event=[r.event for r in records],
            covariates=z,
            tau=tau,
            selected=[r.selected for r in records],
            sampling_prob=[r.sampling_prob for r in records],
            auxiliary=np.array([r.auxiliary for r in records], dtype=float).reshape(len(records), q),
            phase1=np.array([r.phase1 for r in records], dtype=float).reshape(len(records), r1),
            sigma=sigma,
        )

    @property
    def n(self):
        return self.time.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    @property
    def q(self):
        return self.auxiliary.shape[1]

    @property
    def is_complete(self):
        """True when every subject is selected with probability one."""
        return bool(np.all(self.selected == 1) and np.all(self.sampling_prob == 1))

    @property
    def records(self):
        out = []
        for i in range(self.n):
            cov = tuple(self.covariates[i]) if self.has_covariates[i] else None
            out.append(SubjectRecord(
                time=float(self.time[i]), event=int(self.event[i]), covariates=cov,
                auxiliary=tuple(self.auxiliary[i]), phase1=tuple(self.phase1[i]),
                selected=int(self.selected[i]),
                sampling_prob=float(self.sampling_prob[i])))
        return out

    def __len__(self):
        return self.n

    def __repr__(self):
        return (f"Dataset(N={self.n}, p={self.p}, q={self.q}, tau={self.tau:g}, "
                f"selected={int(self.selected.sum())})")

    def replace(self, **changes):
        kw = dict(time=self.time, event=self.event, covariates=self.covariates,
                  tau=self.tau, selected=self.selected,
                  sampling_prob=self.sampling_prob, auxiliary=self.auxiliary,
                  phase1=self.phase1, sigma=self.sigma)
        kw.update(changes)
        return Dataset(**kw)


@dataclass(frozen=True)
class WeightScheme:
    """Which empirical measure the estimators use.

    ``unit`` gives every subject weight one (random sample), ``ipw`` gives
    ``R / pi``, and ``calibrated`` gives ``R * exp(-gamma' Vtilde) / pi``.
    """

    kind: str
    gamma: Optional[tuple] = None

    KINDS = ("unit", "ipw", "calibrated")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown weight scheme {self.kind!r}")
        if (self.kind == "calibrated") != (self.gamma is not None):
            raise ValueError("gamma is required for, and only for, the calibrated scheme")

    @classmethod
    def unit(cls):
        return cls("unit")

    @classmethod
    def ipw(cls):
        return cls("ipw")

    @classmethod
    def calibrated(cls, gamma):
        return cls("calibrated", tuple(float(g) for g in np.atleast_1d(gamma)))

    @property
    def label(self):
        return {"unit": "rs", "ipw": "ipw", "calibrated": "cal"}[self.kind]

    def weights(self, dataset: Dataset) -> np.ndarray:
        if self.kind == "unit":
            return np.ones(dataset.n)
        base = dataset.selected / dataset.sampling_prob
        if self.kind == "ipw":
            return base
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.shape != (dataset.q,):
            raise SchemeDataMismatch(
                f"gamma has dimension {gamma.shape[0]}, dataset has q={dataset.q}")
        return base * np.exp(-dataset.auxiliary @ gamma)


def validate(dataset: Dataset, scheme: WeightScheme) -> None:
    """Check that ``scheme`` can be applied to ``dataset``.

    Raises
    ------
    SchemeDataMismatch
        Unit weights on two-phase data, a calibrated scheme without auxiliary
        variables, or no selected subject with follow-up reaching tau.
    """
    if scheme.kind == "unit" and not dataset.is_complete:
        raise SchemeDataMismatch(
            "unit weights require every record selected with probability 1")
    if scheme.kind == "calibrated" and dataset.q == 0:
        raise SchemeDataMismatch("calibrated weights require auxiliary columns")
    if not np.all(dataset.has_covariates[dataset.selected == 1]):
        raise InvalidRecord("a selected record has missing covariates")
    if scheme.kind == "calibrated":
        scheme.weights(dataset)


# --- CSV ---------------------------------------------------------------

@dataclass
class ColumnSchema:
    """Mapping from dataset roles to CSV column names.

    ``covariates``, ``auxiliary`` and ``phase1`` default to every column
    matching ``z<k>``, ``vtilde<k>`` and ``u<k>`` in numeric order.
    """

    time: str = "time"
    event: str = "event"
    selected: str = "selected"
    prob: str = "prob"
    covariates: Optional[list] = None
    auxiliary: Optional[list] = None
    phase1: Optional[list] = None

    patterns: dict = field(default_factory=lambda: {
        "covariates": r"z(\d+)", "auxiliary": r"vtilde(\d+)", "phase1": r"u(\d+)"})

    def resolve(self, header):
        def numbered(pattern):
            found = [(int(m.group(1)), h) for h in header
                     if (m := re.fullmatch(pattern, h.strip()))]
            return [h for _, h in sorted(found)]

        cols = {}
        for role in ("covariates", "auxiliary", "phase1"):
            given = getattr(self, role)
            cols[role] = list(given) if given is not None else numbered(self.patterns[role])
        for role in ("time", "event", "selected", "prob"):
            cols[role] = getattr(self, role)
        needed = [cols[r] for r in ("time", "event", "selected", "prob")]
        needed += cols["covariates"] + cols["auxiliary"] + cols["phase1"]
        stripped = [h.strip() for h in header]
        for name in needed:
            if name not in stripped:
                raise MissingColumn(f"column {name!r} not found in header")
        if not cols["covariates"]:
            raise MissingColumn("no covariate columns (z1..zp) found")
        return cols


def _parse(value, name, row, allow_blank=False):
    value = value.strip()
    if value == "" or value.upper() in ("NA", "NAN"):
        if allow_blank:
            return math.nan
        raise InvalidRecord(f"row {row}: column {name!r} is blank")
    try:
        return float(value)
    except ValueError:
        raise InvalidRecord(f"row {row}: column {name!r} is not a number: {value!r}") from None


def load_csv(path, tau, schema: Optional[ColumnSchema] = None, sigma=DEFAULT_SIGMA) -> Dataset:
    """Read a dataset from a UTF-8 CSV file with a header row.

    Blank covariate cells are accepted only on rows with ``selected == 0``.
    ``tau=None`` takes the largest follow-up time as the horizon.
    """
    schema = schema or ColumnSchema()
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise MissingColumn(f"{path}: empty file")
            cols = schema.resolve(header)
            pos = {h.strip(): j for j, h in enumerate(header)}
            rows = [r for r in reader if any(cell.strip() for cell in r)]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None

    def column(name, allow_blank=False):
        j = pos[name]
        return [_parse(r[j] if j < len(r) else "", name, i + 2, allow_blank)
                for i, r in enumerate(rows)]

    n = len(rows)
    if n == 0:
        raise InvalidRecord(f"{path}: no data rows")
    z = np.array([column(c, allow_blank=True) for c in cols["covariates"]]).T.reshape(n, -1)
    aux = np.array([column(c) for c in cols["auxiliary"]]).T.reshape(n, -1)
    ph1 = np.array([column(c) for c in cols["phase1"]]).T.reshape(n, -1)
    time = column(cols["time"])
    if tau is None:
        tau = max(time)
    ds = Dataset(
        time=time, event=column(cols["event"]), covariates=z,
        tau=tau, selected=column(cols["selected"]),
        sampling_prob=column(cols["prob"]), auxiliary=aux, phase1=ph1, sigma=sigma)
    if not np.any(ds.time >= ds.tau):
        raise NoSubjectAtRiskAtTau(f"no subject has follow-up time >= tau={tau:g}")
    return ds


def write_csv(dataset: Dataset, path) -> Path:
    """Write ``dataset`` in the layout :func:`load_csv` reads (17 significant digits)."""
    path = Path(path)
    p, q, r = dataset.p, dataset.q, dataset.phase1.shape[1]
    header = (["time", "event", "selected", "prob"]
              + [f"z{k + 1}" for k in range(p)]
              + [f"vtilde{k + 1}" for k in range(q)]
              + [f"u{k + 1}" for k in range(r)])
    fmt = "{:.17g}".format
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(dataset.n):
            z = ([fmt(v) for v in dataset.covariates[i]] if dataset.has_covariates[i]
                 else [""] * p)
            w.writerow([fmt(dataset.time[i]), int(dataset.event[i]),
                        int(dataset.selected[i]), fmt(dataset.sampling_prob[i])]
                       + z + [fmt(v) for v in dataset.auxiliary[i]]
                       + [fmt(v) for v in dataset.phase1[i]])
    return path
