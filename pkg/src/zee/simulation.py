"""Data-generating processes and the Monte Carlo experiment driver.

Each replicate draws one full cohort. The random-sample (``rs``) estimators
use it with every covariate observed; the two-phase estimators (``ipw``,
``cal``) use the same cohort after Bernoulli phase-II selection has masked
the covariates of unselected subjects.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .calibration import solve_gamma
from .data import Dataset, WeightScheme
from .errors import ConfigError, NumericalError
from .estimators import fit
from .variance import MODEL, ROBUST, Target, influence, model_based_variance, penalty_terms, robust_variance

log = logging.getLogger(__name__)

SCHEMES = ("rs", "ipw", "cal")
KINDS = (ROBUST, MODEL)
MAX_FAILURE_RATE = 0.01
REPORT_VERSION = "1.0"


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    Covariates are independent ``U(z_low[j], z_high[j])``. Given ``z`` the
    hazard is ``baseline + z' theta0`` (or ``baseline * exp(z' theta0)`` when
    ``misspecify``). Censoring is ``min(U(0, c_max), tau)``, so a positive
    fraction of subjects is still at risk at ``tau``. Phase-II selection
    probability is ``pi_event`` for subjects with an observed event and
    ``pi_nonevent`` otherwise. ``surrogate_sd`` is the noise of the phase-I
    surrogate ``U = Z + e`` of the covariates.

    ``auxiliary`` chooses the calibration variables:

    ``"influence"``
        intercept, plus the influence rows of ``theta`` and
        ``Lambda(s_star)`` from a random-sample fit that uses the surrogate
        in place of the covariates;
    ``"basic"``
        intercept, surrogate and event indicator.
    """

    n: int = 2000
    theta0: tuple = (0.5, -0.3)
    baseline: float = 0.5
    z_low: tuple = (0.0, 0.0)
    z_high: tuple = (1.0, 1.0)
    tau: float = 2.0
    c_max: float = 3.0
    misspecify: bool = False
    hazard_floor: float = 1e-3
    pi_event: float = 1.0
    pi_nonevent: float = 0.25
    sigma: float = 1e-6
    auxiliary: str = "influence"
    surrogate_sd: float = 0.2
    s_star: float = 1.0
    z_star: tuple = (0.5, 0.5)
    alpha: float = 0.05
    seed: int = 20240601
    replicates: int = 1000
    pseudo_true: Optional[dict] = None

    def __post_init__(self):
        for name in ("theta0", "z_low", "z_high", "z_star"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        check_config(self)

    @property
    def p(self):
        return len(self.theta0)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config fields: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def check_config(c: DgpConfig):
    p = len(c.theta0)
    if c.n < 1:
        raise ConfigError("n must be positive")
    if len(c.z_low) != p or len(c.z_high) != p or len(c.z_star) != p:
        raise ConfigError("z_low, z_high and z_star must have the dimension of theta0")
    if any(lo >= hi for lo, hi in zip(c.z_low, c.z_high)):
        raise ConfigError("every covariate range needs z_low < z_high")
    if not (c.baseline > 0 and c.tau > 0 and c.c_max > 0):
        raise ConfigError("baseline, tau and c_max must be positive")
    if not c.misspecify:
        # the minimum of a linear function over a box sits at a corner
        low = c.baseline + sum(min(lo * t, hi * t) for lo, hi, t in zip(c.z_low, c.z_high, c.theta0))
        if low < c.hazard_floor:
            raise ConfigError(
                f"hazard baseline + z'theta0 drops to {low:g}, below hazard_floor={c.hazard_floor:g}")
    for name in ("pi_event", "pi_nonevent"):
        v = getattr(c, name)
        if not (c.sigma <= v <= 1):
            raise ConfigError(f"{name}={v} outside [sigma, 1]")
    if c.auxiliary not in ("influence", "basic"):
        raise ConfigError(f"unknown auxiliary kind {c.auxiliary!r}")
    if c.surrogate_sd < 0:
        raise ConfigError("surrogate_sd must be nonnegative")
    if not (0 < c.s_star <= c.tau):
        raise ConfigError("s_star must lie in (0, tau]")
    if not (0 < c.alpha < 1):
        raise ConfigError("alpha must lie in (0, 1)")
    if c.replicates < 0:
        raise ConfigError("replicates must be nonnegative")


def load_config(path) -> DgpConfig:
    """Read a TOML or JSON simulation config and validate it against the schema."""
    from .schemas import validate_instance

    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix == ".json":
            raw = json.loads(text)
        else:
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            raw = tomllib.loads(text)
    except ValueError as exc:  # TOMLDecodeError and JSONDecodeError both subclass it
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    validate_instance(raw, "config")
    return DgpConfig.from_dict(raw)


def bundled_config(name) -> DgpConfig:
    """One of the configs shipped with the package (``acceptance``, ...)."""
    path = Path(__file__).parent / "configs" / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled config named {name!r}")
    return load_config(path)


# --- data generation ------------------------------------------------------

def _rng(config, rep):
    return np.random.default_rng(np.random.SeedSequence([config.seed, rep]))


def _draw(config: DgpConfig, rng, n):
    p = config.p
    lo, hi = np.array(config.z_low), np.array(config.z_high)
    z = lo + (hi - lo) * rng.random((n, p))
    lin = z @ np.array(config.theta0)
    rate = config.baseline * np.exp(lin) if config.misspecify else config.baseline + lin
    t_event = rng.exponential(1.0 / rate)
    cens = np.minimum(rng.uniform(0.0, config.c_max, n), config.tau)
    time = np.minimum(t_event, cens)
    event = (t_event <= cens).astype(np.int8)
    u = z + config.surrogate_sd * rng.standard_normal((n, p))
    pi = np.where(event == 1, config.pi_event, config.pi_nonevent)
    selected = (rng.random(n) < pi).astype(np.int8)
    return time, event, z, u, pi, selected


def _auxiliary(config, time, event, u):
    n = len(time)
    if config.auxiliary == "basic":
        return np.column_stack([np.ones(n), u, event])
    ds = Dataset(time, event, u, config.tau)
    f = fit(ds, WeightScheme.unit())
    cols = [np.ones(n)]
    for target in (Target.theta(), Target.lambda_at(config.s_star)):
        cols.append(influence(ds, WeightScheme.unit(), f, target).rows)
    return np.column_stack(cols)


def generate(config: DgpConfig, rep: int, complete=False) -> Dataset:
    """Draw replicate ``rep``.

    Returns the two-phase sample (covariates masked where ``selected == 0``,
    auxiliaries attached) or, with ``complete=True``, the same cohort with
    every covariate observed.
    """
    full, two_phase = _cohort(config, rep)
    return full if complete else two_phase


def _cohort(config, rep, n=None):
    check_config(config)
    time, event, z, u, pi, sel = _draw(config, _rng(config, rep), n or config.n)
    full = Dataset(time, event, z, config.tau, sigma=config.sigma)
    masked = np.where(sel[:, None] == 1, z, np.nan)
    aux = _auxiliary(config, time, event, u)
    two_phase = Dataset(time, event, masked, config.tau, sel, pi, aux, phase1=u,
                        sigma=config.sigma)
    return full, two_phase


def event_fraction(config: DgpConfig, draws: int, seed=0) -> float:
    """Direct simulation of Pr(observed event) with ``draws`` subjects."""
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, draws, 1_000_000):
        m = min(1_000_000, draws - start)
        hits += int(_draw(config, rng, m)[1].sum())
    return hits / draws


# --- truth ----------------------------------------------------------------

@dataclass(frozen=True)
class PseudoTrue:
    theta: np.ndarray
    lambda_s: float
    pred: float
    mc_se: np.ndarray  # for (theta..., lambda_s, pred)

    def as_dict(self):
        return {"theta": [float(v) for v in self.theta], "lambda": float(self.lambda_s),
                "pred": float(self.pred), "mc_se": [float(v) for v in self.mc_se]}

    def vector(self):
        return np.concatenate([self.theta, [self.lambda_s, self.pred]])


def pseudo_true(config: DgpConfig, n=1_000_000, chunks=1, seed=None) -> PseudoTrue:
    """Large-sample root of the population estimating equations.

    The random-sample estimator is run on ``chunks`` independent complete
    cohorts of size ``n`` and the results averaged. The reported Monte Carlo
    uncertainty is the robust standard error of that average.
    """
    seed = config.seed if seed is None else seed
    ests, vars_ = [], []
    targets = _targets(config)
    for k in range(chunks):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 2 ** 31 - 1, k]))
        time, event, z, *_ = _draw(config, rng, n)
        ds = Dataset(time, event, z, config.tau)
        f = fit(ds, WeightScheme.unit())
        est, var = [], []
        for t in targets:
            rows = influence(ds, WeightScheme.unit(), f, t)
            est.append(_point(f, t))
            var.append(np.diag(robust_variance(rows, ds).matrix))
        ests.append(np.concatenate(est))
        vars_.append(np.concatenate(var))
    est = np.mean(ests, axis=0)
    se = np.sqrt(np.mean(vars_, axis=0) / chunks)
    p = config.p
    return PseudoTrue(est[:p], float(est[p]), float(est[p + 1]), se)


def truth(config: DgpConfig) -> np.ndarray:
    """Target values ``(theta..., Lambda(s*), Lambda(s*|z*))``."""
    if config.misspecify:
        pt = config.pseudo_true
        if not pt:
            raise ConfigError("a misspecified design needs frozen pseudo_true values")
        return np.array(list(pt["theta"]) + [pt["lambda"], pt["pred"]], dtype=float)
    th = np.array(config.theta0)
    lam = config.baseline * config.s_star
    return np.concatenate([th, [lam, lam + float(np.dot(config.z_star, th)) * config.s_star]])


# --- experiment -----------------------------------------------------------

def _targets(config):
    return (Target.theta(), Target.lambda_at(config.s_star),
            Target.pred_at(config.s_star, config.z_star))


def _point(f, target):
    if target.kind == "theta":
        return f.theta
    if target.kind == "lambda":
        return np.array([f.lambda_(target.s)])
    return np.array([f.predict(target.z, target.s)])


def estimator_labels(config):
    p = config.p
    names = [f"theta[{j + 1}]" for j in range(p)]
    names += [t.label for t in _targets(config)[1:]]
    return [f"{s}:{nm}" for s in SCHEMES for nm in names]


def replicate(config: DgpConfig, rep: int):
    """One replicate: estimates, robust and model SEs, penalty traces.

    Returns a dict of flat arrays ordered like :func:`estimator_labels`.
    """
    full, two = _cohort(config, rep)
    targets = _targets(config)
    cal = solve_gamma(two)
    out = {"est": [], ROBUST: [], MODEL: []}
    pen = []
    for ds, scheme in ((full, WeightScheme.unit()), (two, WeightScheme.ipw()), (two, cal.scheme)):
        f = fit(ds, scheme)
        for t in targets:
            rows = influence(ds, scheme, f, t)
            out["est"].append(_point(f, t))
            out[ROBUST].append(robust_variance(rows, ds).se)
            out[MODEL].append(model_based_variance(ds, scheme, f, rows).se)
            if scheme.kind == "calibrated":
                vps, cpen = penalty_terms(rows, ds, "penalty")
                pen.append((np.trace(vps), np.trace(cpen)))
    res = {k: np.concatenate(v) for k, v in out.items()}
    res["penalty"] = np.array(pen)
    return res


def _run_chunk(args):
    config, reps = args
    results = []
    for rep in reps:
        try:
            results.append((rep, replicate(config, rep), None))
        except NumericalError as exc:
            results.append((rep, None, f"{type(exc).__name__}: {exc}"))
    return results


def _collect(config, jobs):
    reps = list(range(config.replicates))
    jobs = max(1, int(jobs or os.cpu_count() or 1))
    if jobs == 1:
        return _run_chunk((config, reps))
    size = max(1, math.ceil(len(reps) / (jobs * 4)))
    chunks = [(config, reps[i:i + size]) for i in range(0, len(reps), size)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(_run_chunk, chunks))
    return sorted((r for part in parts for r in part), key=lambda r: r[0])


def _r(x):
    """Round for the report so that output is stable across platforms."""
    return float(f"{float(x):.10g}")


@dataclass
class MetricsReport:
    config: dict
    replicates: int
    failures: int
    failure_messages: list
    estimators: list
    efficiency: dict
    status: str = "ok"
    raw: dict = field(default=None, repr=False)

    @property
    def failed(self):
        return self.status != "ok"

    def cell(self, label):
        for e in self.estimators:
            if e["estimator"] == label:
                return e
        raise KeyError(label)

    def to_dict(self):
        return {"version": REPORT_VERSION, "status": self.status, "config": self.config,
                "replicates": self.replicates, "failures": self.failures,
                "failure_messages": self.failure_messages,
                "estimators": self.estimators, "efficiency": self.efficiency}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self):
        head = (f"{'estimator':<28}{'truth':>10}{'mean':>10}{'bias':>10}{'bias_se':>9}"
                f"{'mc_sd':>9}{'se_rob':>9}{'ratio':>7}{'cov_rob':>8}"
                f"{'se_mod':>9}{'ratio':>7}{'cov_mod':>8}")
        lines = [f"replicates {self.replicates}  failures {self.failures}  status {self.status}",
                 "", head, "-" * len(head)]
        for e in self.estimators:
            r, m = e[ROBUST], e[MODEL]
            lines.append(
                f"{e['estimator']:<28}{e['truth']:>10.4f}{e['mean']:>10.4f}{e['bias']:>10.4f}"
                f"{e['bias_mcse']:>9.4f}{e['mc_sd']:>9.4f}{r['mean_se']:>9.4f}{r['se_ratio']:>7.3f}"
                f"{r['coverage']:>8.3f}{m['mean_se']:>9.4f}{m['se_ratio']:>7.3f}{m['coverage']:>8.3f}")
        eff = self.efficiency
        lines += ["", "efficiency (MC variance differences, paired MC-SE)"]
        for k, v in eff.get("variance_differences", {}).items():
            lines.append(f"  {k:<34}{v['difference']:>12.3e}  se {v['mcse']:.3e}")
        if "penalty_ordering_holds" in eff:
            lines.append(f"  calibrated penalty <= VPS penalty on every replicate: "
                         f"{eff['penalty_ordering_holds']}")
        return "\n".join(lines) + "\n"


def _paired_var_diff(x, y):
    """``var(x) - var(y)`` with a Monte Carlo SE from the paired squared deviations."""
    d = (x - x.mean()) ** 2 - (y - y.mean()) ** 2
    n = len(d)
    diff = np.var(x, ddof=1) - np.var(y, ddof=1)
    return diff, float(np.std(d, ddof=1) / math.sqrt(n))


def summarize(config: DgpConfig, results) -> MetricsReport:
    ok = [r for r in results if r[1] is not None]
    failures = [f"rep {rep}: {msg}" for rep, res, msg in results if res is None]
    n_ok = len(ok)
    labels = estimator_labels(config)
    if n_ok < 2:
        raise NumericalError(f"only {n_ok} replicates succeeded")
    est = np.array([r[1]["est"] for r in ok])
    se = {k: np.array([r[1][k] for r in ok]) for k in KINDS}
    tv = np.tile(truth(config), len(SCHEMES))
    zq = _normal_quantile(1 - config.alpha / 2)
    cells = []
    for j, label in enumerate(labels):
        x = est[:, j]
        sd = float(np.std(x, ddof=1))
        cell = {"estimator": label, "truth": _r(tv[j]), "mean": _r(x.mean()),
                "bias": _r(x.mean() - tv[j]), "bias_mcse": _r(sd / math.sqrt(n_ok)),
                "mc_sd": _r(sd), "mc_sd_mcse": _r(sd / math.sqrt(2 * (n_ok - 1))),
                "mc_var": _r(sd ** 2)}
        for k in KINDS:
            s = se[k][:, j]
            cover = np.abs(x - tv[j]) <= zq * s
            cov = float(cover.mean())
            ratio = float(s.mean() / sd) if sd > 0 else float("nan")
            cell[k] = {"mean_se": _r(s.mean()), "mean_se_mcse": _r(np.std(s, ddof=1) / math.sqrt(n_ok)),
                       "se_ratio": _r(ratio),
                       "se_ratio_mcse": _r(ratio / math.sqrt(2 * (n_ok - 1))),
                       "coverage": _r(cov),
                       "coverage_mcse": _r(math.sqrt(max(cov * (1 - cov), 1e-12) / n_ok))}
        cells.append(cell)
    per = len(labels) // len(SCHEMES)
    diffs = {}
    for j in range(per):
        name = labels[j].split(":", 1)[1]
        rs, ipw, cal = est[:, j], est[:, per + j], est[:, 2 * per + j]
        for a_lab, a, b_lab, b in (("cal", cal, "ipw", ipw), ("cal", cal, "rs", rs)):
            d, mcse = _paired_var_diff(a, b)
            diffs[f"{a_lab}-{b_lab}:{name}"] = {"difference": _r(d), "mcse": _r(mcse)}
    pen = np.array([r[1]["penalty"] for r in ok])  # reps x targets x (vps, cal)
    gap = pen[:, :, 1] - pen[:, :, 0]
    scale = np.maximum(np.abs(pen[:, :, 0]), 1e-300)
    efficiency = {"variance_differences": diffs,
                  "penalty_ordering_holds": bool(np.all(gap <= 1e-10 * scale)),
                  "penalty_max_relative_excess": _r(np.max(gap / scale))}
    status = "ok"
    total = len(results)
    if len(failures) > MAX_FAILURE_RATE * total:
        status = "failed"
    return MetricsReport(config=_jsonable(config.to_dict()), replicates=total,
                         failures=len(failures), failure_messages=failures[:20],
                         estimators=cells, efficiency=efficiency, status=status,
                         raw={"est": est, "se": se, "truth": tv, "penalty": pen})


def _normal_quantile(q):
    from scipy.stats import norm
    return float(norm.ppf(q))


def _jsonable(d):
    return json.loads(json.dumps(d))


def run_experiment(config: DgpConfig, targets=None, alpha=None, jobs=1) -> MetricsReport:
    """Run ``config.replicates`` replicates and summarise them.

    ``targets`` may be ``(s_star, z_star)`` to override the configured
    evaluation point; ``alpha`` overrides the Wald level.
    """
    if targets is not None:
        s, z = targets
        config = replace(config, s_star=float(s), z_star=tuple(z))
    if alpha is not None:
        config = replace(config, alpha=float(alpha))
    if config.replicates < 200:
        raise ConfigError(f"replicates={config.replicates}; at least 200 are required")
    truth(config)
    log.info("running %d replicates with %s jobs", config.replicates, jobs)
    return summarize(config, _collect(config, jobs))


__all__ = ["DgpConfig", "PseudoTrue", "MetricsReport", "generate", "pseudo_true",
           "run_experiment", "truth", "load_config", "bundled_config", "event_fraction",
           "replicate", "summarize", "estimator_labels"]
