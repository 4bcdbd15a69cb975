import numpy as np
import pytest

from zee import Dataset, WeightScheme
from zee.calibration import solve_gamma


# one line per acceptance criterion, echoed after the test run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def dual_grid_search(ds, rounds=12, points=201):
    """Minimise the calibration dual over a 2-d box by successive grid refinement."""
    base = ds.selected / ds.sampling_prob
    vt = ds.auxiliary
    total = vt.sum(0)

    def dual(g1, g2):
        e = np.exp(-(vt[:, 0, None, None] * g1 + vt[:, 1, None, None] * g2))
        return (base[:, None, None] * e).sum(0) + g1 * total[0] + g2 * total[1]

    lo = np.array([-3.0, -3.0])
    hi = np.array([3.0, 3.0])
    for _ in range(rounds):
        g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], points), np.linspace(lo[1], hi[1], points),
                             indexing="ij")
        vals = dual(g1, g2)
        i, j = np.unravel_index(np.argmin(vals), vals.shape)
        best = np.array([g1[i, j], g2[i, j]])
        half = (hi - lo) / 20
        lo, hi = best - half, best + half
    return best


def random_dataset(rng, n=20, p=2, q=2, tau=2.0, two_phase=True, ties=False, pi=0.7):
    """Small random dataset with someone followed past ``tau``."""
    z = rng.uniform(0, 1, (n, p))
    t = rng.exponential(1.0, n)
    if ties:
        t = np.round(t, 1) + 0.1
    t[0] = tau + 0.5
    ev = rng.integers(0, 2, n)
    if not two_phase:
        return Dataset(t, ev, z, tau)
    sel = (rng.uniform(size=n) < pi).astype(int)
    sel[0] = 1
    prob = np.full(n, pi)
    aux = np.column_stack([np.ones(n), rng.normal(size=(n, q - 1))]) if q else None
    zz = np.where(sel[:, None] == 1, z, np.nan)
    return Dataset(t, ev, zz, tau, sel, prob, aux)


def scheme_for(kind, ds):
    if kind == "unit":
        return WeightScheme.unit()
    if kind == "ipw":
        return WeightScheme.ipw()
    return solve_gamma(ds).scheme


def dataset_for(kind, rng, **kw):
    return random_dataset(rng, two_phase=kind != "unit", **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def six():
    """Hand dataset: 6 subjects, p = 1, one subject past tau."""
    time = [0.5, 1.0, 1.5, 2.0, 2.5, 3.5]
    event = [1, 0, 1, 1, 0, 1]
    z = [[0.2], [1.0], [0.5], [0.9], [0.1], [0.7]]
    return Dataset(time, event, z, tau=3.0)
