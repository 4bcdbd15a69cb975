import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zee import Dataset, StepFunction, WeightScheme, at_risk_mean, integrate, zbar
from zee.errors import DomainError, ZeroRiskSet
from zee.risk import CumulativeHazard, stieltjes_event_sum, stieltjes_integral

from conftest import random_dataset


def two(times, tau=3.0, **kw):
    return Dataset(times, [0, 0], [[0.0], [1.0]], tau, **kw)


def test_at_risk_mean_unit():
    f = at_risk_mean(two([1.0, 3.0]), WeightScheme.unit())
    assert f(0.0) == 1 and f(0.5) == 1 and f(1.0) == 1
    assert f(1.0 + 1e-9) == 0.5 and f(3.0) == 0.5


def test_at_risk_mean_ipw():
    ds = two([1.0, 3.0], selected=[1, 1], sampling_prob=[0.5, 0.5])
    f = at_risk_mean(ds, WeightScheme.ipw())
    assert f(1.0) == 2 and f(2.0) == 1


def test_at_risk_mean_zero_risk_set():
    with pytest.raises(ZeroRiskSet):
        at_risk_mean(two([1.0, 2.0]), WeightScheme.unit())


def test_zbar_examples():
    one = Dataset([3.0], [0], [[2.0]], 3.0)
    assert zbar(one, WeightScheme.unit())(1.0) == pytest.approx([2.0])
    assert zbar(two([3.0, 3.0]), WeightScheme.unit())(2.0) == pytest.approx([0.5])


def test_zbar_direct_sum(rng):
    n = 5
    z = rng.normal(size=(n, 2))
    t = np.array([0.4, 1.1, 2.0, 2.7, 3.0])
    pi = np.array([0.3, 0.9, 0.5, 0.6, 1.0])
    ds = Dataset(t, [1, 0, 1, 1, 0], z, 3.0, [1] * n, pi)
    f = zbar(ds, WeightScheme.ipw())
    for s in (0.0, 0.4, 1.0, 2.5, 3.0):
        w = (t >= s) / pi
        np.testing.assert_allclose(f(s), (w[:, None] * z).sum(0) / w.sum(), rtol=1e-14)


def test_integrate_examples():
    one = StepFunction([0, 3], [1.0])
    assert integrate(one, 0, 3) == 3
    f = StepFunction([0, 1, 3], [2.0, 0.0])
    assert integrate(f, 0, 3) == 2
    assert integrate(f, 1.5, 1.5) == 0
    with pytest.raises(DomainError):
        integrate(f, 0, 4)
    with pytest.raises(DomainError):
        integrate(f, 2, 1)


def test_integrate_vector_values():
    f = StepFunction([0, 1, 2], [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_allclose(integrate(f, 0.5, 1.5), [2.0, 3.0])
    np.testing.assert_allclose(f.antiderivative(np.array([0.5, 2.0])), [[0.5, 1.0], [4.0, 6.0]])


@settings(max_examples=50, deadline=None)
@given(vals=st.lists(st.floats(-5, 5), min_size=1, max_size=8),
       cuts=st.lists(st.floats(0, 1), min_size=3, max_size=3))
def test_integrate_additive(vals, cuts):
    knots = np.linspace(0, 2, len(vals) + 1)
    f = StepFunction(knots, vals)
    a, b, c = sorted(2 * np.array(cuts))
    whole = integrate(f, a, c)
    parts = integrate(f, a, b) + integrate(f, b, c)
    assert abs(whole - parts) <= 1e-12 * max(1.0, abs(whole))
    assert abs(f.antiderivative(np.array([c]))[0] - f.antiderivative(np.array([a]))[0] - whole) <= 1e-12 * max(1, abs(whole))


def test_step_function_continuity_conventions():
    right = StepFunction([0, 1, 2], [5.0, 7.0], closed="right")
    left = StepFunction([0, 1, 2], [5.0, 7.0], closed="left")
    assert right(1.0) == 7 and left(1.0) == 5
    assert right(0.0) == 5 and left(0.0) == 5
    with pytest.raises(DomainError):
        right(2.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["unit", "ipw"]))
def test_at_risk_mean_properties(seed, kind):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=15, two_phase=kind == "ipw")
    scheme = WeightScheme.unit() if kind == "unit" else WeightScheme.ipw()
    f = at_risk_mean(ds, scheme)
    assert np.all(np.diff(f.values) <= 0)
    assert f(0.0) == pytest.approx(scheme.weights(ds).sum() / ds.n, rel=1e-14)
    if kind == "unit":
        assert np.all((f.values >= 0) & (f.values <= 1))


def test_ipw_with_unit_probability_is_bitwise_unit(rng):
    ds = random_dataset(rng, two_phase=False)
    a = at_risk_mean(ds, WeightScheme.unit())
    b = at_risk_mean(ds, WeightScheme.ipw())
    np.testing.assert_array_equal(a.values, b.values)
    np.testing.assert_array_equal(zbar(ds, WeightScheme.unit()).values, zbar(ds, WeightScheme.ipw()).values)


def test_stieltjes_event_sum_examples(rng):
    ds = Dataset([1.0, 2.0, 3.0], [1, 1, 1], [[0.0], [1.0], [2.0]], 3.0)
    assert stieltjes_event_sum(ds, WeightScheme.unit(), lambda t, z: 1.0) == pytest.approx(1.0)
    none = Dataset([1.0, 3.0], [0, 0], [[0.0], [1.0]], 3.0)
    assert stieltjes_event_sum(none, WeightScheme.unit(), lambda t, z: 1.0) == 0
    # event after tau counts as censored
    late = Dataset([1.0, 4.0], [1, 1], [[0.0], [1.0]], 3.0)
    assert stieltjes_event_sum(late, WeightScheme.unit(), lambda t, z: 1.0) == 0.5


def test_stieltjes_centred_covariate_direct_sum(rng):
    n = 5
    z = rng.normal(size=(n, 1))
    t = np.array([0.3, 0.8, 1.6, 2.2, 3.0])
    ev = np.array([1, 1, 0, 1, 1])
    pi = np.array([0.4, 0.7, 1.0, 0.5, 0.8])
    ds = Dataset(t, ev, z, 3.0, [1] * n, pi)
    zb = zbar(ds, WeightScheme.ipw())
    got = stieltjes_event_sum(ds, WeightScheme.ipw(), lambda s, zi: zi - zb(s))
    want = 0.0
    for i in range(n):
        if ev[i]:
            risk = t >= t[i]
            zbar_i = sum(z[j] / pi[j] for j in range(n) if risk[j]) / sum(1 / pi[j] for j in range(n) if risk[j])
            want = want + (z[i] - zbar_i) / pi[i]
    np.testing.assert_allclose(got, want / n, rtol=1e-12)


def test_cumulative_hazard_evaluation():
    f = CumulativeHazard([0, 1, 2], [0.5, 0.25], [0.1, -0.2])
    assert f(0.0) == 0
    assert f(0.5) == pytest.approx(0.05)
    assert f(1.0) == pytest.approx(0.6)
    assert f(1.5) == pytest.approx(0.5)
    assert f(2.0) == pytest.approx(0.65)
    np.testing.assert_allclose(f.values, [0, 0.6, 0.65])


def test_stieltjes_integral_against_riemann_sum():
    f = CumulativeHazard([0, 1, 2], [0.5, 0.25], [0.1, -0.2])
    h2 = StepFunction([0, 0.7, 1.5, 2.0], [1.0, 3.0, -1.0])
    got = stieltjes_integral(h2, f, np.array([0.5, 1.0, 1.7, 2.0]))
    # by hand: slopes part + jumps h2(1)*0.5 + h2(2)*0.25
    want = [0.05,
            0.07 + 0.09 + 3 * 0.5,
            0.07 + 0.09 + 3 * 0.5 + 3 * 0.5 * -0.2 + -1 * 0.2 * -0.2,
            0.07 + 0.09 + 3 * 0.5 + 3 * 0.5 * -0.2 + -1 * 0.5 * -0.2 - 0.25]
    np.testing.assert_allclose(got, want, rtol=1e-12)
