from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from critbranch.core import batch_estimate
from critbranch.finite import (FiniteTypeModel, ModelValidationError, QuadratureError, StepSizeError,
                               adaptive_simpson, many_to_two_exact, mean_semigroup, nonlinear_ode,
                               variance_functional)

H = Fraction(1, 2)


def test_validation():
    with pytest.raises(ModelValidationError):
        FiniteTypeModel([1.0], [[(H, [0]), (Fraction(1, 3), [2])]])
    with pytest.raises(ModelValidationError):
        FiniteTypeModel([0.0], [[(1, [0])]])
    with pytest.raises(ModelValidationError):
        FiniteTypeModel([1.0], [[(1, [0, 1])]])
    with pytest.raises(ModelValidationError):
        FiniteTypeModel([1.0, 1.0], [[(1, [0, 1])]])
    # floats are accepted to 1e-12
    FiniteTypeModel([1.0], [[(0.1, [0]), (0.2, [1]), (0.7, [2])]])
    with pytest.raises(ModelValidationError):
        FiniteTypeModel([1.0], [[(0.1, [0]), (0.2, [1]), (0.7 + 1e-9, [2])]])


def test_model_arrays_read_only(two_type):
    with pytest.raises(ValueError):
        two_type.rates[0] = 3.0


def test_mean_semigroup_examples(bin_model, two_type):
    f = np.array([0.3])
    assert np.allclose(mean_semigroup(bin_model, 7.0, f), f, atol=1e-14)
    assert np.allclose(two_type.generator, [[-0.5, 0.5], [2.0, -2.0]])
    for t in (0.5, 3.0, 40.0):
        assert np.allclose(mean_semigroup(two_type, t, [1, 1]), 1.0, atol=1e-12)
    g = np.array([2.0, -1.0])
    assert np.array_equal(mean_semigroup(two_type, 0.0, g), g)


def test_variance_functional_examples(bin_model, two_type):
    assert variance_functional(bin_model, 0, 1.0, 1.0) == pytest.approx(1.0)
    assert variance_functional(two_type, 1, [1, 1], [1, 1]) == pytest.approx(1.0)
    single = FiniteTypeModel([1.0, 2.0], [[(H, [0, 0]), (H, [0, 1])], [(1, [1, 0])]])
    assert np.allclose(single.pair_functional([1, 2], [3, 4]), 0.0)


def test_many_to_two(bin_model, two_type):
    for t in (0.0, 1.0, 10.0, 75.0):
        assert many_to_two_exact(bin_model, 1, 1, t)[0] == pytest.approx(1 + t, rel=1e-8)
    f = np.array([0.5, 2.0])
    assert np.allclose(many_to_two_exact(two_type, f, f, 0.0), f * f)
    phi = np.ones(2)
    exact = many_to_two_exact(two_type, phi, phi, 10.0)
    res = batch_estimate(two_type, 0, 10.0, phi, 100_000, seed=3)
    # second moment from the batch: E[<phi,X>^2] = var + mean^2
    from critbranch.core import run_batch
    b = run_batch(two_type, 0, [10.0], 100_000, seed=3)
    sq = b.values(phi) ** 2
    assert abs(sq.mean() - exact[0]) <= 3 * sq.std() / np.sqrt(sq.size)
    assert res.n == 100_000


def test_many_to_two_jensen(finite_models):
    rng = np.random.default_rng(1)
    for m in finite_models:
        for _ in range(5):
            f = rng.random(m.d)
            for t in (0.5, 5.0):
                second = many_to_two_exact(m, f, f, t)
                first = mean_semigroup(m, t, f)
                assert np.all(second >= first**2 * (1 - 1e-7))


def test_adaptive_simpson():
    val = adaptive_simpson(lambda x: np.array([np.sin(x), x**3]), 0.0, np.pi)
    assert np.allclose(val, [2.0, np.pi**4 / 4], rtol=1e-9)
    with pytest.raises(QuadratureError):
        adaptive_simpson(lambda x: np.array([np.sign(x - 0.3) * 1e3 + 1 / (x - 0.3 + 1e-300)]), 0.0, 1.0,
                         max_depth=8)


def test_ode_bin_closed_form(bin_model):
    sol = nonlinear_ode(bin_model, 500.0)
    exact = 2.0 / (2.0 + sol.times)
    assert np.max(np.abs(sol.u[:, 0] - exact)) < 1e-8
    k = int(np.argmin(np.abs(sol.times - 10.0)))
    assert sol.u[k, 0] == pytest.approx(1 / 6, abs=1e-8)
    assert np.all(sol.u[0] == 1.0)


def test_ode_properties(finite_models, eig):
    for m in finite_models:
        e = eig(m)
        sol = nonlinear_ode(m, 200.0, eigen=e)
        assert np.all(np.diff(sol.u, axis=0) <= 1e-15)
        assert np.all((sol.u >= 0) & (sol.u <= 1))
        assert sol.a[0] == pytest.approx(float(np.sum(e.phi_tilde)))


def test_ode_step_guard(bin_model):
    with pytest.raises(StepSizeError):
        nonlinear_ode(bin_model, 10.0, dt=0.02)


def test_yield_multiplier(bin_model):
    m = FiniteTypeModel([1.0], [[(Fraction(2, 5), [0]), (Fraction(3, 5), [2])]])
    half = m.with_yield_multiplier(0.5)
    assert half.mean_matrix[0, 0] == pytest.approx(0.6)
    table = dict((c, p) for p, c in half.offspring_table(0))
    assert table[(0,)] == pytest.approx(0.4 + 0.6 * 0.25)
    assert table[(1,)] == pytest.approx(0.6 * 0.5)
    assert m.with_yield_multiplier(2.0).n_max == 4
    assert bin_model.with_yield_multiplier(1.0).describe() == bin_model.describe()


@pytest.mark.parametrize("name", ["bin_model", "two_type", "three_type"])
def test_size_biased_table(name, request, eig):
    m = request.getfixturevalue(name)
    e = eig(m)
    sb = m.size_biased_table(e.phi)
    for i in range(m.d):
        a, b = sb.start[i], sb.start[i + 1]
        assert sb.probs[a:b].sum() == pytest.approx(1.0)
        assert np.all(sb.counts[a:b] @ e.phi > 0)
        assert sb.m_phi[i] == pytest.approx(m.mean_matrix[i] @ e.phi)


# -- operator inequalities, 1000 random h per model ------------------------

def _random_h(rng, d, hi, n=1000):
    h = rng.random((n, d)) * hi
    h[: n // 10] = hi * (rng.random((n // 10, d)) < 0.5)  # corners
    return h


@pytest.mark.parametrize("name", ["bin_model", "two_type", "three_type"])
def test_operator_inequalities(name, request):
    m = request.getfixturevalue(name)
    rng = np.random.default_rng(2024)
    bound = m.rates.max() * max(m.m_scalar(i) for i in range(m.d))
    for h in _random_h(rng, m.d, 1.0):
        g = m.g_operator(h)
        assert np.all(g <= 1e-15) and np.all(g >= -bound - 1e-12)  # (i)
    c3 = 2.0 ** (1 - m.n_max)
    for h in _random_h(rng, m.d, 0.5):
        g, v = m.g_operator(h), m.pair_functional(h)
        assert np.all(-g >= c3 * m.rates * v - 1e-14) and np.all(v >= 0)  # (iii)
    for h in _random_h(rng, m.d, 0.25):
        r1 = np.max(np.abs(m.g_operator(h) + 0.5 * m.rates * m.pair_functional(h)))
        r2 = np.max(np.abs(m.g_operator(h / 2) + 0.5 * m.rates * m.pair_functional(h / 2)))
        assert r2 <= r1 / 8 * 1.2 + 1e-15  # (ii)
    lip = 2 * m.n_max**2
    hs = _random_h(rng, m.d, 1.0, 2000)
    for h1, h2 in zip(hs[::2], hs[1::2]):
        dv = np.abs(m.pair_functional(h1) - m.pair_functional(h2))
        assert np.all(dv <= lip * np.max(np.abs(h1 - h2)) + 1e-12)  # (iv)


@given(h=st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3))
def test_g_operator_matches_enumeration(h, three_type):
    h = np.asarray(h)
    m = three_type
    expect = np.zeros(m.d)
    for i in range(m.d):
        for p, cnt in m.offspring_table(i):
            prod = np.prod([(1 - h[j]) ** c for j, c in enumerate(cnt)])
            expect[i] += p * (1 - prod - np.dot(cnt, h))
    assert np.allclose(m.g_operator(h), m.rates * expect, atol=1e-13)
