import csv
import io

import numpy as np
import pytest
from scipy import stats

from critbranch.core import reduce_moments, run_batch
from critbranch.finite import many_to_two_exact, nonlinear_ode
from critbranch.limits import (CSV_COLUMNS, ConditionedSample, FewSurvivorsWarning, TooFewSurvivorsError,
                               allowance, conditional_moments, conditioned_sample, jackknife_ratio,
                               moment_table, ode_asymptotics, survival_curve, yaglom_laplace)


def test_survival_curve_start_and_bin_exact(bin_model):
    c = survival_curve(bin_model, 0, [0.0, 2.0, 10.0], 100_000, seed=1)
    assert c.estimate[0] == 1.0 and c.stderr[0] == 0.0
    exact = 1.0 / (1.0 + c.times / 2.0)
    assert np.all(np.abs(c.estimate - exact) <= 3 * np.maximum(c.stderr, 1e-12))
    assert c.target == pytest.approx(2.0)
    with pytest.raises(ValueError):
        survival_curve(bin_model, 0, [2.0, 1.0], 10, seed=1)
    with pytest.raises(ValueError):
        survival_curve(bin_model, 0, [1.0], 10, seed=1, method="psychic")


def test_direct_and_spine_agree(two_type, eig):
    e = eig(two_type)
    grid = [0.0, 5.0, 20.0]
    d = survival_curve(two_type, 1, grid, 100_000, seed=2)
    s = survival_curve(two_type, 1, grid, 20_000, seed=3, method="spine", eigen=e)
    assert s.estimate[0] == 1.0
    sol = nonlinear_ode(two_type, 20.0)
    for k, t in enumerate(grid[1:], 1):
        assert abs(d.estimate[k] - s.estimate[k]) <= 3 * np.hypot(d.stderr[k], s.stderr[k])
        ref = sol.u[np.argmin(np.abs(sol.times - t)), 1]
        assert abs(d.estimate[k] - ref) <= 3 * d.stderr[k]
    with pytest.raises(ValueError):
        survival_curve(two_type, 1, grid, 10, seed=1, method="spine")


@pytest.mark.parametrize("t", [5.0, 20.0, 100.0])
def test_ode_matches_simulation(two_type, eig, t):
    o = ode_asymptotics(two_type, eig(two_type), t, times=[t])
    for x0 in (0, 1):
        b = run_batch(two_type, x0, [t], 100_000, seed=int(t) + x0)
        m = reduce_moments(b.survival(0).astype(float))
        assert abs(m.mean - o.u[0, x0]) <= 3 * m.stderr


def test_ode_bin_closed_form(bin_model, eig):
    times = [1.0, 10.0, 100.0]
    o = ode_asymptotics(bin_model, eig(bin_model), 100.0, times=times)
    t = np.array(times)
    assert np.allclose(o.scaled, t / (t + 2.0), rtol=1e-8)
    assert np.all(o.deviation <= 1e-8)
    with pytest.raises(ValueError):
        ode_asymptotics(bin_model, eig(bin_model), 10.0, times=[0.123456])


def test_yaglom_basics(bin_model):
    tab = yaglom_laplace(bin_model, 0, 1.0, 10.0, [0.0, 1.0, 2.0], 20_000, seed=4)
    assert tab.estimates[0] == 1.0 and tab.stderrs[0] == 0.0
    assert list(tab.targets) == pytest.approx([1.0, 1 / 1.5, 0.5])
    assert np.all(np.diff(tab.estimates) < 0)
    with pytest.raises(TooFewSurvivorsError):
        yaglom_laplace(bin_model, 0, 1.0, 100.0, [1.0], 1000, seed=4)
    with pytest.warns(FewSurvivorsWarning):
        conditioned_sample(bin_model, 0, 1.0, 10.0, 1500, seed=4)
    with pytest.raises(ValueError):
        yaglom_laplace(bin_model, 0, 1.0, 10.0, [-1.0], 20_000, seed=4)


def test_conditioned_bin_law_is_exponential(bin_model):
    # X_t given survival is geometric; jittering by a uniform makes it
    # exactly exponential, and the scaled law tends to Exp(mean 1/2).
    t = 100.0
    s = conditioned_sample(bin_model, 0, 1.0, t, 400_000, seed=5)
    jit = (s.values * t - np.random.default_rng(0).random(s.survivors))
    p = 1.0 / (1.0 + t / 2.0)
    assert stats.kstest(jit, "expon", args=(0, -1.0 / np.log1p(-p))).pvalue > 0.01
    assert stats.kstest(jit / t, "expon", args=(0, 0.5)).pvalue > 0.01


def test_jackknife():
    gen = np.random.default_rng(1)
    n = 50_000
    alive = gen.random(n) < 0.3
    idx = np.flatnonzero(alive)
    vals = gen.exponential(size=idx.size)
    s = ConditionedSample(1.0, vals, idx, n)
    est, se = jackknife_ratio(vals, s)
    assert est == pytest.approx(vals.mean())
    naive = vals.std() / np.sqrt(vals.size)
    assert 0.7 < se / naive < 1.4
    full = ConditionedSample(1.0, vals, np.arange(vals.size), vals.size)
    assert jackknife_ratio(vals, full)[0] == pytest.approx(vals.mean())


def test_cross_theorem_consistency(two_type, eig):
    # t p(t) times the conditioned mean of <phi, X_t>/t is phi(x0) at every t
    e = eig(two_type)
    t = 50.0
    n = 200_000
    b = run_batch(two_type, 0, [t], n, seed=6)
    both = reduce_moments(b.values(e.phi, 0))
    p = b.survival(0).mean()
    cond = b.values(e.phi, 0)[b.survival(0)].mean() / t
    assert abs(t * p * cond - e.phi[0]) <= 3 * both.stderr
    # and the two limits multiply to phi(x0)
    assert (2 * e.phi[0] / e.sigma) * (e.sigma / 2) == pytest.approx(e.phi[0])


def test_conditional_moments(two_type, eig):
    tab = conditional_moments(two_type, 0, 1.0, 50.0, 3, 100_000, seed=7)
    assert tab.estimates[0] == 1.0 and tab.params == [0, 1, 2, 3]
    mean = float(np.sum(eig(two_type).phi_tilde)) * eig(two_type).sigma / 2
    assert list(tab.targets) == pytest.approx([1, mean, 2 * mean**2, 6 * mean**3])
    with pytest.raises(ValueError):
        conditional_moments(two_type, 0, 1.0, 50.0, 4, 10, seed=7)


def test_moment_table(bin_model, eig):
    e = eig(bin_model)
    tab = moment_table(bin_model, e, 0, [5.0, 20.0], [1, 2], 20_000, seed=8)
    assert tab.params == ["j=1;t=5", "j=1;t=20", "j=2;t=5", "j=2;t=20"]
    assert list(tab.targets) == pytest.approx([1.0, 1.0, 1.5, 1.5])
    for k, t in enumerate([5.0, 20.0]):
        exact = many_to_two_exact(bin_model, e.phi, e.phi, t)[0] / t
        assert abs(tab.estimates[k] - exact) <= 3 * tab.stderrs[k]
    assert tab.extra["ratio"][0] == pytest.approx(tab.estimates[0] / tab.targets[0])
    with pytest.raises(ValueError):
        moment_table(bin_model, e, 0, [5.0], [4], 10, seed=8)


def test_csv_format(bin_model):
    tab = survival_curve(bin_model, 0, [1.0, 2.0], 1000, seed=9).table()
    text = tab.csv_text()
    assert "\r" not in text and text.endswith("\n")
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0][:6]) == CSV_COLUMNS and rows[0][6] == "p"
    assert len(rows) == 3
    assert float(rows[1][1]) == tab.estimates[0]
    assert float(rows[2][0]) == 2.0 and int(rows[1][5]) == 1000
    assert len(list(tab.lines())) == 2


def test_allowance():
    assert allowance(100.0) == pytest.approx(0.02)
    assert allowance(10.0, c=8) == pytest.approx(0.8)
