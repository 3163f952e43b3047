from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from critbranch._rng import RngStream
from critbranch.core import (BatchResult, InvalidStateError, ModelSpec, OffspringBoundError, PopulationCapError,
                             PopulationSnapshot, RunningMoments, batch_estimate, functional, reduce_moments,
                             run_batch, simulate_tree)
from critbranch.finite import FiniteTypeModel


class Frozen(ModelSpec):
    """gamma = 0 and no absorption: the population is {x0} forever."""

    n_max = 0

    def gamma(self, state):
        return 0.0

    def m_scalar(self, state):
        return 0.0

    def sample_flight(self, state, max_dt, rng):
        return state, max_dt, False

    def sample_offspring(self, state, rng):
        return []

    def features(self, state):
        return np.array([1.0, float(state)])

    def feature_coefficients(self, f):
        return np.array([0.0, 1.0]) if f == "x" else np.array([float(f), 0.0])


class Escaping(Frozen):
    def sample_flight(self, state, max_dt, rng):
        return -1, max_dt, False

    def in_state_space(self, state):
        return state >= 0


class TooMany(FiniteTypeModel):
    def sample_offspring(self, state, rng):
        return [0] * (self.n_max + 1)


def death_only(rate):
    return FiniteTypeModel([rate], [[(Fraction(1), [0])]])


def test_functional():
    assert functional(PopulationSnapshot(1.0, []), lambda x: 5.0) == 0.0
    assert functional(PopulationSnapshot(1.0, ["a", "a"]), lambda x: 1.0) == 2.0
    assert functional(PopulationSnapshot(1.0, [0, 1, 1]), [1.0, 2.0]) == 5.0


def test_rng_streams():
    a, b = RngStream(7, 0), RngStream(7, 1)
    assert a.key() == RngStream(7, 0).key()
    assert a.key() != b.key()
    assert a.substream(0).key() != a.substream(1).key() != a.key()
    x = a.generator().random(1000)
    y = b.generator().random(1000)
    assert abs(np.corrcoef(x, y)[0, 1]) < 0.15
    assert np.array_equal(x, RngStream(7, 0).generator().random(1000))


def test_frozen_population_is_censored():
    rec = simulate_tree(Frozen(), 3, 10.0, [0.0, 5.0, 10.0], RngStream(1))
    assert rec.censored and rec.extinction_time is None
    assert [s.states for s in rec.snapshots] == [[3], [3], [3]]
    b = batch_estimate(Frozen(), 3, 2.0, "x", 2, seed=5)
    assert b.mean == 3.0 and b.stderr == 0.0 and b.survival == 1.0


def test_death_only_extinction_time_is_exponential():
    m = death_only(2.5)
    res = run_batch(m, 0, [50.0], 40_000, seed=3)
    mom = reduce_moments(res.zeta)
    assert np.all(np.isfinite(res.zeta))
    assert abs(mom.mean - 1 / 2.5) <= 3 * mom.stderr
    rec = simulate_tree(m, 0, 50.0, [50.0], RngStream(9))
    assert 0 < rec.extinction_time < 50 and rec.snapshots[0].states == []


def test_snapshots_empty_after_extinction(two_type):
    for i in range(200):
        rec = simulate_tree(two_type, 0, 20.0, np.linspace(0, 20, 11), RngStream(4, i))
        for s in rec.snapshots:
            alive = len(s.states) > 0
            assert alive == rec.survived(s.t) or (not alive and rec.extinction_time == s.t)


def test_bin_survival_at_ten(bin_model):
    b = batch_estimate(bin_model, 0, 10.0, 1.0, 200_000, seed=11)
    assert abs(b.survival - 1 / 6) <= 3 * b.survival_stderr
    assert abs(b.mean - 1.0) <= 3 * b.stderr


@pytest.mark.parametrize("t", [1.0, 5.0, 20.0])
def test_martingale(finite_models, eig, t):
    for m in finite_models:
        e = eig(m)
        for x0 in range(m.d):
            b = batch_estimate(m, x0, t, e.phi, 20_000, seed=int(t) * 10 + x0)
            assert abs(b.mean - e.phi[x0]) <= 3 * b.stderr, (m.name, x0)


def test_kernel_agrees_with_reference_engine(two_type):
    """Compiled batches and the pure-Python engine sample the same law."""
    cps = [2.0, 6.0]
    fast = run_batch(two_type, 0, cps, 20_000, seed=2)
    slow = [simulate_tree(two_type, 0, 6.0, cps, RngStream(99, i)) for i in range(6000)]
    for k, t in enumerate(cps):
        p_fast = fast.survival(k).mean()
        p_slow = np.mean([r.survived(t) for r in slow])
        se = np.sqrt(p_fast * (1 - p_fast) / 20_000 + p_slow * (1 - p_slow) / 6000)
        assert abs(p_fast - p_slow) <= 3.5 * se
        n_fast = fast.values([1.0, 0.0], k)
        n_slow = np.array([functional(r.snapshots[k], [1.0, 0.0]) for r in slow])
        se = np.hypot(n_fast.std() / np.sqrt(n_fast.size), n_slow.std() / np.sqrt(n_slow.size))
        assert abs(n_fast.mean() - n_slow.mean()) <= 3.5 * se


def test_python_fallback_batch(two_type):
    class Plain(FiniteTypeModel):
        def batch_chunk(self, *a):
            return None
    m = Plain(two_type.rates, [two_type.offspring_table(i) for i in range(2)])
    res = run_batch(m, 1, [1.0, 3.0], 300, seed=4, chunk=128)
    assert isinstance(res, BatchResult) and res.features.shape == (300, 2, 2)
    rec = simulate_tree(m, 1, 3.0, [1.0, 3.0], RngStream(4, 17))
    assert np.allclose(res.features[17, 1], np.bincount(rec.snapshots[1].states, minlength=2))


def test_determinism_across_workers(three_type):
    a = run_batch(three_type, 2, [1.0, 4.0], 10_000, seed=8, workers=1, chunk=1000)
    b = run_batch(three_type, 2, [1.0, 4.0], 10_000, seed=8, workers=4, chunk=1000)
    assert np.array_equal(a.zeta, b.zeta) and np.array_equal(a.features, b.features)
    c = run_batch(three_type, 2, [1.0, 4.0], 10_000, seed=9, workers=1, chunk=1000)
    assert not np.array_equal(a.zeta, c.zeta)


def test_censoring_consistency(two_type):
    res = run_batch(two_type, 0, [3.0, 7.0], 5000, seed=1)
    for k, t in enumerate([3.0, 7.0]):
        alive_count = res.features[:, k].sum(axis=1) > 0
        assert np.array_equal(alive_count, res.zeta > t)


def test_population_cap():
    sup = FiniteTypeModel([1.0], [[(Fraction(1), [2])]])
    with pytest.raises(PopulationCapError):
        run_batch(sup, 0, [20.0], 4, seed=1, pop_cap=1000)
    with pytest.raises(PopulationCapError):
        simulate_tree(sup, 0, 20.0, [20.0], RngStream(1), pop_cap=1000)


def test_offspring_bound_and_invalid_state(bin_model):
    m = TooMany([1.0], [[(Fraction(1, 2), [0]), (Fraction(1, 2), [2])]])
    with pytest.raises(OffspringBoundError):
        simulate_tree(m, 0, 50.0, [50.0], RngStream(1))
    with pytest.raises(InvalidStateError):
        simulate_tree(Escaping(), 0, 1.0, [1.0], RngStream(1))
    with pytest.raises(InvalidStateError):
        simulate_tree(Escaping(), -3, 1.0, [1.0], RngStream(1))


def test_time_validation(bin_model):
    with pytest.raises(ValueError):
        simulate_tree(bin_model, 0, 1.0, [2.0], RngStream(1))
    with pytest.raises(ValueError):
        run_batch(bin_model, 0, [2.0, 1.0], 10, seed=1)


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=300), st.integers(1, 50))
def test_running_moments_merge(xs, chunk):
    m = reduce_moments(xs, chunk=chunk)
    assert m.n == len(xs)
    assert np.isclose(m.mean, np.mean(xs), atol=1e-9)
    assert np.isclose(m.variance, np.var(xs, ddof=1), rtol=1e-7, atol=1e-7)
    left = RunningMoments.of(xs[: len(xs) // 2]).merge(RunningMoments.of(xs[len(xs) // 2:]))
    assert np.isclose(left.mean, m.mean, atol=1e-9)
