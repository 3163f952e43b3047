"""Generic event-driven simulation of a branching Markov process.

A model is anything implementing :class:`ModelSpec`. Particles are processed
depth first: each one flies (``sample_flight``) until its branch clock rings,
it is absorbed, or the next checkpoint is reached, and on a branch event it
is replaced by a draw from the offspring law. Clocks are memoryless, so
stopping a flight at a checkpoint and restarting it is exact.

``simulate_tree`` is the reference engine and returns full population
snapshots. ``run_batch`` is the Monte Carlo layer: it maps chunks of
trajectory indices onto the model's compiled kernel (or the reference
engine when a model has none) and keeps linear features of every snapshot.
"""

import logging
import os
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import RngStream

log = logging.getLogger(__name__)

DEFAULT_POP_CAP = 10**6
CHUNK = 4096
WORKERS_ENV = "CRITBRANCH_WORKERS"


class PopulationCapError(RuntimeError):
    """A trajectory exceeded the population cap (likely a supercritical model)."""


class InvalidStateError(RuntimeError):
    pass


class OffspringBoundError(RuntimeError):
    pass


class ModelSpec(ABC):
    """Capabilities a model must provide to be simulated.

    States are opaque to the engine. ``sample_flight`` must return
    ``(new_state, elapsed, branched)`` with ``new_state=None`` when the
    particle is absorbed; ``elapsed`` never exceeds ``max_dt``.
    """

    n_max: int

    @abstractmethod
    def gamma(self, state): ...

    @abstractmethod
    def m_scalar(self, state): ...

    @abstractmethod
    def sample_flight(self, state, max_dt, rng): ...

    @abstractmethod
    def sample_offspring(self, state, rng): ...

    def in_state_space(self, state):
        return True

    def offspring_table(self, state):
        raise NotImplementedError(f"{type(self).__name__} has no enumerable offspring law")

    # Monte Carlo hooks. ``features`` maps one particle to a vector so that
    # <f, X> = (sum of features) @ feature_coefficients(f).
    def features(self, state):
        raise NotImplementedError

    def feature_coefficients(self, f):
        raise NotImplementedError

    def batch_chunk(self, x0, checkpoints, t_max, seed, start, count, pop_cap):
        """Compiled fast path; return ``(zeta, features)`` or None."""
        return None


@dataclass
class PopulationSnapshot:
    t: float
    states: list = field(default_factory=list)

    def __len__(self):
        return len(self.states)


@dataclass
class TrajectoryRecord:
    snapshots: list
    extinction_time: float | None  # None means censored: alive at t_max
    t_max: float

    @property
    def censored(self):
        return self.extinction_time is None

    def survived(self, t):
        return self.censored or self.extinction_time > t


def functional(snapshot, f):
    """``<f, X_t>``: sum of ``f`` over the particles of a snapshot.

    ``f`` is a callable or, for integer states, an indexable table.
    """
    if callable(f):
        return float(sum(f(x) for x in snapshot.states))
    return float(sum(f[x] for x in snapshot.states))


def _validate_times(t_max, checkpoints):
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    cps = np.asarray(checkpoints, dtype=float)
    if cps.ndim != 1:
        raise ValueError("checkpoints must be a 1-d sequence")
    if np.any(cps < 0) or np.any(cps > t_max):
        raise ValueError("checkpoints must lie in [0, t_max]")
    if np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be sorted")
    return cps


def simulate_tree(model, x0, t_max, checkpoints, rng, pop_cap=DEFAULT_POP_CAP):
    """Simulate one branching tree exactly and record population snapshots."""
    cps = _validate_times(t_max, checkpoints)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if not model.in_state_space(x0):
        raise InvalidStateError(f"initial state {x0!r} outside the state space")
    snaps = [PopulationSnapshot(float(s)) for s in cps]
    stack = [(x0, 0.0)]
    last_death = 0.0
    censored = False
    while stack:
        state, t = stack.pop()
        p = int(np.searchsorted(cps, t, side="left"))
        while True:
            while p < len(cps) and cps[p] <= t:
                snaps[p].states.append(state)
                if len(snaps[p].states) > pop_cap:
                    raise PopulationCapError(f"more than {pop_cap} particles at t={cps[p]}")
                p += 1
            horizon = cps[p] if p < len(cps) else t_max
            new_state, elapsed, branched = model.sample_flight(state, horizon - t, gen)
            t = t + elapsed
            if new_state is None:
                last_death = max(last_death, t)
                break
            if not model.in_state_space(new_state):
                raise InvalidStateError(f"model produced state {new_state!r} outside E")
            state = new_state
            if branched:
                kids = model.sample_offspring(state, gen)
                if len(kids) > model.n_max:
                    raise OffspringBoundError(f"{len(kids)} offspring exceeds n_max={model.n_max}")
                if not kids:
                    last_death = max(last_death, t)
                for kid in reversed(kids):
                    stack.append((kid, t))
                if len(stack) > pop_cap:
                    raise PopulationCapError(f"more than {pop_cap} pending particles")
                break
            if t >= t_max and p >= len(cps):
                censored = True
                break
    return TrajectoryRecord(snaps, None if censored else last_death, float(t_max))


@dataclass
class RunningMoments:
    """Mean and sum of squared deviations; chunks merge with Chan's update."""

    n: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, x):
        x = np.asarray(x, dtype=float)
        if x.size == 0:
            return cls()
        mu = float(x.mean())
        return cls(int(x.size), mu, float(((x - mu) ** 2).sum()))

    def merge(self, other):
        if other.n == 0:
            return self
        if self.n == 0:
            return RunningMoments(other.n, other.mean, other.m2)
        n = self.n + other.n
        delta = other.mean - self.mean
        mean = self.mean + delta * other.n / n
        m2 = self.m2 + other.m2 + delta * delta * self.n * other.n / n
        return RunningMoments(n, mean, m2)

    @property
    def variance(self):
        return self.m2 / (self.n - 1) if self.n > 1 else 0.0

    @property
    def stderr(self):
        return float(np.sqrt(self.variance / self.n)) if self.n > 1 else 0.0


def reduce_moments(x, chunk=CHUNK):
    """Chunked moments in fixed order, independent of how x was computed."""
    acc = RunningMoments()
    x = np.asarray(x, dtype=float)
    for a in range(0, x.size, chunk):
        acc = acc.merge(RunningMoments.of(x[a:a + chunk]))
    return acc


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass
class BatchResult:
    """Per-trajectory outputs of a batch: extinction times and snapshot features.

    ``zeta[i]`` is ``inf`` when trajectory ``i`` was still alive at ``t_max``.
    ``features[i, k]`` sums the per-particle feature vectors at checkpoint k.
    """

    model: object
    x0: object
    checkpoints: np.ndarray
    t_max: float
    seed: int
    zeta: np.ndarray
    features: np.ndarray

    @property
    def n(self):
        return self.zeta.shape[0]

    def values(self, f, k=0):
        coef = np.asarray(self.model.feature_coefficients(f), dtype=float)
        return self.features[:, k, :] @ coef

    def alive(self, t):
        return self.zeta > t

    def survival(self, k=0):
        return self.alive(self.checkpoints[k])


def _python_chunk(model, x0, checkpoints, t_max, seed, start, count, pop_cap):
    zeta = np.empty(count)
    feats = None
    for j in range(count):
        rec = simulate_tree(model, x0, t_max, checkpoints, RngStream(seed, start + j), pop_cap)
        rows = []
        for snap in rec.snapshots:
            if snap.states:
                rows.append(np.sum([model.features(s) for s in snap.states], axis=0))
            else:
                rows.append(None)
        if feats is None:
            p = len(model.features(x0))
            feats = np.zeros((count, len(checkpoints), p))
        for k, r in enumerate(rows):
            if r is not None:
                feats[j, k] = r
        zeta[j] = np.inf if rec.censored else rec.extinction_time
    return zeta, feats


def run_batch(model, x0, checkpoints, n, seed, t_max=None, workers=None,
              pop_cap=DEFAULT_POP_CAP, chunk=CHUNK):
    """Simulate trajectories ``0..n-1`` of stream family ``seed``.

    Work is split into fixed chunks of trajectory indices and results are
    reassembled in index order, so the output is identical for any worker
    count.
    """
    if n < 1:
        raise ValueError("need at least one trajectory")
    cps = np.atleast_1d(np.asarray(checkpoints, dtype=float))
    if t_max is None:
        t_max = float(cps.max()) if cps.size and cps.max() > 0 else 1e-12
    cps = _validate_times(t_max, cps)
    workers = workers or default_workers()
    starts = list(range(0, n, chunk))

    def job(a):
        count = min(chunk, n - a)
        out = model.batch_chunk(x0, cps, float(t_max), int(seed), a, count, pop_cap)
        if out is None:
            out = _python_chunk(model, x0, cps, float(t_max), int(seed), a, count, pop_cap)
        return out

    if workers == 1 or len(starts) == 1:
        parts = [job(a) for a in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    zeta = np.concatenate([p[0] for p in parts])
    feats = np.concatenate([p[1] for p in parts], axis=0)
    return BatchResult(model, x0, cps, float(t_max), int(seed), zeta, feats)


@dataclass
class BatchEstimate:
    mean: float
    stderr: float
    survival: float
    survival_stderr: float
    n: int


def batch_estimate(model, x0, t, f, n_trajectories, seed, workers=None, pop_cap=DEFAULT_POP_CAP):
    """Mean and standard error of ``<f, X_t>`` and of the survival indicator."""
    if n_trajectories < 2:
        raise ValueError("n_trajectories must be at least 2")
    res = run_batch(model, x0, [t], n_trajectories, seed, t_max=max(t, 1e-12),
                    workers=workers, pop_cap=pop_cap)
    vals = reduce_moments(res.values(f, 0))
    surv = reduce_moments(res.survival(0).astype(float))
    return BatchEstimate(vals.mean, vals.stderr, surv.mean, surv.stderr, res.n)
