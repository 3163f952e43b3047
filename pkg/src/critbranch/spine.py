"""The process under the phi-transformed measure, built around a spine.

Under P^phi one particle (the spine) is immortal. For a finite-type model
at criticality the spine of type i branches at rate

    rho_i = gamma_i m[phi](i) / phi_i,     m[phi](i) = E_i <phi, Z>,

draws its offspring from the table reweighted by <phi, Z>/m[phi](i), and
passes the spine to a child of type j with probability phi_j/<phi, Z>. The
remaining children start independent ordinary subtrees. The induced type
process of the spine jumps i -> j at rate gamma_i M_ij phi_j / phi_i, i.e.
its generator is diag(1/phi) A diag(phi).

Only models with an exact eigenfunction are supported: a grid estimate of
phi for a neutron model is not harmonic, so the transform would be biased.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad
from scipy.linalg import expm

from . import _finite_kernels as K
from ._rng import RngStream
from .core import CHUNK, PopulationCapError, default_workers, reduce_moments, simulate_tree
from .finite import FiniteTypeModel

LAMBDA_TOL = 1e-8
MAX_MOMENT_ORDER = 4
STALL_TRIES = 100_000


class NonCriticalError(ValueError):
    pass


class ZeroTotalError(RuntimeError):
    pass


class ZeroMassError(ValueError):
    pass


class RejectionStallError(RuntimeError):
    pass


def _check(model, eigen):
    if not isinstance(model, FiniteTypeModel) or eigen.grid is not None:
        raise NotImplementedError("spine simulation needs a finite-type model with an exact eigen triple")
    if abs(eigen.lam) > LAMBDA_TOL:
        raise NonCriticalError(f"spine construction needs lambda = 0, got {eigen.lam:.3g}")


def spine_generator(model, eigen):
    """Generator of the spine's type process, diag(1/phi) (A - lambda) diag(phi)."""
    phi = np.asarray(eigen.phi)
    A = np.asarray(model.generator) - eigen.lam * np.eye(model.d)
    return A * phi[None, :] / phi[:, None]


def spine_jump_rates(model, eigen):
    Q = spine_generator(model, eigen)
    R = Q.copy()
    np.fill_diagonal(R, 0.0)
    return R


@dataclass
class ImmigrationEvent:
    time: float
    spine_state: int  # spine type just before the branch event
    children: list  # non-spine children (types)
    contribution: float  # their subtrees' <phi, X> at the final time


@dataclass
class SpinePath:
    """Piecewise-constant spine: state ``states[k]`` on ``[times[k], times[k+1])``."""

    times: np.ndarray  # breakpoints, starts at 0 and ends at the horizon
    states: np.ndarray
    rho: np.ndarray  # branch rate on each segment

    def state_at(self, s):
        k = int(np.searchsorted(self.times, s, side="right")) - 1
        return int(self.states[min(max(k, 0), len(self.states) - 1)])


@dataclass
class SpineRecord:
    t: float
    path: SpinePath
    events: list = field(default_factory=list)
    checkpoints: np.ndarray = None
    spine_at: np.ndarray = None
    totals: np.ndarray = None  # <phi, X> at each checkpoint
    phi_end: float = 0.0  # phi at the spine's final state

    @property
    def total(self):
        return float(self.phi_end + sum(e.contribution for e in self.events))

    @property
    def immigration_times(self):
        return [e.time for e in self.events]


def simulate_spine(model, eigen, x0, t, checkpoints=None, rng=None):
    """One tree under P^phi with an explicit record of every immigration.

    This is the reference path: subtrees are simulated by
    :func:`simulate_tree`, each on a substream indexed by its immigration
    ordinal. ``rng`` is an :class:`RngStream`.
    """
    _check(model, eigen)
    if t < 0:
        raise ValueError("t must be non-negative")
    rng = RngStream(0) if rng is None else rng
    gen = rng.generator()
    phi = np.asarray(eigen.phi)
    cps = np.asarray([t] if checkpoints is None else checkpoints, dtype=float)
    if np.any(cps < 0) or np.any(cps > t) or np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be sorted and lie in [0, t]")
    sb = model.size_biased_table(phi)
    s = int(x0)
    now = 0.0
    times, states = [0.0], [s]
    events = []
    totals = np.zeros(len(cps))
    ordinal = 0
    while True:
        tau = gen.exponential(1.0 / sb.rho[s]) if sb.rho[s] > 0 else np.inf
        if now + tau > t:
            break
        now += tau
        a, b = sb.start[s], sb.start[s + 1]
        o = min(a + int(np.searchsorted(sb.cdf[a:b], gen.random() * sb.cdf[b - 1], side="right")), b - 1)
        cnt = sb.counts[o]
        kids = [j for j in range(model.d) for _ in range(cnt[j])]
        w = phi[kids]
        pick = int(gen.choice(len(kids), p=w / w.sum()))
        new_s = kids.pop(pick)
        contribution = 0.0
        for kid in kids:
            sub_cps = cps[cps >= now] - now
            horizon = t - now
            if horizon <= 0:
                contribution += phi[kid]
                totals[cps >= now] += phi[kid]
                continue
            sub = simulate_tree(model, kid, horizon, np.append(sub_cps, horizon), rng.substream(ordinal))
            ordinal += 1
            vals = [sum(phi[x] for x in snap.states) for snap in sub.snapshots]
            totals[cps >= now] += vals[:-1]
            contribution += vals[-1]
        events.append(ImmigrationEvent(now, s, kids, float(contribution)))
        s = new_s
        times.append(now)
        states.append(s)
    times.append(float(t))
    st = np.asarray(states, dtype=np.int64)
    path = SpinePath(np.asarray(times), st, sb.rho[st])
    spine_at = np.array([path.state_at(c) for c in cps], dtype=np.int64)
    totals += phi[spine_at]
    return SpineRecord(float(t), path, events, cps, spine_at, totals, float(phi[path.state_at(t)]))


@dataclass
class SpineBatch:
    checkpoints: np.ndarray
    spine_at: np.ndarray  # (n, c)
    counts: np.ndarray  # (n, c, d) ordinary particles
    n_branch: np.ndarray
    totals: np.ndarray  # (n, c) <phi, X>


def run_spine_batch(model, eigen, x0, checkpoints, n, seed, workers=None, pop_cap=10**6, chunk=CHUNK):
    """Compiled spine simulation of trajectories ``0..n-1`` of stream family ``seed``."""
    _check(model, eigen)
    cps = np.atleast_1d(np.asarray(checkpoints, dtype=float))
    if np.any(cps < 0) or np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be sorted and non-negative")
    t_max = float(cps.max())
    phi = np.asarray(eigen.phi, dtype=float)
    sb = model.size_biased_table(phi)
    workers = workers or default_workers()

    def job(a):
        out = K.spine_counts(model.rates, model.start, model.cdf, model.counts, sb.rho, sb.start,
                             sb.cdf, sb.counts, phi, int(x0), cps, t_max, int(seed), a,
                             min(chunk, n - a), pop_cap)
        if out[3] == K.ERR_POP_CAP:
            raise PopulationCapError(f"spine trajectory exceeded {pop_cap} particles")
        return out

    starts = list(range(0, n, chunk))
    if workers == 1 or len(starts) == 1:
        parts = [job(a) for a in starts]
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(job, starts))
    spine_at = np.concatenate([p[0] for p in parts])
    counts = np.concatenate([p[1] for p in parts])
    n_branch = np.concatenate([p[2] for p in parts])
    totals = phi[spine_at] + counts @ phi
    return SpineBatch(cps, spine_at, counts, n_branch, totals)


def spine_moment_estimate(model, eigen, x0, t, j, n, seed, workers=None):
    """Estimate of E^phi[<phi, X_t>^j] / t^j and its standard error."""
    if j == 0:
        return 1.0, 0.0
    if not 1 <= j <= MAX_MOMENT_ORDER:
        raise ValueError(f"moment order must be in 0..{MAX_MOMENT_ORDER}")
    if t <= 0:
        raise ValueError("t must be positive")
    b = run_spine_batch(model, eigen, x0, [t], n, seed, workers)
    mom = reduce_moments((b.totals[:, 0] / t) ** j)
    return mom.mean, mom.stderr


def survival_via_spine(model, eigen, x0, t, n, seed, workers=None):
    """P(zeta > t) = phi(x0) E^phi[1/<phi, X_t>]; returns (estimate, stderr)."""
    if t == 0:
        return 1.0, 0.0
    est, se = survival_via_spine_grid(model, eigen, x0, [t], n, seed, workers)
    return float(est[0]), float(se[0])


def survival_via_spine_grid(model, eigen, x0, t_grid, n, seed, workers=None):
    t_grid = np.asarray(t_grid, dtype=float)
    est = np.ones(len(t_grid))
    se = np.zeros(len(t_grid))
    pos = t_grid > 0
    if not pos.any():
        return est, se
    b = run_spine_batch(model, eigen, x0, t_grid[pos], n, seed, workers)
    if np.any(b.totals <= 0):
        raise ZeroTotalError("a spine trajectory has <phi, X_t> <= 0")
    ratio = eigen.phi[int(x0)] / b.totals
    for k, idx in enumerate(np.flatnonzero(pos)):
        m = reduce_moments(ratio[:, k])
        est[idx], se[idx] = m.mean, m.stderr
    return est, se


def sample_fission_time(path, rng, size=None):
    """Draw from the density rho(Y_s) / int_0^t rho(Y_u) du along a spine path."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    times = np.asarray(path.times, dtype=float)
    rho = np.asarray(path.rho, dtype=float)
    if len(rho) != len(times) - 1 or np.any(rho < 0):
        raise ValueError("path needs one non-negative rate per segment")
    cum = np.concatenate([[0.0], np.cumsum(rho * np.diff(times))])
    if not cum[-1] > 0:
        raise ZeroMassError("the path's cumulative branch rate is zero")
    u = gen.random(size) * cum[-1]
    k = np.clip(np.searchsorted(cum, u, side="right") - 1, 0, len(rho) - 1)
    # skip zero-rate segments: searchsorted already lands on a segment with mass
    out = times[k] + (u - cum[k]) / np.where(rho[k] > 0, rho[k], 1.0)
    return float(out) if size is None else out


def sample_size_biased(model, state, phi_fn, phi_max, rng, max_tries=STALL_TRIES):
    """Offspring drawn from the law reweighted by <phi, Z>, by rejection.

    Works for any model with a sampler; the envelope is n_max * phi_max.
    """
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    env = model.n_max * phi_max
    for _ in range(max_tries):
        kids = model.sample_offspring(state, gen)
        w = sum(phi_fn(k) for k in kids)
        if w > env * (1 + 1e-12):
            raise ValueError("phi exceeds the declared envelope")
        if gen.random() * env < w:
            return kids
    raise RejectionStallError(f"no acceptance in {max_tries} proposals (acceptance below {1 / max_tries:g})")


@dataclass
class ErgodicResult:
    estimate: float
    stderr: float
    target: float
    n: int


def ergodic_average_check(model, eigen, F_list, t, n, seed, x0=0, n_bins=256, workers=None):
    """E^phi[prod_i int_0^1 F_i(Y_ut, u) du] against prod_i int_0^1 <phi phi_tilde, F_i(., u)> du.

    Only the spine's type process is simulated. Occupation times are kept
    per bin of u, so u-dependence of F is resolved at the bin midpoints.
    """
    _check(model, eigen)
    if t <= 0:
        raise ValueError("t must be positive")
    R = spine_jump_rates(model, eigen)
    workers = workers or default_workers()
    mids = (np.arange(n_bins) + 0.5) / n_bins
    tables = [np.array([[F(i, u) for i in range(model.d)] for u in mids], dtype=float) for F in F_list]

    def job(a):
        return K.spine_motion_occupation(R, int(x0), float(t), n_bins, int(seed), a, min(CHUNK, n - a))

    starts = list(range(0, n, CHUNK))
    if workers == 1 or len(starts) == 1:
        occ = np.concatenate([job(a) for a in starts])
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            occ = np.concatenate(list(pool.map(job, starts)))
    occ /= t
    prod = np.ones(occ.shape[0])
    for tab in tables:
        prod *= np.einsum("nbd,bd->n", occ, tab)
    mom = reduce_moments(prod)
    w = np.asarray(eigen.phi) * np.asarray(eigen.phi_tilde)
    target = 1.0
    for F in F_list:
        val, _ = quad(lambda u: sum(w[i] * F(i, u) for i in range(model.d)), 0.0, 1.0, epsabs=1e-12)
        target *= val
    return ErgodicResult(mom.mean, mom.stderr, float(target), occ.shape[0])


def ergodic_finite_t(model, eigen, f_list, t, x0=0):
    """Exact E^phi[prod_i (1/t) int_0^t f_i(Y_s) ds] for one or two u-independent factors.

    Uses block matrix exponentials: the (1, k+1) block of
    exp(t [[Q, D_1, 0], [0, Q, D_2], [0, 0, Q]]) is the ordered integral
    int_{s<r} e^{sQ} D_1 e^{(r-s)Q} D_2 e^{(t-r)Q}.
    """
    _check(model, eigen)
    if not 1 <= len(f_list) <= 2:
        raise ValueError("one or two factors")
    Q = spine_generator(model, eigen)
    d = model.d
    D = [np.diag(np.asarray(f, dtype=float)) for f in f_list]
    one = np.ones(d)

    def ordered(Da, Db=None):
        k = 2 if Db is None else 3
        B = np.zeros((k * d, k * d))
        for b in range(k):
            B[b * d:(b + 1) * d, b * d:(b + 1) * d] = Q
        B[:d, d:2 * d] = Da
        if Db is not None:
            B[d:2 * d, 2 * d:] = Db
        E = expm(t * B)
        return E[x0, (k - 1) * d:] @ one

    if len(D) == 1:
        return float(ordered(D[0]) / t)
    return float((ordered(D[0], D[1]) + ordered(D[1], D[0])) / t**2)
