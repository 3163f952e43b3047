"""Survival curves, conditioned (Yaglom) statistics, moment tables and ODE asymptotics.

Conditioning on survival filters direct trajectories; the spine is only
used for unconditioned moment identities. Every table can be written as
CSV with columns ``param, estimate, stderr, target, rel_err, n_effective``.
"""

import io as _io
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import reduce_moments, run_batch
from .eigen import exact_eigen
from .finite import FiniteTypeModel, nonlinear_ode
from .spine import run_spine_batch, survival_via_spine_grid

JACKKNIFE_BLOCK = 1000
MIN_SURVIVORS = 100
WARN_SURVIVORS = 500
ALLOWANCE_C = 2.0  # finite-t slack c/t for asymptotic assertions
CSV_COLUMNS = ("param", "estimate", "stderr", "target", "rel_err", "n_effective")


class TooFewSurvivorsError(RuntimeError):
    pass


class FewSurvivorsWarning(UserWarning):
    pass


def allowance(t, c=ALLOWANCE_C):
    """O(1/t) slack granted to an asymptotic claim at finite t."""
    return c / float(t)


def _fmt(x):
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


@dataclass
class EstimateTable:
    name: str
    params: list
    estimates: np.ndarray
    stderrs: np.ndarray
    targets: np.ndarray
    n_effective: np.ndarray
    extra: dict = field(default_factory=dict)  # further per-row columns
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.params)
        self.estimates = np.asarray(self.estimates, dtype=float).reshape(k)
        self.stderrs = np.asarray(self.stderrs, dtype=float).reshape(k)
        self.targets = np.asarray(self.targets, dtype=float).reshape(k)
        self.n_effective = np.asarray(self.n_effective, dtype=np.int64).reshape(k)

    def __len__(self):
        return len(self.params)

    @property
    def rel_err(self):
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.targets != 0, self.estimates / self.targets - 1.0, np.nan)

    def row(self, param):
        i = self.params.index(param)
        return {"param": param, "estimate": float(self.estimates[i]), "stderr": float(self.stderrs[i]),
                "target": float(self.targets[i]), "rel_err": float(self.rel_err[i]),
                "n_effective": int(self.n_effective[i]),
                **{k: v[i] for k, v in self.extra.items()}}

    def csv_text(self):
        cols = list(CSV_COLUMNS) + list(self.extra)
        out = _io.StringIO()
        out.write(",".join(cols) + "\n")
        rel = self.rel_err
        for i, p in enumerate(self.params):
            vals = [p, self.estimates[i], self.stderrs[i], self.targets[i], rel[i], self.n_effective[i]]
            vals += [self.extra[k][i] for k in self.extra]
            out.write(",".join(_fmt(v) for v in vals) + "\n")
        return out.getvalue()

    def to_csv(self, path):
        with open(path, "w", newline="\n", encoding="ascii") as fh:
            fh.write(self.csv_text())

    def lines(self):
        rel = self.rel_err
        for i, p in enumerate(self.params):
            yield (f"{self.name} {_fmt(p)}: estimate {self.estimates[i]:.6g} +- {self.stderrs[i]:.3g}"
                   f"  target {self.targets[i]:.6g}  rel_err {rel[i]:+.4f}  n_eff {self.n_effective[i]}")


@dataclass
class SurvivalCurve:
    times: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    n: int
    method: str
    target: float = float("nan")  # 2 phi(x0) / Sigma

    @property
    def scaled(self):
        return self.times * self.estimate

    @property
    def scaled_stderr(self):
        return self.times * self.stderr

    def table(self):
        return EstimateTable(f"survival[{self.method}] t*p", [float(t) for t in self.times], self.scaled,
                             self.scaled_stderr, np.full(len(self.times), self.target),
                             np.full(len(self.times), self.n),
                             extra={"p": [float(x) for x in self.estimate]})


def _eigen_for(model, eigen):
    if eigen is None and isinstance(model, FiniteTypeModel):
        return exact_eigen(model)
    return eigen


def _phi_at(model, eigen, x0):
    if eigen is None:
        return float("nan")
    if isinstance(model, FiniteTypeModel):
        return float(eigen.phi[int(x0)])
    return eigen.phi_at(x0)


def _phi_tilde_pair(model, eigen, f):
    """<phi_tilde, f> where it is available exactly."""
    if eigen is None:
        return float("nan")
    if isinstance(model, FiniteTypeModel):
        coef = np.asarray(model.feature_coefficients(f), dtype=float)
        return float(np.asarray(eigen.phi_tilde) @ coef)
    if np.isscalar(f) and not isinstance(f, str):
        return float(f)
    if f == "one":
        return 1.0
    return float("nan")


def survival_curve(model, x0, t_grid, n, seed, method="direct", eigen=None, workers=None):
    """p(t) = P(zeta > t) on a grid, by direct simulation or through the spine."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or np.any(t_grid < 0) or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be increasing and non-negative")
    if method == "direct":
        eigen = _eigen_for(model, eigen)
        pos = t_grid[t_grid > 0]
        est = np.ones(len(t_grid))
        se = np.zeros(len(t_grid))
        if pos.size:
            res = run_batch(model, x0, pos, n, seed, workers=workers)
            off = len(t_grid) - pos.size
            for k, t in enumerate(pos):
                m = reduce_moments(res.alive(t).astype(float))
                est[off + k], se[off + k] = m.mean, m.stderr
    elif method == "spine":
        if eigen is None:
            raise ValueError("the spine method needs an eigen triple")
        est, se = survival_via_spine_grid(model, eigen, x0, t_grid, n, seed, workers)
    else:
        raise ValueError(f"unknown method {method!r}")
    target = 2.0 * _phi_at(model, eigen, x0) / eigen.sigma if eigen is not None else float("nan")
    return SurvivalCurve(t_grid, est, se, int(n), method, target)


@dataclass
class ConditionedSample:
    """<f, X_t>/t for the surviving trajectories, with their trajectory indices."""

    t: float
    values: np.ndarray
    index: np.ndarray
    n: int

    @property
    def survivors(self):
        return self.values.size


def conditioned_sample(model, x0, f, t, n, seed, workers=None):
    if not t > 0:
        raise ValueError("t must be positive")
    res = run_batch(model, x0, [t], n, seed, workers=workers)
    alive = res.alive(t)
    idx = np.flatnonzero(alive)
    vals = res.values(f)[idx] / t
    s = idx.size
    if s < MIN_SURVIVORS:
        raise TooFewSurvivorsError(f"only {s} of {n} trajectories survive to t={t:g} (need {MIN_SURVIVORS})")
    if s < WARN_SURVIVORS:
        warnings.warn(f"only {s} survivors at t={t:g}; conditioned estimates are noisy", FewSurvivorsWarning,
                      stacklevel=2)
    return ConditionedSample(float(t), vals, idx, int(n))


def jackknife_ratio(g, sample, block=JACKKNIFE_BLOCK):
    """Conditioned mean of g over survivors with a block jackknife SE.

    Blocks are consecutive runs of ``block`` trajectory indices, survivors
    or not, so the random number of survivors per block is accounted for.
    """
    g = np.asarray(g, dtype=float)
    nb = max(2, math.ceil(sample.n / block))
    b = np.minimum(sample.index // block, nb - 1)
    num = np.bincount(b, weights=g, minlength=nb)
    den = np.bincount(b, minlength=nb).astype(float)
    S, C = num.sum(), den.sum()
    est = S / C
    keep = C - den > 0
    loo = (S - num[keep]) / (C - den[keep])
    m = keep.sum()
    se = math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)) if m > 1 else float("nan")
    return float(est), float(se)


def yaglom_laplace(model, x0, f, t, theta_grid, n, seed, eigen=None, workers=None):
    """E[exp(-theta <f, X_t>/t) | zeta > t] against 1/(1 + <phi_tilde, f> Sigma theta / 2)."""
    eigen = _eigen_for(model, eigen)
    s = conditioned_sample(model, x0, f, t, n, seed, workers)
    c = _phi_tilde_pair(model, eigen, f) * (eigen.sigma if eigen is not None else float("nan"))
    thetas = [float(th) for th in theta_grid]
    if any(th < 0 for th in thetas):
        raise ValueError("theta must be non-negative")
    est, se, tgt = [], [], []
    for th in thetas:
        e, r = jackknife_ratio(np.exp(-th * s.values), s)
        if th == 0:
            e, r = 1.0, 0.0
        est.append(e)
        se.append(r)
        tgt.append(1.0 / (1.0 + c * th / 2.0))
    return EstimateTable(f"yaglom t={_fmt(t)}", thetas, est, se, tgt, [s.survivors] * len(thetas),
                         meta={"n": int(n), "seed": int(seed), "t": float(t), "survivors": s.survivors})


def conditional_moments(model, x0, f, t, k_max, n, seed, eigen=None, workers=None):
    """E[(<f, X_t>/t)^k | zeta > t] for k = 0..k_max against k! (<phi_tilde, f> Sigma / 2)^k."""
    if not 0 <= k_max <= 3:
        raise ValueError("k_max must be in 0..3")
    eigen = _eigen_for(model, eigen)
    s = conditioned_sample(model, x0, f, t, n, seed, workers)
    mean = _phi_tilde_pair(model, eigen, f) * (eigen.sigma if eigen is not None else float("nan")) / 2.0
    ks = list(range(k_max + 1))
    est, se, tgt = [1.0], [0.0], [1.0]
    for k in ks[1:]:
        e, r = jackknife_ratio(s.values**k, s)
        est.append(e)
        se.append(r)
        tgt.append(math.factorial(k) * mean**k)
    return EstimateTable(f"conditioned moments t={_fmt(t)}", ks, est, se, tgt, [s.survivors] * len(ks),
                         meta={"n": int(n), "seed": int(seed), "t": float(t), "survivors": s.survivors})


def moment_table(model, eigen, x0, t_grid, j_list, n, seed, workers=None):
    """Spine estimates of E^phi[<phi, X_t>^j] / t^j against (j+1)! (Sigma/2)^j.

    One batch of spine trees serves every (j, t); the ``ratio`` column is
    estimate / target.
    """
    t_grid = [float(t) for t in t_grid]
    if any(t <= 0 for t in t_grid) or sorted(t_grid) != t_grid:
        raise ValueError("t_grid must be increasing and positive")
    if any(j not in (1, 2, 3) for j in j_list):
        raise ValueError("moment orders must be in {1, 2, 3}")
    b = run_spine_batch(model, eigen, x0, t_grid, n, seed, workers)
    params, est, se, tgt = [], [], [], []
    for j in j_list:
        for k, t in enumerate(t_grid):
            m = reduce_moments((b.totals[:, k] / t) ** j)
            params.append(f"j={j};t={_fmt(t)}")
            est.append(m.mean)
            se.append(m.stderr)
            tgt.append(math.factorial(j + 1) * (eigen.sigma / 2.0) ** j)
    ratio = [e / g for e, g in zip(est, tgt)]
    return EstimateTable("spine moments", params, est, se, tgt, [n] * len(params), extra={"ratio": ratio},
                         meta={"n": int(n), "seed": int(seed)})


@dataclass
class OdeAsymptotics:
    times: np.ndarray
    a: np.ndarray  # <phi_tilde, u_t>
    scaled: np.ndarray  # a(t) Sigma t / 2
    deviation: np.ndarray  # sup_i |u_t(i)/phi_i - a(t)| t^2
    u: np.ndarray

    def table(self):
        n = len(self.times)
        return EstimateTable("ode a(t)*Sigma*t/2", [float(t) for t in self.times], self.scaled, np.zeros(n),
                             np.ones(n), np.zeros(n),
                             extra={"a": [float(x) for x in self.a],
                                    "deviation_t2": [float(x) for x in self.deviation]})


def ode_asymptotics(model, eigen, t_max, times=None, dt=None):
    """a(t) = <phi_tilde, u_t> from the RK4 survival equation and its 2/(Sigma t) rate."""
    if not isinstance(model, FiniteTypeModel):
        raise TypeError("ode_asymptotics needs a FiniteTypeModel")
    sol = nonlinear_ode(model, t_max, dt=dt, eigen=eigen)
    if times is not None:
        want = np.asarray(times, dtype=float)
        idx = np.clip(np.searchsorted(sol.times, want - 1e-9), 0, len(sol.times) - 1)
        if np.any(np.abs(sol.times[idx] - want) > 1e-6):
            raise ValueError("requested times are not on the recording grid (multiples of 0.1 by default)")
    else:
        idx = np.arange(len(sol.times))
    t = sol.times[idx] if times is None else np.asarray(times, dtype=float)
    a = sol.a[idx]
    u = sol.u[idx]
    dev = np.max(np.abs(u / np.asarray(eigen.phi)[None, :] - a[:, None]), axis=1) * t**2
    return OdeAsymptotics(t, a, a * eigen.sigma * t / 2.0, dev, u)
