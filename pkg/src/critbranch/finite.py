"""Finite-type continuous-time Galton-Watson models.

Particles do not move; a type-i particle waits an Exponential(gamma_i) time
and is replaced by an outcome drawn from an explicit table of
``(probability, children per type)`` rows. Because the law is an explicit
table, the mean semigroup, the pair functional V, the operator G, the
many-to-two formula and the survival ODE are all computed exactly (up to
floating point) and serve as oracles for the Monte Carlo layer.

Types are 0-based here.
"""

from dataclasses import dataclass
from fractions import Fraction
from math import comb, floor, ceil

import numpy as np
from scipy.linalg import expm

from . import _finite_kernels as K
from .core import ModelSpec, PopulationCapError

MAX_TYPES = 64
PROB_TOL = 1e-12


class ModelValidationError(ValueError):
    pass


class QuadratureError(RuntimeError):
    pass


class StepSizeError(ValueError):
    pass


class FiniteTypeModel(ModelSpec):
    """``rates[i]`` is gamma_i; ``outcomes[i]`` lists ``(p, counts)`` rows for type i."""

    def __init__(self, rates, outcomes, name="finite"):
        rates = np.asarray(rates, dtype=float)
        d = rates.shape[0]
        if d < 1 or d > MAX_TYPES:
            raise ModelValidationError(f"number of types must be in 1..{MAX_TYPES}, got {d}")
        if len(outcomes) != d:
            raise ModelValidationError(f"expected offspring tables for {d} types, got {len(outcomes)}")
        if not np.all(np.isfinite(rates)) or np.any(rates <= 0):
            raise ModelValidationError("rates must be positive and finite")
        probs, rows, start = [], [], [0]
        for i, table in enumerate(outcomes):
            if not table:
                raise ModelValidationError(f"type {i + 1} has an empty offspring table")
            tot = Fraction(0) if all(isinstance(p, (int, Fraction)) for p, _ in table) else 0.0
            merged = {}
            for p, cnt in table:
                cnt = tuple(int(c) for c in cnt)
                if len(cnt) != d or any(c < 0 for c in cnt):
                    raise ModelValidationError(f"type {i + 1}: bad offspring counts {cnt}")
                if p < 0:
                    raise ModelValidationError(f"type {i + 1}: negative probability {p}")
                tot += p
                merged[cnt] = merged.get(cnt, 0) + p
            bad = tot != 1 if isinstance(tot, Fraction) else abs(tot - 1.0) > PROB_TOL
            if bad:
                raise ModelValidationError(f"type {i + 1}: probabilities sum to {tot}, not 1")
            for cnt, p in sorted(merged.items()):
                if p > 0:
                    probs.append(float(p))
                    rows.append(cnt)
            start.append(len(probs))
        self.name = name
        self.d = d
        self.rates = rates
        self.probs = np.asarray(probs)
        self.counts = np.asarray(rows, dtype=np.int64).reshape(-1, d)
        self.start = np.asarray(start, dtype=np.int64)
        self.cdf = np.empty_like(self.probs)
        for i in range(d):
            a, b = self.start[i], self.start[i + 1]
            self.cdf[a:b] = np.cumsum(self.probs[a:b])
        self.n_max = int(self.counts.sum(axis=1).max())
        self.mean_matrix = np.zeros((d, d))
        for i in range(d):
            a, b = self.start[i], self.start[i + 1]
            self.mean_matrix[i] = self.probs[a:b] @ self.counts[a:b]
        self.generator = self.rates[:, None] * (self.mean_matrix - np.eye(d))
        for arr in (self.rates, self.probs, self.counts, self.start, self.cdf,
                    self.mean_matrix, self.generator):
            arr.setflags(write=False)

    def __repr__(self):
        return f"FiniteTypeModel({self.name!r}, d={self.d})"

    # -- ModelSpec -----------------------------------------------------
    def gamma(self, state):
        return float(self.rates[state])

    def m_scalar(self, state):
        return float(self.mean_matrix[state].sum())

    def in_state_space(self, state):
        return isinstance(state, (int, np.integer)) and 0 <= state < self.d

    def sample_flight(self, state, max_dt, rng):
        tau = rng.exponential(1.0 / self.rates[state])
        if tau < max_dt:
            return state, tau, True
        return state, max_dt, False

    def sample_offspring(self, state, rng):
        a, b = self.start[state], self.start[state + 1]
        o = a + int(np.searchsorted(self.cdf[a:b], rng.random() * self.cdf[b - 1], side="right"))
        o = min(o, b - 1)
        return [j for j in range(self.d) for _ in range(self.counts[o, j])]

    def offspring_table(self, state):
        a, b = self.start[state], self.start[state + 1]
        return [(float(self.probs[o]), tuple(int(c) for c in self.counts[o])) for o in range(a, b)]

    def features(self, state):
        e = np.zeros(self.d)
        e[state] = 1.0
        return e

    def feature_coefficients(self, f):
        if callable(f):
            return np.array([f(i) for i in range(self.d)], dtype=float)
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return np.full(self.d, float(f))
        if f.shape != (self.d,):
            raise ValueError(f"f must have length {self.d}")
        return f

    def batch_chunk(self, x0, checkpoints, t_max, seed, start, count, pop_cap):
        zeta, feats, err = K.forward_counts(self.rates, self.start, self.cdf, self.counts, int(x0),
                                            checkpoints, t_max, seed, start, count, pop_cap)
        if err == K.ERR_POP_CAP:
            raise PopulationCapError(f"population exceeded {pop_cap} in chunk starting at {start}")
        return zeta, feats

    # -- exact functionals -------------------------------------------
    def pair_functional(self, f, g=None):
        """V[f, g](i) = E_i[sum over ordered pairs k != l of f(x_k) g(x_l)], as a vector."""
        f = self.feature_coefficients(f)
        g = f if g is None else self.feature_coefficients(g)
        cf = self.counts @ f
        cg = self.counts @ g
        diag = self.counts @ (f * g)
        per = self.probs * (cf * cg - diag)
        return np.add.reduceat(per, self.start[:-1])

    def g_operator(self, h):
        """G[h](i) = gamma_i E_i[1 - prod(1 - h(x_j)) - sum h(x_j)]."""
        h = self.feature_coefficients(h)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(self.counts > 0, self.counts * np.log1p(-h)[None, :], 0.0).sum(axis=1)
        per = self.probs * (-np.expm1(lg) - self.counts @ h)
        return self.rates * np.add.reduceat(per, self.start[:-1])

    def with_yield_multiplier(self, kappa):
        """Each child is replaced by floor(kappa) or ceil(kappa) copies, mean kappa."""
        kappa = float(kappa)
        if not kappa > 0:
            raise ValueError("yield multiplier must be positive")
        lo, hi = floor(kappa), ceil(kappa)
        frac = kappa - lo
        tables = []
        for i in range(self.d):
            new = {}
            for p, cnt in self.offspring_table(i):
                # per type, the number of children boosted to ``hi`` copies is binomial
                partial = {(): p}
                for cj in cnt:
                    nxt = {}
                    for key, q in partial.items():
                        for up in range(cj + 1):
                            w = comb(cj, up) * frac**up * (1 - frac) ** (cj - up) if hi > lo else float(up == 0)
                            if w > 0:
                                nk = key + (cj * lo + up * (hi - lo),)
                                nxt[nk] = nxt.get(nk, 0.0) + q * w
                    partial = nxt
                for key, q in partial.items():
                    new[key] = new.get(key, 0.0) + q
            tot = sum(new.values())
            tables.append([(q / tot, key) for key, q in sorted(new.items())])
        return FiniteTypeModel(self.rates, tables, name=f"{self.name}*{kappa:.12g}")

    def size_biased_table(self, phi):
        """Spine branch rate rho and the offspring table reweighted by <phi, Z>/m[phi]."""
        phi = np.asarray(phi, dtype=float)
        w = self.probs * (self.counts @ phi)
        m_phi = np.add.reduceat(w, self.start[:-1])
        rho = self.rates * m_phi / phi
        keep = w > 0
        sb_probs, sb_counts, sb_start = [], [], [0]
        for i in range(self.d):
            a, b = self.start[i], self.start[i + 1]
            for o in range(a, b):
                if keep[o]:
                    sb_probs.append(w[o] / m_phi[i])
                    sb_counts.append(self.counts[o])
            sb_start.append(len(sb_probs))
        sb_probs = np.asarray(sb_probs)
        sb_cdf = np.empty_like(sb_probs)
        for i in range(self.d):
            a, b = sb_start[i], sb_start[i + 1]
            sb_cdf[a:b] = np.cumsum(sb_probs[a:b])
        return SizeBiasedTable(rho, m_phi, sb_probs, sb_cdf,
                               np.asarray(sb_counts, dtype=np.int64).reshape(-1, self.d),
                               np.asarray(sb_start, dtype=np.int64))

    def describe(self):
        """Canonical text form (used for hashing and round trips)."""
        lines = ["kind = finite", f"types = {self.d}"]
        for i in range(self.d):
            lines.append(f"rate[{i + 1}] = {float(self.rates[i])!r}")
        for i in range(self.d):
            for p, cnt in self.offspring_table(i):
                kids = " ".join(str(c) for c in cnt)
                lines.append(f"offspring[{i + 1}] = {float(p)!r}: {kids}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SizeBiasedTable:
    rho: np.ndarray
    m_phi: np.ndarray
    probs: np.ndarray
    cdf: np.ndarray
    counts: np.ndarray
    start: np.ndarray


def mean_semigroup(model, t, f):
    """psi_t[f] = exp(tA) f."""
    if t < 0:
        raise ValueError("t must be non-negative")
    f = model.feature_coefficients(f)
    if t == 0:
        return f.copy()
    return expm(t * model.generator) @ f


def variance_functional(model, i, f, g):
    return float(model.pair_functional(f, g)[i])


def g_operator(model, h):
    return model.g_operator(h)


def adaptive_simpson(fn, a, b, rtol=1e-8, max_depth=50, min_depth=4):
    """Vector-valued adaptive Simpson quadrature.

    An interval is accepted when the Richardson difference is below its
    share of ``rtol * scale``; ``scale`` is the coarse estimate of |integral|.
    """
    fa, fm, fb = fn(a), fn(0.5 * (a + b)), fn(b)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    scale = max(float(np.max(np.abs(whole))), float(np.max(np.abs(fm))) * (b - a), 1e-300)
    tol = rtol * scale
    total = np.zeros_like(whole)
    stack = [(a, b, fa, fm, fb, whole, 0)]
    while stack:
        lo, hi, flo, fmid, fhi, s, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        fl = fn(0.5 * (lo + mid))
        fr = fn(0.5 * (mid + hi))
        left = (mid - lo) / 6.0 * (flo + 4.0 * fl + fmid)
        right = (hi - mid) / 6.0 * (fmid + 4.0 * fr + fhi)
        err = float(np.max(np.abs(left + right - s)))
        share = tol * (hi - lo) / (b - a)
        if depth >= min_depth and err <= 15.0 * share:
            total += left + right + (left + right - s) / 15.0
            continue
        if depth >= max_depth:
            raise QuadratureError(f"adaptive Simpson did not converge on [{lo}, {hi}]")
        stack.append((mid, hi, fmid, fr, fhi, right, depth + 1))
        stack.append((lo, mid, flo, fl, fmid, left, depth + 1))
    return total


def many_to_two_exact(model, f, g, t, rtol=1e-8):
    """E_i[<f,X_t><g,X_t>] for every initial type i."""
    f = model.feature_coefficients(f)
    g = model.feature_coefficients(g)
    first = mean_semigroup(model, t, f * g)
    if t == 0:
        return first
    A = model.generator

    def integrand(s):
        back = expm((t - s) * A)
        v = model.rates * model.pair_functional(back @ f, back @ g)
        return expm(s * A) @ v

    return first + adaptive_simpson(integrand, 0.0, float(t), rtol=rtol)


@dataclass
class OdeSolution:
    times: np.ndarray
    u: np.ndarray  # (len(times), d): survival probability from each type
    a: np.ndarray | None  # <phi_tilde, u_t> when an eigen triple was given


def default_dt(model):
    return 0.005 / float(model.rates.max())


def nonlinear_ode(model, t_max, dt=None, eigen=None, record_every=None):
    """RK4 for u' = gamma (E[1 - prod(1 - u(x_j))] - u), u_0 = 1.

    ``u_t(i)`` is the probability that a process started from one type-i
    particle survives to time t.
    """
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    dt = default_dt(model) if dt is None else float(dt)
    limit = 0.01 / float(model.rates.max())
    if not 0 < dt <= limit * (1 + 1e-12):
        raise StepSizeError(f"dt={dt} exceeds the stability limit {limit}")
    every = record_every or max(1, int(round(0.1 / dt)))
    times, u = K.rk4_survival(model.rates, model.start, model.probs, model.counts,
                              float(t_max), dt, int(every))
    if np.any(np.diff(u, axis=0) > 1e-14) or np.any(u < -1e-14) or np.any(u > 1 + 1e-14):
        raise StepSizeError("survival curve lost monotonicity; reduce dt")
    a = None if eigen is None else u @ np.asarray(eigen.phi_tilde)
    return OdeSolution(times, u, a)
