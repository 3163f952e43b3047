"""Neutron branching process in a bounded domain.

A neutron at (r, v) moves in a straight line. It scatters at rate sigma_s
(new velocity from the scatter law), undergoes fission at rate sigma_f
(it is replaced by N neutrons emitted at r) and is absorbed when it leaves
the domain D. Velocities live in the annulus v_min <= |v| <= v_max.

Cross-sections and yield laws are constant on regions: concentric shells of
a ball, or slabs of an axis-aligned box cut by x-planes. Two emission laws
are available for fission velocities:

``iid``      every child independently: isotropic direction, uniform speed;
``cluster``  a common isotropic axis, each child's direction von Mises-Fisher
             around it with concentration ``cluster_kappa``, uniform speeds.

Both have the same one-child marginal, hence the same mean semigroup; they
differ only in the pair correlations that enter Sigma.

States are ``(r, v)`` pairs of length-3 arrays.
"""

from dataclasses import dataclass
from math import comb, floor, ceil

import numpy as np

from . import _nbp_kernels as K
from ._rng import RngStream
from .core import InvalidStateError, ModelSpec, PopulationCapError, reduce_moments

VOLUME_V = 4.0 * np.pi / 3.0


class NbpConfigError(ValueError):
    pass


class ExtinctWalkersError(RuntimeError):
    """Every walker of a population-controlled run was absorbed."""


class WeightOverflowError(RuntimeError):
    pass


def _raise_kernel(err, where):
    if err == K.ERR_POP_CAP:
        raise PopulationCapError(f"population cap exceeded ({where})")
    if err == K.ERR_DRIFT:
        raise InvalidStateError(f"position drifted outside the domain by more than {K.DRIFT_TOL} ({where})")
    if err == K.ERR_WEIGHT:
        raise WeightOverflowError(f"integrated beta exceeded {K.LOG_WEIGHT_MAX}; the model is badly supercritical ({where})")


@dataclass(frozen=True)
class Geometry:
    kind: str  # "ball" or "box"
    radius: float = 1.0
    lower: float = -1.0
    upper: float = 1.0
    boundaries: tuple = ()  # shell radii (ball) or x cuts (box), increasing

    def __post_init__(self):
        if self.kind not in ("ball", "box"):
            raise NbpConfigError(f"unknown geometry {self.kind!r}")
        b = self.boundaries
        if any(x >= y for x, y in zip(b, b[1:])):
            raise NbpConfigError("region boundaries must be strictly increasing")
        if self.kind == "ball":
            if not self.radius > 0:
                raise NbpConfigError("radius must be positive")
            if b and not (0 < b[0] and b[-1] < self.radius):
                raise NbpConfigError("shell radii must lie in (0, radius)")
        else:
            if not self.lower < self.upper:
                raise NbpConfigError("need lower < upper")
            if b and not (self.lower < b[0] and b[-1] < self.upper):
                raise NbpConfigError("cuts must lie inside (lower, upper)")

    @property
    def gk(self):
        return K.BALL if self.kind == "ball" else K.BOX

    @property
    def n_regions(self):
        return len(self.boundaries) + 1

    @property
    def bnds(self):
        return np.asarray(self.boundaries, dtype=float)

    @property
    def volume(self):
        if self.kind == "ball":
            return 4.0 / 3.0 * np.pi * self.radius**3
        return (self.upper - self.lower) ** 3

    def center(self):
        if self.kind == "ball":
            return np.zeros(3)
        return np.full(3, 0.5 * (self.lower + self.upper))

    def contains(self, r, tol=0.0):
        r = np.asarray(r, dtype=float)
        if self.kind == "ball":
            return np.linalg.norm(r, axis=-1) < self.radius + tol
        return np.all((r > self.lower - tol) & (r < self.upper + tol), axis=-1)

    def region_of(self, r):
        r = np.asarray(r, dtype=float)
        key = np.linalg.norm(r, axis=-1) if self.kind == "ball" else r[..., 0]
        return np.searchsorted(self.bnds, key, side="right")

    def exit_time(self, r, v):
        r = np.asarray(r, dtype=float)
        v = np.asarray(v, dtype=float)
        if not np.any(v):
            raise ValueError("exit time is undefined for zero velocity")
        return float(K.exit_time(self.gk, self.radius, self.lower, self.upper, *r, *v))

    def sample_uniform(self, gen, n):
        if self.kind == "ball":
            d = gen.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            return d * self.radius * gen.random(n)[:, None] ** (1.0 / 3.0)
        return self.lower + (self.upper - self.lower) * gen.random((n, 3))

    def describe(self):
        if self.kind == "ball":
            lines = ["geometry = ball", f"radius = {float(self.radius)!r}"]
            if self.boundaries:
                lines.append("shells = " + " ".join(repr(float(x)) for x in self.boundaries))
        else:
            lines = ["geometry = box", f"lower = {float(self.lower)!r}", f"upper = {float(self.upper)!r}"]
            if self.boundaries:
                lines.append("cuts = " + " ".join(repr(float(x)) for x in self.boundaries))
        return lines


def exit_time(geometry, r, v):
    """First time the ray r + v t leaves the domain."""
    return geometry.exit_time(r, v)


def scale_yield(pmf, kappa):
    """Law of sum_{i<=N} K_i with K_i in {floor, ceil}(kappa) independent, mean kappa."""
    pmf = np.asarray(pmf, dtype=float)
    lo, hi = floor(kappa), ceil(kappa)
    frac = kappa - lo
    nmax = (len(pmf) - 1) * hi
    out = np.zeros(nmax + 1)
    for n, p in enumerate(pmf):
        if p == 0:
            continue
        if hi == lo:
            out[n * lo] += p
            continue
        for up in range(n + 1):
            out[n * lo + up] += p * comb(n, up) * frac**up * (1 - frac) ** (n - up)
    last = np.flatnonzero(out > 0)
    return out[: (last[-1] + 1 if last.size else 1)]


class NbpModel(ModelSpec):
    """Neutron branching process; see the module docstring.

    ``yields[i]`` is the pmf of the fission yield N in region i (index = N).
    ``yield_multiplier`` scales every yield law (see :func:`scale_yield`).
    """

    def __init__(self, geometry, v_min, v_max, sigma_s, sigma_f, yields,
                 fission_velocity="iid", cluster_kappa=0.0, scatter_speed="uniform",
                 yield_multiplier=1.0, name="nbp"):
        self.geometry = geometry
        self.v_min, self.v_max = float(v_min), float(v_max)
        if not 0 < self.v_min <= self.v_max:
            raise NbpConfigError("need 0 < v_min <= v_max")
        nr = geometry.n_regions
        self.sigma_s = np.array(sigma_s, dtype=float)
        self.sigma_f = np.array(sigma_f, dtype=float)
        if self.sigma_s.shape != (nr,) or self.sigma_f.shape != (nr,):
            raise NbpConfigError(f"need cross-sections for {nr} regions")
        if np.any(self.sigma_s < 0) or np.any(self.sigma_f < 0) or not np.all(np.isfinite(self.sigma_s + self.sigma_f)):
            raise NbpConfigError("cross-sections must be non-negative and finite")
        if len(yields) != nr:
            raise NbpConfigError(f"need a yield law for each of {nr} regions")
        self.base_yields = [np.array(y, dtype=float) for y in yields]
        for i, y in enumerate(self.base_yields):
            if y.ndim != 1 or np.any(y < 0) or abs(y.sum() - 1) > 1e-12:
                raise NbpConfigError(f"yield law of region {i + 1} is not a pmf")
        if fission_velocity not in ("iid", "cluster"):
            raise NbpConfigError(f"unknown fission_velocity {fission_velocity!r}")
        if scatter_speed not in ("uniform", "keep"):
            raise NbpConfigError(f"unknown scatter_speed {scatter_speed!r}")
        if cluster_kappa < 0:
            raise NbpConfigError("cluster_kappa must be non-negative")
        if not yield_multiplier > 0:
            raise NbpConfigError("yield_multiplier must be positive")
        self.fission_velocity = fission_velocity
        self.cluster_kappa = float(cluster_kappa)
        self.scatter_speed = scatter_speed
        self.yield_multiplier = float(yield_multiplier)
        self.name = name
        scaled = [scale_yield(y, self.yield_multiplier) for y in self.base_yields]
        width = max(len(y) for y in scaled)
        self.yields = np.zeros((nr, width))
        for i, y in enumerate(scaled):
            self.yields[i, : len(y)] = y
        self.ycdf = np.cumsum(self.yields, axis=1)
        self.n_max = width - 1
        ks = np.arange(width)
        self.mean_yield = self.yields @ ks
        self.factorial2 = self.yields @ (ks * (ks - 1))
        self.alpha = self.sigma_s + self.sigma_f * self.mean_yield
        self.beta = self.sigma_f * (self.mean_yield - 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.p_scatter = np.where(self.alpha > 0, self.sigma_s / self.alpha, 1.0)

    def __repr__(self):
        return f"NbpModel({self.name!r}, {self.geometry.kind}, kappa={self.yield_multiplier:.6g})"

    def with_yield_multiplier(self, kappa):
        return NbpModel(self.geometry, self.v_min, self.v_max, self.sigma_s, self.sigma_f,
                        self.base_yields, self.fission_velocity, self.cluster_kappa,
                        self.scatter_speed, kappa, self.name)

    def with_fission_velocity(self, mode, cluster_kappa=None):
        k = self.cluster_kappa if cluster_kappa is None else cluster_kappa
        return NbpModel(self.geometry, self.v_min, self.v_max, self.sigma_s, self.sigma_f,
                        self.base_yields, mode, k, self.scatter_speed, self.yield_multiplier, self.name)

    @property
    def fmode(self):
        return K.FISSION_CLUSTER if self.fission_velocity == "cluster" else K.FISSION_IID

    @property
    def smode(self):
        return K.SCATTER_KEEP if self.scatter_speed == "keep" else K.SCATTER_UNIFORM

    def _geo_args(self):
        g = self.geometry
        return g.gk, g.radius, g.lower, g.upper, g.bnds

    def default_x0(self):
        v = np.array([0.5 * (self.v_min + self.v_max), 0.0, 0.0])
        return self.geometry.center(), v

    # -- ModelSpec -----------------------------------------------------
    def _region(self, r, v):
        # nudge along v so that points on an interface get the region ahead
        return int(self.geometry.region_of(np.asarray(r) + 1e-12 * np.asarray(v)))

    def gamma(self, state):
        return float(self.sigma_f[self._region(*state)])

    def m_scalar(self, state):
        return float(self.mean_yield[self._region(*state)])

    def in_state_space(self, state):
        try:
            r, v = state
        except (TypeError, ValueError):
            return False
        sp = float(np.linalg.norm(v))
        return bool(self.geometry.contains(r)) and self.v_min * (1 - 1e-12) <= sp <= self.v_max * (1 + 1e-12)

    def _scatter_velocity(self, v, gen):
        d = gen.normal(size=3)
        d /= np.linalg.norm(d)
        sp = np.linalg.norm(v) if self.scatter_speed == "keep" else gen.uniform(self.v_min, self.v_max)
        return sp * d

    def sample_flight(self, state, max_dt, rng):
        r, v = (np.array(x, dtype=float) for x in state)
        gk, R, lo, hi, bnds = self._geo_args()
        elapsed = 0.0
        while True:
            reg = self._region(r, v)
            rate = self.sigma_s[reg] + self.sigma_f[reg]
            tau = rng.exponential(1.0 / rate) if rate > 0 else np.inf
            g_exit = float(K.exit_time(gk, R, lo, hi, *r, *v))
            g_b, _ = K._boundary(gk, bnds, reg, *r, *v) if len(bnds) else (np.inf, -1)
            rem = max_dt - elapsed
            dt = min(tau, g_exit, g_b, rem)
            r = r + v * dt
            elapsed += dt
            if dt == rem and rem <= min(tau, g_exit, g_b):
                return (r, v), max_dt, False
            if dt == g_exit:
                return None, elapsed, False
            if dt == g_b:
                continue
            if not self.geometry.contains(r):
                return None, elapsed, False
            if rng.random() * rate < self.sigma_s[reg]:
                v = self._scatter_velocity(v, rng)
                continue
            return (r, v), elapsed, True

    def sample_offspring(self, state, rng):
        r, v = state
        reg = self._region(r, v)
        n = int(np.searchsorted(self.ycdf[reg], rng.random() * self.ycdf[reg, -1], side="right"))
        n = min(n, self.n_max)
        if n == 0:
            return []
        sp = rng.uniform(self.v_min, self.v_max, size=n)
        if self.fission_velocity == "cluster":
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            dirs = sample_vmf(axis, self.cluster_kappa, n, rng)
        else:
            dirs = rng.normal(size=(n, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        r = np.array(r, dtype=float)
        return [(r.copy(), sp[k] * dirs[k]) for k in range(n)]

    def features(self, state):
        return np.array([1.0, float(np.linalg.norm(state[1]))])

    def feature_coefficients(self, f):
        """Linear functionals available in batch mode: constants, ``"speed"``, or (c1, c_speed)."""
        if isinstance(f, str):
            if f == "speed":
                return np.array([0.0, 1.0])
            if f == "one":
                return np.array([1.0, 0.0])
            raise ValueError(f"unknown functional {f!r}")
        f = np.asarray(f, dtype=float)
        if f.ndim == 0:
            return np.array([float(f), 0.0])
        if f.shape == (2,):
            return f
        raise ValueError("batch functionals are c, 'speed' or a pair (c, c_speed)")

    def batch_chunk(self, x0, checkpoints, t_max, seed, start, count, pop_cap):
        r, v = (np.asarray(x, dtype=float) for x in x0)
        gk, R, lo, hi, bnds = self._geo_args()
        zeta, feats, err = K.forward_nbp(gk, R, lo, hi, bnds, self.sigma_s, self.sigma_f, self.ycdf,
                                         self.fmode, self.cluster_kappa, self.smode, self.v_min,
                                         self.v_max, r, v, checkpoints, t_max, seed, start, count, pop_cap)
        _raise_kernel(err, f"chunk starting at {start}")
        return zeta, feats

    def describe(self):
        lines = ["kind = nbp", *self.geometry.describe(),
                 f"v_min = {float(self.v_min)!r}", f"v_max = {float(self.v_max)!r}"]
        for i in range(self.geometry.n_regions):
            lines.append(f"sigma_s[{i + 1}] = {float(self.sigma_s[i])!r}")
            lines.append(f"sigma_f[{i + 1}] = {float(self.sigma_f[i])!r}")
            lines.append(f"yield[{i + 1}] = " + " ".join(repr(float(p)) for p in self.base_yields[i]))
        lines += [f"fission_velocity = {self.fission_velocity}", f"cluster_kappa = {float(self.cluster_kappa)!r}",
                  f"scatter_speed = {self.scatter_speed}", f"yield_multiplier = {float(self.yield_multiplier)!r}"]
        return "\n".join(lines) + "\n"


def sample_vmf(axis, kappa, n, rng):
    """n unit vectors with von Mises-Fisher density around ``axis``."""
    u = rng.random(n)
    if kappa > 1e-8:
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    else:
        w = 2.0 * u - 1.0
    w = np.clip(w, -1.0, 1.0)
    h = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e = np.cross(axis, h)
    e /= np.linalg.norm(e)
    f = np.cross(axis, e)
    ph = 2 * np.pi * rng.random(n)
    s = np.sqrt(1 - w * w)
    return w[:, None] * axis + (s * np.cos(ph))[:, None] * e + (s * np.sin(ph))[:, None] * f


def parse_nbp(pf):
    """Build an :class:`NbpModel` from a parsed model file (see :mod:`critbranch.io`)."""
    from .io import ModelFileError
    pf.unknown_keys({"kind", "name", "geometry", "radius", "shells", "lower", "upper", "cuts",
                     "v_min", "v_max", "sigma_s", "sigma_f", "yield", "fission_velocity",
                     "cluster_kappa", "scatter_speed", "yield_multiplier"})
    kind = pf.get("geometry", required=True)
    try:
        if kind == "ball":
            geo = Geometry("ball", radius=pf.number("radius", required=True),
                           boundaries=tuple(pf.numbers("shells")))
        elif kind == "box":
            geo = Geometry("box", lower=pf.number("lower", required=True),
                           upper=pf.number("upper", required=True), boundaries=tuple(pf.numbers("cuts")))
        else:
            raise pf.error(f"unknown geometry {kind!r}", "geometry")
    except NbpConfigError as e:
        raise pf.error(str(e), "geometry") from None
    nr = geo.n_regions
    for key in ("sigma_s", "sigma_f", "yield"):
        for idx in pf.indexed(key):
            if not 1 <= idx <= nr:
                raise pf.error(f"region index {idx} outside 1..{nr}", (key, idx))
    sig_s = [pf.number(("sigma_s", i), required=True) for i in range(1, nr + 1)]
    sig_f = [pf.number(("sigma_f", i), required=True) for i in range(1, nr + 1)]
    ylds = [pf.numbers(("yield", i), required=True) for i in range(1, nr + 1)]
    try:
        return NbpModel(geo, pf.number("v_min", required=True), pf.number("v_max", required=True),
                        sig_s, sig_f, ylds,
                        fission_velocity=pf.get("fission_velocity", "iid"),
                        cluster_kappa=pf.number("cluster_kappa", 0.0),
                        scatter_speed=pf.get("scatter_speed", "uniform"),
                        yield_multiplier=pf.number("yield_multiplier", 1.0),
                        name=pf.get("name", "nbp"))
    except NbpConfigError as e:
        raise ModelFileError(str(e), source=pf.source) from None


# -- the weighted neutron random walk ----------------------------------

class Walkers:
    """A population of weighted random-walk particles (structure of arrays)."""

    def __init__(self, r, v, model):
        self.r = np.ascontiguousarray(r, dtype=float)
        self.v = np.ascontiguousarray(v, dtype=float)
        m = self.r.shape[0]
        self.reg = np.asarray(model.geometry.region_of(self.r + 1e-12 * self.v), dtype=np.int64)
        self.alive = np.ones(m, dtype=np.bool_)
        self.logw = np.zeros(m)

    def __len__(self):
        return self.r.shape[0]

    def advance(self, model, h, seed, base):
        gk, R, lo, hi, bnds = model._geo_args()
        err = K.nrw_advance(gk, R, lo, hi, bnds, model.alpha, model.beta, model.p_scatter, model.smode,
                            model.v_min, model.v_max, self.r, self.v, self.reg, self.alive, self.logw,
                            float(h), int(seed), int(base))
        _raise_kernel(err, "weighted random walk")

    def weights(self):
        return np.where(self.alive, np.exp(self.logw), 0.0)

    def take(self, idx):
        self.r = self.r[idx].copy()
        self.v = self.v[idx].copy()
        self.reg = self.reg[idx].copy()
        self.alive = np.ones(len(idx), dtype=np.bool_)
        self.logw = np.zeros(len(idx))


def nrw_many_to_one(model, f, x0, t, n, seed, checkpoints=None):
    """psi_t[f](x0) = E[exp(int_0^t beta) f(R_t, V_t) 1{alive}] by the weighted random walk.

    ``f`` is a callable ``f(r, v)`` on arrays of shape (n, 3), or anything
    :meth:`NbpModel.feature_coefficients` accepts. Returns (estimate, stderr),
    or arrays of them when ``checkpoints`` is given.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    cps = np.atleast_1d(np.asarray([t] if checkpoints is None else checkpoints, dtype=float))
    if np.any(cps < 0) or np.any(np.diff(cps) < 0):
        raise ValueError("checkpoints must be sorted and non-negative")
    r0, v0 = (np.asarray(x, dtype=float) for x in x0)
    w = Walkers(np.tile(r0, (n, 1)), np.tile(v0, (n, 1)), model)
    if callable(f):
        fn = f
    else:
        coef = model.feature_coefficients(f)
        fn = lambda r, v: coef[0] + coef[1] * np.linalg.norm(v, axis=1)  # noqa: E731
    est = np.empty(len(cps))
    se = np.empty(len(cps))
    now = 0.0
    for k, c in enumerate(cps):
        if c > now:
            w.advance(model, c - now, seed, np.uint64(k) * np.uint64(1 << 40))
            now = c
        vals = w.weights() * fn(w.r, w.v)
        m = reduce_moments(vals)
        est[k], se[k] = m.mean, m.stderr
    if checkpoints is None:
        return float(est[0]), float(se[0])
    return est, se


def systematic_resample(weights, gen, m=None):
    m = len(weights) if m is None else m
    cw = np.cumsum(weights)
    if not cw[-1] > 0:
        raise RuntimeError("all walker weights vanished")
    pos = (gen.random() + np.arange(m)) / m * cw[-1]
    return np.minimum(np.searchsorted(cw, pos, side="right"), len(weights) - 1)


@dataclass
class SmcRun:
    """Population-controlled run: per-stage log mean weights and binned occupancy."""

    stage_times: np.ndarray  # end time of each stage
    log_growth: np.ndarray  # log of the mean weight over each stage
    occupancy: np.ndarray | None  # weighted cell masses accumulated over the window


def smc_run(model, r, v, t_end, h, seed, replica, grid=None, window=None):
    """Weighted random walk with resampling after every stage of length ``h``.

    The product of stage mean weights is an unbiased estimate of
    psi_t[1] averaged over the starting points. Resampling is systematic and
    keyed by (seed, replica, stage) so runs are reproducible.
    """
    walkers = Walkers(r, v, model)
    m = len(walkers)
    n_st = int(np.ceil(t_end / h - 1e-9))
    times = h * np.arange(1, n_st + 1)
    logg = np.empty(n_st)
    occ = None if grid is None else np.zeros(grid.n_cells)
    for s in range(n_st):
        base = (np.uint64(replica) << np.uint64(44)) + np.uint64(s) * np.uint64(m)
        walkers.advance(model, h, seed, base)
        w = walkers.weights()
        mean = w.mean()
        if not mean > 0:
            raise ExtinctWalkersError(f"every walker was absorbed by t={times[s]:.3g}; use more walkers or a shorter stage")
        logg[s] = np.log(mean)
        if occ is not None and window is not None and window[0] - 1e-9 <= times[s] <= window[1] + 1e-9:
            cells = grid.cell_of(walkers.r, walkers.v)
            occ += np.bincount(cells, weights=w / w.sum(), minlength=grid.n_cells)
        gen = RngStream(seed, replica, (s,)).generator()
        walkers.take(systematic_resample(w, gen))
    return SmcRun(times, logg, occ)


def estimate_lambda_nbp(model, seed, walkers=20000, replicas=8, h=0.25, t_burn=5.0, window=10.0, x0=None):
    """Leading eigenvalue by the growth rate of a population-controlled walk.

    Returns (lambda_hat, stderr); the error comes from independent replicas.
    """
    r0, v0 = model.default_x0() if x0 is None else x0
    per = max(2, walkers // replicas)
    lams = []
    for rep in range(replicas):
        run = smc_run(model, np.tile(r0, (per, 1)), np.tile(v0, (per, 1)), t_burn + window, h, seed, rep)
        sel = run.stage_times > t_burn + 1e-9
        lams.append(run.log_growth[sel].sum() / (run.stage_times[sel][-1] - t_burn))
    lams = np.asarray(lams)
    return float(lams.mean()), float(lams.std(ddof=1) / np.sqrt(len(lams)))


# -- phase-space grids ---------------------------------------------------

class PhaseGrid:
    """Partition of D x V into cells with exact Lebesgue volumes.

    Ball: radial shells x bins of mu = v.r/(|v||r|) x speed bands.
    Box: n^3 cubes x direction octants x speed bands.
    """

    MAX_CELLS = 4096

    def __init__(self, geometry, v_min, v_max, n_space, n_dir, n_speed):
        self.geometry = geometry
        self.v_min, self.v_max = float(v_min), float(v_max)
        self.n_space, self.n_speed = int(n_space), int(n_speed)
        self.n_dir = 8 if geometry.kind == "box" else int(n_dir)
        n_sp = self.n_space if geometry.kind == "ball" else self.n_space**3
        self.shape = (n_sp, self.n_dir, self.n_speed)
        self.n_cells = int(np.prod(self.shape))
        if self.n_cells > self.MAX_CELLS:
            raise NbpConfigError(f"grid has {self.n_cells} cells, limit is {self.MAX_CELLS}")
        self.speed_edges = np.linspace(self.v_min, self.v_max, self.n_speed + 1)
        if geometry.kind == "ball":
            self.space_edges = np.linspace(0.0, geometry.radius, self.n_space + 1)
            space_vol = 4.0 / 3.0 * np.pi * np.diff(self.space_edges**3)
            dir_vol = np.full(self.n_dir, 2.0 * np.pi * 2.0 / self.n_dir)  # solid angle per mu bin
        else:
            self.space_edges = np.linspace(geometry.lower, geometry.upper, self.n_space + 1)
            space_vol = np.full(n_sp, ((geometry.upper - geometry.lower) / self.n_space) ** 3)
            dir_vol = np.full(8, 4.0 * np.pi / 8.0)
        speed_vol = np.diff(self.speed_edges**3) / 3.0
        self.volumes = (space_vol[:, None, None] * dir_vol[None, :, None] * speed_vol[None, None, :]).ravel()

    @classmethod
    def for_model(cls, model, n_space=4, n_dir=4, n_speed=2):
        return cls(model.geometry, model.v_min, model.v_max, n_space, n_dir, n_speed)

    def _index(self, edges, x, n):
        return np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n - 1)

    def cell_of(self, r, v):
        r = np.atleast_2d(np.asarray(r, dtype=float))
        v = np.atleast_2d(np.asarray(v, dtype=float))
        sp = np.linalg.norm(v, axis=1)
        ks = self._index(self.speed_edges, sp, self.n_speed)
        if self.geometry.kind == "ball":
            rad = np.linalg.norm(r, axis=1)
            ir = self._index(self.space_edges, rad, self.n_space)
            with np.errstate(invalid="ignore", divide="ignore"):
                mu = np.nan_to_num(np.einsum("ij,ij->i", r, v) / (rad * sp))
            idir = np.clip(((mu + 1.0) * 0.5 * self.n_dir).astype(np.int64), 0, self.n_dir - 1)
        else:
            ix = [self._index(self.space_edges, r[:, a], self.n_space) for a in range(3)]
            ir = (ix[0] * self.n_space + ix[1]) * self.n_space + ix[2]
            idir = (v[:, 0] > 0) * 4 + (v[:, 1] > 0) * 2 + (v[:, 2] > 0)
        out = (ir * self.n_dir + idir) * self.n_speed + ks
        return out.astype(np.int64)

    def sample_in_cell(self, c, k, gen):
        """k points uniform (Lebesgue) in cell c."""
        ir, idir, ks = np.unravel_index(c, self.shape)
        v1, v2 = self.speed_edges[ks], self.speed_edges[ks + 1]
        sp = (v1**3 + gen.random(k) * (v2**3 - v1**3)) ** (1.0 / 3.0)
        if self.geometry.kind == "ball":
            a, b = self.space_edges[ir], self.space_edges[ir + 1]
            rad = (a**3 + gen.random(k) * (b**3 - a**3)) ** (1.0 / 3.0)
            rhat = gen.normal(size=(k, 3))
            rhat /= np.linalg.norm(rhat, axis=1, keepdims=True)
            mu = -1.0 + (idir + gen.random(k)) * 2.0 / self.n_dir
            h = np.where(np.abs(rhat[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
            e = np.cross(rhat, h)
            e /= np.linalg.norm(e, axis=1, keepdims=True)
            f = np.cross(rhat, e)
            ph = 2 * np.pi * gen.random(k)
            s = np.sqrt(1 - mu * mu)
            d = mu[:, None] * rhat + (s * np.cos(ph))[:, None] * e + (s * np.sin(ph))[:, None] * f
            return rad[:, None] * rhat, sp[:, None] * d
        n = self.n_space
        ix = np.array(np.unravel_index(ir, (n, n, n)))
        lo = self.space_edges[ix]
        hi = self.space_edges[ix + 1]
        r = lo + (hi - lo) * gen.random((k, 3))
        d = np.abs(gen.normal(size=(k, 3)))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        signs = np.array([(idir >> 2) & 1, (idir >> 1) & 1, idir & 1]) * 2 - 1
        return r, sp[:, None] * d * signs

    def describe(self):
        return {"geometry": self.geometry.kind, "shape": list(self.shape), "n_cells": self.n_cells,
                "space_edges": self.space_edges.tolist(), "speed_edges": self.speed_edges.tolist(),
                "directions": "mu bins" if self.geometry.kind == "ball" else "octants"}
