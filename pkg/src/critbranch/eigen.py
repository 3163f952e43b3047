"""Leading eigen-elements (lambda, phi, phi_tilde) and the variance constant Sigma.

Finite models are solved exactly: power iteration on P = exp(tau A) with
tau = 1/max(gamma), whose dominant eigenvalue exp(tau lambda) is simple and
positive for an irreducible model. Neutron models are estimated on a
phase-space grid (see :func:`estimate_eigen_nbp`).

Normalisation: phi_tilde is a probability vector (or density) and
<phi_tilde, phi> = 1.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from .finite import FiniteTypeModel

POWER_TOL = 1e-12
POWER_MAX_ITER = 200_000
KAPPA_BRACKET = (0.1, 10.0)


class EigenConvergenceError(RuntimeError):
    pass


class BracketError(RuntimeError):
    pass


class InsufficientStatisticsError(RuntimeError):
    pass


@dataclass
class EigenTriple:
    lam: float
    phi: np.ndarray
    phi_tilde: np.ndarray
    sigma: float
    residuals: dict = field(default_factory=dict)
    lam_stderr: float = 0.0
    sigma_stderr: float = 0.0
    grid: object = None  # phase-space grid for estimated triples

    @property
    def normalization(self):
        if self.grid is None:
            return float(self.phi_tilde @ self.phi)
        return float(np.sum(self.phi_tilde * self.phi * self.grid.volumes))

    def phi_at(self, state):
        if self.grid is None:
            return float(self.phi[state])
        return float(self.phi[self.grid.cell_of(*state)])

    def summary(self):
        out = {"lambda": self.lam, "lambda_stderr": self.lam_stderr, "sigma": self.sigma,
               "sigma_stderr": self.sigma_stderr, "normalization": self.normalization,
               "residuals": dict(self.residuals)}
        if self.grid is None:
            out["phi"] = [float(x) for x in self.phi]
            out["phi_tilde"] = [float(x) for x in self.phi_tilde]
        else:
            out["grid"] = self.grid.describe()
        return out


def _power(P, v, A, side, tol, max_iter):
    """Dominant positive eigenvector of P (right if side='r', else left)."""
    M = P if side == "r" else P.T
    Am = A if side == "r" else A.T
    scale = max(1.0, float(np.max(np.abs(A))))
    res = np.inf
    for it in range(1, max_iter + 1):
        w = M @ v
        nrm = np.max(np.abs(w))
        if not np.isfinite(nrm) or nrm == 0:
            break
        v = w / nrm
        if it % 8 == 0:
            Av = Am @ v
            lam = float(v @ Av / (v @ v))
            res = float(np.max(np.abs(Av - lam * v)) / np.max(np.abs(v)))
            if res <= tol * scale:
                return v, lam, res
            if it % 256 == 0:
                # slow spectral gap: square the iteration matrix
                M = M @ M
                M /= np.max(np.abs(M))
    raise EigenConvergenceError(
        f"power iteration stalled (residual {res:.3g}); the model may be reducible "
        "or have a complex leading pair")


def leading_eigenvalue(A, tau, tol=POWER_TOL):
    P = expm(tau * A)
    v, lam, _ = _power(P, np.ones(A.shape[0]), A, "r", tol, POWER_MAX_ITER)
    return lam


def exact_eigen(model, tol=POWER_TOL, max_iter=POWER_MAX_ITER):
    """Exact (lambda, phi, phi_tilde, Sigma) of a finite-type model."""
    if not isinstance(model, FiniteTypeModel):
        raise TypeError("exact_eigen needs a FiniteTypeModel")
    A = np.asarray(model.generator)
    d = model.d
    tau = 1.0 / float(model.rates.max())
    P = expm(tau * A)
    start = np.ones(d)
    phi, lam_r, _ = _power(P, start, A, "r", tol, max_iter)
    phit, lam_l, _ = _power(P, start, A, "l", tol, max_iter)
    if np.any(phi <= 0) or np.any(phit <= 0):
        raise EigenConvergenceError("leading eigenvectors are not strictly positive (reducible model?)")
    lam = 0.5 * (lam_r + lam_l)
    phit = phit / phit.sum()
    phi = phi / (phit @ phi)
    sigma = float(phit @ (model.rates * model.pair_functional(phi)))
    residuals = {
        "right": float(np.max(np.abs(A @ phi - lam * phi))),
        "left": float(np.max(np.abs(phit @ A - lam * phit))),
        "normalization": float(abs(phit @ phi - 1.0)),
    }
    return EigenTriple(float(lam), phi, phit, max(sigma, 0.0), residuals)


@dataclass
class Calibration:
    model: object
    kappa: float  # multiplier relative to the input model
    eigen: EigenTriple
    iterations: int
    history: list = field(default_factory=list)  # (kappa, lambda, stderr)


def calibrate_critical(model, tol=None, seed=None, bracket=KAPPA_BRACKET, max_iter=200,
                       full_eigen=True, lambda_kw=None, eigen_kw=None):
    """Bisect the yield multiplier kappa until the leading eigenvalue vanishes.

    Finite models use the exact eigenvalue and stop at |lambda| <= tol
    (default 1e-10). Neutron models use :func:`estimate_lambda_nbp` with the
    same seed at every step (common random numbers, so lambda_hat is a
    smooth function of kappa) and stop once |lambda_hat| <= min(tol, stderr),
    i.e. when the estimate can no longer be told apart from zero; tol
    defaults to 0.01 and ``seed`` is mandatory.
    """
    if isinstance(model, FiniteTypeModel):
        tol = 1e-10 if tol is None else tol
        tau = 1.0 / float(model.rates.max())

        def lam_of(k):
            return leading_eigenvalue(model.with_yield_multiplier(k).generator, tau), 0.0

        def done(lam, se):
            return abs(lam) <= tol
    else:
        from .nbp import NbpModel
        if not isinstance(model, NbpModel):
            raise TypeError(f"cannot calibrate {type(model).__name__}")
        if seed is None:
            raise ValueError("seed is required to calibrate a neutron model")
        tol = 0.01 if tol is None else tol
        base = model.yield_multiplier
        lkw = dict(lambda_kw or {})

        def lam_of(k):
            return estimate_lambda_nbp(model.with_yield_multiplier(base * k), seed=seed, **lkw)

        def done(lam, se):
            return abs(lam) <= min(tol, se)

    lo, hi = bracket
    history = []

    def probe(k):
        lam, se = lam_of(k)
        history.append((float(k), float(lam), float(se)))
        return lam, se

    lam, se = probe(1.0)
    k = 1.0
    if not done(lam, se):
        lam_lo, _ = probe(lo)
        lam_hi, _ = probe(hi)
        if not (lam_lo < 0 < lam_hi):
            raise BracketError(f"lambda does not change sign on [{lo}, {hi}]: ({lam_lo:.4g}, {lam_hi:.4g})")
        if lam < 0:
            lo = 1.0
        else:
            hi = 1.0
        for _ in range(max_iter):
            k = 0.5 * (lo + hi)
            lam, se = probe(k)
            if done(lam, se) or hi - lo < 1e-12:
                break
            if lam < 0:
                lo = k
            else:
                hi = k
        else:
            raise BracketError("bisection did not reach the tolerance")
    if isinstance(model, FiniteTypeModel):
        cal = model.with_yield_multiplier(k)
        cal.name = model.name
        eig = exact_eigen(cal)
    else:
        cal = model.with_yield_multiplier(model.yield_multiplier * k)
        if full_eigen:
            eig = estimate_eigen_nbp(cal, seed=seed, **(eigen_kw or {}))
        else:
            eig = EigenTriple(lam, np.empty(0), np.empty(0), float("nan"), lam_stderr=se)
    return Calibration(cal, float(k), eig, len(history), history)


# -- neutron models ------------------------------------------------------

MAX_REL_SE = 0.5


def estimate_lambda_nbp(model, seed, walkers=100_000, replicas=8, h=0.25, t_burn=5.0, window=40.0, x0=None):
    """Growth rate of a population-controlled weighted random walk; (lambda_hat, stderr)."""
    from .nbp import estimate_lambda_nbp as _est
    return _est(model, seed, walkers=walkers, replicas=replicas, h=h, t_burn=t_burn, window=window, x0=x0)


def estimate_eigen_nbp(model, grid=None, t_probe=5.0, n=100_000, seed=0, delta=20.0, replicas=8,
                       h=0.25, walkers_per_cell=4000, sigma_samples=200_000, x0=None):
    """Grid estimates of (lambda, phi, phi_tilde, Sigma) for a neutron model.

    * lambda: growth of the population-controlled walk over [t_probe, t_probe + delta];
    * phi_tilde: weighted occupancy of the same walk over that window, as a
      density (cell mass / cell volume);
    * phi: per cell, the population-controlled estimate of psi_t[1] from
      points uniform in the cell, times exp(-lambda t_probe), i.e. the cell
      average of phi;
    * Sigma: average of sigma_f ((sum phi(v_i))^2 - sum phi(v_i)^2) over
      fissions at phase points drawn from phi_tilde.

    Normalised so that sum_c phi_tilde_c phi_c vol_c = 1 and
    sum_c phi_tilde_c vol_c = 1.
    """
    from ._rng import RngStream
    from .nbp import ExtinctWalkersError, PhaseGrid, smc_run

    grid = PhaseGrid.for_model(model) if grid is None else grid
    r0, v0 = model.default_x0() if x0 is None else x0
    per = max(2, n // replicas)
    lams, occs = [], []
    for rep in range(replicas):
        run = smc_run(model, np.tile(r0, (per, 1)), np.tile(v0, (per, 1)), t_probe + delta, h, seed, rep,
                      grid=grid, window=(t_probe + h, t_probe + delta))
        sel = run.stage_times > t_probe + 1e-9
        lams.append(run.log_growth[sel].sum() / delta)
        occs.append(run.occupancy / run.occupancy.sum())
    lams = np.asarray(lams)
    occs = np.asarray(occs)
    lam = float(lams.mean())
    lam_se = float(lams.std(ddof=1) / np.sqrt(replicas))
    mass = occs.mean(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mass_rel = occs.std(axis=0, ddof=1) / np.sqrt(replicas) / mass
    # phi: population-controlled runs from each cell, 4 replicas each
    sub = 4
    k = max(2, walkers_per_cell // sub)
    phi_raw = np.empty(grid.n_cells)
    phi_rel = np.empty(grid.n_cells)
    for c in range(grid.n_cells):
        vals = []
        for rep in range(sub):
            gen = RngStream(seed, 1 << 20 | c, (rep,)).generator()
            r, v = grid.sample_in_cell(c, k, gen)
            try:
                run = smc_run(model, r, v, t_probe, h, seed + 1 + c, 1000 + rep)
            except ExtinctWalkersError:
                raise InsufficientStatisticsError(f"every walker started in cell {c} was absorbed") from None
            vals.append(np.exp(run.log_growth.sum() - lam * run.stage_times[-1]))
        vals = np.asarray(vals)
        phi_raw[c] = vals.mean()
        phi_rel[c] = vals.std(ddof=1) / np.sqrt(sub) / vals.mean()
    worst = float(np.nanmax(np.where(np.isfinite(mass_rel), mass_rel, np.inf)))
    if worst > MAX_REL_SE or np.nanmax(phi_rel) > MAX_REL_SE:
        raise InsufficientStatisticsError(
            f"grid cell relative standard error too large (phi_tilde {worst:.2f}, phi {np.nanmax(phi_rel):.2f}); "
            "use more walkers or a coarser grid")
    phi_tilde = mass / grid.volumes
    phi = phi_raw / float(mass @ phi_raw)
    eig = EigenTriple(lam, phi, phi_tilde, float("nan"), lam_stderr=lam_se, grid=grid)
    sig, sig_se = estimate_sigma_nbp(model, eig, sigma_samples, seed)
    eig.sigma, eig.sigma_stderr = sig, sig_se
    eig.residuals = {"normalization": abs(eig.normalization - 1.0),
                     "max_rel_se_phi": float(np.max(phi_rel)),
                     "max_rel_se_phi_tilde": worst}
    return eig


def estimate_sigma_nbp(model, eigen, n, seed, h=None):
    """Sigma = <phi_tilde, sigma_f VV[phi]> by sampling fissions at phi_tilde-distributed points.

    Phase points and yields use the same random numbers for any fission
    velocity law, so two models differing only in that law are compared
    with common random numbers. ``h`` (per-cell values on ``eigen.grid``)
    replaces phi in the pair functional. Returns (estimate, stderr).
    """
    from . import _nbp_kernels as NK
    from ._rng import RngStream

    grid = eigen.grid
    hv = np.asarray(eigen.phi if h is None else h, dtype=float)
    if hv.shape != (grid.n_cells,):
        raise ValueError(f"h needs one value per grid cell ({grid.n_cells})")
    gen = RngStream(seed, 1 << 30).generator()
    mass = eigen.phi_tilde * grid.volumes
    cells = gen.choice(grid.n_cells, size=n, p=mass / mass.sum())
    r = np.empty((n, 3))
    for c in np.unique(cells):
        idx = np.flatnonzero(cells == c)
        r[idx], _ = grid.sample_in_cell(c, len(idx), gen)
    reg = np.asarray(model.geometry.region_of(r), dtype=np.int64)
    vals = np.zeros(n)
    for g in np.unique(reg):
        idx = np.flatnonzero(reg == g)
        cnt, vel = NK.fission_samples(model.ycdf[g], model.fmode, model.cluster_kappa, model.v_min,
                                      model.v_max, int(seed), int(g) << 32, len(idx))
        kmax = vel.shape[1]
        rr = np.repeat(r[idx], kmax, axis=0)
        ph = hv[grid.cell_of(rr, vel.reshape(-1, 3))].reshape(len(idx), kmax)
        ph *= np.arange(kmax)[None, :] < cnt[:, None]
        vals[idx] = model.sigma_f[g] * (ph.sum(axis=1) ** 2 - (ph**2).sum(axis=1))
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n))


def pair_positivity_nbp(model, eigen, seed, n_g=8, n=20_000):
    """Sampled necessary condition for non-degenerate branching.

    Draws ``n_g`` random non-negative cell functions g and estimates
    <phi_tilde, sigma_f VV[g]> for each. Every value must be positive for the
    process to have a genuine second moment; this does not prove the full
    non-degeneracy assumption. Returns a list of (estimate, stderr).
    """
    from ._rng import RngStream

    gen = RngStream(seed, 1 << 31).generator()
    out = []
    for k in range(n_g):
        g = gen.random(eigen.grid.n_cells)
        out.append(estimate_sigma_nbp(model, eigen, n, seed + k + 1, h=g))
    return out
