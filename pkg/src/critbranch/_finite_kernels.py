"""Numba kernels for finite-type models.

Populations are type-count vectors; the next event is drawn from the total
rate sum_i gamma_i n_i (Gillespie). Offspring tables are flattened: outcomes
of type i occupy rows ``start[i]:start[i+1]`` of ``cdf`` (cumulative within
the block) and ``counts`` (children per type).
"""

import numba as nb
import numpy as np

from ._rng import categorical, exponential, new_state, stream_key, uniform

ERR_NONE = 0
ERR_POP_CAP = 1


@nb.njit(inline="always")
def _pick_weighted(st, w, n, total):
    u = uniform(st) * total
    acc = 0.0
    last = -1
    for i in range(w.shape[0]):
        wi = w[i] * n[i]
        if wi > 0.0:
            acc += wi
            last = i
            if u < acc:
                return i
    return last


@nb.njit(nogil=True, cache=True)
def forward_counts(rates, start, cdf, counts, x0, checkpoints, t_max, seed, first, n, pop_cap):
    """Ordinary trajectories ``first..first+n-1``; returns (zeta, counts at checkpoints, err)."""
    d = rates.shape[0]
    c = checkpoints.shape[0]
    zeta = np.full(n, np.inf)
    feats = np.zeros((n, c, d))
    pop = np.zeros(d, np.int64)
    for j in range(n):
        st = new_state(stream_key(np.uint64(seed), np.uint64(first + j)))
        pop[:] = 0
        pop[x0] = 1
        total = 1
        t = 0.0
        k = 0
        while True:
            r = 0.0
            for i in range(d):
                r += rates[i] * pop[i]
            tn = t + exponential(st, r)
            while k < c and checkpoints[k] < tn:
                for i in range(d):
                    feats[j, k, i] = pop[i]
                k += 1
            if tn > t_max:
                break
            ty = _pick_weighted(st, rates, pop, r)
            o = categorical(st, cdf, start[ty], start[ty + 1])
            pop[ty] -= 1
            total -= 1
            for i in range(d):
                pop[i] += counts[o, i]
                total += counts[o, i]
            t = tn
            if total == 0:
                zeta[j] = t
                break
            if total > pop_cap:
                return zeta, feats, ERR_POP_CAP
    return zeta, feats, ERR_NONE


@nb.njit(nogil=True, cache=True)
def spine_counts(rates, start, cdf, counts, rho, sb_start, sb_cdf, sb_counts, phi,
                 x0, checkpoints, t_max, seed, first, n, pop_cap):
    """Trajectories under the phi-transformed measure.

    The spine (type ``s``) branches at rate ``rho[s]`` with the size-biased
    table, then hands the spine to child type i with probability
    proportional to count_i * phi_i. Everything else follows the ordinary
    dynamics. Returns spine type and ordinary counts at each checkpoint, the
    number of spine branch events, and an error code.
    """
    d = rates.shape[0]
    c = checkpoints.shape[0]
    spine_at = np.zeros((n, c), np.int64)
    feats = np.zeros((n, c, d))
    n_branch = np.zeros(n, np.int64)
    pop = np.zeros(d, np.int64)
    w = np.zeros(d)
    for j in range(n):
        st = new_state(stream_key(np.uint64(seed), np.uint64(first + j)))
        pop[:] = 0
        s = x0
        total = 0
        t = 0.0
        k = 0
        while True:
            r = 0.0
            for i in range(d):
                r += rates[i] * pop[i]
            rs = rho[s]
            tn = t + exponential(st, r + rs)
            while k < c and checkpoints[k] < tn:
                spine_at[j, k] = s
                for i in range(d):
                    feats[j, k, i] = pop[i]
                k += 1
            if tn > t_max:
                break
            t = tn
            if uniform(st) * (r + rs) < rs:
                o = categorical(st, sb_cdf, sb_start[s], sb_start[s + 1])
                tot_w = 0.0
                for i in range(d):
                    w[i] = sb_counts[o, i] * phi[i]
                    tot_w += w[i]
                u = uniform(st) * tot_w
                acc = 0.0
                ns = -1
                for i in range(d):
                    if w[i] > 0.0:
                        acc += w[i]
                        ns = i
                        if u < acc:
                            break
                for i in range(d):
                    pop[i] += sb_counts[o, i]
                    total += sb_counts[o, i]
                pop[ns] -= 1
                total -= 1
                s = ns
                n_branch[j] += 1
            else:
                ty = _pick_weighted(st, rates, pop, r)
                o = categorical(st, cdf, start[ty], start[ty + 1])
                pop[ty] -= 1
                total -= 1
                for i in range(d):
                    pop[i] += counts[o, i]
                    total += counts[o, i]
            if total > pop_cap:
                return spine_at, feats, n_branch, ERR_POP_CAP
    return spine_at, feats, n_branch, ERR_NONE


@nb.njit(nogil=True, cache=True)
def spine_motion_occupation(jump_rates, x0, t, n_bins, seed, first, n):
    """Occupation time of the spine type process per (u-bin, type), u = s/t.

    ``jump_rates[i, j]`` is the rate of moving from type i to j.
    """
    d = jump_rates.shape[0]
    out_rate = np.zeros(d)
    cum = np.zeros((d, d))
    for i in range(d):
        acc = 0.0
        for jj in range(d):
            if jj != i:
                acc += jump_rates[i, jj]
            cum[i, jj] = acc
        out_rate[i] = acc
    occ = np.zeros((n, n_bins, d))
    width = t / n_bins
    for j in range(n):
        st = new_state(stream_key(np.uint64(seed), np.uint64(first + j)))
        s = x0
        now = 0.0
        while now < t:
            nxt = now + exponential(st, out_rate[s])
            end = min(nxt, t)
            # spread [now, end) over bins
            b = min(int(now / width), n_bins - 1)
            a = now
            while a < end:
                edge = min((b + 1) * width, end)
                if b == n_bins - 1:
                    edge = end
                occ[j, b, s] += edge - a
                a = edge
                b += 1
            if nxt >= t:
                break
            u = uniform(st) * out_rate[s]
            ns = s
            for jj in range(d):
                if jj != s and u < cum[s, jj]:
                    ns = jj
                    break
            s = ns
            now = nxt
    return occ


@nb.njit(inline="always")
def _rhs(u, rates, start, probs, counts, out):
    d = u.shape[0]
    for i in range(d):
        s = 0.0
        for o in range(start[i], start[i + 1]):
            lg = 0.0
            for jj in range(d):
                cj = counts[o, jj]
                if cj > 0:
                    lg += cj * np.log1p(-u[jj])
            s += probs[o] * (-np.expm1(lg))
        out[i] = rates[i] * (s - u[i])


@nb.njit(cache=True)
def rk4_survival(rates, start, probs, counts, t_max, dt, every):
    """Classical RK4 for the survival ODE with u_0 = 1; keeps every ``every``-th step."""
    d = rates.shape[0]
    steps = int(np.ceil(t_max / dt - 1e-9))
    h = t_max / steps
    n_rec = steps // every + 1
    if steps % every != 0:
        n_rec += 1
    times = np.empty(n_rec)
    us = np.empty((n_rec, d))
    u = np.ones(d)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    tmp = np.empty(d)
    times[0] = 0.0
    us[0] = u
    r = 1
    for step in range(1, steps + 1):
        _rhs(u, rates, start, probs, counts, k1)
        for i in range(d):
            tmp[i] = u[i] + 0.5 * h * k1[i]
        _rhs(tmp, rates, start, probs, counts, k2)
        for i in range(d):
            tmp[i] = u[i] + 0.5 * h * k2[i]
        _rhs(tmp, rates, start, probs, counts, k3)
        for i in range(d):
            tmp[i] = u[i] + h * k3[i]
        _rhs(tmp, rates, start, probs, counts, k4)
        for i in range(d):
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if step % every == 0 or step == steps:
            times[r] = step * h
            us[r] = u
            r += 1
    return times[:r], us[:r]
