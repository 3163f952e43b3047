"""Numba kernels for the neutron branching process.

Geometry is encoded as ``gk`` (0 ball, 1 box), the ball radius ``R`` or box
bounds ``lo``/``hi`` (same on every axis), and ``bnds``: interior region
boundaries (shell radii for a ball, x-plane cuts for a box). Region ``i`` of
a ball is the shell between ``bnds[i-1]`` and ``bnds[i]``; region ``i`` of a
box is the slab between cuts ``i-1`` and ``i``. Cross-sections are constant
per region, so every clock is an exact exponential between crossings.
"""

import numba as nb
import numpy as np

from ._rng import categorical, exponential, new_state, stream_key, uniform

ERR_NONE = 0
ERR_POP_CAP = 1
ERR_DRIFT = 2
ERR_WEIGHT = 3

DRIFT_TOL = 1e-9
LOG_WEIGHT_MAX = 700.0

BALL = 0
BOX = 1
FISSION_IID = 0
FISSION_CLUSTER = 1
SCATTER_UNIFORM = 0
SCATTER_KEEP = 1


@nb.njit(inline="always")
def _sphere_out(r0, r1, r2, v0, v1, v2, rad):
    """Time for a ray starting inside a sphere to leave it."""
    a = v0 * v0 + v1 * v1 + v2 * v2
    bq = r0 * v0 + r1 * v1 + r2 * v2
    c = r0 * r0 + r1 * r1 + r2 * r2 - rad * rad
    disc = bq * bq - a * c
    if disc < 0.0:
        disc = 0.0
    s = np.sqrt(disc)
    if bq >= 0.0:
        t = -c / (bq + s) if bq + s > 0.0 else 0.0
    else:
        t = (s - bq) / a
    return max(t, 0.0)


@nb.njit(inline="always")
def _sphere_in(r0, r1, r2, v0, v1, v2, rad):
    """Time for a ray outside a sphere to enter it (inf if it misses)."""
    bq = r0 * v0 + r1 * v1 + r2 * v2
    if bq >= 0.0:
        return np.inf
    a = v0 * v0 + v1 * v1 + v2 * v2
    c = r0 * r0 + r1 * r1 + r2 * r2 - rad * rad
    disc = bq * bq - a * c
    if disc <= 0.0:
        return np.inf
    return max(c / (np.sqrt(disc) - bq), 0.0)


@nb.njit(inline="always")
def _slab(x, v, lo, hi):
    if v > 0.0:
        return max((hi - x) / v, 0.0)
    if v < 0.0:
        return max((lo - x) / v, 0.0)
    return np.inf


@nb.njit(cache=True)
def exit_time(gk, R, lo, hi, r0, r1, r2, v0, v1, v2):
    if gk == BALL:
        return _sphere_out(r0, r1, r2, v0, v1, v2, R)
    return min(_slab(r0, v0, lo, hi), _slab(r1, v1, lo, hi), _slab(r2, v2, lo, hi))


@nb.njit(inline="always")
def _boundary(gk, bnds, reg, r0, r1, r2, v0, v1, v2):
    """Time to the next interior region boundary and the region entered."""
    nb_ = bnds.shape[0]
    best = np.inf
    nxt = -1
    if nb_ == 0:
        return best, nxt
    if gk == BALL:
        if reg < nb_:
            t = _sphere_out(r0, r1, r2, v0, v1, v2, bnds[reg])
            if t < best:
                best = t
                nxt = reg + 1
        if reg > 0:
            t = _sphere_in(r0, r1, r2, v0, v1, v2, bnds[reg - 1])
            if t < best:
                best = t
                nxt = reg - 1
    else:
        if v0 > 0.0 and reg < nb_:
            best = max((bnds[reg] - r0) / v0, 0.0)
            nxt = reg + 1
        elif v0 < 0.0 and reg > 0:
            best = max((bnds[reg - 1] - r0) / v0, 0.0)
            nxt = reg - 1
    return best, nxt


@nb.njit(cache=True)
def region_of(gk, bnds, r0, r1, r2):
    key = np.sqrt(r0 * r0 + r1 * r1 + r2 * r2) if gk == BALL else r0
    return np.searchsorted(bnds, key, side="right")


@nb.njit(inline="always")
def _outside_by(gk, R, lo, hi, r0, r1, r2):
    if gk == BALL:
        return np.sqrt(r0 * r0 + r1 * r1 + r2 * r2) - R
    m = lo - r0
    m = max(m, r0 - hi)
    m = max(m, lo - r1)
    m = max(m, r1 - hi)
    m = max(m, lo - r2)
    m = max(m, r2 - hi)
    return m


@nb.njit(inline="always")
def _iso(st):
    z = 2.0 * uniform(st) - 1.0
    ph = 2.0 * np.pi * uniform(st)
    s = np.sqrt(max(0.0, 1.0 - z * z))
    return s * np.cos(ph), s * np.sin(ph), z


@nb.njit(inline="always")
def _vmf(st, a0, a1, a2, kappa):
    """Direction with von Mises-Fisher density around the unit axis a."""
    u = uniform(st)
    if kappa > 1e-8:
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    else:
        w = 2.0 * u - 1.0
    w = min(1.0, max(-1.0, w))
    # orthonormal frame around a
    if abs(a0) < 0.9:
        h0, h1, h2 = 1.0, 0.0, 0.0
    else:
        h0, h1, h2 = 0.0, 1.0, 0.0
    e0 = a1 * h2 - a2 * h1
    e1 = a2 * h0 - a0 * h2
    e2 = a0 * h1 - a1 * h0
    ne = np.sqrt(e0 * e0 + e1 * e1 + e2 * e2)
    e0 /= ne
    e1 /= ne
    e2 /= ne
    f0 = a1 * e2 - a2 * e1
    f1 = a2 * e0 - a0 * e2
    f2 = a0 * e1 - a1 * e0
    ph = 2.0 * np.pi * uniform(st)
    s = np.sqrt(max(0.0, 1.0 - w * w))
    c = s * np.cos(ph)
    d = s * np.sin(ph)
    return w * a0 + c * e0 + d * f0, w * a1 + c * e1 + d * f1, w * a2 + c * e2 + d * f2


@nb.njit(inline="always")
def _speed(st, vmin, vmax):
    return vmin + (vmax - vmin) * uniform(st)


@nb.njit(cache=True)
def fission_velocities(st, n, fmode, ckappa, vmin, vmax, out):
    """Fill ``out[:n]`` with offspring velocities."""
    if fmode == FISSION_CLUSTER:
        a0, a1, a2 = _iso(st)
        for k in range(n):
            d0, d1, d2 = _vmf(st, a0, a1, a2, ckappa)
            sp = _speed(st, vmin, vmax)
            out[k, 0] = sp * d0
            out[k, 1] = sp * d1
            out[k, 2] = sp * d2
    else:
        for k in range(n):
            d0, d1, d2 = _iso(st)
            sp = _speed(st, vmin, vmax)
            out[k, 0] = sp * d0
            out[k, 1] = sp * d1
            out[k, 2] = sp * d2


@nb.njit(inline="always")
def _scatter(st, v0, v1, v2, smode, vmin, vmax):
    if smode == SCATTER_KEEP:
        sp = np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
    else:
        sp = _speed(st, vmin, vmax)
    d0, d1, d2 = _iso(st)
    return sp * d0, sp * d1, sp * d2


@nb.njit(cache=True)
def _grow(a, size):
    b = np.empty((size,) + a.shape[1:], a.dtype)
    b[: a.shape[0]] = a
    return b


@nb.njit(nogil=True, cache=True)
def forward_nbp(gk, R, lo, hi, bnds, sig_s, sig_f, ycdf, fmode, ckappa, smode, vmin, vmax,
                x_r, x_v, checkpoints, t_max, seed, first, n, pop_cap):
    """Depth-first simulation of trajectories ``first..first+n-1``.

    Returns extinction times (inf = alive at t_max), per-checkpoint features
    (particle count, sum of speeds) and an error code.
    """
    c = checkpoints.shape[0]
    nyield = ycdf.shape[1]
    zeta = np.full(n, np.inf)
    feats = np.zeros((n, c, 2))
    cap = 256
    sr = np.empty((cap, 3))
    sv = np.empty((cap, 3))
    stt = np.empty(cap)
    sreg = np.empty(cap, np.int64)
    kids = np.empty((nyield, 3))
    reg0 = region_of(gk, bnds, x_r[0], x_r[1], x_r[2])
    for j in range(n):
        st = new_state(stream_key(np.uint64(seed), np.uint64(first + j)))
        top = 1
        sr[0, :] = x_r
        sv[0, :] = x_v
        stt[0] = 0.0
        sreg[0] = reg0
        last_death = 0.0
        censored = False
        while top > 0:
            top -= 1
            r0, r1, r2 = sr[top, 0], sr[top, 1], sr[top, 2]
            v0, v1, v2 = sv[top, 0], sv[top, 1], sv[top, 2]
            t = stt[top]
            reg = sreg[top]
            p = np.searchsorted(checkpoints, t, side="left")
            while True:
                rate = sig_s[reg] + sig_f[reg]
                tau = exponential(st, rate)
                g_exit = exit_time(gk, R, lo, hi, r0, r1, r2, v0, v1, v2)
                g_b, nreg = _boundary(gk, bnds, reg, r0, r1, r2, v0, v1, v2)
                rem = t_max - t
                # 0 event, 1 exit, 2 boundary, 3 horizon
                kind = 0
                dt = tau
                if g_exit <= dt:
                    kind = 1
                    dt = g_exit
                if g_b < dt:
                    kind = 2
                    dt = g_b
                if rem <= dt:
                    kind = 3
                    dt = rem
                end = t + dt
                sp = np.sqrt(v0 * v0 + v1 * v1 + v2 * v2)
                while p < c and (checkpoints[p] < end or (kind == 3 and checkpoints[p] <= end)):
                    feats[j, p, 0] += 1.0
                    feats[j, p, 1] += sp
                    if feats[j, p, 0] > pop_cap:
                        return zeta, feats, ERR_POP_CAP
                    p += 1
                if kind == 3:
                    censored = True
                    break
                r0 += v0 * dt
                r1 += v1 * dt
                r2 += v2 * dt
                t = end
                if kind == 1:
                    last_death = max(last_death, t)
                    break
                if kind == 2:
                    reg = nreg
                    continue
                out = _outside_by(gk, R, lo, hi, r0, r1, r2)
                if out > DRIFT_TOL:
                    return zeta, feats, ERR_DRIFT
                if out > 0.0:
                    last_death = max(last_death, t)
                    break
                if uniform(st) * rate < sig_s[reg]:
                    v0, v1, v2 = _scatter(st, v0, v1, v2, smode, vmin, vmax)
                    continue
                nk = categorical(st, ycdf[reg], 0, nyield)
                if nk == 0:
                    last_death = max(last_death, t)
                    break
                fission_velocities(st, nk, fmode, ckappa, vmin, vmax, kids)
                if top + nk > pop_cap:
                    return zeta, feats, ERR_POP_CAP
                if top + nk > cap:
                    while top + nk > cap:
                        cap *= 2
                    sr = _grow(sr, cap)
                    sv = _grow(sv, cap)
                    stt = _grow(stt, cap)
                    sreg = _grow(sreg, cap)
                # push in reverse so the first child is processed first
                for k in range(nk - 1, -1, -1):
                    sr[top, 0] = r0
                    sr[top, 1] = r1
                    sr[top, 2] = r2
                    sv[top, 0] = kids[k, 0]
                    sv[top, 1] = kids[k, 1]
                    sv[top, 2] = kids[k, 2]
                    stt[top] = t
                    sreg[top] = reg
                    top += 1
                break
        if not censored:
            zeta[j] = last_death
    return zeta, feats, ERR_NONE


@nb.njit(nogil=True, cache=True)
def nrw_advance(gk, R, lo, hi, bnds, alpha, beta, p_scatter, smode, vmin, vmax,
                r, v, reg, alive, logw, h, seed, base):
    """Advance every live walker of the weighted neutron random walk by ``h``.

    Jumps happen at rate alpha; with probability p_scatter the new velocity
    follows the scatter law, otherwise the fission marginal (uniform speed,
    isotropic direction). log-weights accumulate beta along the path;
    walkers that leave the domain die. Walker i uses stream ``base + i``.
    """
    m = r.shape[0]
    for i in range(m):
        if not alive[i]:
            continue
        st = new_state(stream_key(np.uint64(seed), np.uint64(base + i)))
        r0, r1, r2 = r[i, 0], r[i, 1], r[i, 2]
        v0, v1, v2 = v[i, 0], v[i, 1], v[i, 2]
        g = reg[i]
        lw = logw[i]
        rem = h
        while True:
            tau = exponential(st, alpha[g])
            g_exit = exit_time(gk, R, lo, hi, r0, r1, r2, v0, v1, v2)
            g_b, nreg = _boundary(gk, bnds, g, r0, r1, r2, v0, v1, v2)
            kind = 0
            dt = tau
            if g_exit <= dt:
                kind = 1
                dt = g_exit
            if g_b < dt:
                kind = 2
                dt = g_b
            if rem <= dt:
                kind = 3
                dt = rem
            lw += beta[g] * dt
            r0 += v0 * dt
            r1 += v1 * dt
            r2 += v2 * dt
            rem -= dt
            if kind == 3:
                break
            if kind == 1:
                alive[i] = False
                break
            if kind == 2:
                g = nreg
                continue
            out = _outside_by(gk, R, lo, hi, r0, r1, r2)
            if out > DRIFT_TOL:
                return ERR_DRIFT
            if out > 0.0:
                alive[i] = False
                break
            if uniform(st) < p_scatter[g]:
                v0, v1, v2 = _scatter(st, v0, v1, v2, smode, vmin, vmax)
            else:
                sp = _speed(st, vmin, vmax)
                d0, d1, d2 = _iso(st)
                v0, v1, v2 = sp * d0, sp * d1, sp * d2
        if lw > LOG_WEIGHT_MAX:
            return ERR_WEIGHT
        r[i, 0], r[i, 1], r[i, 2] = r0, r1, r2
        v[i, 0], v[i, 1], v[i, 2] = v0, v1, v2
        reg[i] = g
        logw[i] = lw
    return ERR_NONE


@nb.njit(nogil=True, cache=True)
def scatter_directions(smode, vmin, vmax, v_in, seed, n):
    """n resampled velocities from the scatter law (for kernel checks)."""
    out = np.empty((n, 3))
    st = new_state(stream_key(np.uint64(seed), np.uint64(0)))
    for k in range(n):
        a, b, c = _scatter(st, v_in[0], v_in[1], v_in[2], smode, vmin, vmax)
        out[k, 0], out[k, 1], out[k, 2] = a, b, c
    return out


@nb.njit(nogil=True, cache=True)
def fission_samples(ycdf_row, fmode, ckappa, vmin, vmax, seed, first, n):
    """Offspring of n independent fissions: counts and velocities (padded)."""
    nyield = ycdf_row.shape[0]
    counts = np.zeros(n, np.int64)
    vel = np.zeros((n, nyield, 3))
    buf = np.empty((nyield, 3))
    for j in range(n):
        st = new_state(stream_key(np.uint64(seed), np.uint64(first + j)))
        k = categorical(st, ycdf_row, 0, nyield)
        counts[j] = k
        fission_velocities(st, k, fmode, ckappa, vmin, vmax, buf)
        vel[j, :k] = buf[:k]
    return counts, vel
