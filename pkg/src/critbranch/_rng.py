"""Counter-based random streams.

Every trajectory owns a stream keyed by ``(seed, index)``. Draw ``k`` of a
stream is ``mix64(key + (k + 1) * GOLDEN)`` (SplitMix64 output function), so
the numbers a trajectory sees never depend on which worker ran it or in
what order.

The numba helpers operate on a ``uint64[2]`` state array ``[key, counter]``.
"""

from dataclasses import dataclass, field

import numba as nb
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SALT = np.uint64(0xD1B54A32D192ED03)
_ONE = np.uint64(1)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53

MASK64 = (1 << 64) - 1


@nb.njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def stream_key(seed, index):
    """Key of stream ``index`` under global ``seed`` (both uint64)."""
    return mix64(mix64(seed ^ _SALT) + (index + _ONE) * _GOLDEN)


@nb.njit(cache=True)
def substream_key(key, ordinal):
    return mix64(key ^ mix64((ordinal + _ONE) * _SALT))


@nb.njit(cache=True)
def new_state(key):
    st = np.empty(2, dtype=np.uint64)
    st[0] = key
    st[1] = np.uint64(0)
    return st


@nb.njit(inline="always", cache=True)
def next_u64(st):
    c = st[1] + _ONE
    st[1] = c
    return mix64(st[0] + c * _GOLDEN)


@nb.njit(inline="always", cache=True)
def uniform(st):
    """Uniform on the open interval (0, 1)."""
    return (np.float64(next_u64(st) >> _S11) + 0.5) * _INV53


@nb.njit(inline="always", cache=True)
def exponential(st, rate):
    if rate <= 0.0:
        return np.inf
    return -np.log(uniform(st)) / rate


@nb.njit(cache=True)
def categorical(st, cdf, lo, hi):
    """Index in ``[lo, hi)`` drawn from the cumulative table ``cdf[lo:hi]``."""
    u = uniform(st) * cdf[hi - 1]
    for k in range(lo, hi - 1):
        if u < cdf[k]:
            return k
    return hi - 1


def _as_u64(x):
    return np.uint64(int(x) & MASK64)


@dataclass(frozen=True)
class RngStream:
    """Random stream of one trajectory: a global seed plus a stream index.

    ``path`` holds substream ordinals (e.g. the immigration event that spawned
    a subtree). Two streams with different ``(seed, index, path)`` are
    statistically independent.
    """

    seed: int
    index: int = 0
    path: tuple = field(default=())

    def key(self):
        k = np.uint64(stream_key(_as_u64(self.seed), _as_u64(self.index)))
        for o in self.path:
            k = np.uint64(substream_key(k, _as_u64(o)))
        return np.uint64(k)

    def substream(self, ordinal):
        return RngStream(self.seed, self.index, self.path + (int(ordinal),))

    def generator(self):
        """A numpy Generator for pure-Python consumers of this stream."""
        return np.random.Generator(np.random.Philox(key=int(self.key())))
