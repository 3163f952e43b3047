"""Exact combinatorics behind the moment expansions.

Positive compositions, multinomial coefficients, partial Bell polynomials,
unsigned Stirling numbers of the first kind, the factorial identity

    (k+1)! = sum_j 2^j sum_{compositions of k into j parts}
                 (1/j!) * multinomial(k; k_1..k_j) * prod (k_i - 1)!

and the moment formula for sums of iid variables. Everything is integer or
:class:`fractions.Fraction` arithmetic; nothing is rounded.
"""

from fractions import Fraction
from itertools import combinations, product
from math import comb, factorial, prod

COMPOSITION_MAX_K = 30
IDENTITY_MAX_K = 15


class InvalidRangeError(ValueError):
    pass


class MismatchError(ValueError):
    pass


def compositions_positive(k, j):
    """All ordered ``j``-tuples of positive integers summing to ``k``.

    Returned in lexicographic order. There are ``C(k-1, j-1)`` of them.
    """
    if not (1 <= j <= k):
        raise InvalidRangeError(f"need 1 <= j <= k, got k={k}, j={j}")
    if k > COMPOSITION_MAX_K:
        raise InvalidRangeError(f"k={k} exceeds enumeration guard {COMPOSITION_MAX_K}")
    out = []
    # stars and bars: choose j-1 cut points among the k-1 gaps
    for cuts in combinations(range(1, k), j - 1):
        edges = (0,) + cuts + (k,)
        out.append(tuple(edges[i + 1] - edges[i] for i in range(j)))
    return out


def multinomial(k, parts):
    if sum(parts) != k:
        raise MismatchError(f"parts {tuple(parts)} do not sum to {k}")
    if any(p < 0 for p in parts):
        raise MismatchError("parts must be non-negative")
    out = factorial(k)
    for p in parts:
        out //= factorial(p)
    return out


def _block_counts(k, j):
    """Tuples (l_1..l_{k-j+1}) with sum l_i = j and sum i*l_i = k."""
    width = k - j + 1

    def rec(i, blocks_left, items_left):
        if i > width:
            if blocks_left == 0 and items_left == 0:
                yield ()
            return
        for li in range(min(blocks_left, items_left // i) + 1):
            for rest in rec(i + 1, blocks_left - li, items_left - i * li):
                yield (li,) + rest

    yield from rec(1, j, k)


def bell_partial(k, j, xs):
    """Partial Bell polynomial ``B_{k,j}(x_1, ..., x_{k-j+1})``."""
    if not (1 <= j <= k):
        raise InvalidRangeError(f"need 1 <= j <= k, got k={k}, j={j}")
    xs = [Fraction(x) for x in xs]
    if len(xs) != k - j + 1:
        raise MismatchError(f"expected {k - j + 1} arguments, got {len(xs)}")
    total = Fraction(0)
    for ls in _block_counts(k, j):
        coef = Fraction(factorial(k))
        term = Fraction(1)
        for i, li in enumerate(ls, start=1):
            coef /= factorial(li) * factorial(i) ** li
            term *= xs[i - 1] ** li
        total += coef * term
    return total


def rising_factorial_coeffs(k):
    """Integer coefficients of x(x+1)...(x+k-1), lowest degree first."""
    poly = [1]
    for m in range(k):
        # multiply by (x + m)
        nxt = [0] * (len(poly) + 1)
        for d, c in enumerate(poly):
            nxt[d] += m * c
            nxt[d + 1] += c
        poly = nxt
    return poly


def stirling_first_unsigned(k, j):
    if not (1 <= j <= k):
        raise InvalidRangeError(f"need 1 <= j <= k, got k={k}, j={j}")
    return rising_factorial_coeffs(k)[j]


def stirling_identity_rhs(k):
    """Right-hand side of the (k+1)! identity, evaluated term by term."""
    if not (1 <= k <= IDENTITY_MAX_K):
        raise InvalidRangeError(f"k={k} outside 1..{IDENTITY_MAX_K}")
    total = Fraction(0)
    for j in range(1, k + 1):
        inner = Fraction(0)
        for parts in compositions_positive(k, j):
            inner += multinomial(k, parts) * prod(factorial(p - 1) for p in parts)
        total += Fraction(2**j, factorial(j)) * inner
    if total.denominator != 1:
        raise ArithmeticError(f"non-integer result {total} for k={k}")
    return total.numerator


def iid_moment_formula(k, n, moments):
    """``E[(Y_1 + ... + Y_n)^k]`` from the moments ``[E Y, ..., E Y^k]``."""
    moments = [Fraction(m) for m in moments]
    if len(moments) != k:
        raise MismatchError(f"expected {k} moments, got {len(moments)}")
    if k < 1 or n < 1:
        raise InvalidRangeError("k and n must be positive")
    total = Fraction(0)
    for j in range(1, min(k, n) + 1):
        inner = Fraction(0)
        for parts in compositions_positive(k, j):
            inner += multinomial(k, parts) * prod(moments[p - 1] for p in parts)
        total += comb(n, j) * inner
    return total


def brute_force_sum_moment(k, n, atoms, probs):
    """``E[(Y_1 + ... + Y_n)^k]`` by enumerating every n-tuple of atoms."""
    atoms = [Fraction(a) for a in atoms]
    probs = [Fraction(p) for p in probs]
    total = Fraction(0)
    for idx in product(range(len(atoms)), repeat=n):
        w = prod(probs[i] for i in idx)
        total += w * sum(atoms[i] for i in idx) ** k
    return total


def check_identities(k_max=12):
    """Run every identity up to ``k_max``; return rows ``(name, k, ok, detail)``."""
    rows = []
    for k in range(1, k_max + 1):
        lhs = factorial(k + 1)
        rhs = stirling_identity_rhs(k)
        rows.append(("factorial_identity", k, lhs == rhs, f"{rhs} vs {lhs}"))
    for k in range(1, min(k_max, 10) + 1):
        ok = all(
            bell_partial(k, j, [factorial(i) for i in range(k - j + 1)])
            == stirling_first_unsigned(k, j)
            for j in range(1, k + 1)
        )
        rows.append(("bell_equals_stirling", k, ok, ""))
        s2 = sum(stirling_first_unsigned(k, j) * 2**j for j in range(1, k + 1))
        rows.append(("rising_factorial_at_2", k, s2 == factorial(k + 1), f"{s2}"))
    cases = [
        ([0, 1], [Fraction(1, 2), Fraction(1, 2)]),
        ([0, 1, 3], [Fraction(1, 5), Fraction(1, 2), Fraction(3, 10)]),
        ([-1, 2, Fraction(1, 2), 4], [Fraction(1, 4), Fraction(1, 3), Fraction(1, 6), Fraction(1, 4)]),
    ]
    for case, (atoms, probs) in enumerate(cases):
        ok = True
        for n in range(1, 5):
            for k in range(1, 6):
                mom = [sum(p * Fraction(a) ** i for a, p in zip(atoms, probs)) for i in range(1, k + 1)]
                ok &= iid_moment_formula(k, n, mom) == brute_force_sum_moment(k, n, atoms, probs)
        rows.append(("iid_moment_formula", case, ok, f"{len(atoms)} atoms, n<=4, k<=5"))
    return rows
