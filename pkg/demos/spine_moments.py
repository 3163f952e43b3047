"""Spine decomposition: moments of <phi, X_t>/t and ergodic averages.

Under the phi-biased measure the spine runs forever, so E^phi[<phi, X_t>^j]/t^j
tends to (j+1)! (Sigma/2)^j. Averages of F along the spine at uniform
times tend to products of <phi phi_tilde, F>.

    python3 demos/spine_moments.py --n 20000
"""

import argparse

import numpy as np

from critbranch.eigen import exact_eigen
from critbranch.finite import many_to_two_exact
from critbranch.io import load_model
from critbranch.limits import moment_table
from critbranch.spine import ergodic_average_check, ergodic_finite_t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=20_000)
    ap.add_argument("--seed", type=int, default=3)
    a = ap.parse_args()

    m = load_model("model-2t")
    e = exact_eigen(m)
    tab = moment_table(m, e, 0, [20.0, 100.0], [1, 2, 3], a.n, a.seed)
    for line in tab.lines():
        print(line)
    for t in (20.0, 100.0):
        exact = many_to_two_exact(m, e.phi, e.phi, t)[0] / (e.phi[0] * t)
        print(f"exact finite-t j=1 at t={t:g}: {exact:.5f}")

    F = lambda i, u: float(i == 0)  # noqa: E731
    for k in (1, 2):
        r = ergodic_average_check(m, e, [F] * k, 100.0, a.n * 5, a.seed + k)
        ex = ergodic_finite_t(m, e, [np.array([1.0, 0.0])] * k, 100.0)
        print(f"ergodic, {k} factor(s): {r.estimate:.5f} +- {r.stderr:.1e}  finite-t {ex:.5f}  limit {r.target:.5f}")


if __name__ == "__main__":
    main()
