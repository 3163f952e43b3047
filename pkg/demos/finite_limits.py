"""Kolmogorov and Yaglom limits on the two bundled finite-type models.

Prints t p(t) against 2 phi(x)/Sigma, the conditioned Laplace transform of
<f, X_t>/t against 1/(1 + <phi_tilde, f> Sigma theta/2), and the ODE
rate a(t) Sigma t/2 -> 1.

    python3 demos/finite_limits.py --n 200000
"""

import argparse

import numpy as np

from critbranch.eigen import exact_eigen
from critbranch.io import load_model
from critbranch.limits import ode_asymptotics, survival_curve, yaglom_laplace


def show(table):
    for line in table.lines():
        print("  " + line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=1)
    a = ap.parse_args()

    for name in ("model-bin", "model-2t"):
        m = load_model(name)
        e = exact_eigen(m)
        print(f"{name}: lambda={e.lam:.2e} Sigma={e.sigma:.6g} phi={np.round(e.phi, 6)} "
              f"phi_tilde={np.round(e.phi_tilde, 6)}")
        c = survival_curve(m, 0, [10.0, 50.0, 100.0], a.n, a.seed)
        show(c.table())
        y = yaglom_laplace(m, 0, 1.0, 100.0, [0.5, 1.0, 2.0], a.n * 5, a.seed + 1)
        show(y)
        o = ode_asymptotics(m, e, 500.0, times=[50.0, 100.0, 500.0])
        for t, s in zip(o.times, o.scaled):
            print(f"  ode t={t:g}: a(t) Sigma t/2 = {s:.5f}")


if __name__ == "__main__":
    main()
