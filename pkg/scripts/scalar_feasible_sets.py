"""Feasible sets of DA-DR and tube MPC for a scalar system over a sweep of terminal gains.

With the LQR gain (or a mildly detuned one) both sets coincide on scalar
examples; an over-correcting gain (a + b K_f < 0) makes the DA-DR set
strictly larger.  Prints one line per gain.
"""

import argparse

import numpy as np

from dadr_mpc.ambiguity import AmbiguitySpec
from dadr_mpc.controller import MpcConfig, terminal_ingredients
from dadr_mpc.errors import EmptySetError
from dadr_mpc.linsys import CostSpec, LinearSystem
from dadr_mpc.polytope import Polytope
from dadr_mpc.simlab import feasible_set_grid


def configs(a, w, K_f, N_h, eps, seed=0):
    sys_ = LinearSystem([[a]], [[1.0]], [[1.0]])
    cost = CostSpec([[1.0]], [[1.0]])
    W = Polytope.box([-w], [w])
    X = Polytope.box([-5.0], [5.0])
    U = Polytope.box([-1.0], [1.0])
    samples = np.random.default_rng(seed).uniform(-w, w, size=(5, N_h))
    spec = AmbiguitySpec.from_step_support(samples, eps, 0.2, W)
    term = terminal_ingredients(sys_, cost, W, X, U, K_f=None if K_f is None else [[K_f]])
    return [MpcConfig(sys_, cost, spec, N_h, X, term, U, mode=m) for m in ("dadr", "tube")]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--a", type=float, default=1.3)
    p.add_argument("--w", type=float, default=0.1)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--points", type=int, default=201)
    args = p.parse_args()
    grid = {"lower": [-4.0], "upper": [4.0], "per_axis": args.points}
    for K_f in (None, -0.5, -1.3, -1.8, -2.0):
        label = "LQR" if K_f is None else f"{K_f:+.2f}"
        try:
            da, tube = configs(args.a, args.w, K_f, args.horizon, 0.02)
        except EmptySetError as exc:
            print(f"K_f {label:>6}: {exc}")
            continue
        rep = feasible_set_grid(da, tube, grid)
        print(f"K_f {label:>6}: DA-DR {rep.count_da:4d}  tube {rep.count_tube:4d}  "
              f"inclusion violations {rep.violations}")


if __name__ == "__main__":
    main()
