"""Monte Carlo check of the compensation-noise model on the n x Lambda grid."""

import argparse

import numpy as np

from overlapscope.noise import poisson_oracle
from overlapscope.optics import SensorModel


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--trials", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    sensor = SensorModel()
    print(f"{'n':>3} {'Lambda':>8} {'mean err':>10} {'var err':>10}  ok")
    for n in (2, 4, 7):
        for lam in (50.0, 200.0, 1000.0):
            st = poisson_oracle(np.full(n, lam / n), sensor, args.trials, [args.seed, n, int(lam)])
            print(f"{n:>3} {lam:>8.0f} {st.mean_rel_error:>10.4%} {st.var_rel_error:>10.4%}  {st.within()}")


if __name__ == "__main__":
    main()
