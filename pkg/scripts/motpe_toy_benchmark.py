"""Hypervolume of MOTPE against random search on the bi-objective toy problem."""
import argparse

import numpy as np

from eeggraph.motpe import toy_hypervolume


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--trials", type=int, default=100)
    args = ap.parse_args()

    hv = np.array([[toy_hypervolume(s, sampler, args.trials) for sampler in ("motpe", "random")]
                   for s in range(args.seeds)])
    wins = int(np.sum(hv[:, 0] >= hv[:, 1]))
    print(f"MOTPE  hypervolume {hv[:, 0].mean():.3f} +- {hv[:, 0].std(ddof=1):.3f}")
    print(f"random hypervolume {hv[:, 1].mean():.3f} +- {hv[:, 1].std(ddof=1):.3f}")
    print(f"MOTPE >= random in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
