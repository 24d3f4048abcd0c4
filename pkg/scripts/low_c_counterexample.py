"""Scan random CMDPs for aggregation-bound failures when the metric's transition weight c < gamma.

With an exact L1 embedding of the metric (delta ~ 0) the bound holds for every
instance at c = gamma; for smaller c some instances break it.
"""

import argparse

from condbisim.abstraction import verify_aggregation_bound
from condbisim.bounds import near_isometric_embedding
from condbisim.cmdp import generate_env


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=60)
    ap.add_argument("--eps", type=float, default=0.05)
    ap.add_argument("--cs", type=float, nargs="+", default=[0.1, 0.3, 0.5, 0.9])
    args = ap.parse_args()

    for c in args.cs:
        fails = []
        for seed in range(args.seeds):
            cm = generate_env("random_cmdp", {}, seed)
            phi = near_isometric_embedding(cm, c, 0.1, 0.0, None)
            rep = verify_aggregation_bound(cm, phi, args.eps, c)
            if not rep.passed:
                fails.append((seed, round(rep.lhs, 3), round(rep.rhs, 3)))
        print(f"c={c}: {len(fails)}/{args.seeds} failures {fails}")


if __name__ == "__main__":
    main()
