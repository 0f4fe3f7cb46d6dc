"""AutoLR population against handcrafted step schedules on the 4-class phantoms.

Prints final seed-mean Dice per schedule and the learning-rate path the
population followed for each seed. Uncached, this trains for roughly an
hour on one CPU.
"""

import argparse

from boostseg import reproduce as rp


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="results")
    p.add_argument("--seeds", type=int, default=3)
    args = p.parse_args()

    res = rp.autolr_study(args.seeds, cache_dir=args.cache)
    for lab, v in res["final"].items():
        print(f"{lab:>12}  final mean Dice {v:.3f}")
    print(f"best handcrafted: {res['best_handcrafted']}, gap to AutoLR {res['gap']:+.3f}")
    for seed, path in res["winner_rates"].items():
        print(f"seed {seed}: winning rate per period {path}")


if __name__ == "__main__":
    main()
