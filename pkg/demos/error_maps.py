"""Where does a trained network still make mistakes?

Loads the boosted checkpoint from the sampler comparison, recomputes the
error map on a training phantom and compares the mean error on the
one-voxel foreground boundary with the object interiors. The map is
written as a grid file for viewing.
"""

import argparse

from boostseg import reproduce as rp


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="results")
    p.add_argument("--scan", type=int, default=0)
    args = p.parse_args()

    res = rp.isample_study(cache_dir=args.cache)
    out = rp.error_map_study(res["boosted_checkpoint"], rp.isample_configs()[0], args.scan,
                             f"{args.cache}/error_maps")
    for k, v in out.items():
        print(f"{k:>18}  {v}")


if __name__ == "__main__":
    main()
