"""Boosted vs uniform patch sampling on the sparse two-class phantoms.

Runs (or reads from the cache) three seeds of each sampler for 200 epochs,
prints the validation curves every 10 epochs and the iterations each one
needs to reach 90% of the uniform baseline's final Dice. Pass ``--plot`` to
also write ``isample_curves.png`` (needs matplotlib).

Uncached, this trains for about an hour on one CPU.
"""

import argparse

from boostseg import reproduce as rp


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--cache", default="results")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--plot", action="store_true")
    args = p.parse_args()

    res = rp.isample_study(args.seeds, args.epochs, cache_dir=args.cache)
    curves = res["curves"]
    print(f"{'iteration':>10} {'boosted':>9} {'uniform':>9}")
    b, u = curves["boosted"], curves["uniform"]
    for i in range(9, len(b["iteration"]), 10):
        print(f"{b['iteration'][i]:>10} {b['mean_dice'][i]:>9.3f} {u['mean_dice'][i]:>9.3f}")
    print(f"\nfinal seed-mean Dice: {res['final']}")
    print(f"threshold (0.9 x uniform final) {res['threshold']:.3f}")
    print(f"iterations to threshold: {res['iterations_to_threshold']}")
    print(f"iterations to Dice 0.8:  {res['iterations_to_0.8']}")

    if args.plot:
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 4))
        for lab, c in curves.items():
            ax.plot(c["iteration"], c["mean_dice"], label=lab)
        ax.axhline(res["threshold"], ls="--", c="grey", lw=0.8)
        ax.set(xlabel="iterations (batches)", ylabel="validation Dice", ylim=(0, 1))
        ax.legend()
        fig.savefig("isample_curves.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
