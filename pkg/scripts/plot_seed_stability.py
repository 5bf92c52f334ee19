#!/usr/bin/env python3
"""Plot the per-seed PSNR stability data emitted by the report stage.

Usage: python scripts/plot_seed_stability.py runs/desk-gaussian-iid/report/stability_<regime>.csv out.png
"""

import csv
import sys


def main() -> int:
    if len(sys.argv) < 3:
        print(__doc__)
        return 2
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(sys.argv[1], newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    col = {name: i for i, name in enumerate(header)}
    seeds = [int(r[col["seed_index"]]) for r in body]

    fig, ax = plt.subplots(figsize=(7, 4))
    styles = {"single": "o-", "random_pair": "s-", "srds": "d-", "distilled": "r--"}
    for mode, style in styles.items():
        ax.plot(seeds, [float(r[col[mode]]) for r in body], style, label=mode, markersize=4)
    ax.set_xlabel("seed index")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title("sampling stability across noise seeds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(sys.argv[2], dpi=150)
    print(f"wrote {sys.argv[2]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
