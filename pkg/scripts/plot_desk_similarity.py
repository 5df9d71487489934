"""Overlay long-split same-instance similarity histograms stored by a finished desk run."""
import argparse
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--run", default="runs/desk")
    p.add_argument("--variants", default="baseline,kd_qfa")
    p.add_argument("--out", default=None, help="PNG path (default <run>/similarity_L.png)")
    args = p.parse_args()

    res = json.loads((Path(args.run) / "results.json").read_text())
    fig, ax = plt.subplots(figsize=(6, 4))
    for v in args.variants.split(","):
        counts = sum(np.asarray(rows[v]["similarity_hist_L"], float) for rows in res["per_seed"].values())
        edges = np.linspace(-1, 1, len(counts) + 1)
        centers = 0.5 * (edges[1:] + edges[:-1])
        ax.bar(centers, counts / counts.sum(), width=edges[1] - edges[0], alpha=0.5,
               label=f"{v} (mean {res['summary'][v]['similarity_L']:.3f})")
    ax.set_xlabel("cosine similarity (same instance, two frames, long split)")
    ax.set_ylabel("fraction of pairs")
    ax.legend()
    fig.tight_layout()
    out = args.out or str(Path(args.run) / "similarity_L.png")
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
