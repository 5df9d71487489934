"""Run the desk-scale ablation (all variants, three seeds) and print the summary table.

Every stage is cached by a hash of its config and data under ``--out``, so an
interrupted run picks up where it stopped. The acceptance suite reads the same
directory (``OOKD_DESK_RUN``, default ``runs/desk``).

    python3 scripts/run_desk_experiment.py --out runs/desk
    python3 scripts/run_desk_experiment.py --out runs/quick --seeds 0 --scale 0.5
"""
import argparse
import logging
import time
from pathlib import Path

from ookd.ablation import render_markdown, run_ablation
from ookd.experiment import desk_config, desk_datasets, scaled


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", help="comma-separated training seeds (default 0,1,2)")
    p.add_argument("--scale", type=float, default=1.0, help="multiply pretraining and fine-tuning steps")
    p.add_argument("--variants", help="comma-separated subset of variants")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg, abl = desk_config()
    if args.scale != 1.0:
        abl = scaled(abl, args.scale)
    if args.seeds:
        abl.seeds = tuple(int(s) for s in args.seeds.split(","))
    if args.variants:
        abl.variants = tuple(v.strip() for v in args.variants.split(","))
    data = desk_datasets(seed=0)
    t0 = time.time()
    result = run_ablation(cfg, abl, data.train, data.val_short, data.val_long, Path(args.out))
    print(render_markdown(result["summary"]))
    print(f"wall time this invocation: {time.time() - t0:.0f}s")


if __name__ == "__main__":
    main()
