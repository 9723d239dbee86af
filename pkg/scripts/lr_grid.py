"""Grid search over learning rates for one algorithm on a config.

    python3 scripts/lr_grid.py --config configs/synthetic_trend.toml \
        --algorithm pfedmoe --lr 0.03 0.1 0.3 --lr-phi 0.1 1.0 --seeds 0

Each cell runs the federation from scratch and reports the final and best
seed-averaged mean test accuracy. ``--rounds`` shortens the runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools

import numpy as np

from pfedmoe.cli import build_federation
from pfedmoe.config import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/synthetic_trend.toml")
    p.add_argument("--algorithm", default="pfedmoe", choices=["pfedmoe", "standalone", "fedavg"])
    p.add_argument("--lr", type=float, nargs="+", default=[0.03, 0.1, 0.3], help="lr_theta = lr_omega")
    p.add_argument("--lr-phi", type=float, nargs="+", default=[1.0], help="gate learning rate")
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--rounds", type=int, default=None)
    args = p.parse_args(argv)
    base = load_config(args.config)
    print(f"{'lr':>8} {'lr_phi':>8} {'final':>7} {'best':>7}")
    for lr, lr_phi in itertools.product(args.lr, args.lr_phi):
        finals, bests = [], []
        for seed in args.seeds:
            block = dataclasses.replace(base.federation, algorithm=args.algorithm, lr_theta=lr, lr_omega=lr,
                                        lr_phi=lr_phi, rounds=args.rounds or base.federation.rounds)
            model = base.model
            if args.algorithm == "fedavg" and model.assignment == "mod5":
                model = dataclasses.replace(model, assignment=model.global_model)
            cfg = dataclasses.replace(base, seed=seed, federation=block, model=model)
            acc = [h.mean_acc for h in build_federation(cfg).run()]
            finals.append(acc[-1])
            bests.append(max(acc))
        print(f"{lr:8.3g} {lr_phi:8.3g} {np.mean(finals):7.2f} {np.mean(bests):7.2f}", flush=True)


if __name__ == "__main__":
    main()
