"""Compare goal dimensions (HRL-16 / 32 / 64) on the synthetic task.

    python scripts/goal_dim_sweep.py --out runs/sweep --dims 16 32 64
"""
import argparse
import logging

from hrlcap.experiments import ensure_synth, goal_dim_sweep, synthetic_config


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/sweep")
    p.add_argument("--data", help="dataset directory (generated when missing)")
    p.add_argument("--dims", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--xe-epochs", type=int, default=15)
    p.add_argument("--rl-epochs", type=int, default=14)
    p.add_argument("--train-subset", type=int, help="use only the first N training videos")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = ensure_synth(args.data or f"{args.out}/data")
    cfg = synthetic_config(xe_epochs=args.xe_epochs, rl_epochs=args.rl_epochs)
    path = goal_dim_sweep(args.out, data, tuple(args.dims), cfg, args.train_subset)
    print(path.read_text(), end="")


if __name__ == "__main__":
    main()
