"""Train the toy denoiser on 8 synthetic scores and report held-out-track accuracy."""

import argparse
import json
from dataclasses import asdict, fields

import torch

from trackdiff.overfit import OverfitConfig, run_overfit


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    for f in fields(OverfitConfig):
        parser.add_argument(f"--{f.name.replace('_', '-')}", type=type(f.default), default=f.default)
    parser.add_argument("--out", help="write the result as JSON")
    args = parser.parse_args()
    torch.set_num_threads(1)
    cfg = OverfitConfig(**{f.name: getattr(args, f.name) for f in fields(OverfitConfig)})
    result = run_overfit(cfg, log=print)
    summary = {"config": asdict(cfg), "steps": result.steps, "train_seconds": round(result.train_seconds, 1),
               "accuracy": result.accuracy, "per_track": result.per_track}
    print(json.dumps(summary, indent=1))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({**summary, "losses": result.losses}, fh)


if __name__ == "__main__":
    main()
