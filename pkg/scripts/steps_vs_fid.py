"""FID of samples from the desk overfit model as a function of the number of Euler steps.

    python scripts/steps_vs_fid.py --steps 5 10 25 50
"""
import argparse
import json

import torch

from dualflow.cli import generator_config
from dualflow.config import load_config
from dualflow.evaluator import load_or_train
from dualflow.metrics import fid

from desk_overfit import build, sample


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, nargs="+", default=[5, 10, 25, 50])
    ap.add_argument("--set", nargs="+", default=[], metavar="KEY=VALUE")
    ap.add_argument("--evaluator", default="runs/evaluator/extractor")
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(overrides=args.set, profile="desk")
    ds, trainer = build(cfg)
    trainer.fit()
    ext = load_or_train(args.evaluator, generator_config(cfg), cfg.eval.n_clips, cfg.eval.steps,
                        cfg.eval.feature_dim, cfg.eval.seed)
    real = ext.motion_features([c.motion.concatenated() for c in ds])
    for n in args.steps:
        gen = ext.motion_features([d.concatenated() for d in sample(trainer, cfg, n)])
        print(json.dumps({"steps": n, "fid": fid(real, gen)}), flush=True)


if __name__ == "__main__":
    main()
