"""Overfit the desk model on a handful of synthetic clips and report how close samples get.

    python scripts/desk_overfit.py --out runs/overfit [--set model.latent_dim=128 ...]
"""
import argparse
import json
import time

import numpy as np
import torch

from dualflow.cli import generator_config
from dualflow.conditioning import collate_inputs
from dualflow.config import load_config
from dualflow.motion import FrameLayout
from dualflow.model import DualFlow
from dualflow.retrieval import Encoders, build_database
from dualflow.sampler import SamplerConfig, euler_sample
from dualflow.synth import DuetDataset, generate_clip
from dualflow.training import Trainer


def nearest_clip_error(duet, dataset, layout=FrameLayout(22)):
    """Mean per-joint position error against the closest clip, averaged over both dancers."""
    best = np.inf
    for clip in dataset:
        pairs = ((duet.frames_a, clip.motion.frames_a), (duet.frames_b, clip.motion.frames_b))
        err = np.mean([np.linalg.norm(layout.positions(s) - layout.positions(r), axis=-1).mean() for s, r in pairs])
        best = min(best, err)
    return float(best)


def build(cfg):
    gen = generator_config(cfg)
    ds = DuetDataset([generate_clip(cfg.data.seed + i, gen) for i in range(cfg.data.n_clips)])
    enc = Encoders.default(cfg.retrieval.text_dim)
    db = build_database(ds, enc, cfg.retrieval.lambda_len)
    torch.manual_seed(cfg.train.seed)
    model = DualFlow(cfg.model)
    return ds, Trainer(model, ds, db, enc, cfg.loss, cfg.train, cfg.retrieval.k, cfg.retrieval.lambda_len)


def sample(trainer, cfg, steps: int, n: int = 64):
    model = trainer.model.eval()
    per = max(1, n // len(trainer.items))
    inputs = collate_inputs(*zip(*[item for item in trainer.items for _ in range(per)]))
    with torch.no_grad():
        bundle = model.encoder.bundle(inputs)
    sc = SamplerConfig(steps=steps, schedule=cfg.sample.schedule, guidance_scale=cfg.sample.guidance_scale,
                       seed=cfg.sample.seed)
    return euler_sample(model, bundle, sc, cfg.data.n_frames, normalizer=model.normalizer).duets(model.normalizer)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", nargs="+", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", help="save the trained model here")
    ap.add_argument("--samples", type=int, default=64)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = load_config(overrides=args.set, profile="desk")
    start = time.perf_counter()
    ds, trainer = build(cfg)
    hist = trainer.fit(progress=lambda r: print(json.dumps({"step": r["step"], "flow": round(r["flow"], 4)}),
                                                flush=True) if r["step"] % 100 == 0 else None)
    duets = sample(trainer, cfg, cfg.sample.steps, args.samples)
    errs = [nearest_clip_error(d, ds) for d in duets]
    first, final = hist[0]["flow"], float(np.mean([r["flow"] for r in hist[-50:]]))
    if args.out:
        trainer.model.save(args.out, {"steps": trainer.step_index})
    print(json.dumps({"steps": len(hist), "flow_step0": first, "flow_final": final, "ratio": final / first,
                      "joint_error": float(np.mean(errs)), "seconds": time.perf_counter() - start}))


if __name__ == "__main__":
    main()
