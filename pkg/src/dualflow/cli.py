"""Command-line entry point: make-dataset, build-index, train, sample, eval, retrieve."""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
R_PRECISION_BATCH = 32
COMMANDS = ("make-dataset", "build-index", "train", "sample", "eval", "retrieve")


class UsageError(Exception):
    """Bad or missing inputs detected before any work starts (exit 2)."""


def emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# run directory layout
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, root):
        self.root = Path(root)

    data = property(lambda self: self.root / "data")
    index = property(lambda self: self.root / "index")
    checkpoint = property(lambda self: self.root / "checkpoints" / "model")
    train_log = property(lambda self: self.root / "train_log.jsonl")
    samples = property(lambda self: self.root / "samples")
    evaluator = property(lambda self: self.root / "evaluator" / "extractor")
    report = property(lambda self: self.root / "eval" / "report.json")

    def record(self, command: str, cfg: RunConfig, argv, outputs: list) -> None:
        """Config echo plus a run record next to the outputs."""
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / f"{command}.config").write_text(cfg.echo(), encoding="utf-8")
        seeds = {"data": cfg.data.seed, "train": cfg.train.seed, "sample": cfg.sample.seed,
                 "eval": cfg.eval.metric_seed}
        rec = {"command": command, "argv": list(argv), "build_id": build_id(), "seeds": seeds,
               "config_echo": f"{command}.config", "outputs": [str(p) for p in outputs]}
        (self.root / f"{command}.run.json").write_text(json.dumps(rec, indent=1, sort_keys=True))


def generator_config(cfg: RunConfig):
    from .synth import GeneratorConfig

    return GeneratorConfig(n_frames=cfg.data.n_frames, fps=cfg.data.fps, tempo_range=cfg.data.tempo_range,
                           music_dim=cfg.model.music_dim, seed=cfg.data.seed)


def _load_dataset(run: Run):
    from .synth import DuetDataset

    if not (run.data / "manifest.jsonl").exists():
        raise UsageError(f"no dataset under {run.data}; run make-dataset first")
    return DuetDataset.load(run.data)


def _load_index(run: Run):
    from .retrieval import load_database

    if not (run.index / "index.json").exists():
        raise UsageError(f"no retrieval index under {run.index}; run build-index first")
    return load_database(run.index)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_make_dataset(args, cfg: RunConfig, run: Run) -> list:
    from .synth import generate_dataset

    records = generate_dataset(cfg.data.n_clips, generator_config(cfg), run.data)
    emit({"event": "dataset", "n_clips": len(records), "root": str(run.data)})
    return [run.data / "manifest.jsonl"]


def cmd_build_index(args, cfg: RunConfig, run: Run) -> list:
    from .retrieval import Encoders, build_database, save_database

    ds = _load_dataset(run)
    db = build_database(ds, Encoders.default(cfg.retrieval.text_dim), cfg.retrieval.lambda_len)
    save_database(db, run.index)
    emit({"event": "index", "entries": len(ds), "root": str(run.index)})
    return [run.index / "index.json"]


def cmd_train(args, cfg: RunConfig, run: Run) -> list:
    from .model import DualFlow
    from .retrieval import Encoders
    from .training import Trainer

    ds = _load_dataset(run)
    db = _load_index(run)
    torch.manual_seed(cfg.train.seed)
    model = DualFlow(cfg.model)
    trainer = Trainer(model, ds, db, Encoders.default(cfg.retrieval.text_dim), cfg.loss, cfg.train,
                      cfg.retrieval.k, cfg.retrieval.lambda_len)

    def progress(rec):
        emit({"event": "step", **{k: v for k, v in rec.items() if k != "wall_time"}})

    trainer.fit(run.train_log, progress=progress, max_steps=args.max_steps)
    ckpt_id = model.save(run.checkpoint, {"manifest_hash": ds.manifest_hash(), "steps": trainer.step_index})
    emit({"event": "checkpoint", "checkpoint_id": ckpt_id, "path": str(run.checkpoint)})
    return [run.checkpoint.with_suffix(".json"), run.checkpoint.with_suffix(".dfmo"), run.train_log]


def cmd_sample(args, cfg: RunConfig, run: Run) -> list:
    from dataclasses import replace

    from .conditioning import collate_inputs, condition_item
    from .model import load_checkpoint
    from .motion import load_duet, read_container
    from .retrieval import Encoders
    from .sampler import euler_sample, sidecar, write_sample

    sample_cfg = cfg.sample
    if args.mode:
        sample_cfg = replace(sample_cfg, mode=args.mode)
    if args.steps:
        sample_cfg = replace(sample_cfg, steps=args.steps)
    actor = None
    if sample_cfg.mode == "reactive":
        if not args.actor:
            raise UsageError("reactive sampling needs --actor <path to a motion container>")
        if not Path(args.actor).exists():
            raise UsageError(f"actor motion {args.actor} not found")
        actor = load_duet(args.actor).frames_a
    if not run.checkpoint.with_suffix(".json").exists():
        raise UsageError(f"no checkpoint at {run.checkpoint}; run train first")
    ds = _load_dataset(run)
    db = _load_index(run)
    model, manifest = load_checkpoint(run.checkpoint)
    encoders = Encoders.default(cfg.retrieval.text_dim)
    missing = [c for c in args.clip or () if c not in ds.by_id]
    if missing:
        raise UsageError(f"unknown clip id(s): {', '.join(missing)}")
    conditions = [ds.by_id[c] for c in args.clip] if args.clip else list(ds)
    n_frames = len(actor) if actor is not None else cfg.data.n_frames
    per = args.per_condition or max(1, -(-64 // len(conditions)))
    outputs = []
    out_dir = Path(args.out) if args.out else run.samples
    for ci, clip in enumerate(conditions):
        text = args.text if args.text is not None else clip.text
        item = condition_item(text, clip.decomposition, clip.music_features[:n_frames], db, ds, encoders,
                              model.normalizer, model.cfg.vocab_size, cfg.retrieval.k, cfg.retrieval.lambda_len,
                              query_length=n_frames)
        inputs = collate_inputs(*zip(*[item] * per))
        with torch.no_grad():
            model.eval()
            bundle = model.encoder.bundle(inputs)
        seed = sample_cfg.seed + ci
        res = euler_sample(model, bundle, replace(sample_cfg, seed=seed), n_frames, model.cfg.frame_dim,
                           actor=actor, normalizer=model.normalizer)
        for j, duet in enumerate(res.duets(model.normalizer, fps=cfg.data.fps, joint_count=model.cfg.joint_count)):
            path = out_dir / f"{clip.clip_id}_{j:03d}.dfmo"
            write_sample(path, duet, sidecar(replace(sample_cfg, seed=seed), manifest["checkpoint_id"],
                                             {"clip_id": clip.clip_id, "text": text, "index": j,
                                              "actor": args.actor}))
            outputs.append(path)
        emit({"event": "sampled", "clip_id": clip.clip_id, "n": per})
    return outputs


def cmd_eval(args, cfg: RunConfig, run: Run) -> list:
    from .evaluator import evaluate, load_or_train
    from .motion import load_duet

    ds = _load_dataset(run)
    sample_dir = Path(args.samples) if args.samples else run.samples
    files = sorted(sample_dir.glob("*.dfmo"))
    if not files:
        raise UsageError(f"no samples in {sample_dir}; run sample first")
    if len(files) < R_PRECISION_BATCH:
        raise UsageError(f"eval needs at least {R_PRECISION_BATCH} samples, found {len(files)} in {sample_dir}")
    samples, conditions = [], []
    for f in files:
        side = json.loads(f.with_suffix(".json").read_text())
        samples.append(load_duet(f))
        conditions.append(ds.by_id[side["condition"]["clip_id"]])
    ext = load_or_train(run.evaluator, generator_config(cfg), cfg.eval.n_clips, cfg.eval.steps,
                        cfg.eval.feature_dim, cfg.eval.seed)
    report = evaluate(samples, conditions, list(ds), ext, cfg.eval.sigma, cfg.eval.metric_seed,
                      cfg.data.fps, ds.manifest_hash())
    run.report.parent.mkdir(parents=True, exist_ok=True)
    run.report.write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True))
    emit({"event": "report", **report.as_dict()})
    return [run.report]


def cmd_retrieve(args, cfg: RunConfig, run: Run) -> list:
    from .retrieval import Encoders, decompose_text, query_embeddings, retrieve_all

    ds = _load_dataset(run)
    db = _load_index(run)
    if args.clip:
        if args.clip[0] not in ds.by_id:
            raise UsageError(f"unknown clip id: {args.clip[0]}")
        clip = ds.by_id[args.clip[0]]
        text, music, exclude = clip.text, clip.music_features, clip.clip_id
    elif args.text:
        text, music, exclude = args.text, None, None
    else:
        raise UsageError("retrieve needs --text or --clip")
    decomp = decompose_text(text if args.text is None else args.text)
    enc = Encoders.default(cfg.retrieval.text_dim)
    if music is None:
        q = {c: enc.text(decomp.field_for(c)) for c in ("S", "B", "R")}
    else:
        q = query_embeddings(decomp, music, enc)
    sets = retrieve_all(db, q, cfg.data.n_frames, cfg.retrieval.k, cfg.retrieval.lambda_len, exclude)
    out = {"text": text, "decomposition": decomp.as_dict(),
           "results": {c: [asdict(e) for e in entries] for c, entries in sets.items()}}
    emit(out)
    return []


HANDLERS = {
    "make-dataset": cmd_make_dataset, "build-index": cmd_build_index, "train": cmd_train,
    "sample": cmd_sample, "eval": cmd_eval, "retrieve": cmd_retrieve,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--profile", choices=("paper", "desk"), help="built-in profile")
    common.add_argument("--set", nargs="+", action="extend", default=[], metavar="KEY=VALUE",
                        help="config overrides")
    common.add_argument("--run", help="run directory (default: $DUALFLOW_RUN_DIR or ./runs/default)")
    p = _Parser(prog="dualflow", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name, parents=[common])
        if name == "train":
            s.add_argument("--max-steps", type=int, default=None)
        if name == "sample":
            s.add_argument("--mode", choices=("interactive", "reactive"))
            s.add_argument("--actor", help="motion container whose first person is the actor")
            s.add_argument("--clip", nargs="+", help="condition on these clip ids (default: every clip)")
            s.add_argument("--text", help="replace the prompt text")
            s.add_argument("--per-condition", type=int, default=None)
            s.add_argument("--steps", type=int, default=None)
            s.add_argument("--out")
        if name == "eval":
            s.add_argument("--samples")
        if name == "retrieve":
            s.add_argument("--text")
            s.add_argument("--clip", nargs=1)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, args.set, args.profile)
    except (ConfigError, OSError) as exc:
        print(f"dualflow {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args.run or os.environ.get("DUALFLOW_RUN_DIR") or "runs/default")
    try:
        outputs = HANDLERS[args.command](args, cfg, run)
    except UsageError as exc:
        print(f"dualflow {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"dualflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    run.record(args.command, cfg, argv, outputs)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
