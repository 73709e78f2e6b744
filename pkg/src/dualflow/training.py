"""Training loop for the contrastive rectified-flow objective."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .conditioning import ConditionInputs, cfg_mask, collate_inputs, condition_item
from .losses import (LossWeights, combine, flow_loss, geometric_terms, interaction_terms, interpolate,
                     predicted_clean, triplet_loss)
from .model import DualFlow
from .motion import FrameLayout, Normalizer, Skeleton
from .retrieval import Encoders

BREAKDOWN_KEYS = ("flow", "triplet", "foot", "vel", "BL", "DM", "RO", "sync")


@dataclass
class TrainConfig:
    lr: float = 2e-4
    weight_decay: float = 2e-5
    warmup_steps: int = 1000
    batch_size: int = 32
    epochs: int = 5000
    seed: int = 0
    p_both: float = 0.1
    p_text: float = 0.2
    p_music: float = 0.2
    log_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("train.lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("train.warmup_steps must be >= 0")
        if self.batch_size < 1 or self.epochs < 1 or self.log_every < 1:
            raise ValueError("train.batch_size, train.epochs and train.log_every must be >= 1")
        for name in ("p_both", "p_text", "p_music"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"train.{name} must lie in [0, 1]")


def warmup_factor(step: int, warmup_steps: int) -> float:
    """Linear ramp reaching 1 after ``warmup_steps`` optimiser steps."""
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup_steps)


def mine_triplets(labels, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """(anchor, positive, negative) index triples: positive shares the label, negative does not."""
    labels = list(labels)
    out = []
    for i, lab in enumerate(labels):
        pos = [j for j, l in enumerate(labels) if l == lab and j != i]
        neg = [j for j, l in enumerate(labels) if l != lab]
        if pos and neg:
            out.append((i, int(pos[rng.integers(len(pos))]), int(neg[rng.integers(len(neg))])))
    return out


class Trainer:
    """Holds the model, optimiser, cached per-clip conditions and the random streams."""

    def __init__(self, model: DualFlow, dataset, db=None, encoders: Encoders | None = None,
                 weights: LossWeights | None = None, config: TrainConfig | None = None,
                 k: int = 2, lambda_len: float | None = None, skeleton: Skeleton | None = None,
                 fit_normalizer: bool = True):
        self.model = model
        self.dataset = dataset
        self.weights = weights or LossWeights()
        self.config = config or TrainConfig()
        self.skeleton = skeleton or Skeleton.smpl22()
        self.layout = FrameLayout(model.cfg.joint_count)
        self.mode = model.cfg.mode
        if fit_normalizer:
            frames = np.concatenate([c.motion.concatenated() for c in dataset])
            half = self.layout.dim
            # one set of statistics for both persons keeps the branches interchangeable
            both = np.concatenate([frames[:, :half], frames[:, half:]])
            norm = Normalizer.fit(both)
            with torch.no_grad():
                model.norm_mean.copy_(torch.as_tensor(np.tile(norm.mean, 2)))
                model.norm_std.copy_(torch.as_tensor(np.tile(norm.std, 2)))
        normalizer = model.normalizer
        encoders = encoders or Encoders.default()
        self.clips = list(dataset)
        self.x0 = []
        self.items = []
        for clip in self.clips:
            x = (clip.motion.concatenated() - normalizer.mean) / normalizer.std
            self.x0.append(torch.as_tensor(x, dtype=torch.float32))
            self.items.append(condition_item(clip.text, clip.decomposition, clip.music_features, db, dataset,
                                             encoders, normalizer, model.cfg.vocab_size, k, lambda_len,
                                             exclude_clip_id=clip.clip_id))
        self.labels = [clip.genre for clip in self.clips]
        self.rng = np.random.default_rng(self.config.seed)
        self.noise = torch.Generator().manual_seed(self.config.seed)
        torch.manual_seed(self.config.seed)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=self.config.lr,
                                          weight_decay=self.config.weight_decay)
        self.step_index = 0

    # -- batches -------------------------------------------------------------
    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.clips) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        return self.config.epochs * self.steps_per_epoch

    def epoch_batches(self) -> list[np.ndarray]:
        perm = self.rng.permutation(len(self.clips))
        bs = self.config.batch_size
        return [perm[i:i + bs] for i in range(0, len(perm), bs)]

    def batch(self, idx) -> tuple[torch.Tensor, ConditionInputs]:
        lengths = {len(self.x0[i]) for i in idx}
        if len(lengths) != 1:
            raise ValueError(f"clips in a batch must share a length, got {sorted(lengths)}")
        x0 = torch.stack([self.x0[i] for i in idx])
        inputs = collate_inputs(*zip(*(self.items[i] for i in idx)))
        return x0, inputs

    # -- one optimisation step -----------------------------------------------
    def losses(self, x0: torch.Tensor, inputs: ConditionInputs, labels) -> dict:
        model, w = self.model, self.weights
        dtype = model.in_a.weight.dtype
        x0 = x0.to(dtype)
        inputs = inputs.to(dtype)
        fd = self.layout.dim
        b = x0.shape[0]
        eps = torch.randn(x0.shape, generator=self.noise, dtype=dtype)
        t = torch.as_tensor(self.rng.random(b), dtype=dtype)
        sample = interpolate(x0, eps, t)
        bundle = cfg_mask(model.encoder.bundle(inputs), model.encoder, self.rng,
                          self.config.p_both, self.config.p_text, self.config.p_music)
        reactive = self.mode == "reactive"
        x_a = x0[..., :fd] if reactive else sample.x_t[..., :fd]
        v_a, v_b = model(x_a, sample.x_t[..., fd:], t, bundle, self.mode)
        if reactive:
            v_pred, v_target = v_b, sample.v_t[..., fd:]
        else:
            v_pred, v_target = torch.cat([v_a, v_b], -1), sample.v_t
        terms = {"flow": flow_loss(v_pred, v_target)}

        triples = mine_triplets(labels, self.rng)
        if triples and w.lambda_triplet > 0:
            a, p, n = (list(c) for c in zip(*triples))
            terms["triplet"] = triplet_loss(v_pred[a], v_pred[p], v_pred[n], w.margin)
        else:
            terms["triplet"] = x0.new_zeros(())

        x_hat = predicted_clean(sample.x_t, torch.cat([v_a, v_b], -1), t)
        mean, std = model.norm_mean.to(dtype), model.norm_std.to(dtype)
        pred = x_hat * std + mean
        gt = x0 * std + mean
        if reactive:
            pred = torch.cat([gt[..., :fd], pred[..., fd:]], -1)
        persons = [1] if reactive else [0, 1]
        geo = [geometric_terms(pred[..., p * fd:(p + 1) * fd], gt[..., p * fd:(p + 1) * fd], self.skeleton)
               for p in persons]
        for key in ("foot", "vel", "BL"):
            terms[key] = sum(g[key] for g in geo) / len(geo)
        pos = self.layout.positions
        inter = interaction_terms((pos(pred[..., :fd]), pos(pred[..., fd:])),
                                  (pos(gt[..., :fd]), pos(gt[..., fd:])), self.skeleton, w)
        terms.update(inter)
        return terms

    def train_step(self, idx) -> dict:
        self.model.train()
        x0, inputs = self.batch(idx)
        lr = self.config.lr * warmup_factor(self.step_index, self.config.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        terms = self.losses(x0, inputs, [self.labels[i] for i in idx])
        for name, value in terms.items():
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite {name} loss at step {self.step_index}")
        total = combine(terms, self.weights)
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.step_index += 1
        record = {k: float(terms[k].detach()) for k in BREAKDOWN_KEYS}
        record["total"] = float(total.detach())
        record["lr"] = lr
        return record

    def fit(self, log_path=None, progress=None, max_steps: int | None = None) -> list[dict]:
        """Run every epoch (or ``max_steps`` steps); returns the per-step records."""
        history = []
        limit = self.total_steps if max_steps is None else max_steps
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        start = time.perf_counter()
        try:
            while self.step_index < limit:
                for idx in self.epoch_batches():
                    if self.step_index >= limit:
                        break
                    rec = self.train_step(idx)
                    rec = {"step": self.step_index - 1, **rec, "wall_time": time.perf_counter() - start}
                    history.append(rec)
                    if fh and rec["step"] % self.config.log_every == 0:
                        fh.write(json.dumps(rec) + "\n")
                    if progress and rec["step"] % self.config.log_every == 0:
                        progress(rec)
        finally:
            if fh:
                fh.close()
        return history


def read_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
