"""Two-tower text/motion feature extractor for the metric suite, plus the end-to-end report."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .metrics import (MetricReport, beat_align_score, beat_echo_degree, diversity_and_mmodality, fid,
                      r_precision_and_mmdist)
from .model import load_state, save_state
from .motion import Normalizer
from .retrieval import token_ids
from .synth import GeneratorConfig, generate_clip


@dataclass
class ExtractorConfig:
    frame_dim: int = 524
    feature_dim: int = 32
    hidden: int = 64
    vocab_size: int = 4096
    temperature: float = 0.1


class FeatureExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig, normalizer: Normalizer | None = None):
        super().__init__()
        self.cfg = cfg
        h = cfg.hidden
        self.motion = nn.Sequential(
            nn.Conv1d(cfg.frame_dim, h, 5, padding=2), nn.GELU(),
            nn.Conv1d(h, h, 5, padding=2), nn.GELU(),
        )
        self.motion_head = nn.Linear(h, cfg.feature_dim)
        self.text = nn.EmbeddingBag(cfg.vocab_size, h, mode="mean")
        self.text_head = nn.Sequential(nn.GELU(), nn.Linear(h, cfg.feature_dim))
        norm = normalizer or Normalizer.identity(cfg.frame_dim)
        self.register_buffer("norm_mean", torch.as_tensor(np.asarray(norm.mean, dtype=np.float32)))
        self.register_buffer("norm_std", torch.as_tensor(np.asarray(norm.std, dtype=np.float32)))
        self.checkpoint_id = ""

    def encode_motion(self, frames: torch.Tensor) -> torch.Tensor:
        x = (frames - self.norm_mean) / self.norm_std
        h = self.motion(x.transpose(1, 2)).mean(-1)
        return self.motion_head(h)

    def encode_text(self, texts: list[str]) -> torch.Tensor:
        ids, offsets = [], []
        for t in texts:
            offsets.append(len(ids))
            ids.extend(token_ids(t, self.cfg.vocab_size) or [0])
        return self.text_head(self.text(torch.tensor(ids), torch.tensor(offsets)))

    @torch.no_grad()
    def motion_features(self, motions) -> np.ndarray:
        """Duet frame arrays (T, 2 * frame_dim) -> (N, feature_dim)."""
        self.eval()
        return np.concatenate([
            self.encode_motion(torch.as_tensor(np.asarray(m, dtype=np.float32))[None]).double().numpy()
            for m in motions
        ])

    @torch.no_grad()
    def text_features(self, texts) -> np.ndarray:
        self.eval()
        return self.encode_text(list(texts)).double().numpy()

    def save(self, path) -> str:
        from dataclasses import asdict

        self.checkpoint_id = save_state(self.state_dict(), path, {"extractor": asdict(self.cfg)})
        return self.checkpoint_id

    @classmethod
    def load(cls, path) -> "FeatureExtractor":
        state, manifest = load_state(path)
        ext = cls(ExtractorConfig(**manifest["extractor"]))
        ext.load_state_dict(state)
        ext.checkpoint_id = manifest["checkpoint_id"]
        return ext


def contrastive_loss(text_z, motion_z, temperature: float):
    t = F.normalize(text_z, dim=-1)
    m = F.normalize(motion_z, dim=-1)
    logits = t @ m.T / temperature
    target = torch.arange(len(t))
    return (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)) / 2


def heldout_clips(n: int, gen_config: GeneratorConfig, seed_offset: int = 1000) -> list:
    """Clips drawn from seeds disjoint from the training range."""
    return [generate_clip(seed_offset + i, gen_config) for i in range(n)]


def train_extractor(clips, cfg: ExtractorConfig | None = None, steps: int = 300, batch_size: int = 32,
                    lr: float = 1e-3, seed: int = 0) -> FeatureExtractor:
    cfg = cfg or ExtractorConfig()
    torch.manual_seed(seed)
    frames = [c.motion.concatenated() for c in clips]
    norm = Normalizer.fit(np.concatenate(frames))
    ext = FeatureExtractor(cfg, norm)
    opt = torch.optim.Adam(ext.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    lengths = {len(f) for f in frames}
    if len(lengths) != 1:
        raise ValueError("evaluator training clips must share a length")
    data = torch.as_tensor(np.stack(frames), dtype=torch.float32)
    texts = [c.text for c in clips]
    ext.train()
    for _ in range(steps):
        idx = rng.choice(len(clips), size=min(batch_size, len(clips)), replace=False)
        loss = contrastive_loss(ext.encode_text([texts[i] for i in idx]), ext.encode_motion(data[idx]),
                                cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
    ext.eval()
    return ext


def evaluate(samples, conditions, real_clips, extractor: FeatureExtractor, sigma: float = 0.1,
             metric_seed: int = 0, fps: float = 30.0, manifest_hash: str = "") -> MetricReport:
    """``samples`` are DuetSequences; ``conditions[i]`` is the clip whose text/music produced sample i."""
    if len(samples) != len(conditions):
        raise ValueError("every sample needs its conditioning clip")
    gen = extractor.motion_features([s.concatenated() for s in samples])
    real = extractor.motion_features([c.motion.concatenated() for c in real_clips])
    text = extractor.text_features([c.text for c in conditions])
    top1, top2, top3, mm = r_precision_and_mmdist(text, gen, seed=metric_seed)
    groups = {}
    for i, c in enumerate(conditions):
        groups.setdefault(c.clip_id, []).append(i)
    div, mmod = diversity_and_mmodality(gen, list(groups.values()), seed=metric_seed)
    bas = np.mean([
        (beat_align_score(s.frames_a, c.beat_times, sigma, fps) + beat_align_score(s.frames_b, c.beat_times, sigma, fps)) / 2
        for s, c in zip(samples, conditions)
    ])
    bed = np.mean([beat_echo_degree(s.frames_a, s.frames_b, sigma, fps) for s in samples])
    return MetricReport(
        fid=fid(real, gen), r_precision_top1=top1, r_precision_top2=top2, r_precision_top3=top3,
        mm_dist=mm, diversity=div, mmodality=mmod, bed=float(bed), bas=float(bas),
        evaluator_id=extractor.checkpoint_id, manifest_hash=manifest_hash, metric_seed=metric_seed,
    )


def load_or_train(path, gen_config: GeneratorConfig, n_clips: int, steps: int, feature_dim: int,
                  seed: int) -> FeatureExtractor:
    path = Path(path)
    if path.with_suffix(".json").exists():
        return FeatureExtractor.load(path)
    ext = train_extractor(heldout_clips(n_clips, gen_config, seed), ExtractorConfig(feature_dim=feature_dim),
                          steps=steps, seed=seed)
    ext.save(path)
    return FeatureExtractor.load(path)
