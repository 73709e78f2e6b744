"""Euler integration of the learned velocity field from noise (t=1) to motion (t=0)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .motion import DuetSequence, Normalizer, save_duet

SCHEDULES = ("uniform", "cosine")


@dataclass
class SamplerConfig:
    steps: int = 200
    schedule: str = "cosine"
    guidance_scale: float = 1.0
    mode: str = "interactive"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sample.steps must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"sample.schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.guidance_scale < 0:
            raise ValueError("sample.guidance_scale must be >= 0")
        if self.mode not in ("interactive", "reactive"):
            raise ValueError(f"sample.mode must be interactive or reactive, got {self.mode!r}")


def step_times(steps: int, schedule: str = "uniform") -> np.ndarray:
    """Strictly decreasing grid from 1 to 0 with ``steps`` intervals."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    k = np.arange(steps + 1)
    if schedule == "uniform":
        ts = 1.0 - k / steps
    elif schedule == "cosine":
        ts = (1.0 + np.cos(np.pi * k / steps)) / 2.0
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    ts[0], ts[-1] = 1.0, 0.0
    return ts


def cfg_combine(v_cond, v_uncond, scale: float):
    if scale == 1:
        return v_cond
    if scale == 0:
        return v_uncond
    return v_uncond + scale * (v_cond - v_uncond)


def guided_velocity(model, x_a, x_b, t, bundle, scale: float = 1.0, mode: str = "interactive",
                    uncond_bundle=None):
    """Classifier-free guidance; only the branches the scale needs are evaluated."""
    if scale < 0:
        raise ValueError("guidance scale must be >= 0")
    if scale == 1:
        return model(x_a, x_b, t, bundle, mode)
    if uncond_bundle is None:
        uncond_bundle = model.encoder.apply_drops(bundle, True, True)
    v_u = model(x_a, x_b, t, uncond_bundle, mode)
    if scale == 0:
        return v_u
    v_c = model(x_a, x_b, t, bundle, mode)
    return tuple(cfg_combine(c, u, scale) for c, u in zip(v_c, v_u))


@dataclass
class SampleResult:
    x: torch.Tensor                  # (B, T, 2 * frame_dim) in model space
    actor: np.ndarray | None = None  # raw actor frames (B, T, frame_dim) in reactive mode
    trajectory: list = field(default_factory=list)

    def duets(self, normalizer: Normalizer | None = None, fps: float = 30.0, joint_count: int = 22):
        x = self.x.detach().double().numpy()
        if normalizer is not None:
            x = x * normalizer.std + normalizer.mean
        fd = x.shape[-1] // 2
        out = []
        for i, row in enumerate(x):
            a = self.actor[i] if self.actor is not None else row[:, :fd]
            out.append(DuetSequence(np.asarray(a), row[:, fd:], fps=fps, joint_count=joint_count))
        return out


def euler_sample(model, bundle, config: SamplerConfig, n_frames: int, frame_dim: int = 262,
                 actor=None, normalizer: Normalizer | None = None, noise=None,
                 keep_trajectory: bool = False) -> SampleResult:
    """Integrate x <- x - dt * v from seeded noise at t=1 down to t=0.

    ``actor`` (raw frames, (T, D) or (B, T, D)) is required in reactive mode and
    is held fixed; only the reactor half is integrated.
    """
    b = bundle.batch_size
    reactive = config.mode == "reactive"
    dtype = torch.float32
    if hasattr(model, "parameters"):
        params = list(model.parameters())
        dtype = params[0].dtype if params else dtype
    if noise is None:
        gen = torch.Generator().manual_seed(config.seed)
        noise = torch.randn((b, n_frames, 2 * frame_dim), generator=gen, dtype=torch.float64).to(dtype)
    x = torch.as_tensor(noise, dtype=dtype).clone()
    actor_raw = None
    if reactive:
        if actor is None:
            raise ValueError("reactive sampling needs the actor motion")
        actor_raw = np.asarray(actor)
        if actor_raw.ndim == 2:
            actor_raw = np.broadcast_to(actor_raw, (b, *actor_raw.shape))
        if actor_raw.shape != (b, n_frames, frame_dim):
            raise ValueError(f"actor motion must be ({n_frames}, {frame_dim}), got {actor_raw.shape[1:]}")
        a = actor_raw.astype(np.float64)
        if normalizer is not None:
            a = (a - normalizer.mean[:frame_dim]) / normalizer.std[:frame_dim]
        x[..., :frame_dim] = torch.as_tensor(a, dtype=dtype)
    x_a, x_b = x[..., :frame_dim].clone(), x[..., frame_dim:].clone()
    actor_fixed = x_a.clone() if reactive else None
    uncond = None
    if config.guidance_scale != 1 and hasattr(model, "encoder"):
        uncond = model.encoder.apply_drops(bundle, True, True)
    if hasattr(model, "eval"):
        model.eval()
    ts = step_times(config.steps, config.schedule)
    trajectory = [torch.cat([x_a, x_b], -1)] if keep_trajectory else []
    with torch.no_grad():
        for k in range(config.steps):
            t, dt = float(ts[k]), float(ts[k] - ts[k + 1])
            v_a, v_b = guided_velocity(model, x_a, x_b, torch.full((b,), t, dtype=dtype), bundle,
                                       config.guidance_scale, config.mode, uncond)
            x_b = x_b - dt * v_b
            if not reactive:
                x_a = x_a - dt * v_a
            if not (torch.isfinite(x_a).all() and torch.isfinite(x_b).all()):
                raise FloatingPointError(f"non-finite sampler state at step {k}")
            if reactive and not torch.equal(x_a, actor_fixed):
                raise RuntimeError(f"actor channel changed at step {k}")
            if keep_trajectory:
                trajectory.append(torch.cat([x_a, x_b], -1))
    return SampleResult(torch.cat([x_a, x_b], -1), actor_raw, trajectory)


def write_sample(path, duet: DuetSequence, sidecar: dict) -> None:
    """Motion container plus a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_duet(path, duet)
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def sidecar(config: SamplerConfig, checkpoint_id: str, condition: dict) -> dict:
    return {**asdict(config), "guidance_scale": config.guidance_scale, "checkpoint_id": checkpoint_id,
            "condition": condition}
