"""Velocity-field network: cascaded two-branch blocks with gated multi-scale convolutions."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import ConditionEncoder, ConditioningBundle, sinusoidal_encoding
from .motion import FrameLayout, Normalizer, read_container, write_container

MODES = ("interactive", "reactive")


@dataclass
class ModelConfig:
    n_blocks: int = 2
    latent_dim: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.1
    conv_kernels: tuple = (7, 11, 21)
    look_ahead: int = 10
    mode: str = "interactive"
    joint_count: int = 22
    text_dim: int = 64
    music_dim: int = 32
    vocab_size: int = 4096
    share_branch_weights: bool = True
    music_positional: bool = True
    gate_init: float = 0.1

    def __post_init__(self):
        self.conv_kernels = tuple(int(k) for k in self.conv_kernels)
        self.validate()

    def validate(self) -> None:
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.latent_dim % self.n_heads:
            raise ValueError(f"latent_dim {self.latent_dim} not divisible by n_heads {self.n_heads}")
        if self.text_dim % self.n_heads:
            raise ValueError(f"text_dim {self.text_dim} not divisible by n_heads {self.n_heads}")
        bad = [k for k in self.conv_kernels if k < 1 or k % 2 == 0]
        if bad or not self.conv_kernels:
            raise ValueError(f"conv kernels must be odd positive integers, got {self.conv_kernels}")
        if self.look_ahead < 0:
            raise ValueError("look_ahead must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def frame_dim(self) -> int:
        return FrameLayout(self.joint_count).dim


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def build_causal_mask(t_q: int, t_k: int, look_ahead: int) -> torch.Tensor:
    """Boolean (t_q, t_k) mask, True where key j may be seen from query i (j <= i + L)."""
    if t_q < 1 or t_k < 1:
        raise ValueError("mask sizes must be >= 1")
    if look_ahead < 0:
        raise ValueError("look_ahead must be >= 0")
    i = torch.arange(t_q)[:, None]
    j = torch.arange(t_k)[None, :]
    return j <= i + look_ahead


def attend(q, k, v, mask=None, key_valid=None, dropout: float = 0.0, training: bool = False,
           return_weights: bool = False):
    """softmax(q k^T / sqrt(d)) v over (..., T, d) tensors.

    ``mask`` (T_q, T_k) is structural; a row with no allowed key raises.
    ``key_valid`` (B, T_k) marks padding; a query with no valid key returns zeros.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    allowed = torch.ones(scores.shape[-2:], dtype=torch.bool)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if mask.shape != allowed.shape:
            raise ValueError(f"mask shape {tuple(mask.shape)} != scores {tuple(allowed.shape)}")
        dead = ~mask.any(dim=-1)
        if dead.any():
            raise ValueError(f"attention mask leaves query rows {dead.nonzero().flatten().tolist()} without keys")
        allowed = mask
    allowed = allowed.expand(scores.shape)
    if key_valid is not None:
        kv = key_valid.reshape(key_valid.shape[0], *([1] * (scores.ndim - 2)), key_valid.shape[-1])
        allowed = allowed & kv
    empty = ~allowed.any(dim=-1, keepdim=True)
    scores = scores.masked_fill(~allowed, float("-inf")).masked_fill(empty, 0.0)
    weights = torch.softmax(scores, dim=-1).masked_fill(empty, 0.0)
    if dropout > 0 and training:
        weights = F.dropout(weights, dropout, training=True)
    out = weights @ v
    return (out, weights) if return_weights else out


class Attention(nn.Module):
    def __init__(self, dim: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.dropout = dropout
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x):
        b, t, d = x.shape
        return x.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, kv, mask=None, key_valid=None):
        if kv.shape[1] == 0:
            return torch.zeros_like(x)
        h = attend(self._split(self.q(x)), self._split(self.k(kv)), self._split(self.v(kv)),
                   mask, key_valid, self.dropout, self.training)
        b, _, t, _ = h.shape
        return self.out(h.transpose(1, 2).reshape(b, t, -1))


class ConditionedNorm(nn.Module):
    """Feature-wise normalisation with scale/shift predicted from z_d (zero-initialised)."""

    def __init__(self, dim: int, cond_dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.proj = nn.Linear(cond_dim, 2 * dim)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, z, z_d):
        scale, shift = self.proj(z_d).unsqueeze(-2).chunk(2, dim=-1)
        normed = F.layer_norm(z, z.shape[-1:], eps=self.eps)
        return normed * (1 + scale) + shift


class MultiScaleConv(nn.Module):
    """z + sum_k gamma_k GELU(conv_k(z)) along time, same-length padding."""

    def __init__(self, dim: int, kernels=(7, 11, 21), gate_init: float = 0.1):
        super().__init__()
        for k in kernels:
            if k % 2 == 0:
                raise ValueError(f"even kernel size {k} cannot be padded symmetrically")
        self.convs = nn.ModuleList(nn.Conv1d(dim, dim, k, padding=k // 2) for k in kernels)
        self.gates = nn.Parameter(torch.full((len(kernels),), float(gate_init)))

    def forward(self, z):
        zt = z.transpose(1, 2)
        out = z
        for g, conv in zip(self.gates, self.convs):
            out = out + g * F.gelu(conv(zt)).transpose(1, 2)
        return out


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------

SITES = ("self", "music", "motion", "retrieval", "ffn")


class Branch(nn.Module):
    """Parameters for one person's path through a block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.latent_dim
        self.conv = MultiScaleConv(d, cfg.conv_kernels, cfg.gate_init)
        self.norms = nn.ModuleDict({s: ConditionedNorm(d, d) for s in SITES})
        self.attn = nn.ModuleDict({s: Attention(d, cfg.n_heads, cfg.dropout) for s in SITES[:4]})
        self.ffn = nn.Sequential(nn.Linear(d, cfg.ffn_dim), nn.GELU(), nn.Dropout(cfg.dropout),
                                 nn.Linear(cfg.ffn_dim, d))

    def site(self, name, z, z_d, kv=None, mask=None, key_valid=None):
        q = self.norms[name](z, z_d)
        return self.attn[name](q, q if kv is None else kv, mask, key_valid)

    def head(self, z, z_d, z_m):
        """conv -> self-attention -> music cross-attention."""
        z = self.conv(z)
        z = z + self.site("self", z, z_d)
        return z + self.site("music", z, z_d, z_m)

    def tail(self, z, z_d, z_r, r_valid):
        """retrieval cross-attention -> FFN."""
        z = z + self.site("retrieval", z, z_d, z_r, key_valid=r_valid)
        return z + self.ffn(self.norms["ffn"](z, z_d))

    def output_layers(self):
        yield from (a.out for a in self.attn.values())
        yield self.ffn[-1]


@dataclass
class BlockState:
    z_a: torch.Tensor
    z_b: torch.Tensor

    def __post_init__(self):
        if self.z_a.shape != self.z_b.shape:
            raise ValueError(f"branch latents differ in shape: {tuple(self.z_a.shape)} vs {tuple(self.z_b.shape)}")


class DualFlowBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.look_ahead = cfg.look_ahead
        self.branch_b = Branch(cfg)
        self.branch_a = self.branch_b if cfg.share_branch_weights else Branch(cfg)

    def causal_cross(self, z_b, z_d, actor):
        """Reactor queries attend to the fixed actor latent within the look-ahead window."""
        mask = build_causal_mask(z_b.shape[1], actor.shape[1], self.look_ahead)
        return self.branch_b.site("motion", z_b, z_d, actor, mask=mask)

    def forward(self, state: BlockState, z_d, z_m, z_r, r_valid=None, mode: str = "interactive",
                actor=None) -> BlockState:
        if mode == "interactive":
            a2 = self.branch_a.head(state.z_a, z_d, z_m)
            b2 = self.branch_b.head(state.z_b, z_d, z_m)
            a3 = a2 + self.branch_a.site("motion", a2, z_d, b2)
            b3 = b2 + self.branch_b.site("motion", b2, z_d, a2)
            return BlockState(self.branch_a.tail(a3, z_d, z_r, r_valid), self.branch_b.tail(b3, z_d, z_r, r_valid))
        if mode == "reactive":
            if actor is None:
                raise ValueError("reactive mode needs the actor latent")
            b2 = self.branch_b.head(state.z_b, z_d, z_m)
            b3 = b2 + self.causal_cross(b2, z_d, actor)
            return BlockState(state.z_a, self.branch_b.tail(b3, z_d, z_r, r_valid))
        raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

class DualFlow(nn.Module):
    """Condition encoders + block stack mapping noisy duet frames to velocities."""

    def __init__(self, cfg: ModelConfig, normalizer: Normalizer | None = None):
        super().__init__()
        self.cfg = cfg
        d, fd = cfg.latent_dim, cfg.frame_dim
        self.encoder = ConditionEncoder(d, cfg.text_dim, cfg.music_dim, fd, cfg.vocab_size,
                                        cfg.n_heads, cfg.dropout, cfg.music_positional)
        self.in_a = nn.Linear(fd, d)
        self.in_b = nn.Linear(fd, d)
        self.blocks = nn.ModuleList(DualFlowBlock(cfg) for _ in range(cfg.n_blocks))
        self.out_a = nn.Linear(d, fd)
        self.out_b = nn.Linear(d, fd)
        norm = normalizer or Normalizer.identity(2 * fd)
        self.register_buffer("norm_mean", torch.as_tensor(np.asarray(norm.mean, dtype=np.float32)))
        self.register_buffer("norm_std", torch.as_tensor(np.asarray(norm.std, dtype=np.float32)))

    @property
    def normalizer(self) -> Normalizer:
        return Normalizer(self.norm_mean.double().numpy(), self.norm_std.double().numpy())

    def embed(self, x, proj):
        z = proj(x)
        return z + sinusoidal_encoding(torch.arange(x.shape[1]), z.shape[-1]).to(z.dtype)

    def forward(self, x_a, x_b, t, bundle: ConditioningBundle, mode: str | None = None):
        mode = mode or self.cfg.mode
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        fd = self.cfg.frame_dim
        if x_a.ndim != 3 or x_a.shape != x_b.shape or x_a.shape[-1] != fd:
            raise ValueError(f"expected matching (B, T, {fd}) inputs, got {tuple(x_a.shape)} and {tuple(x_b.shape)}")
        if bundle.batch_size != x_a.shape[0]:
            raise ValueError("conditioning batch size does not match motion batch")
        z_d = self.encoder.fuse_time(bundle.z_text, t)
        z_b = self.embed(x_b, self.in_b)
        z_a = self.embed(x_a, self.in_a)
        state = BlockState(z_a, z_b)
        actor = z_a if mode == "reactive" else None
        for block in self.blocks:
            state = block(state, z_d, bundle.z_m, bundle.z_r, bundle.r_valid, mode, actor)
        v_b = self.out_b(state.z_b)
        v_a = torch.zeros_like(x_a) if mode == "reactive" else self.out_a(state.z_a)
        return v_a, v_b

    def zero_output_projections(self) -> None:
        """Zero every residual sublayer output and conv gate (blocks become identities)."""
        with torch.no_grad():
            for block in self.blocks:
                for branch in {id(b): b for b in (block.branch_a, block.branch_b)}.values():
                    branch.conv.gates.zero_()
                    for lin in branch.output_layers():
                        lin.weight.zero_()
                        lin.bias.zero_()

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> str:
        return save_checkpoint(self, path, extra)


def save_state(state: dict, path, manifest: dict) -> str:
    """Write <path>.json (manifest + parameter table) and <path>.dfmo (float32 payload).

    Returns a short content hash of the payload, usable as a checkpoint id.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = {}, [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().double().numpy().astype(np.float32).reshape(-1)
        table[name] = {"shape": list(tensor.shape), "offset": offset}
        chunks.append(arr)
        offset += arr.size
    payload = np.concatenate(chunks) if chunks else np.zeros(0, np.float32)
    ckpt_id = hashlib.sha256(payload.astype("<f4").tobytes()).hexdigest()[:16]
    manifest = {**manifest, "checkpoint_id": ckpt_id, "parameters": table, "n_values": int(offset)}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    write_container(path.with_suffix(".dfmo"), payload[None, :, None], fps=1, kind="parameters")
    return ckpt_id


def load_state(path) -> tuple[dict, dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    _, payload = read_container(path.with_suffix(".dfmo"))
    flat = np.asarray(payload, dtype=np.float32).reshape(-1)
    if flat.size != manifest["n_values"]:
        raise ValueError(f"{path}: payload has {flat.size} values, manifest says {manifest['n_values']}")
    state = {}
    for name, entry in manifest["parameters"].items():
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[name] = torch.from_numpy(flat[entry["offset"]:entry["offset"] + n].copy()).reshape(entry["shape"])
    return state, manifest


def save_checkpoint(model: DualFlow, path, extra: dict | None = None) -> str:
    return save_state(model.state_dict(), path, {"config": asdict(model.cfg), **(extra or {})})


def load_checkpoint(path) -> tuple[DualFlow, dict]:
    state, manifest = load_state(path)
    model = DualFlow(ModelConfig(**manifest["config"]))
    model.load_state_dict(state)
    return model, manifest
