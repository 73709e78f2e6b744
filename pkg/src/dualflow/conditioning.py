"""Text, music and retrieval conditioning latents and classifier-free-guidance masking."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .retrieval import CHANNELS, token_ids


def sinusoidal_encoding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos encoding of (possibly fractional) positions -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    angles = positions.to(torch.float64)[..., None] * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = torch.cat([enc, torch.zeros_like(enc[..., :1])], dim=-1)
    return enc


def _encoder_stack(dim: int, n_heads: int, n_layers: int, dropout: float) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(dim, n_heads, dim_feedforward=2 * dim, dropout=dropout,
                                       activation="gelu", batch_first=True, norm_first=True)
    return nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)


class TextEncoder(nn.Module):
    """Hashed-token embeddings -> 2-layer self-attention -> masked mean pool -> projection."""

    def __init__(self, vocab_size: int, text_dim: int, latent_dim: int, n_heads: int = 4,
                 n_layers: int = 2, dropout: float = 0.1):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, text_dim)
        self.encoder = _encoder_stack(text_dim, n_heads, n_layers, dropout)
        self.proj = nn.Linear(text_dim, latent_dim)
        self.null = nn.Parameter(0.02 * torch.randn(latent_dim))

    def tokenize(self, texts: list[str], max_len: int = 64) -> torch.Tensor:
        rows = [token_ids(t, self.vocab_size)[:max_len] for t in texts]
        width = max([len(r) for r in rows] + [1])
        out = torch.zeros(len(rows), width, dtype=torch.long)
        for i, r in enumerate(rows):
            out[i, :len(r)] = torch.tensor(r, dtype=torch.long)
        return out

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        valid = ids != 0
        empty = ~valid.any(dim=1)
        # empty prompts run a single null token through the stack, then take the null embedding
        ids = ids.clone()
        ids[empty, 0] = 0
        valid = valid.clone()
        valid[empty, 0] = True
        x = self.embed(ids)
        x = x + sinusoidal_encoding(torch.arange(ids.shape[1]), x.shape[-1]).to(x.dtype)
        h = self.encoder(x, src_key_padding_mask=~valid)
        w = valid.to(h.dtype)[..., None]
        pooled = (h * w).sum(1) / w.sum(1)
        z = self.proj(pooled)
        return torch.where(empty[:, None], self.null.to(z.dtype).expand_as(z), z)


class MusicEncoder(nn.Module):
    def __init__(self, music_dim: int, latent_dim: int, n_heads: int = 4, n_layers: int = 2,
                 dropout: float = 0.1, positional: bool = True):
        super().__init__()
        self.music_dim = music_dim
        self.proj = nn.Linear(music_dim, latent_dim)
        self.encoder = _encoder_stack(latent_dim, n_heads, n_layers, dropout)
        self.positional = positional
        self.null = nn.Parameter(0.02 * torch.randn(latent_dim))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.music_dim:
            raise ValueError(f"music feature dim {features.shape[-1]} != configured {self.music_dim}")
        x = self.proj(features)
        if self.positional:
            x = x + sinusoidal_encoding(torch.arange(x.shape[-2]), x.shape[-1]).to(x.dtype)
        return self.encoder(x)


class TimestepEmbedding(nn.Module):
    def __init__(self, latent_dim: int):
        super().__init__()
        self.dim = latent_dim
        self.mlp = nn.Sequential(nn.Linear(latent_dim, latent_dim), nn.SiLU(), nn.Linear(latent_dim, latent_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_encoding(1000.0 * t, self.dim).to(dtype))


class RetrievalEncoder(nn.Module):
    """Shared projection of exemplar frames + per-exemplar positions + channel embedding."""

    def __init__(self, frame_dim: int, latent_dim: int):
        super().__init__()
        self.proj = nn.Linear(frame_dim, latent_dim)
        self.channel = nn.Embedding(len(CHANNELS), latent_dim)

    def forward(self, frames, positions, channels) -> torch.Tensor:
        x = self.proj(frames)
        x = x + sinusoidal_encoding(positions, x.shape[-1]).to(x.dtype)
        return x + self.channel(channels)


@dataclass
class ConditionInputs:
    """Raw (pre-encoder) conditions for a batch."""
    token_ids: torch.Tensor       # (B, S) long, 0 = pad
    music: torch.Tensor           # (B, T, d_m)
    exemplars: torch.Tensor       # (B, R, 2 * frame_dim), normalised
    exemplar_pos: torch.Tensor    # (B, R) long, frame index within its exemplar
    exemplar_channel: torch.Tensor  # (B, R) long, index into CHANNELS
    exemplar_valid: torch.Tensor  # (B, R) bool

    def index(self, idx) -> "ConditionInputs":
        return ConditionInputs(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def to(self, dtype) -> "ConditionInputs":
        return replace(self, music=self.music.to(dtype), exemplars=self.exemplars.to(dtype))


@dataclass
class ConditioningBundle:
    z_text: torch.Tensor          # (B, D), timestep not yet fused
    z_m: torch.Tensor             # (B, T, D)
    z_r: torch.Tensor             # (B, R, D)
    r_valid: torch.Tensor         # (B, R) bool
    drop_text: torch.Tensor       # (B,) bool
    drop_music: torch.Tensor      # (B,) bool

    @property
    def batch_size(self) -> int:
        return self.z_text.shape[0]


class ConditionEncoder(nn.Module):
    def __init__(self, latent_dim: int, text_dim: int, music_dim: int, frame_dim: int,
                 vocab_size: int = 4096, n_heads: int = 4, dropout: float = 0.1, music_positional: bool = True):
        super().__init__()
        self.text = TextEncoder(vocab_size, text_dim, latent_dim, n_heads, 2, dropout)
        self.music = MusicEncoder(music_dim, latent_dim, n_heads, 2, dropout, music_positional)
        self.time = TimestepEmbedding(latent_dim)
        self.retrieval = RetrievalEncoder(2 * frame_dim, latent_dim)
        self.latent_dim = latent_dim

    # individual encoders ------------------------------------------------
    def fuse_time(self, z_text: torch.Tensor, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=z_text.dtype)
        if t.ndim == 0:
            t = t.expand(z_text.shape[0])
        if torch.any((t < 0) | (t > 1)):
            raise ValueError("timestep must lie in [0, 1]")
        return z_text + self.time(t)

    def encode_text(self, texts, t) -> torch.Tensor:
        """z_d for a list of prompts at flow time ``t``."""
        if isinstance(texts, str):
            texts = [texts]
        return self.fuse_time(self.text(self.text.tokenize(texts)), t)

    def encode_music(self, features) -> torch.Tensor:
        features = torch.as_tensor(features, dtype=self.music.proj.weight.dtype)
        squeeze = features.ndim == 2
        z = self.music(features[None] if squeeze else features)
        return z[0] if squeeze else z

    def encode_retrieved(self, frames, positions, channels) -> torch.Tensor:
        return self.retrieval(frames, positions, channels)

    # bundles --------------------------------------------------------------
    def bundle(self, inputs: ConditionInputs) -> ConditioningBundle:
        b = inputs.token_ids.shape[0]
        z_text = self.text(inputs.token_ids)
        z_m = self.music(inputs.music)
        if inputs.exemplars.shape[1] == 0:
            z_r = z_m.new_zeros(b, 0, self.latent_dim)
        else:
            z_r = self.retrieval(inputs.exemplars, inputs.exemplar_pos, inputs.exemplar_channel)
        no = torch.zeros(b, dtype=torch.bool)
        return ConditioningBundle(z_text, z_m, z_r, inputs.exemplar_valid, no, no.clone())

    def apply_drops(self, bundle: ConditioningBundle, drop_text, drop_music) -> ConditioningBundle:
        """Replace dropped modalities by their learned null embeddings."""
        drop_text = torch.as_tensor(drop_text, dtype=torch.bool).reshape(-1).expand(bundle.batch_size)
        drop_music = torch.as_tensor(drop_music, dtype=torch.bool).reshape(-1).expand(bundle.batch_size)
        z_text = torch.where(drop_text[:, None], self.text.null.to(bundle.z_text.dtype), bundle.z_text)
        z_m = torch.where(drop_music[:, None, None], self.music.null.to(bundle.z_m.dtype), bundle.z_m)
        return ConditioningBundle(z_text, z_m, bundle.z_r, bundle.r_valid,
                                  bundle.drop_text | drop_text, bundle.drop_music | drop_music)


def draw_drop_events(rng: np.random.Generator, n: int, p_both: float = 0.1, p_text: float = 0.2,
                     p_music: float = 0.2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw (joint, text, music) draws; the per-modality draws only matter where joint is False."""
    for name, p in (("p_both", p_both), ("p_text", p_text), ("p_music", p_music)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return rng.random(n) < p_both, rng.random(n) < p_text, rng.random(n) < p_music


def draw_drop_flags(rng: np.random.Generator, n: int, p_both: float = 0.1, p_text: float = 0.2,
                    p_music: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Joint drop first; otherwise text and music drop independently."""
    both, text, music = draw_drop_events(rng, n, p_both, p_text, p_music)
    return both | text, both | music


def cfg_mask(bundle: ConditioningBundle, encoder: ConditionEncoder, rng: np.random.Generator,
             p_both: float = 0.1, p_text: float = 0.2, p_music: float = 0.2) -> ConditioningBundle:
    drop_text, drop_music = draw_drop_flags(rng, bundle.batch_size, p_both, p_text, p_music)
    if not drop_text.any() and not drop_music.any():
        return bundle
    return encoder.apply_drops(bundle, torch.from_numpy(drop_text), torch.from_numpy(drop_music))


# ---------------------------------------------------------------------------
# retrieval exemplars -> encoder inputs
# ---------------------------------------------------------------------------

def exemplar_rows(sets: dict, dataset, normalizer=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Concatenate retrieved clips in channel order S, B, R, M.

    Returns (frames (R, 2 * frame_dim), position within exemplar (R,), channel index (R,)).
    Positions restart at 0 for each exemplar.
    """
    frames, pos, chan = [], [], []
    for ci, c in enumerate(CHANNELS):
        for entry in sets.get(c, []):
            try:
                clip = dataset.by_id[entry.clip_id]
            except KeyError:
                raise KeyError(f"retrieved clip {entry.clip_id} is not in the dataset") from None
            x = clip.motion.concatenated()
            if normalizer is not None:
                x = (x - normalizer.mean) / normalizer.std
            frames.append(x)
            pos.append(np.arange(len(x)))
            chan.append(np.full(len(x), ci))
    if not frames:
        width = 0 if normalizer is None else len(normalizer.mean)
        return np.zeros((0, width)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(frames), np.concatenate(pos).astype(np.int64), np.concatenate(chan).astype(np.int64)


def encode_retrieved_sets(encoder: ConditionEncoder, sets: dict, dataset, normalizer=None) -> torch.Tensor:
    """z_R rows for one query; a (0, latent_dim) sentinel when nothing was retrieved."""
    frames, pos, chan = exemplar_rows(sets, dataset, normalizer)
    dtype = encoder.retrieval.proj.weight.dtype
    if len(frames) == 0:
        return torch.zeros(0, encoder.latent_dim, dtype=dtype)
    return encoder.encode_retrieved(torch.as_tensor(frames, dtype=dtype), torch.from_numpy(pos),
                                    torch.from_numpy(chan))


def collate_inputs(token_rows: list, music: list, exemplars: list) -> ConditionInputs:
    """Pad per-item conditions into a batch. ``exemplars`` holds exemplar_rows() triples."""
    b = len(token_rows)
    s = max([len(r) for r in token_rows] + [1])
    ids = torch.zeros(b, s, dtype=torch.long)
    for i, r in enumerate(token_rows):
        ids[i, :len(r)] = torch.as_tensor(r, dtype=torch.long)
    music_t = torch.as_tensor(np.stack(music), dtype=torch.float32)
    r = max(len(e[0]) for e in exemplars)
    width = max(e[0].shape[1] for e in exemplars)
    frames = torch.zeros(b, r, width)
    pos = torch.zeros(b, r, dtype=torch.long)
    chan = torch.zeros(b, r, dtype=torch.long)
    valid = torch.zeros(b, r, dtype=torch.bool)
    for i, (f, p, c) in enumerate(exemplars):
        n = len(f)
        if n:
            frames[i, :n] = torch.as_tensor(f, dtype=torch.float32)
            pos[i, :n] = torch.from_numpy(p)
            chan[i, :n] = torch.from_numpy(c)
            valid[i, :n] = True
    return ConditionInputs(ids, music_t, frames, pos, chan, valid)


def condition_item(text: str, decomposition, music, db, dataset, encoders, normalizer, vocab_size: int,
                   k: int = 2, lambda_len: float | None = None, exclude_clip_id: str | None = None,
                   query_length: int | None = None) -> tuple[list, np.ndarray, tuple]:
    """Everything one sample needs before the learned encoders: tokens, music, exemplar rows."""
    from .retrieval import query_embeddings, retrieve_all

    music = np.asarray(music, dtype=np.float64)
    if db is None:
        sets = {}
    else:
        q = query_embeddings(decomposition, music, encoders)
        sets = retrieve_all(db, q, query_length or len(music), k, lambda_len, exclude_clip_id)
    return token_ids(text, vocab_size), music, exemplar_rows(sets, dataset, normalizer)
