"""Prompt decomposition, frozen embedders and the four-channel exemplar index."""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CHANNELS = ("S", "B", "R", "M")
TEXT_CHANNELS = {"S": "spatial", "B": "body", "R": "rhythm"}

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_hash(token: str, salt: str = "") -> int:
    digest = hashlib.blake2b(f"{salt}|{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def token_ids(text: str, vocab_size: int) -> list[int]:
    """Hashed token ids in [1, vocab_size); 0 is reserved for padding/null."""
    return [1 + token_hash(tok) % (vocab_size - 1) for tok in tokenize(text)]


@dataclass(frozen=True)
class Decomposition:
    spatial: str = ""
    body: str = ""
    rhythm: str = ""

    def as_dict(self) -> dict:
        return asdict(self)

    def field_for(self, channel: str) -> str:
        return getattr(self, TEXT_CHANNELS[channel])


def _phrases(*items: str) -> list[tuple[str, ...]]:
    return [tuple(tokenize(s)) for s in items]


# keyword tables over the synthetic template vocabulary; phrases match longest-first
KEYWORDS = {
    "spatial": _phrases(
        "closed hold", "open position", "closed position", "side by side", "hand-to-hand", "hand hold",
        "hold", "handhold", "closed", "open", "facing", "face", "apart", "approach", "approaches",
        "distance", "position", "connection", "connected", "orientation", "proximity", "partner",
    ),
    "body": _phrases(
        "spin", "spins", "spinning", "turn", "turns", "turning", "rotate", "rotates", "rotating",
        "kick", "kicks", "kicking", "arm", "arms", "leg", "legs", "torso", "torsos", "hip", "hips",
        "swing", "swings", "swinging", "roll", "gesture", "posture", "lean", "body", "shoulder",
        "shoulders", "sway", "sways",
    ),
    "rhythm": _phrases(
        "triple step", "basic step", "tempo", "beat", "beats", "rhythm", "rhythmic", "fast", "slow",
        "quick", "medium", "timing", "step", "steps", "stepping", "count", "bpm", "music", "musicality",
        "syncopated", "steady", "continuous",
    ),
}
_PRIORITY = ("spatial", "body", "rhythm")
_CLAUSE_RE = re.compile(r"[,;.!?]+")


def _route(tokens: list[str]) -> dict[str, int]:
    scores = dict.fromkeys(_PRIORITY, 0)
    table = sorted(((p, cat) for cat, ps in KEYWORDS.items() for p in ps), key=lambda x: -len(x[0]))
    i = 0
    while i < len(tokens):
        for phrase, cat in table:
            if tuple(tokens[i:i + len(phrase)]) == phrase:
                scores[cat] += 1
                i += len(phrase)
                break
        else:
            i += 1
    return scores


def decompose_text(text: str) -> Decomposition:
    """Rule-based stand-in for the LLM decomposer.

    Each clause goes to the category with the most keyword hits (ties resolved
    spatial > body > rhythm); a category with no routed clause falls back to the
    whole input.
    """
    routed = {cat: [] for cat in _PRIORITY}
    for clause in _CLAUSE_RE.split(text):
        clause = clause.strip()
        if not clause:
            continue
        scores = _route(tokenize(clause))
        best = max(_PRIORITY, key=lambda c: (scores[c], -_PRIORITY.index(c)))
        if scores[best] > 0:
            routed[best].append(clause)
    fields = {cat: (", ".join(parts) if parts else text) for cat, parts in routed.items()}
    return Decomposition(**fields)


class ExternalDecomposer:
    """Serves precomputed decompositions (e.g. from an LLM run) keyed by prompt text."""

    def __init__(self, table: dict[str, Decomposition], fallback=decompose_text):
        self.table = table
        self.fallback = fallback

    @classmethod
    def from_jsonl(cls, path) -> "ExternalDecomposer":
        table = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    table[rec["text"]] = Decomposition(rec["spatial"], rec["body"], rec["rhythm"])
        return cls(table)

    def __call__(self, text: str) -> Decomposition:
        if text in self.table:
            return self.table[text]
        return self.fallback(text)


# ---------------------------------------------------------------------------
# frozen embedders (stand-ins for pretrained text / music encoders)
# ---------------------------------------------------------------------------

class TextEmbedder:
    """Bag of hashed tokens, each mapped to a fixed Gaussian vector; unit-normalised."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._cache: dict[str, np.ndarray] = {}

    def _vec(self, tok: str) -> np.ndarray:
        if tok not in self._cache:
            rng = np.random.default_rng(token_hash(tok, salt=f"text{self.seed}"))
            self._cache[tok] = rng.standard_normal(self.dim)
        return self._cache[tok]

    def __call__(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            raise ValueError("cannot embed empty text")
        v = np.sum([self._vec(t) for t in toks], axis=0)
        return v / np.linalg.norm(v)


class MusicEmbedder:
    """Time-pooled music features, unit-normalised."""

    def __call__(self, features) -> np.ndarray:
        v = np.asarray(features, dtype=np.float64).mean(axis=0)
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0:
            raise ValueError("music features pool to a zero or non-finite vector")
        return v / n


@dataclass
class Encoders:
    text: TextEmbedder
    music: MusicEmbedder

    @classmethod
    def default(cls, text_dim: int = 64) -> "Encoders":
        return cls(TextEmbedder(text_dim), MusicEmbedder())


# ---------------------------------------------------------------------------
# scoring and index
# ---------------------------------------------------------------------------

def similarity_score(f_i, f_p, l_i, l_p, lambda_len: float = 1.0) -> float:
    """Cosine similarity damped by relative length mismatch."""
    f_i, f_p = np.asarray(f_i, dtype=float), np.asarray(f_p, dtype=float)
    if f_i.shape != f_p.shape:
        raise ValueError(f"embedding dims differ: {f_i.shape} vs {f_p.shape}")
    if l_i < 1 or l_p < 1:
        raise ValueError("lengths must be >= 1")
    # same arithmetic as the batched path so index scores and single scores agree bit for bit
    return float(similarity_scores(f_i[None], [l_i], f_p, l_p, lambda_len)[0])


def similarity_scores(embeddings, lengths, f_p, l_p, lambda_len: float = 1.0) -> np.ndarray:
    """Vectorised :func:`similarity_score` of one query against many entries."""
    e = np.asarray(embeddings, dtype=float)
    f_p = np.asarray(f_p, dtype=float)
    if e.shape[1:] != f_p.shape:
        raise ValueError(f"embedding dims differ: {e.shape[1:]} vs {f_p.shape}")
    lengths = np.asarray(lengths, dtype=float)
    # sqrt of the product (not product of sqrts) makes self-similarity exactly 1
    denom = np.sqrt((e * e).sum(axis=1) * (f_p * f_p).sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = np.where(denom > 0, (e * f_p).sum(axis=1) / denom, 0.0)
    cos = np.clip(cos, -1.0, 1.0)
    return cos * np.exp(-lambda_len * np.abs(lengths - l_p) / np.maximum(lengths, l_p))


@dataclass(frozen=True)
class RetrievalEntry:
    clip_id: str
    score: float
    length: int
    channel: str


@dataclass
class ChannelIndex:
    embeddings: np.ndarray  # (n, d), unit rows
    lengths: np.ndarray     # (n,)
    clip_ids: list[str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.clip_ids) != len(self.lengths):
            raise ValueError("embeddings, lengths and clip_ids must align")
        if np.any(self.lengths < 1):
            raise ValueError("entry lengths must be >= 1")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self):
        return len(self.clip_ids)


@dataclass
class RetrievalDatabase:
    channels: dict[str, ChannelIndex]
    lambda_default: float = 1.0

    def channel(self, name: str) -> ChannelIndex:
        if name not in self.channels:
            raise KeyError(f"unknown retrieval channel {name!r}; expected one of {CHANNELS}")
        return self.channels[name]


RetrievedSets = dict  # channel -> list[RetrievalEntry], sorted by (-score, clip_id)


def retrieve_topk(db: RetrievalDatabase, query_embedding, query_length: int, channel: str, k: int = 2,
                  lambda_len: float | None = None, exclude_clip_id: str | None = None) -> list[RetrievalEntry]:
    """The k best-scoring entries of one channel, ties broken by ascending clip_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    index = db.channel(channel)
    lam = db.lambda_default if lambda_len is None else lambda_len
    scores = similarity_scores(index.embeddings, index.lengths, query_embedding, query_length, lam)
    ids = np.asarray(index.clip_ids)
    keep = np.ones(len(ids), dtype=bool) if exclude_clip_id is None else ids != exclude_clip_id
    cand = np.flatnonzero(keep)
    order = cand[np.lexsort((ids[cand], -scores[cand]))][:k]
    return [RetrievalEntry(str(ids[i]), float(scores[i]), int(index.lengths[i]), channel) for i in order]


def query_embeddings(decomposition: Decomposition, music_features, encoders: Encoders) -> dict:
    q = {c: encoders.text(decomposition.field_for(c)) for c in TEXT_CHANNELS}
    q["M"] = encoders.music(music_features)
    return q


def retrieve_all(db: RetrievalDatabase, queries: dict, query_length: int, k: int = 2,
                 lambda_len: float | None = None, exclude_clip_id: str | None = None) -> RetrievedSets:
    return {c: retrieve_topk(db, queries[c], query_length, c, k, lambda_len, exclude_clip_id)
            for c in CHANNELS if c in queries}


def build_database(dataset, encoders: Encoders, lambda_default: float = 1.0) -> RetrievalDatabase:
    """One unit-norm entry per clip per channel."""
    rows = {c: [] for c in CHANNELS}
    lengths, ids = [], []
    for clip in dataset:
        try:
            q = query_embeddings(clip.decomposition, clip.music_features, encoders)
        except Exception as exc:
            raise ValueError(f"encoder failed on clip {clip.clip_id}: {exc}") from exc
        for c in CHANNELS:
            rows[c].append(q[c])
        lengths.append(clip.n_frames)
        ids.append(clip.clip_id)
    if not ids:
        raise ValueError("cannot build a retrieval database from an empty dataset")
    channels = {c: ChannelIndex(np.stack(rows[c]), np.array(lengths), list(ids)) for c in CHANNELS}
    return RetrievalDatabase(channels, lambda_default)


def save_database(db: RetrievalDatabase, root) -> None:
    from .motion import write_container

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "channels": list(db.channels),
        "dims": {c: idx.dim for c, idx in db.channels.items()},
        "lambda_default": db.lambda_default,
    }
    table = {}
    for c, idx in db.channels.items():
        write_container(root / f"channel_{c}.dfmo", idx.embeddings[None], fps=0.0, kind="features")
        table[c] = {"clip_ids": idx.clip_ids, "lengths": idx.lengths.tolist()}
    (root / "index.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (root / "clip_table.json").write_text(json.dumps(table, sort_keys=True))


def load_database(root) -> RetrievalDatabase:
    from .motion import read_container

    root = Path(root)
    manifest = json.loads((root / "index.json").read_text())
    table = json.loads((root / "clip_table.json").read_text())
    channels = {}
    for c in manifest["channels"]:
        _, emb = read_container(root / f"channel_{c}.dfmo")
        emb = emb[0].astype(np.float64)
        # float32 storage: renormalise so the unit-norm invariant holds at 1e-6
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        channels[c] = ChannelIndex(emb, table[c]["lengths"], table[c]["clip_ids"])
    return RetrievalDatabase(channels, manifest["lambda_default"])
