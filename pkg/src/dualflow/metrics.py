"""Evaluation metrics: FID, R-precision / MM-Dist, Diversity / MModality, BAS, BED."""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import uniform_filter1d

from .motion import FrameLayout

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# distribution metrics
# ---------------------------------------------------------------------------

def _psd_sqrt(m: np.ndarray, name: str) -> np.ndarray:
    m = (m + m.T) / 2
    w, v = np.linalg.eigh(m)
    if np.any(w < 0):
        if np.min(w) < -1e-8 * max(1.0, np.max(np.abs(w))):
            log.warning("%s: clamping negative eigenvalues (min %.3g)", name, np.min(w))
        w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def fid_from_moments(mu_r, cov_r, mu_g, cov_g) -> float:
    """Frechet distance between two Gaussians.

    tr((S_r S_g)^1/2) is computed as tr((S_r^1/2 S_g S_r^1/2)^1/2), which only
    needs symmetric PSD square roots.
    """
    mu_r, mu_g = np.atleast_1d(mu_r).astype(float), np.atleast_1d(mu_g).astype(float)
    cov_r, cov_g = np.atleast_2d(cov_r).astype(float), np.atleast_2d(cov_g).astype(float)
    root_r = _psd_sqrt(cov_r, "cov_r")
    cross = _psd_sqrt(root_r @ cov_g @ root_r, "cross")
    diff = mu_r - mu_g
    value = float(diff @ diff + np.trace(cov_r) + np.trace(cov_g) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid(real_features, gen_features) -> float:
    real = np.asarray(real_features, dtype=float)
    gen = np.asarray(gen_features, dtype=float)
    if real.ndim == 1:
        real = real[:, None]
    if gen.ndim == 1:
        gen = gen[:, None]
    if len(real) < 2 or len(gen) < 2:
        raise ValueError("fid needs at least 2 samples per side")
    if real.shape[1] != gen.shape[1]:
        raise ValueError(f"feature dims differ: {real.shape[1]} vs {gen.shape[1]}")
    return fid_from_moments(real.mean(0), np.cov(real, rowvar=False), gen.mean(0), np.cov(gen, rowvar=False))


# ---------------------------------------------------------------------------
# text-motion alignment
# ---------------------------------------------------------------------------

def r_precision_and_mmdist(text_feats, motion_feats, batch_size: int = 32, top_k: int = 3,
                           seed: int = 0) -> tuple[float, float, float, float]:
    """Within-batch retrieval accuracy (top-1..3) and mean matched-pair distance.

    Pairs are shuffled with ``seed`` and split into full batches; ranking uses
    Euclidean distance with ties resolved toward the lower index.
    """
    text = np.asarray(text_feats, dtype=float)
    motion = np.asarray(motion_feats, dtype=float)
    if text.shape != motion.shape:
        raise ValueError(f"text/motion features misaligned: {text.shape} vs {motion.shape}")
    n = len(text)
    if n < batch_size:
        raise ValueError(f"need at least {batch_size} pairs, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    hits = np.zeros(top_k)
    matched = []
    count = 0
    for b in range(n // batch_size):
        idx = perm[b * batch_size:(b + 1) * batch_size]
        t, m = text[idx], motion[idx]
        dist = np.linalg.norm(t[:, None, :] - m[None, :, :], axis=-1)
        order = np.argsort(dist, axis=1, kind="stable")
        rank = np.argmax(order == np.arange(batch_size)[:, None], axis=1)
        for k in range(top_k):
            hits[k] += np.sum(rank <= k)
        matched.append(np.diag(dist))
        count += batch_size
    top = hits / count
    return float(top[0]), float(top[1]), float(top[2]), float(np.concatenate(matched).mean())


def _pair_distance_mean(feats: np.ndarray, n_pairs: int, rng) -> float:
    n = len(feats)
    i = rng.integers(0, n, size=n_pairs)
    j = (i + rng.integers(1, n, size=n_pairs)) % n  # uniform over j != i
    return float(np.linalg.norm(feats[i] - feats[j], axis=-1).mean())


def diversity_and_mmodality(gen_features, groups=None, n_pairs: int = 300, seed: int = 0) -> tuple[float, float]:
    """Mean distance of random distinct pairs, overall and within condition groups.

    ``groups`` is a list of index arrays into ``gen_features``; groups with fewer
    than two members are skipped.
    """
    feats = np.asarray(gen_features, dtype=float)
    rng = np.random.default_rng(seed)
    diversity = _pair_distance_mean(feats, n_pairs, rng) if len(feats) > 1 else 0.0
    per_group = []
    for g in groups or []:
        g = np.asarray(g)
        if len(g) < 2:
            log.info("mmodality: skipping group of size %d", len(g))
            continue
        per_group.append(_pair_distance_mean(feats[g], n_pairs, rng))
    mmodality = float(np.mean(per_group)) if per_group else 0.0
    return diversity, mmodality


# ---------------------------------------------------------------------------
# rhythm
# ---------------------------------------------------------------------------

def _joint_positions(motion, joint_count: int = 22) -> np.ndarray:
    m = np.asarray(motion, dtype=float)
    if m.ndim == 3 and m.shape[-1] == 3:
        return m
    if m.ndim == 2:
        return FrameLayout(joint_count).positions(m)
    raise ValueError(f"expected (T, J, 3) positions or (T, D) frame vectors, got {m.shape}")


def speed_curve(motion, fps: float = 30.0, smoothing_window: int = 3) -> np.ndarray:
    """Mean joint speed (central differences), smoothed by a centred moving average."""
    pos = _joint_positions(motion)
    vel = np.gradient(pos, axis=0) * fps
    speed = np.linalg.norm(vel, axis=-1).mean(axis=-1)
    if smoothing_window > 1:
        speed = uniform_filter1d(speed, smoothing_window, mode="nearest")
    return speed


def local_minima(curve: np.ndarray) -> np.ndarray:
    """Indices where the curve drops into a valley; a flat valley reports its first frame.

    Frame 0 counts when strictly below frame 1. A valley running into the last
    frame counts as well.
    """
    s = np.asarray(curve, dtype=float)
    n = len(s)
    if n < 2:
        return np.zeros(0, dtype=int)
    idx = [0] if s[0] < s[1] else []
    i = 1
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        if s[i] < s[i - 1] and (j == n - 1 or s[j + 1] > s[i]):
            idx.append(i)
        i = j + 1
    return np.asarray(idx, dtype=int)


def kinematic_beats(motion, fps: float = 30.0, smoothing_window: int = 3) -> np.ndarray:
    """Times (s) of local minima of the smoothed mean joint-speed curve."""
    pos = _joint_positions(motion)
    if len(pos) < 3:
        return np.zeros(0)
    speed = speed_curve(pos, fps, smoothing_window)
    # snap rounding noise so a constant-speed curve reads as flat
    tol = 1e-9 * max(1.0, float(np.max(np.abs(speed))))
    return local_minima(np.round(speed / tol)) / fps


def alignment_score(kin_beats, ref_beats, sigma: float = 0.1) -> float:
    """Mean over reference beats of exp(-d^2 / 2 sigma^2), d = distance to nearest kinematic beat."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kin = np.asarray(kin_beats, dtype=float)
    ref = np.asarray(ref_beats, dtype=float)
    if len(ref) == 0 or len(kin) == 0:
        return 0.0
    d = np.min(np.abs(kin[None, :] - ref[:, None]), axis=1)
    return float(np.mean(np.exp(-d ** 2 / (2 * sigma ** 2))))


def beat_align_score(motion, music_beats, sigma: float = 0.1, fps: float = 30.0,
                     smoothing_window: int = 3) -> float:
    return alignment_score(kinematic_beats(motion, fps, smoothing_window), music_beats, sigma)


def beat_echo_degree(motion_a, motion_b, sigma: float = 0.1, fps: float = 30.0,
                     smoothing_window: int = 3) -> float:
    """How well B's kinematic beats echo A's (directional)."""
    beats_a = kinematic_beats(motion_a, fps, smoothing_window)
    beats_b = kinematic_beats(motion_b, fps, smoothing_window)
    return alignment_score(beats_b, beats_a, sigma)


@dataclass
class MetricReport:
    fid: float
    r_precision_top1: float
    r_precision_top2: float
    r_precision_top3: float
    mm_dist: float
    diversity: float
    mmodality: float
    bed: float
    bas: float
    evaluator_id: str = ""
    manifest_hash: str = ""
    metric_seed: int = 0

    def as_dict(self) -> dict:
        return asdict(self)
