"""Procedural duet clips with known beats, templated text and decompositions.

All kinematic channels are functions of a beat-eased phase ``phi(t)`` whose time
derivative vanishes on every beat, so joint speeds have minima exactly there.
Limb angles are ``cos(pi * phi)``-shaped (critical points on integer phase only)
and root motion is linear in phase.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .motion import (
    ROOT_HEIGHT, DuetSequence, FrameLayout, Skeleton, axis_angle_matrix, compute_velocities,
    detect_foot_contacts, matrix_to_rot6d, pack_frame, save_duet, to_relative_frame, write_container,
)
from .retrieval import Decomposition

GENRES = ("waltz", "jive", "salsa")
INTERACTIONS = ("closed hold", "spin", "approach")
PATTERN_OF_GENRE = {"waltz": "orbit", "jive": "approach", "salsa": "spin"}


@dataclass(frozen=True)
class GeneratorConfig:
    n_frames: int = 64
    fps: float = 30.0
    tempo_range: tuple[float, float] = (90.0, 150.0)
    genres: tuple[str, ...] = GENRES
    interactions: tuple[str, ...] = INTERACTIONS
    noise_scale: float = 0.05
    music_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.tempo_range
        if not (0 < lo <= hi):
            raise ValueError(f"tempo_range must be positive and ordered, got {self.tempo_range}")
        if not self.genres or not self.interactions:
            raise ValueError("genre and interaction vocabularies must be non-empty")
        if self.n_frames < 2 or self.fps <= 0:
            raise ValueError("need n_frames >= 2 and fps > 0")
        if self.music_dim < 1:
            raise ValueError("music_dim must be >= 1")


@dataclass
class DuetClip:
    clip_id: str
    motion: DuetSequence
    text: str
    decomposition: Decomposition
    music_features: np.ndarray
    beat_times: np.ndarray
    genre: str
    tempo_bpm: float
    interaction: str = ""

    @property
    def n_frames(self) -> int:
        return self.motion.n_frames


def beat_grid(tempo_bpm: float, duration_s: float) -> np.ndarray:
    """Beat times k * 60 / tempo strictly below ``duration_s``."""
    if tempo_bpm <= 0:
        raise ValueError(f"tempo must be positive, got {tempo_bpm}")
    period = 60.0 / tempo_bpm
    n = int(np.ceil(duration_s / period - 1e-12)) if duration_s > 0 else 0
    beats = np.arange(n) * period
    return beats[beats < duration_s]


def frame_aligned_tempo(bpm: float, fps: float, tempo_range) -> float:
    """Snap a tempo so one beat spans a whole number of frames (beats land on frames)."""
    lo, hi = tempo_range
    frames = max(1, round(60.0 * fps / bpm))
    candidates = [f for f in (frames - 1, frames, frames + 1) if f >= 1 and lo <= 60.0 * fps / f <= hi]
    if not candidates:
        return float(bpm)
    best = min(candidates, key=lambda f: abs(60.0 * fps / f - bpm))
    return 60.0 * fps / best


def beat_phase(t, period: float):
    """Eased phase: integer on beats, zero derivative there (smoothstep within each beat)."""
    x = np.asarray(t) / period
    k = np.floor(x)
    u = x - k
    return k + u * u * (3.0 - 2.0 * u)


def _stable_seed(*parts) -> int:
    digest = hashlib.blake2b("|".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def genre_embedding(genre: str, dim: int) -> np.ndarray:
    return np.random.default_rng(_stable_seed("genre", genre)).standard_normal(dim)


def tempo_word(bpm: float) -> str:
    if bpm < 105:
        return "slow"
    if bpm < 130:
        return "medium"
    return "fast"


BODY_PHRASE = {
    "orbit": "rotating together around a shared center",
    "approach": "kicking their legs and swinging their arms as they close the distance",
    "spin": "the follower turns under the leader's arm",
}
SPATIAL_TEMPLATE = {
    "closed hold": "The dancers are in a closed hold position, facing each other with a hand-to-hand connection.",
    "spin": "The dancers are in an open position, connected by one hand while the follower spins away.",
    "approach": "The dancers start apart and approach each other, keeping a facing orientation.",
}
BODY_TEMPLATE = {
    "orbit": "Both dancers rotate around a shared center with upright torsos and framed arms, legs stepping in turn.",
    "approach": "The dancers kick their legs and swing their arms while the torso stays forward.",
    "spin": "The follower turns the whole body under the leader's arm while the leader sways the hips.",
}
RHYTHM_TEMPLATE = ("The movement follows a {word} tempo at {bpm} beats per minute with a {genre} rhythm, "
                   "stepping on every beat.")


def clip_text(genre: str, interaction: str, pattern: str, bpm: float) -> str:
    return f"A {genre} duet in {interaction}, {BODY_PHRASE[pattern]}, at a {tempo_word(bpm)} tempo."


def clip_decomposition(genre: str, interaction: str, pattern: str, bpm: float) -> Decomposition:
    return Decomposition(
        spatial=SPATIAL_TEMPLATE[interaction],
        body=BODY_TEMPLATE[pattern],
        rhythm=RHYTHM_TEMPLATE.format(word=tempo_word(bpm), bpm=int(round(bpm)), genre=genre),
    )


def music_features(t, tempo_bpm: float, genre: str, dim: int, rng, noise_scale: float) -> np.ndarray:
    """Beat-phase harmonics, onset pulse, bar phase, tempo and a genre embedding, plus noise."""
    period = 60.0 / tempo_bpm
    u = (t / period) % 1.0
    cols = []
    for h in range(1, 5):
        cols += [np.cos(2 * np.pi * h * u), np.sin(2 * np.pi * h * u)]
    dist = np.minimum(u, 1.0 - u) * period
    cols.append(np.exp(-dist ** 2 / (2 * 0.03 ** 2)))
    bar = (t / (4 * period)) % 1.0
    cols += [np.cos(2 * np.pi * bar), np.sin(2 * np.pi * bar)]
    cols.append(np.full_like(t, (tempo_bpm - 120.0) / 30.0))
    base = np.stack(cols, axis=-1)
    if dim <= base.shape[1]:
        feats = base[:, :dim]
    else:
        g = genre_embedding(genre, dim - base.shape[1])
        feats = np.concatenate([base, np.broadcast_to(g, (len(t), g.size))], axis=-1)
    return feats + noise_scale * rng.standard_normal(feats.shape)


@dataclass
class _PersonTrack:
    root_pos: np.ndarray   # (T, 3)
    yaw: np.ndarray        # (T,)
    local: np.ndarray      # (T, J-1, 3, 3)


def _yaw_matrix(yaw):
    return axis_angle_matrix([0.0, 1.0, 0.0], yaw)


def _limb_rotations(phi, params, interaction: str, leader: bool, skeleton: Skeleton) -> np.ndarray:
    n = len(phi)
    jc = skeleton.joint_count
    angles = {}  # joint -> list of (axis, angle array)
    c = np.cos(np.pi * (phi + params["phase"]))
    swing = params["leg_amp"]
    # legs alternate; each hip flexes about +x, knee bends on the raised leg
    angles[1] = [((1, 0, 0), -swing * (1 - c) / 2)]
    angles[2] = [((1, 0, 0), -swing * (1 + c) / 2)]
    angles[4] = [((1, 0, 0), params["knee_amp"] * (1 - c) / 2)]
    angles[5] = [((1, 0, 0), params["knee_amp"] * (1 + c) / 2)]
    angles[3] = [((0, 1, 0), params["twist_amp"] * c)]
    arm = params["arm_amp"] * c
    if interaction == "closed hold":
        # arms reach forward toward the partner
        angles[16] = [((0, 1, 0), -1.2), ((0, 0, 1), -0.5 + 0.3 * arm)]
        angles[17] = [((0, 1, 0), 1.2), ((0, 0, 1), 0.5 - 0.3 * arm)]
        angles[18] = [((0, 1, 0), -0.6)]
        angles[19] = [((0, 1, 0), 0.6)]
    elif interaction == "spin":
        raised = 16 if leader else 17
        sign = 1.0 if raised == 16 else -1.0
        angles[raised] = [((0, 0, 1), sign * (1.9 + 0.2 * arm))]
        angles[33 - raised] = [((0, 0, 1), -sign * (1.1 + 0.4 * arm))]
    else:
        angles[16] = [((0, 0, 1), -1.2), ((1, 0, 0), arm)]
        angles[17] = [((0, 0, 1), 1.2), ((1, 0, 0), -arm)]
        angles[18] = [((0, 1, 0), -0.3 * (1 + c))]
        angles[19] = [((0, 1, 0), 0.3 * (1 - c))]
    local = np.broadcast_to(np.eye(3), (n, jc - 1, 3, 3)).copy()
    for j, terms in angles.items():
        m = np.broadcast_to(np.eye(3), (n, 3, 3))
        for axis, a in terms:
            m = m @ axis_angle_matrix(axis, np.broadcast_to(a, (n,)))
        local[:, j - 1] = m
    return local


def _tracks(phi, pattern: str, interaction: str, params, skeleton: Skeleton):
    h = ROOT_HEIGHT
    tracks = []
    if pattern == "orbit":
        radius = params["distance"] / 2
        theta = params["theta0"] + params["orbit_rate"] * phi
        for k in range(2):
            ang = theta + k * np.pi
            pos = np.stack([radius * np.cos(ang), np.full_like(ang, h), radius * np.sin(ang)], axis=-1)
            # face the orbit center: forward (+z rotated by yaw) points to -pos
            yaw = np.arctan2(-np.cos(ang), -np.sin(ang))
            tracks.append((pos, yaw))
    elif pattern == "approach":
        d = params["distance"] + params["approach_amp"] * np.cos(np.pi * (phi + params["phase"]))
        drift = params["drift"] * phi
        for k, sign in enumerate((-1.0, 1.0)):
            # drift is orthogonal to the approach axis so root velocities never cancel
            pos = np.stack([sign * d / 2, np.full_like(d, h), drift], axis=-1)
            yaw = np.full_like(d, -sign * np.pi / 2)
            tracks.append((pos, yaw))
    else:  # spin
        drift = params["drift"] * phi
        half = params["distance"] / 2
        pos_a = np.stack([np.full_like(phi, -half), np.full_like(phi, h), drift], axis=-1)
        pos_b = np.stack([np.full_like(phi, half), np.full_like(phi, h), drift], axis=-1)
        yaw_a = np.full_like(phi, np.pi / 2)
        yaw_b = -np.pi / 2 + params["spin_rate"] * phi
        tracks = [(pos_a, yaw_a), (pos_b, yaw_b)]
    out = []
    for k, (pos, yaw) in enumerate(tracks):
        local = _limb_rotations(phi, params, interaction, leader=(k == 0), skeleton=skeleton)
        out.append(_PersonTrack(pos, yaw, local))
    return out


def _person_positions(track: _PersonTrack, skeleton: Skeleton) -> np.ndarray:
    positions, _ = skeleton.forward_kinematics(track.root_pos, _yaw_matrix(track.yaw), track.local)
    return positions


def _frames_from(positions, local, skeleton: Skeleton, fps: float) -> np.ndarray:
    vel = compute_velocities(positions, fps)
    contacts = detect_foot_contacts(positions, fps, skeleton)
    return pack_frame(positions, vel, matrix_to_rot6d(local), contacts)


def _sample_params(rng, noise: float):
    jitter = lambda: 1.0 + noise * rng.standard_normal()
    return {
        "phase": 0.0,
        "leg_amp": 0.35 * jitter(),
        "knee_amp": 0.5 * jitter(),
        "twist_amp": 0.15 * jitter(),
        "arm_amp": 0.4 * jitter(),
        "distance": 0.9 * jitter(),
        "theta0": rng.uniform(0, 2 * np.pi),
        "orbit_rate": (np.pi / 8) * jitter(),
        "approach_amp": 0.25 * jitter(),
        "drift": 0.05 * jitter(),
        "spin_rate": (np.pi / 2) * jitter(),
    }


def generate_clip(seed: int, config: GeneratorConfig, skeleton: Skeleton | None = None) -> DuetClip:
    """Deterministic in ``(seed, config)``."""
    skeleton = skeleton or Skeleton.smpl22()
    rng = np.random.default_rng([config.seed, seed])
    genre = config.genres[rng.integers(len(config.genres))]
    interaction = config.interactions[rng.integers(len(config.interactions))]
    bpm = frame_aligned_tempo(rng.uniform(*config.tempo_range), config.fps, config.tempo_range)
    pattern = PATTERN_OF_GENRE.get(genre, ("orbit", "approach", "spin")[_stable_seed(genre) % 3])
    params = _sample_params(rng, config.noise_scale)

    t = np.arange(config.n_frames) / config.fps
    period = 60.0 / bpm
    phi = beat_phase(t, period)
    tracks = _tracks(phi, pattern, interaction, params, skeleton)
    frames = []
    for track in tracks:
        positions = _person_positions(track, skeleton)
        frames.append(_frames_from(positions, track.local, skeleton, config.fps))
    duet = to_relative_frame(DuetSequence(frames[0], frames[1], fps=config.fps,
                                          joint_count=skeleton.joint_count))
    music = music_features(t, bpm, genre, config.music_dim, rng, config.noise_scale)
    return DuetClip(
        clip_id=f"clip_{seed:06d}",
        motion=duet,
        text=clip_text(genre, interaction, pattern, bpm),
        decomposition=clip_decomposition(genre, interaction, pattern, bpm),
        music_features=music,
        beat_times=beat_grid(bpm, config.n_frames / config.fps),
        genre=genre,
        tempo_bpm=bpm,
        interaction=interaction,
    )


# ---------------------------------------------------------------------------
# on-disk dataset
# ---------------------------------------------------------------------------

MANIFEST = "manifest.jsonl"


def clip_record(clip: DuetClip, motion_path: str, music_path: str) -> dict:
    return {
        "clip_id": clip.clip_id,
        "motion_path": motion_path,
        "text": clip.text,
        "decomposition": clip.decomposition.as_dict(),
        "genre": clip.genre,
        "tempo_bpm": clip.tempo_bpm,
        "beat_times": [float(b) for b in clip.beat_times],
        "music_path": music_path,
        "interaction": clip.interaction,
    }


def write_clip(root: Path, clip: DuetClip) -> dict:
    (root / "clips").mkdir(parents=True, exist_ok=True)
    motion_path = f"clips/{clip.clip_id}.dfmo"
    music_path = f"clips/{clip.clip_id}.music.dfmo"
    save_duet(root / motion_path, clip.motion)
    write_container(root / music_path, clip.music_features[None], fps=clip.motion.fps, kind="features")
    return clip_record(clip, motion_path, music_path)


def generate_dataset(n: int, config: GeneratorConfig, root, seed_offset: int = 0) -> list[dict]:
    """Generate clips for seeds ``seed_offset .. seed_offset + n - 1`` and write the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = [write_clip(root, generate_clip(seed_offset + i, config)) for i in range(n)]
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return records


class DuetDataset:
    """Clips listed in a manifest, loaded eagerly (desk scale)."""

    def __init__(self, clips: list[DuetClip], manifest_path: Path | None = None):
        if not clips:
            raise ValueError("dataset is empty")
        self.clips = clips
        self.by_id = {c.clip_id: c for c in clips}
        self.manifest_path = manifest_path

    @classmethod
    def load(cls, root) -> "DuetDataset":
        from .motion import load_duet, read_container

        root = Path(root)
        clips = []
        with open(root / MANIFEST, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                try:
                    motion = load_duet(root / rec["motion_path"])
                    _, music = read_container(root / rec["music_path"])
                except FileNotFoundError as exc:
                    raise FileNotFoundError(f"clip {rec['clip_id']}: {exc}") from exc
                clips.append(DuetClip(
                    clip_id=rec["clip_id"], motion=motion, text=rec["text"],
                    decomposition=Decomposition(**rec["decomposition"]),
                    music_features=music[0].astype(np.float64), beat_times=np.array(rec["beat_times"]),
                    genre=rec["genre"], tempo_bpm=rec["tempo_bpm"], interaction=rec.get("interaction", ""),
                ))
        return cls(clips, manifest_path=root / MANIFEST)

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, i) -> DuetClip:
        return self.clips[i]

    def __iter__(self):
        return iter(self.clips)

    def manifest_hash(self) -> str:
        if self.manifest_path is None:
            return ""
        return hashlib.sha256(self.manifest_path.read_bytes()).hexdigest()[:16]


def config_dict(config: GeneratorConfig) -> dict:
    return asdict(config)
