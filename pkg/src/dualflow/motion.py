"""Skeleton, per-frame motion vector layout and the ``.dfmo`` container."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
N_CONTACTS = 4

SMPL22_NAMES = [
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
]
SMPL22_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19]
# y-up, +z forward, +x to the person's left; metres
SMPL22_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0], [-0.06, -0.09, 0.0], [0.0, 0.11, 0.0],
    [0.04, -0.38, 0.0], [-0.04, -0.38, 0.0], [0.0, 0.13, 0.0],
    [-0.04, -0.42, -0.02], [0.04, -0.42, -0.02], [0.0, 0.05, 0.02],
    [0.0, -0.04, 0.12], [0.0, -0.04, 0.12], [0.0, 0.22, -0.02],
    [0.07, 0.12, 0.0], [-0.07, 0.12, 0.0], [0.0, 0.09, 0.05],
    [0.11, 0.03, 0.0], [-0.11, 0.03, 0.0], [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0], [0.25, 0.0, 0.0], [-0.25, 0.0, 0.0],
])
ROOT_HEIGHT = 0.93  # pelvis height that puts the rest-pose toes at y=0


@dataclass(frozen=True)
class Skeleton:
    parents: tuple[int, ...]
    offsets: np.ndarray
    end_effectors: tuple[int, ...] = ()
    foot_joints: tuple[int, ...] = ()  # left heel, left toe, right heel, right toe
    hip_joints: tuple[int, int] = (1, 2)
    names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.parents)
        if n < 1 or self.parents[0] != -1:
            raise ValueError("joint 0 must be the root (parent -1)")
        for j, p in enumerate(self.parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if self.offsets.shape != (n, 3):
            raise ValueError(f"offsets must be ({n}, 3), got {self.offsets.shape}")
        if np.any(self.bone_lengths <= 0):
            raise ValueError("all bone lengths must be positive")
        for j in (*self.end_effectors, *self.foot_joints, *self.hip_joints):
            if not 0 <= j < n:
                raise ValueError(f"joint index {j} out of range")
        if self.foot_joints and len(self.foot_joints) != N_CONTACTS:
            raise ValueError("foot_joints must name exactly 4 joints")

    @classmethod
    def smpl22(cls) -> "Skeleton":
        return cls(
            parents=tuple(SMPL22_PARENTS),
            offsets=SMPL22_OFFSETS.copy(),
            end_effectors=(0, 1, 2, 7, 8, 10, 11, 20, 21),
            foot_joints=(7, 10, 8, 11),
            hip_joints=(1, 2),
            names=tuple(SMPL22_NAMES),
        )

    @classmethod
    def chain(cls, joint_count: int, bone: float = 0.1) -> "Skeleton":
        """A straight vertical chain; handy for layouts with arbitrary joint counts."""
        offsets = np.zeros((joint_count, 3))
        offsets[1:, 1] = bone
        return cls(parents=(-1, *range(joint_count - 1)), offsets=offsets)

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each non-root joint, shape (J-1,)."""
        return np.linalg.norm(self.offsets[1:], axis=-1)

    def joint_weights(self, end_effector_weight: float) -> np.ndarray:
        w = np.ones(self.joint_count)
        w[list(self.end_effectors)] = end_effector_weight
        return w

    def forward_kinematics(self, root_pos, root_rot, local_rot):
        """Global joint positions from root transform and local rotations.

        root_pos (..., 3), root_rot (..., 3, 3), local_rot (..., J-1, 3, 3)
        -> positions (..., J, 3), global rotations (..., J, 3, 3)
        """
        n = self.joint_count
        pos = [None] * n
        rot = [None] * n
        pos[0], rot[0] = root_pos, root_rot
        for j in range(1, n):
            p = self.parents[j]
            pos[j] = pos[p] + np.einsum("...ij,j->...i", rot[p], self.offsets[j])
            rot[j] = rot[p] @ local_rot[..., j - 1, :, :]
        return np.stack(pos, axis=-2), np.stack(rot, axis=-3)


@dataclass(frozen=True)
class FrameLayout:
    """Index layout of ``[positions, velocities, rotations6d, contacts]``.

    Works on numpy arrays and torch tensors alike (slicing and reshape only).
    """
    joint_count: int = 22

    @property
    def dim(self) -> int:
        return 12 * self.joint_count - 6 + N_CONTACTS

    @property
    def pos(self) -> slice:
        return slice(0, 3 * self.joint_count)

    @property
    def vel(self) -> slice:
        return slice(3 * self.joint_count, 6 * self.joint_count)

    @property
    def rot(self) -> slice:
        return slice(6 * self.joint_count, 12 * self.joint_count - 6)

    @property
    def contact(self) -> slice:
        return slice(12 * self.joint_count - 6, self.dim)

    def positions(self, x):
        return x[..., self.pos].reshape(*x.shape[:-1], self.joint_count, 3)

    def velocities(self, x):
        return x[..., self.vel].reshape(*x.shape[:-1], self.joint_count, 3)

    def rotations(self, x):
        return x[..., self.rot].reshape(*x.shape[:-1], self.joint_count - 1, 6)

    def contacts(self, x):
        return x[..., self.contact]


def _check(name, arr, expected):
    if tuple(arr.shape[-len(expected):]) != expected:
        raise ValueError(f"{name}: expected trailing shape {expected}, got {tuple(arr.shape)}")


def pack_frame(positions, velocities, rotations6d, contacts) -> np.ndarray:
    """Concatenate frame components; leading batch/time axes are preserved.

    positions/velocities (..., J, 3), rotations6d (..., J-1, 6), contacts (..., 4).
    """
    positions = np.asarray(positions)
    j = positions.shape[-2] if positions.ndim >= 2 else 0
    _check("positions", positions, (j, 3))
    _check("velocities", np.asarray(velocities), (j, 3))
    _check("rotations6d", np.asarray(rotations6d), (j - 1, 6))
    _check("contacts", np.asarray(contacts), (N_CONTACTS,))
    lead = positions.shape[:-2]
    parts = [np.asarray(positions), np.asarray(velocities), np.asarray(rotations6d), np.asarray(contacts)]
    for name, p in zip(("velocities", "rotations6d", "contacts"), parts[1:]):
        if p.shape[:len(lead)] != lead or p.ndim - len(lead) != (1 if name == "contacts" else 2):
            raise ValueError(f"{name}: leading shape {p.shape} does not match positions {positions.shape}")
    flat = [p.reshape(*lead, -1) for p in parts]
    return np.concatenate(flat, axis=-1)


def unpack_frame(x, joint_count: int = 22):
    layout = FrameLayout(joint_count)
    x = np.asarray(x)
    if x.shape[-1] != layout.dim:
        raise ValueError(f"frame vector: expected last dim {layout.dim}, got {x.shape[-1]}")
    return layout.positions(x), layout.velocities(x), layout.rotations(x), layout.contacts(x)


def compute_velocities(positions, fps: float) -> np.ndarray:
    """Forward difference scaled by fps; the last frame repeats the previous one."""
    positions = np.asarray(positions, dtype=float)
    vel = np.zeros_like(positions)
    if positions.shape[0] < 2:
        return vel
    vel[:-1] = (positions[1:] - positions[:-1]) * fps
    vel[-1] = vel[-2]
    return vel


def detect_foot_contacts(positions, fps: float, skeleton: Skeleton,
                         speed_threshold: float = 0.1, height_threshold: float = 0.05) -> np.ndarray:
    """Binary contact labels (T, 4): slow and low foot joints touch the ground."""
    feet = np.asarray(positions)[:, list(skeleton.foot_joints)]
    speed = np.linalg.norm(compute_velocities(feet, fps), axis=-1)
    height = feet[..., 1]
    return ((speed < speed_threshold) & (height < height_threshold)).astype(np.float64)


def matrix_to_rot6d(m):
    """First two columns of each rotation matrix, flattened row-major -> (..., 6)."""
    m = np.asarray(m)
    return m[..., :, :2].reshape(*m.shape[:-2], 6)


def rot6d_to_matrix(r6):
    """Gram-Schmidt orthonormalisation of a 6D rotation back to a rotation matrix."""
    r6 = np.asarray(r6, dtype=float)
    cols = r6.reshape(*r6.shape[:-1], 3, 2)
    a, b = cols[..., 0], cols[..., 1]
    x = a / np.linalg.norm(a, axis=-1, keepdims=True)
    b = b - np.sum(x * b, axis=-1, keepdims=True) * x
    y = b / np.linalg.norm(b, axis=-1, keepdims=True)
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def axis_angle_matrix(axis, angle):
    """Rotation matrices about a fixed unit axis for an array of angles."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    angle = np.asarray(angle, dtype=float)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    s, c = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


@dataclass
class DuetSequence:
    frames_a: np.ndarray
    frames_b: np.ndarray
    fps: float = 30.0
    joint_count: int = 22

    def __post_init__(self):
        self.frames_a = np.asarray(self.frames_a)
        self.frames_b = np.asarray(self.frames_b)
        if self.frames_a.shape != self.frames_b.shape:
            raise ValueError(f"persons differ in shape: {self.frames_a.shape} vs {self.frames_b.shape}")
        if self.frames_a.ndim != 2 or self.frames_a.shape[1] != FrameLayout(self.joint_count).dim:
            raise ValueError(f"frames must be (N, {FrameLayout(self.joint_count).dim}), got {self.frames_a.shape}")

    @property
    def n_frames(self) -> int:
        return self.frames_a.shape[0]

    @property
    def layout(self) -> FrameLayout:
        return FrameLayout(self.joint_count)

    def stacked(self) -> np.ndarray:
        """(2, N, D) person-major array."""
        return np.stack([self.frames_a, self.frames_b])

    def concatenated(self) -> np.ndarray:
        """(N, 2D): per-frame ``[x_a; x_b]``."""
        return np.concatenate([self.frames_a, self.frames_b], axis=-1)

    @classmethod
    def from_concatenated(cls, x, fps=30.0, joint_count=22) -> "DuetSequence":
        d = FrameLayout(joint_count).dim
        x = np.asarray(x)
        return cls(x[:, :d], x[:, d:], fps=fps, joint_count=joint_count)


def to_relative_frame(duet: DuetSequence) -> DuetSequence:
    """Shift both persons so that A's frame-0 root sits at the origin."""
    layout = duet.layout
    origin = layout.positions(duet.frames_a)[0, 0].copy()
    out = []
    for frames in (duet.frames_a, duet.frames_b):
        frames = frames.copy()
        pos = layout.positions(frames) - origin
        frames[:, layout.pos] = pos.reshape(frames.shape[0], -1)
        out.append(frames)
    return DuetSequence(out[0], out[1], fps=duet.fps, joint_count=duet.joint_count)


@dataclass
class Normalizer:
    """Per-channel standardisation shared by both persons."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, frames, std_floor: float = 1e-2) -> "Normalizer":
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, np.shape(frames)[-1])
        return cls(frames.mean(0), np.maximum(frames.std(0), std_floor))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class ContainerHeader:
    fps: float
    n_frames: int
    n_persons: int
    joint_count: int
    kind: str = "motion"
    schema_version: int = SCHEMA_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def frame_dim(self) -> int:
        if self.kind == "motion":
            return FrameLayout(self.joint_count).dim
        return self.joint_count


def write_container(path, data, fps: float = 30.0, joint_count: int | None = None,
                    kind: str = "motion", **extra) -> None:
    """Write a (n_persons, n_frames, frame_dim) array as JSON header + float32 LE payload.

    For ``kind != "motion"`` the ``joint_count`` field carries the feature dim.
    """
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    if data.ndim != 3:
        raise ValueError(f"container payload must be 3-d, got shape {data.shape}")
    if kind == "motion":
        joint_count = joint_count or 22
        if data.shape[-1] != FrameLayout(joint_count).dim:
            raise ValueError(f"motion frame dim {data.shape[-1]} does not match joint_count {joint_count}")
    else:
        joint_count = data.shape[-1]
    header = {
        "schema_version": SCHEMA_VERSION, "fps": fps, "n_frames": int(data.shape[1]),
        "n_persons": int(data.shape[0]), "joint_count": int(joint_count), "kind": kind, **extra,
    }
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_container(path) -> tuple[ContainerHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    meta = json.loads(raw[:nl].decode("utf-8"))
    known = {"schema_version", "fps", "n_frames", "n_persons", "joint_count", "kind"}
    header = ContainerHeader(
        fps=meta["fps"], n_frames=meta["n_frames"], n_persons=meta["n_persons"],
        joint_count=meta["joint_count"], kind=meta.get("kind", "motion"),
        schema_version=meta["schema_version"], extra={k: v for k, v in meta.items() if k not in known},
    )
    payload = raw[nl + 1:]
    n = header.n_persons * header.n_frames * header.frame_dim
    if len(payload) != 4 * n:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header implies {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(header.n_persons, header.n_frames, header.frame_dim)
    return header, data.copy()


def save_duet(path, duet: DuetSequence, **extra) -> None:
    write_container(path, duet.stacked(), fps=duet.fps, joint_count=duet.joint_count, **extra)


def load_duet(path) -> DuetSequence:
    header, data = read_container(path)
    if header.kind != "motion" or header.n_persons != 2:
        raise ValueError(f"{path}: not a two-person motion container")
    return DuetSequence(data[0], data[1], fps=header.fps, joint_count=header.joint_count)
