"""Contrastive rectified-flow objective and the geometric / interaction regularisers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import torch

from .motion import FrameLayout, Skeleton

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_triplet: float = 0.1
    margin: float = 0.5
    lambda_foot: float = 30.0
    lambda_vel: float = 30.0
    lambda_BL: float = 10.0
    lambda_DM: float = 3.0
    lambda_RO: float = 0.01
    lambda_sync: float = 5.0
    lambda_geo: float = 1.0
    lambda_inter: float = 1.0
    tau: float = 1.0
    end_effector_weight: float = 2.0
    contact_radius: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v >= 0:
                raise ValueError(f"loss.{f.name} must be >= 0, got {v}")
        if self.tau == 0:
            raise ValueError("loss.tau must be > 0")


# ---------------------------------------------------------------------------
# flow
# ---------------------------------------------------------------------------

@dataclass
class FlowSample:
    x0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    x_t: torch.Tensor
    v_t: torch.Tensor


def _expand_t(t, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=like.dtype)
    if torch.any((t < 0) | (t > 1)):
        raise ValueError("t must lie in [0, 1]")
    return t.reshape(t.shape + (1,) * (like.ndim - t.ndim))


def interpolate(x0, eps, t) -> FlowSample:
    """Straight path from data (t=0) to noise (t=1). ``t`` is scalar or one value per batch row."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    tt = _expand_t(t, x0)
    return FlowSample(x0, eps, torch.as_tensor(t, dtype=x0.dtype), (1 - tt) * x0 + tt * eps, eps - x0)


def predicted_clean(x_t, v_pred, t):
    return x_t - _expand_t(t, x_t) * v_pred


def flow_loss(v_pred, v_t):
    return torch.mean((v_pred - v_t) ** 2)


def cosine_distance(a, b):
    """1 - cos over the flattened trailing dims; zero-norm inputs count as orthogonal."""
    a = a.reshape(a.shape[0], -1)
    b = b.reshape(b.shape[0], -1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    ok = (na > 0) & (nb > 0)
    if not bool(ok.all()):
        log.warning("triplet: zero-norm velocity in %d item(s), using distance 1", int((~ok).sum()))
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, 1 - (a * b).sum(1) / denom, torch.ones_like(na))


def triplet_loss(v_hat, v_plus, v_minus, margin: float = 0.5):
    """Mean hinge on cosine distances. 1-d inputs are a single item, otherwise dim 0 is the batch."""
    if not (v_hat.shape == v_plus.shape == v_minus.shape):
        raise ValueError("triplet inputs must share a shape")
    if v_hat.ndim == 1:
        v_hat, v_plus, v_minus = v_hat[None], v_plus[None], v_minus[None]
    d_pos = cosine_distance(v_hat, v_plus)
    d_neg = cosine_distance(v_hat, v_minus)
    return torch.clamp(d_pos - d_neg + margin, min=0).mean()


def crf_loss(flow_term, triplet_term, lambda_triplet: float):
    return flow_term + lambda_triplet * triplet_term


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def bone_lengths(positions, skeleton: Skeleton):
    """(..., J, 3) -> (..., J-1) lengths of every non-root bone."""
    child = [j for j, p in enumerate(skeleton.parents) if p >= 0]
    parent = [skeleton.parents[j] for j in child]
    return torch.linalg.vector_norm(positions[..., child, :] - positions[..., parent, :], dim=-1)


def foot_loss(pred_pos, gt_pos, gt_contacts, skeleton: Skeleton):
    """Mean foot-step error on frames where the reference foot is planted.

    Measured against the reference step so a reference foot that creeps while
    flagged as planted does not make the loss positive at a perfect prediction.
    """
    feet = list(skeleton.foot_joints)
    step = pred_pos[..., 1:, feet, :] - pred_pos[..., :-1, feet, :]
    ref = gt_pos[..., 1:, feet, :] - gt_pos[..., :-1, feet, :]
    err = torch.sqrt(((step - ref) ** 2).sum(-1) + 1e-12) - 1e-6
    return torch.mean(err * gt_contacts[..., :-1, :])


def geometric_terms(pred, gt, skeleton: Skeleton) -> dict:
    """Per-person frame tensors (..., T, D) -> {foot, vel, BL}."""
    layout = FrameLayout(skeleton.joint_count)
    pos = layout.positions(pred)
    template = torch.as_tensor(skeleton.bone_lengths, dtype=pred.dtype)
    return {
        "foot": foot_loss(pos, layout.positions(gt), layout.contacts(gt), skeleton),
        "vel": torch.mean(torch.abs(layout.velocities(pred) - layout.velocities(gt))),
        "BL": torch.mean(torch.abs(bone_lengths(pos, skeleton) - template)),
    }


def geometric_loss(pred, gt, skeleton: Skeleton, weights: LossWeights):
    terms = geometric_terms(pred, gt, skeleton)
    return weights.lambda_foot * terms["foot"] + weights.lambda_vel * terms["vel"] + weights.lambda_BL * terms["BL"]


# ---------------------------------------------------------------------------
# interaction
# ---------------------------------------------------------------------------

def cross_distances(pos_a, pos_b):
    """(..., J, 3) x (..., J, 3) -> (..., J, J) Euclidean distances."""
    diff = pos_a[..., :, None, :] - pos_b[..., None, :, :]
    return torch.sqrt((diff ** 2).sum(-1) + 1e-12)


def weighted_pair_error(d_pred, d_gt, pair_weight, tau: float):
    return torch.exp(-d_gt / tau) * pair_weight * (d_pred - d_gt) ** 2


def sync_loss(pred_duet, gt_duet, skeleton: Skeleton, tau: float = 1.0, end_effector_weight: float = 2.0):
    """Distance-weighted error on cross-person joint distances.

    Duets are (pos_a, pos_b) pairs of (..., T, J, 3) position tensors.
    """
    w = torch.as_tensor(skeleton.joint_weights(end_effector_weight), dtype=pred_duet[0].dtype)
    d_p = cross_distances(*pred_duet)
    d_g = cross_distances(*gt_duet)
    return torch.mean(weighted_pair_error(d_p, d_g, w[:, None] * w[None, :], tau))


def root_yaw(positions, skeleton: Skeleton):
    """Heading angle about the vertical axis from the hip vector."""
    left, right = skeleton.hip_joints
    h = positions[..., right, :] - positions[..., left, :]
    return torch.atan2(h[..., 2], h[..., 0])


def wrap_angle(a):
    return torch.atan2(torch.sin(a), torch.cos(a))


def interaction_terms(pred_duet, gt_duet, skeleton: Skeleton, weights: LossWeights) -> dict:
    d_p = cross_distances(*pred_duet)
    d_g = cross_distances(*gt_duet)
    mask = (d_g < weights.contact_radius).to(d_p.dtype)
    dm = (mask * torch.abs(d_p - d_g)).sum() / torch.clamp(mask.sum(), min=1.0)
    rel_p = root_yaw(pred_duet[1], skeleton) - root_yaw(pred_duet[0], skeleton)
    rel_g = root_yaw(gt_duet[1], skeleton) - root_yaw(gt_duet[0], skeleton)
    ro = torch.mean(wrap_angle(rel_p - rel_g) ** 2)
    return {
        "DM": dm,
        "RO": ro,
        "sync": sync_loss(pred_duet, gt_duet, skeleton, weights.tau, weights.end_effector_weight),
    }


def interaction_loss(pred_duet, gt_duet, skeleton: Skeleton, weights: LossWeights):
    terms = interaction_terms(pred_duet, gt_duet, skeleton, weights)
    return weights.lambda_DM * terms["DM"] + weights.lambda_RO * terms["RO"] + weights.lambda_sync * terms["sync"]


def total_loss(crf, geo, inter, lambda_geo: float = 1.0, lambda_inter: float = 1.0):
    return crf + lambda_geo * geo + lambda_inter * inter


def combine(terms: dict, weights: LossWeights):
    """Weighted total from a breakdown dict with keys flow, triplet, foot, vel, BL, DM, RO, sync."""
    crf = crf_loss(terms["flow"], terms["triplet"], weights.lambda_triplet)
    geo = weights.lambda_foot * terms["foot"] + weights.lambda_vel * terms["vel"] + weights.lambda_BL * terms["BL"]
    inter = weights.lambda_DM * terms["DM"] + weights.lambda_RO * terms["RO"] + weights.lambda_sync * terms["sync"]
    return total_loss(crf, geo, inter, weights.lambda_geo, weights.lambda_inter)

