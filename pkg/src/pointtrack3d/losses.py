"""Training losses and their weighted total."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

log = logging.getLogger(__name__)

ALPHA = 0.8
GAMMA = 0.8
RIGID_K = 4
OCCLUSION_WEIGHT = 0.1


@dataclass
class LossWeights:
    sf: float = 2.0
    track: float = 1.0
    smooth: float = 0.3
    rigid: float = 0.2
    iso: float = 0.2
    projection: float = 0.0
    alpha: float = ALPHA
    gamma: float = GAMMA
    stage: str = "track"

    def __post_init__(self):
        if min(self.sf, self.track, self.smooth, self.rigid, self.iso, self.projection) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.stage == "pretrain" and (self.smooth or self.rigid or self.iso):
            raise ValueError("pretrain stage uses only the scene flow and track terms")

    @classmethod
    def for_stage(cls, stage: str, **kw):
        if stage == "pretrain":
            return cls(2.0, 1.0, 0.0, 0.0, 0.0, stage="pretrain", **kw)
        if stage == "track":
            return cls(2.0, 1.0, 0.3, 0.2, 0.2, stage="track", **kw)
        raise ValueError(f"unknown stage {stage!r}")

    def as_tuple(self):
        return (self.sf, self.track, self.smooth, self.rigid, self.iso)


def _level_discount(n_levels, factor, like):
    return factor ** torch.arange(n_levels, dtype=like.dtype, device=like.device)


def track_loss(pred, gt, visible=None, alpha=ALPHA):
    """(1/(T n_q)) sum_l sum_t sum_i alpha^(l-1) |q - q_hat|_1.

    Args:
        pred: [L, T, Q, 3] predicted positions per level (level 0 first).
        gt: [T, Q, 3].
        visible: [T, Q] mask of terms that count (None: all).
    """
    gt = torch.as_tensor(gt, dtype=pred.dtype)
    if pred.dim() != 4 or pred.shape[1:] != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    n_t, n_q = gt.shape[:2]
    err = (pred - gt).abs().sum(-1)                                  # [L, T, Q]
    if visible is not None:
        err = err * torch.as_tensor(visible, dtype=pred.dtype)
    w = _level_discount(len(pred), alpha, pred)
    return (w[:, None, None] * err).sum() / (n_t * n_q)


def sceneflow_loss(pred, gt, gamma=GAMMA):
    """(1/T) sum_l sum_t sum_i gamma^(l-1) |dp - dp_hat|_1.

    Args:
        pred: T lists (one per frame pair) of per-level [N_l, 3] flows.
        gt: same structure.
    """
    if len(pred) != len(gt):
        raise ValueError("shape mismatch: pair counts differ")
    total = 0.0
    for p_levels, g_levels in zip(pred, gt):
        if len(p_levels) != len(g_levels):
            raise ValueError("shape mismatch: level counts differ")
        for l, (p, g) in enumerate(zip(p_levels, g_levels)):
            g = torch.as_tensor(g, dtype=p.dtype)
            if p.shape != g.shape:
                raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
            total = total + gamma ** l * (p - g).abs().sum()
    return total / len(pred)


def smoothness_loss(motions):
    """(1/(L T n_q)) sum ||v_t - v_(t+1)||_1 over levels, queries and the T consecutive pairs.

    Args:
        motions: [L, T+1, Q, 3] predicted motions.
    """
    n_l, n_m, n_q = motions.shape[:3]
    if n_m < 2:
        log.warning("smoothness loss needs two motions; returning 0")
        return motions.new_zeros(())
    diff = (motions[:, 1:] - motions[:, :-1]).abs().sum()
    return diff / (n_l * (n_m - 1) * n_q)


def neighbor_graph(points, k=RIGID_K):
    """k nearest other queries for each query: [Q, min(k, Q-1)] indices."""
    p = np.asarray(points.detach().cpu() if isinstance(points, torch.Tensor) else points, dtype=np.float64)
    d = ((p[:, None] - p[None]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    k = min(k, len(p) - 1)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def procrustes_rotation(src, dst):
    """Rotations R minimizing sum ||R src - dst||^2 per batch.

    Args:
        src, dst: [B, n, 3].

    Returns:
        [B, 3, 3]
    """
    h = src.transpose(1, 2) @ dst                                        # [B, 3, 3]
    u, _, vh = torch.linalg.svd(h)
    v = vh.transpose(1, 2)
    d = torch.sign(torch.linalg.det(v @ u.transpose(1, 2)))
    fix = torch.ones_like(h[:, 0])
    fix = torch.cat([fix[:, :2], d[:, None]], dim=1)
    return v @ torch.diag_embed(fix) @ u.transpose(1, 2)


def rigidity_iso_losses(positions, k=RIGID_K, graph=None):
    """Local rigidity and isometry of query trajectories.

    Args:
        positions: [T+1, Q, 3], frame 0 is the reference.
        k: neighbours per query.
        graph: optional [Q, k] neighbour indices (built at frame 0 by default).

    Returns:
        (rigid, iso) scalars: mean over edges and frames t >= 1 of
        ||rel_t - R_i rel_0|| and | ||rel_t|| - ||rel_0|| |.
    """
    n_t, n_q = positions.shape[:2]
    if n_q < 2 or n_t < 2:
        log.warning("rigidity/isometry need >= 2 queries and frames; returning 0")
        z = positions.new_zeros(())
        return z, z
    nb = torch.as_tensor(neighbor_graph(positions[0], k) if graph is None else graph)
    rel = positions[:, nb] - positions[:, :, None]                       # [T+1, Q, k, 3]
    rel0, relt = rel[0], rel[1:]
    iso = (relt.norm(dim=-1) - rel0.norm(dim=-1)).abs().mean()
    src = rel0.expand(n_t - 1, -1, -1, -1).reshape(-1, nb.shape[1], 3)
    dst = relt.reshape(-1, nb.shape[1], 3)
    rot = procrustes_rotation(src, dst)
    rigid = (dst - src @ rot.transpose(1, 2)).norm(dim=-1).mean()
    return rigid, iso


def project_torch(points, camera):
    """Pinhole projection of [..., 3] world points; returns (uv [..., 2], depth [...])."""
    r = torch.as_tensor(camera.rotation, dtype=points.dtype)
    t = torch.as_tensor(camera.translation, dtype=points.dtype)
    pc = points @ r.T + t
    z = pc[..., 2]
    zs = torch.where(z > 0, z, torch.ones_like(z))
    u = camera.fx * pc[..., 0] / zs + camera.cx
    v = camera.fy * pc[..., 1] / zs + camera.cy
    return torch.stack([u, v], dim=-1), z


def projection_loss(pred, cameras, gt2d, visible=None, alpha=ALPHA):
    """Pixel L1 between projected predictions and 2D ground truth, averaged like track_loss.

    Args:
        pred: [L, T, Q, 3].
        cameras: T CameraModels.
        gt2d: [T, Q, 2] pixels.
        visible: [T, Q] mask or None.

    Returns:
        (loss, number of skipped behind-camera terms)
    """
    gt2d = torch.as_tensor(gt2d, dtype=pred.dtype)
    n_l, n_t, n_q = pred.shape[:3]
    if len(cameras) != n_t or gt2d.shape != (n_t, n_q, 2):
        raise ValueError("shape mismatch")
    w = _level_discount(n_l, alpha, pred)
    mask = torch.ones((n_t, n_q), dtype=pred.dtype) if visible is None else torch.as_tensor(visible, dtype=pred.dtype)
    total = pred.new_zeros(())
    skipped = 0
    for t, cam in enumerate(cameras):
        uv, z = project_torch(pred[:, t], cam)                          # [L, Q, 2], [L, Q]
        front = z > 0
        skipped += int(((~front) & (mask[t] > 0)).sum())
        err = (uv - gt2d[t]).abs().sum(-1) * mask[t] * front
        total = total + (w[:, None] * err).sum()
    if skipped:
        log.info("projection loss skipped %d behind-camera terms", skipped)
    return total / (n_t * n_q), skipped


def occlusion_loss(logits, visible):
    """BCE of per-level occlusion logits against GT occlusion (same label at every level).

    Args:
        logits: [L, T, Q].
        visible: [T, Q] bool.
    """
    target = (~torch.as_tensor(np.asarray(visible), dtype=torch.bool)).to(logits.dtype)
    return torch.nn.functional.binary_cross_entropy_with_logits(
        logits, target.expand_as(logits), reduction="mean")


def total_loss(components: dict, weights: LossWeights):
    """lambda1 sf + lambda2 track + lambda3 smooth + lambda4 rigid + lambda5 iso (+ projection).

    Missing components count as zero.
    """
    terms = {"sf": weights.sf, "track": weights.track, "smooth": weights.smooth, "rigid": weights.rigid,
             "iso": weights.iso, "projection": weights.projection}
    total = 0.0
    for name, w in terms.items():
        if name in components and w:
            total = total + w * components[name]
    return total
