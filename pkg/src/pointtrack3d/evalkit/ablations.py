"""Ablation harnesses: camera rotation re-projection and depth interpolation mode."""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial.transform import Rotation

from ..geometry import CameraModel
from .baselines import lift_2d_tracks
from .metrics import compute_metrics, project_tracks

log = logging.getLogger(__name__)

ROTATION_ANGLES = (0, 15, 30, 45, 60, 75, 90)


def rotate_camera(camera: CameraModel, degrees: float) -> CameraModel:
    """Orbit the camera about the world z-axis; a camera aimed at the origin stays aimed at it."""
    rz = Rotation.from_euler("z", degrees, degrees=True).as_matrix()
    return CameraModel(camera.fx, camera.fy, camera.cx, camera.cy, camera.rotation @ rz.T, camera.translation.copy(),
                       camera.height, camera.width)


def rotated_view_eval(pred3d, gt3d, gt_visible, camera: CameraModel, angles=ROTATION_ANGLES, pred_visible=None):
    """2D delta^avg of 3D tracks re-projected into orbited views.

    Args:
        pred3d, gt3d: [Q, F, 3].
        gt_visible: [Q, F].
        camera: the reference view (or a per-frame list).
        angles: degrees.

    Returns:
        {angle: {"delta_avg": float or None, "excluded": int}}, where excluded counts
        entries behind the rotated camera.
    """
    pred_visible = gt_visible if pred_visible is None else pred_visible
    out = {}
    for a in angles:
        cams = [rotate_camera(c, a) for c in camera] if isinstance(camera, (list, tuple)) else rotate_camera(camera, a)
        _, fp = project_tracks(pred3d, cams)
        _, fg = project_tracks(gt3d, cams)
        excluded = int((~(fp & fg)).sum())
        if excluded:
            log.info("angle %s: %d entries behind the camera excluded", a, excluded)
        rep = compute_metrics(pred3d, pred_visible, gt3d, gt_visible, space="2d", cameras=cams)
        out[a] = {"delta_avg": rep.delta_avg, "excluded": excluded}
    return out


def gt_2d_tracks(record, noise_px=0.0, seed=0):
    """Project a record's GT tracks into its per-frame cameras, optionally with pixel noise.

    Returns:
        (uv [Q, F, 2], visible [Q, F])
    """
    uv, front = project_tracks(record.tracks, list(record.cameras))
    if noise_px:
        uv = uv + np.random.default_rng(seed).normal(scale=noise_px, size=uv.shape)
    return uv, record.visible & front


def interpolation_ablation(records, modes=("bilinear", "nearest"), noise_px=0.5, seed=0):
    """Lift noisy GT 2D tracks with each depth interpolation mode and score them in 3D.

    Returns:
        {mode: MetricsReport} pooled over all records.
    """
    reports = {}
    for mode in modes:
        preds, gts, pv, gv = [], [], [], []
        for k, rec in enumerate(records):
            uv, vis = gt_2d_tracks(rec, noise_px, seed + k)
            traj = lift_2d_tracks(uv, vis, rec.depth_maps, mode, query_ids=rec.query_ids)
            rows = np.searchsorted(rec.query_ids, traj.query_ids)
            preds.append(traj.positions)
            pv.append(traj.visible)
            gts.append(rec.tracks[rows])
            gv.append(rec.visible[rows])
        n_f = min(p.shape[1] for p in preds)
        pred = np.concatenate([p[:, :n_f] for p in preds])
        gt = np.concatenate([g[:, :n_f] for g in gts])
        finite = np.isfinite(pred).all(-1)
        pred = np.where(finite[..., None], pred, 1e6)
        reports[mode] = compute_metrics(pred, np.concatenate([v[:, :n_f] for v in pv]), gt,
                                        np.concatenate([v[:, :n_f] for v in gv]), space="3d")
    return reports


def format_rotation_table(rows: dict) -> str:
    """One row per method, one column per angle (delta^avg at each rotation)."""
    angles = sorted({a for r in rows.values() for a in r})
    lines = ["method".ljust(16) + "".join(f"d_avg@{a}".rjust(12) for a in angles)]
    for name, res in rows.items():
        cells = []
        for a in angles:
            v = res.get(a, {}).get("delta_avg")
            cells.append("-".rjust(12) if v is None else f"{v:12.2f}")
        lines.append(name.ljust(16) + "".join(cells))
    return "\n".join(lines)
